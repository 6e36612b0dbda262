//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --release --test acceptance`. Numeric arguments
//! select criteria, e.g. `cargo test --test acceptance -- 5 6`. Failures are
//! reported but only change the exit status under `--strict`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use posnmt::bleu::{bleu_corpus, modified_precision};
use posnmt::bpe::{apply_bpe, learn_bpe, merge_subwords, propagate_tags, BpeModel};
use posnmt::checkpoint;
use posnmt::decode::{
    beam_search_with, greedy, greedy_with, DecodeConfig, ModelScorer, StepScorer,
};
use posnmt::model::{init_parameters, Bound, Mode, Model, ModelConfig, PeCache, SourceBatch};
use posnmt::pos_aug::{assemble_encoder_input, AugMode, PosAugConfig};
use posnmt::tagging::{build_tag_vocab, PosTag, TagVocabulary, TaggedSentence};
use posnmt::tensor::gradcheck::{grad_check, DEFAULT_EPSILON};
use posnmt::tensor::{Graph, Rng, Tensor};
use posnmt::train::{collate, smoothed_loss_floor, TrainConfig};
use posnmt::vocab::Vocabulary;

use common::*;

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let strict = args.iter().any(|a| a == "--strict");
    let selected: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 11] = [
        (1, "reference scores not reproduced", c1_non_reproducibility),
        (2, "gradient fidelity", c2_gradient_fidelity),
        (3, "dimension invariant", c3_dimension_invariant),
        (4, "degenerate-mode equivalence", c4_degenerate_equivalence),
        (5, "copy-task overfit", c5_copy_task),
        (6, "POS-signal sanity", c6_pos_signal),
        (7, "BLEU oracle", c7_bleu_oracle),
        (8, "BPE oracle", c8_bpe_oracle),
        (9, "tag propagation", c9_tag_propagation),
        (10, "beam correctness", c10_beam_correctness),
        (11, "determinism", c11_determinism),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
    }
    if strict && failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn c1_non_reproducibility() -> Outcome {
    outcome(
        true,
        "reference BLEU 29.92 / 30.84 / 28.75 (baseline / embed_concat / pe_concat) come from a private \
         54,914-sentence corpus and full-scale GPU training; not reproduced, properties below substitute",
    )
}

fn random_ids(n: usize, below: usize, from: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| from + rng.below(below - from)).collect()
}

fn c2_gradient_fidelity() -> Outcome {
    let mut worst_overall: f64 = 0.0;
    let mut details = Vec::new();
    for mode in AugMode::ALL {
        let cfg = ModelConfig {
            source_vocab_size: 50,
            target_vocab_size: 50,
            tag_vocab_size: 12,
            ..ModelConfig::desk()
        };
        let aug = PosAugConfig::with_default_width(mode, cfg.d_model);
        let params = init_parameters::<f64>(&cfg, &aug, 5).unwrap();
        let model = Model::new(cfg, aug, params.clone()).unwrap();
        let names: Vec<String> = params.names().map(str::to_owned).collect();
        let tensors: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();

        let mut rng = Rng::new(17);
        let (b, ls, lt) = (2, 8, 7);
        let mut src = SourceBatch {
            batch: b,
            len: ls,
            unit_ids: random_ids(b * ls, 50, 4, &mut rng),
            tag_ids: random_ids(b * ls, 12, 3, &mut rng),
        };
        // Second sentence is shorter: exercise padding.
        for j in 5..ls {
            src.unit_ids[ls + j] = Vocabulary::PAD_ID;
            src.tag_ids[ls + j] = TagVocabulary::PAD;
        }
        let out = random_ids(b * lt, 50, 4, &mut rng);
        let mut tgt = posnmt::model::TargetBatch {
            batch: b,
            len: lt,
            input_ids: vec![Vocabulary::BOS_ID; b * lt],
            output_ids: out.clone(),
        };
        for r in 0..b {
            for t in 1..lt {
                tgt.input_ids[r * lt + t] = out[r * lt + t - 1];
            }
        }
        tgt.output_ids[2 * lt - 1] = Vocabulary::PAD_ID;

        let build = |g: &mut Graph<f64>, vars: &[posnmt::tensor::Var]| {
            let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()).collect());
            model
                .loss_graph(g, &bound, &src, &tgt, 0.2, &mut Mode::Eval)
                .map(|(l, _)| l)
        };
        let report = grad_check(build, &tensors, DEFAULT_EPSILON).unwrap();
        worst_overall = worst_overall.max(report.max_rel_error);
        let where_ = report
            .worst
            .map(|(pi, ei)| format!("{}[{ei}]", names[pi]))
            .unwrap_or_default();
        details.push(format!(
            "{mode}: max rel err {:.2e} at {where_} (analytic {:.3e}, numeric {:.3e}) over {} elements",
            report.max_rel_error, report.analytic, report.numeric, report.checked
        ));
    }
    outcome(worst_overall < 1e-4, details.join("; "))
}

fn c3_dimension_invariant() -> Outcome {
    let mut dims = Vec::new();
    for mode in [AugMode::EmbedConcat, AugMode::PeConcat] {
        for d_pos in [2, 4, 8] {
            let cfg = ModelConfig {
                source_vocab_size: 20,
                target_vocab_size: 20,
                tag_vocab_size: 8,
                ..ModelConfig::desk()
            };
            let aug = PosAugConfig::new(mode, d_pos);
            let params = init_parameters::<f64>(&cfg, &aug, 1).unwrap();
            let pe = PeCache::new(cfg.max_positions, &cfg, &aug).unwrap();
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let src = SourceBatch {
                batch: 2,
                len: 5,
                unit_ids: vec![4, 5, 6, 7, 2, 8, 9, 2, 0, 0],
                tag_ids: vec![3, 4, 5, 6, 2, 7, 3, 2, 0, 0],
            };
            let x = assemble_encoder_input(
                &mut g,
                &bound,
                &src,
                &pe,
                &aug,
                cfg.d_model,
                0.1,
                &mut Mode::Eval,
            )
            .unwrap();
            dims.push((mode, d_pos, g.shape(x).to_vec()));
        }
    }
    let ok = dims.iter().all(|(_, _, s)| s == &[2, 5, 16]);
    let detail = dims
        .iter()
        .map(|(m, d, s)| format!("{m}/d_p={d}→{}", s[2]))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(ok, detail)
}

fn c4_degenerate_equivalence() -> Outcome {
    let (sources, targets) = copy_corpus(16, 3);
    let tcfg = TrainConfig {
        batch_sentences: 8,
        warmup_steps: 10,
        seed: 21,
        ..TrainConfig::default()
    };
    let run = |aug: PosAugConfig| {
        let (mut t, pairs) = desk_trainer::<f32>(&sources, &targets, aug, tcfg);
        let losses = t.fit(&pairs, 5).unwrap();
        let b = collate(&pairs, &(0..pairs.len()).collect::<Vec<_>>());
        let mut g = Graph::new();
        let bound = t.model.params.bind(&mut g);
        let logits = t
            .model
            .logits_graph(&mut g, &bound, &b.source, &b.target, &mut Mode::Eval)
            .unwrap();
        let bits: Vec<u32> = g.value(logits).data().iter().map(|x| x.to_bits()).collect();
        (losses.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), bits)
    };
    let base = run(PosAugConfig::baseline());
    let mut detail = Vec::new();
    let mut ok = true;
    for mode in [AugMode::EmbedConcat, AugMode::PeConcat] {
        let other = run(PosAugConfig::new(mode, 0));
        let same = other == base;
        ok &= same;
        detail.push(format!(
            "{mode}: {} logits and 5 training losses {}",
            base.1.len(),
            if same { "bit-identical" } else { "differ" }
        ));
    }
    outcome(ok, detail.join("; "))
}

/// Settings used for the overfit runs.
fn overfit_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_sentences: 32,
        label_smoothing: 0.2,
        warmup_steps: 100,
        max_steps: 500,
        seed,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

fn c5_copy_task() -> Outcome {
    let (sources, targets) = copy_corpus(32, 11);
    let mut ok = true;
    let mut detail = Vec::new();
    for mode in AugMode::ALL {
        let start = Instant::now();
        let aug = aug_for(mode, ModelConfig::desk().d_model);
        let (mut t, pairs) = desk_trainer::<f32>(&sources, &targets, aug, overfit_config(1));
        let losses = t.fit(&pairs, 500).unwrap();
        let all = collate(&pairs, &(0..pairs.len()).collect::<Vec<_>>());
        let eval_loss = t.model.eval_loss(&all.source, &all.target, 0.2).unwrap();
        let floor = smoothed_loss_floor(t.model.config.target_vocab_size, 0.2);
        let decode = DecodeConfig::default();
        let correct = pairs
            .iter()
            .filter(|p| {
                greedy(&t.model, &p.source, &decode).unwrap().content() == p.target_ids.as_slice()
            })
            .count();
        let acc = correct as f64 / pairs.len() as f64;
        let secs = start.elapsed().as_secs_f64();
        let pass =
            eval_loss - floor <= 0.1 && eval_loss >= floor - 1e-6 && acc >= 0.95 && secs < 300.0;
        ok &= pass;
        detail.push(format!(
            "{mode}: loss {eval_loss:.4} (floor {floor:.4}, last batch with dropout {:.4}), greedy exact {correct}/{}",
            losses.last().unwrap(),
            pairs.len()
        ));
    }
    outcome(ok, detail.join("; "))
}

fn exact_accuracy<T: posnmt::tensor::Real>(
    model: &Model<T>,
    pairs: &[posnmt::train::TrainingPair],
) -> f64 {
    let decode = DecodeConfig::default();
    let correct = pairs
        .iter()
        .filter(|p| greedy(model, &p.source, &decode).unwrap().content() == p.target_ids.as_slice())
        .count();
    correct as f64 / pairs.len() as f64
}

fn c6_pos_signal() -> Outcome {
    let mut passes = 0;
    let mut detail = Vec::new();
    for seed in [1, 2, 3] {
        let (train_src, train_tgt) = pos_signal_corpus(48, 100 + seed);
        let (test_src, test_tgt) = pos_signal_corpus(16, 200 + seed);
        let mut accs = Vec::new();
        for mode in [AugMode::EmbedConcat, AugMode::Baseline] {
            let aug = aug_for(mode, ModelConfig::desk().d_model);
            let (mut t, pairs) =
                desk_trainer::<f32>(&train_src, &train_tgt, aug, overfit_config(seed));
            t.fit(&pairs, 500).unwrap();
            let test = encode_all(&test_src, &test_tgt, &t.vocabs);
            accs.push(exact_accuracy(&t.model, &test));
        }
        let pass = accs[0] >= 0.95 && accs[1] <= 0.60;
        passes += pass as usize;
        detail.push(format!(
            "seed {seed}: embed_concat {:.1}%, baseline {:.1}% {}",
            100.0 * accs[0],
            100.0 * accs[1],
            if pass { "ok" } else { "miss" }
        ));
    }
    outcome(
        passes >= 2,
        format!("{passes}/3 seeds pass ({})", detail.join("; ")),
    )
}

fn c7_bleu_oracle() -> Outcome {
    let x: Vec<Vec<String>> = ["the cat sat on the mat", "a b c d e", "hello"]
        .iter()
        .map(|s| toks(s))
        .collect();
    let self_bleu = bleu_corpus(&x, &x).unwrap().bleu;
    let (m, n) = modified_precision(
        &[toks("the the the the the the the")],
        &[toks("the cat is on the mat")],
        1,
    );
    let refs = vec![toks("a b c d e f g h"), toks("i j k l m n o p")];
    let cands = vec![toks("a b c d"), toks("i j k l")];
    let bp = bleu_corpus(&cands, &refs).unwrap().brevity_penalty;
    let bp_err = (bp - (-1f64).exp()).abs();
    outcome(
        self_bleu == 100.0 && (m, n) == (2, 7) && bp_err <= 1e-9,
        format!("bleu(x,x) = {self_bleu:.2}, clipped unigrams {m}/{n}, BP error {bp_err:.1e}"),
    )
}

fn random_token(rng: &mut Rng) -> String {
    let len = 1 + rng.below(8);
    (0..len)
        .map(|_| (b'a' + rng.below(6) as u8) as char)
        .collect()
}

fn trained_bpe(rng: &mut Rng) -> BpeModel {
    let mut freqs = std::collections::BTreeMap::new();
    for _ in 0..300 {
        *freqs.entry(random_token(rng)).or_insert(0) += 1 + rng.below(4);
    }
    learn_bpe(&freqs, 60).unwrap()
}

fn c8_bpe_oracle() -> Outcome {
    let freqs = [("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)]
        .iter()
        .map(|&(w, c)| (w.to_owned(), c))
        .collect();
    let model = learn_bpe(&freqs, 3).unwrap();
    let want = [("e", "s"), ("es", "t"), ("l", "o")];
    let merges_ok = model
        .merges()
        .iter()
        .map(|(a, b)| (a.as_str(), b.as_str()))
        .eq(want.iter().copied());

    let mut rng = Rng::new(8);
    let bpe = trained_bpe(&mut rng);
    let mut failures = 0;
    for _ in 0..1000 {
        let n = 1 + rng.below(7);
        let tokens: Vec<String> = (0..n).map(|_| random_token(&mut rng)).collect();
        if merge_subwords(&apply_bpe(&tokens, &bpe).units) != tokens {
            failures += 1;
        }
    }
    outcome(
        merges_ok && failures == 0,
        format!(
            "merges {:?}; round-trip failures {failures}/1000",
            model.merges()
        ),
    )
}

fn c9_tag_propagation() -> Outcome {
    let mut rng = Rng::new(9);
    let bpe = trained_bpe(&mut rng);
    let word_tags: Vec<PosTag> = PosTag::ALL
        .iter()
        .copied()
        .filter(|t| !t.is_reserved())
        .collect();
    let mut violations = 0;
    for _ in 0..1000 {
        let n = 1 + rng.below(10);
        let tokens: Vec<String> = (0..n).map(|_| random_token(&mut rng)).collect();
        let tags: Vec<PosTag> = (0..n)
            .map(|_| word_tags[rng.below(word_tags.len())])
            .collect();
        let tagged = TaggedSentence::new(tokens, tags).unwrap();
        let tv = build_tag_vocab(std::slice::from_ref(&tagged));
        let seg = apply_bpe(&tagged.tokens, &bpe);
        let uv = Vocabulary::build([seg.units.as_slice()]);
        let f = propagate_tags(&seg, &tagged, &tv, &uv).unwrap();
        if f.units.len() != f.tag_ids.len()
            || f.unit_ids.len() != f.tag_ids.len()
            || f.word_index.len() != f.tag_ids.len()
        {
            violations += 1;
            continue;
        }
        for i in 0..seg.units.len() {
            let w = f.word_index[i];
            if f.tag_ids[i] != tv.id(tagged.tags[w])
                || (i > 0 && w == f.word_index[i - 1] && f.tag_ids[i] != f.tag_ids[i - 1])
            {
                violations += 1;
            }
        }
    }
    outcome(
        violations == 0,
        format!("{violations} violations over 1000 sentences"),
    )
}

fn tiny_model(target_vocab: usize, seed: u64) -> Model<f64> {
    let cfg = ModelConfig {
        num_layers: 1,
        num_heads: 2,
        d_model: 8,
        d_ffn: 16,
        dropout_p: 0.0,
        source_vocab_size: 10,
        target_vocab_size: target_vocab,
        tag_vocab_size: 6,
        max_positions: 16,
    };
    let mut m = Model::init(cfg, PosAugConfig::new(AugMode::EmbedConcat, 2), seed).unwrap();
    // Spread the output distribution so hypotheses differ clearly.
    for x in m.params.get_mut("out_proj.w").unwrap().data_mut() {
        *x *= 6.0;
    }
    m
}

fn tiny_source(seed: u64) -> posnmt::bpe::FactoredSequence {
    let mut rng = Rng::new(seed);
    let n = 2 + rng.below(4);
    let mut unit_ids = random_ids(n, 10, 4, &mut rng);
    let mut tag_ids = random_ids(n, 6, 3, &mut rng);
    unit_ids.push(Vocabulary::EOS_ID);
    tag_ids.push(TagVocabulary::EOS);
    posnmt::bpe::FactoredSequence {
        units: unit_ids.iter().map(|u| u.to_string()).collect(),
        word_index: (0..unit_ids.len()).collect(),
        unit_ids,
        tag_ids,
    }
}

fn brute_force_best(scorer: &mut dyn StepScorer, max_len: usize, alpha: f64) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let mut frontier = vec![(Vec::<usize>::new(), 0.0)];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for (p, lp) in frontier {
            let row = scorer
                .next_log_probs(std::slice::from_ref(&p))
                .unwrap()
                .remove(0);
            for (w, &l) in row.iter().enumerate() {
                if w == Vocabulary::PAD_ID || w == Vocabulary::BOS_ID {
                    continue;
                }
                let mut q = p.clone();
                q.push(w);
                if w == Vocabulary::EOS_ID {
                    best = best.max((lp + l) / (q.len() as f64).powf(alpha));
                } else {
                    next.push((q, lp + l));
                }
            }
        }
        frontier = next;
    }
    best
}

fn c10_beam_correctness() -> Outcome {
    let greedy_cfg = DecodeConfig {
        beam_size: 1,
        length_penalty: 0.0,
        ..DecodeConfig::default()
    };
    let mut greedy_mismatch = 0;
    for seed in 0..20 {
        let m = tiny_model(9, seed);
        let src = tiny_source(seed);
        let mut scorer = ModelScorer::new(&m, &src).unwrap();
        let b = beam_search_with(&mut scorer, &greedy_cfg, 12).unwrap();
        let g = greedy_with(&mut scorer, 12).unwrap();
        greedy_mismatch += (b.tokens != g.tokens) as usize;
    }
    let mut worst_gap: f64 = 0.0;
    let mut cases = 0;
    for vocab in [5usize, 6] {
        let max_len = 5;
        // vocab·length, widened until every live prefix fits in the beam.
        let free = vocab - 3;
        let beam = (vocab * max_len).max(free.pow(max_len as u32 - 1));
        for seed in 0..10 {
            for alpha in [0.0, 1.2] {
                let m = tiny_model(vocab, 100 + seed);
                let src = tiny_source(100 + seed);
                let mut scorer = ModelScorer::new(&m, &src).unwrap();
                let cfg = DecodeConfig {
                    beam_size: beam,
                    length_penalty: alpha,
                    ..DecodeConfig::default()
                };
                let h = beam_search_with(&mut scorer, &cfg, max_len).unwrap();
                let want = brute_force_best(&mut scorer, max_len, alpha);
                let got = if h.finished {
                    h.score(alpha)
                } else {
                    f64::NEG_INFINITY
                };
                worst_gap = worst_gap.max((got - want).abs());
                cases += 1;
            }
        }
    }
    outcome(
        greedy_mismatch == 0 && worst_gap <= 1e-9,
        format!(
            "beam 1 vs greedy (α=0): {greedy_mismatch}/20 differ; wide beam vs enumeration: max gap {worst_gap:.1e} over {cases} cases"
        ),
    )
}

fn c11_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (sources, targets) = copy_corpus(40, 4);
    let write = |name: &str, lines: Vec<String>| {
        let p = dir.path().join(name);
        std::fs::write(&p, lines.join("\n") + "\n").unwrap();
        p
    };
    let src = write(
        "train.src",
        sources.iter().map(|s| s.tokens.join(" ")).collect(),
    );
    let tgt = write("train.tgt", targets.iter().map(|t| t.join(" ")).collect());
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "[train]\ncheckpoint_every = 10\nmax_steps = 12\nbatch_sentences = 8\n",
    )
    .unwrap();
    let run = |tag: &str| {
        let ck = dir.path().join(tag);
        let args = [
            "posnmt",
            "--desk",
            "--config",
            config.to_str().unwrap(),
            "train",
            "--train-source",
            src.to_str().unwrap(),
            "--train-target",
            tgt.to_str().unwrap(),
            "--checkpoint-dir",
            ck.to_str().unwrap(),
            "--mode",
            "pe_concat",
        ];
        let code = posnmt::cli::main_with_args(args, &mut Vec::new(), &mut Vec::new());
        assert_eq!(code, 0);
        let metrics = std::fs::read_to_string(ck.join("metrics.tsv")).unwrap();
        let first10: Vec<String> = metrics.lines().take(10).map(str::to_owned).collect();
        let ckpt = std::fs::read(ck.join(posnmt::train::checkpoint_name(10))).unwrap();
        (first10, ckpt)
    };
    let (m1, c1) = run("a");
    let (m2, c2) = run("b");
    let decoded = checkpoint::decode(&c1, std::path::Path::new("a"))
        .map(|r| r.len())
        .unwrap_or(0);
    outcome(
        m1 == m2 && m1.len() == 10 && c1 == c2,
        format!(
            "metrics lines identical: {}; step-10 checkpoints identical: {} ({} bytes, {decoded} records)",
            m1 == m2,
            c1 == c2,
            c1.len()
        ),
    )
}
