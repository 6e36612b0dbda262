//! Recording tape and backward rules.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Nodes are
//! appended in evaluation order, so the node list is already topologically
//! sorted and [`Graph::backward`] walks it in reverse.

use super::{Real, Rng, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        a: Var,
        start: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Relu {
        a: Var,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    Transpose {
        a: Var,
    },
    MaskedFill {
        a: Var,
        mask: Vec<bool>,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Sum {
        a: Var,
    },
    SmoothedNll {
        logits: Var,
        targets: Vec<usize>,
        eps: T,
        pad: usize,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf node: a parameter or a constant input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Batched matrix product. `a` is (..., m, k); `b` is either (k, n), shared
    /// across the batch, or (..., k, n) with the same leading dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead = &sa[..sa.len() - 2];
        let shared = sb.len() == 2;
        if k != k2 || (!shared && &sb[..sb.len() - 2] != lead) {
            return Err(shape_err("matmul", sa, sb));
        }
        let batch: usize = lead.iter().product();
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let boff = if shared { 0 } else { bi * k * n };
            mm(
                &av[bi * m * k..(bi + 1) * m * k],
                &bv[boff..boff + k * n],
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    /// Elementwise sum; `b`'s shape must equal a suffix of `a`'s shape and is
    /// broadcast over the leading dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add", sa, sb));
        }
        let bv = self.value(b).data();
        let nb = bv.len().max(1);
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % nb])
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| x * c).collect(),
        };
        self.push(value, Op::Scale { a, c })
    }

    /// Concatenate along the last dim. All parts share their leading dims.
    pub fn concat_last_dim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_last_dim of zero tensors"))?;
        let s0 = self.shape(*first);
        if s0.is_empty() {
            return Err(shape_err("concat_last_dim", s0, &[]));
        }
        let lead = s0[..s0.len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != *lead {
                return Err(shape_err("concat_last_dim", s0, s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Columns `start..start+len` of the last dim.
    pub fn slice_last_dim(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s
            .last()
            .ok_or_else(|| shape_err("slice_last_dim", &s, &[start, len]))?;
        if start + len > d {
            return Err(shape_err("slice_last_dim", &s, &[start, len]));
        }
        let rows = self.value(a).len() / d.max(1);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Slice { a, start }))
    }

    /// Split the last dim into consecutive pieces of the given widths.
    pub fn split_last_dim(&mut self, a: Var, widths: &[usize]) -> Result<Vec<Var>> {
        let d = self.value(a).last_dim();
        if widths.iter().sum::<usize>() != d {
            return Err(shape_err("split_last_dim", self.shape(a), widths));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice_last_dim(a, start, w)?);
            start += w;
        }
        Ok(out)
    }

    /// Gather rows of a (rows, d) table. Output shape is `index_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], index_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 || index_shape.iter().product::<usize>() != ids.len() {
            return Err(shape_err("embedding_lookup", ts, index_shape));
        }
        let (rows, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "embedding_lookup: id {bad} out of range for table with {rows} rows"
            )));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| x.max(T::zero())).collect(),
        };
        self.push(value, Op::Relu { a })
    }

    /// Inverted dropout: survivors are scaled by 1/(1-p). `p = 0` returns `a`
    /// unchanged without recording a node.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!(
                "dropout probability {p} not in [0,1)"
            )));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let n = self.value(a).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.next_f64() >= p { keep } else { T::zero() })
            .collect();
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
        };
        Ok(self.push(value, Op::Dropout { a, mask }))
    }

    pub fn transpose_last_two(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(shape_err("transpose_last_two", &s, &[]));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = self.value(a).len() / (m * n).max(1);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); src.len()];
        for b in 0..batch {
            let off = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    data[off + j * m + i] = src[off + i * n + j];
                }
            }
        }
        let mut shape = s;
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Transpose { a }))
    }

    /// Replace entries where `mask` is true with `fill`. `mask` has one entry
    /// per element of `a`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: T) -> Result<Var> {
        let src = self.value(a);
        if mask.len() != src.len() {
            return Err(shape_err("masked_fill", src.shape(), &[mask.len()]));
        }
        let value = Tensor {
            shape: src.shape.clone(),
            data: src
                .data
                .iter()
                .zip(mask)
                .map(|(&x, &m)| if m { fill } else { x })
                .collect(),
        };
        Ok(self.push(
            value,
            Op::MaskedFill {
                a,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Softmax over the last dim, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let d = src.last_dim();
        if d == 0 {
            return Err(shape_err("softmax", src.shape(), &[]));
        }
        let mut data = src.data.clone();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor {
            shape: src.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::Softmax { a }))
    }

    /// Layer normalization over the last dim followed by `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| shape_err("layer_norm", &sx, &[]))?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(shape_err("layer_norm", &sx, self.shape(p)));
            }
        }
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / d;
        let mut xhat = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(sx, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    /// Label-smoothed cross-entropy averaged over non-pad targets.
    ///
    /// `logits` is (..., V) with one row per entry of `targets`. The smoothed
    /// target distribution is `(1-eps)·onehot + eps/V`. Returns the scalar loss
    /// node and the number of non-pad tokens it averages over.
    pub fn smoothed_nll(
        &mut self,
        logits: Var,
        targets: &[usize],
        eps: f64,
        pad: usize,
    ) -> Result<(Var, usize)> {
        let src = self.value(logits);
        let v = src.last_dim();
        if src.len() != targets.len() * v {
            return Err(shape_err(
                "label_smoothed_loss",
                src.shape(),
                &[targets.len()],
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::invalid(format!(
                "target id {bad} out of range for {v} classes"
            )));
        }
        let count = targets.iter().filter(|&&t| t != pad).count();
        if count == 0 {
            return Err(Error::invalid(
                "label_smoothed_loss: batch contains only padding",
            ));
        }
        let eps_t = T::lit(eps);
        let off = eps_t / T::lit(v as f64);
        let on = T::one() - eps_t + off;
        let mut total = T::zero();
        for (row, &t) in src.data().chunks(v).zip(targets) {
            if t == pad {
                continue;
            }
            let lse = log_sum_exp(row);
            let mut acc = T::zero();
            for (j, &x) in row.iter().enumerate() {
                let q = if j == t { on } else { off };
                acc = acc + q * (lse - x);
            }
            total = total + acc;
        }
        let loss = total / T::lit(count as f64);
        let node = self.push(
            Tensor::scalar(loss),
            Op::SmoothedNll {
                logits,
                targets: targets.to_vec(),
                eps: eps_t,
                pad,
                count,
            },
        );
        Ok((node, count))
    }

    /// Reverse-mode sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let shared = sb.len() == 2;
                let batch = self.value(*a).len() / (m * k).max(1);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut ga = vec![T::zero(); av.len()];
                let mut gb = vec![T::zero(); bv.len()];
                for bi in 0..batch {
                    let boff = if shared { 0 } else { bi * k * n };
                    let gc = &gd[bi * m * n..(bi + 1) * m * n];
                    mm_nt(
                        gc,
                        &bv[boff..boff + k * n],
                        m,
                        n,
                        k,
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                    );
                    mm_tn(
                        &av[bi * m * k..(bi + 1) * m * k],
                        gc,
                        m,
                        k,
                        n,
                        &mut gb[boff..boff + k * n],
                    );
                }
                accumulate(grads, *a, sa, ga);
                accumulate(grads, *b, sb, gb);
            }
            Op::Add { a, b } => {
                let sb = self.shape(*b);
                let nb = self.value(*b).len().max(1);
                let mut gb = vec![T::zero(); self.value(*b).len()];
                for (i, &x) in gd.iter().enumerate() {
                    gb[i % nb] = gb[i % nb] + x;
                }
                accumulate(grads, *a, self.shape(*a), gd.to_vec());
                accumulate(grads, *b, sb, gb);
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ga = gd.iter().zip(bv).map(|(&g, &y)| g * y).collect();
                let gb = gd.iter().zip(av).map(|(&g, &x)| g * x).collect();
                accumulate(grads, *a, self.shape(*a), ga);
                accumulate(grads, *b, self.shape(*b), gb);
            }
            Op::Scale { a, c } => {
                accumulate(
                    grads,
                    *a,
                    self.shape(*a),
                    gd.iter().map(|&x| x * *c).collect(),
                );
            }
            Op::Concat { parts } => {
                let total = g.last_dim();
                let rows = gd.len() / total.max(1);
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&gd[r * total + start..r * total + start + w]);
                    }
                    accumulate(grads, p, self.shape(p), gp);
                    start += w;
                }
            }
            Op::Slice { a, start } => {
                let d = self.value(*a).last_dim();
                let w = g.last_dim();
                let mut ga = vec![T::zero(); self.value(*a).len()];
                for (r, row) in gd.chunks(w.max(1)).enumerate() {
                    ga[r * d + start..r * d + start + w].copy_from_slice(row);
                }
                accumulate(grads, *a, self.shape(*a), ga);
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).last_dim();
                let mut gt = vec![T::zero(); self.value(*table).len()];
                for (k, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] = gt[i * d + j] + gd[k * d + j];
                    }
                }
                accumulate(grads, *table, self.shape(*table), gt);
            }
            Op::Relu { a } => {
                let av = self.value(*a).data();
                let ga = gd
                    .iter()
                    .zip(av)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(grads, *a, self.shape(*a), ga);
            }
            Op::Dropout { a, mask } => {
                let ga = gd.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                accumulate(grads, *a, self.shape(*a), ga);
            }
            Op::Transpose { a } => {
                let s = self.shape(*a);
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = gd.len() / (m * n).max(1);
                let mut ga = vec![T::zero(); gd.len()];
                for b in 0..batch {
                    let off = b * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            ga[off + i * n + j] = gd[off + j * m + i];
                        }
                    }
                }
                accumulate(grads, *a, s, ga);
            }
            Op::MaskedFill { a, mask } => {
                let ga = gd
                    .iter()
                    .zip(mask)
                    .map(|(&g, &m)| if m { T::zero() } else { g })
                    .collect();
                accumulate(grads, *a, self.shape(*a), ga);
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut ga = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(d).zip(gd.chunks(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    ga.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                accumulate(grads, *a, self.shape(*a), ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gain).len();
                let dn = T::lit(d as f64);
                let gv = self.value(*gain).data();
                let mut gx = Vec::with_capacity(gd.len());
                let mut gg = vec![T::zero(); d];
                let mut gbias = vec![T::zero(); d];
                for (r, (grow, hrow)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..d {
                        let dh = grow[j] * gv[j];
                        sum_dh = sum_dh + dh;
                        sum_dh_h = sum_dh_h + dh * hrow[j];
                        gg[j] = gg[j] + grow[j] * hrow[j];
                        gbias[j] = gbias[j] + grow[j];
                    }
                    let is = inv_std[r];
                    for j in 0..d {
                        let dh = grow[j] * gv[j];
                        gx.push(is * (dh - sum_dh / dn - hrow[j] * sum_dh_h / dn));
                    }
                }
                accumulate(grads, *x, self.shape(*x), gx);
                accumulate(grads, *gain, self.shape(*gain), gg);
                accumulate(grads, *bias, self.shape(*bias), gbias);
            }
            Op::Sum { a } => {
                accumulate(grads, *a, self.shape(*a), vec![gd[0]; self.value(*a).len()]);
            }
            Op::SmoothedNll {
                logits,
                targets,
                eps,
                pad,
                count,
            } => {
                let src = self.value(*logits);
                let v = src.last_dim();
                let scale = gd[0] / T::lit(*count as f64);
                let off = *eps / T::lit(v as f64);
                let on = T::one() - *eps + off;
                let mut gl = vec![T::zero(); src.len()];
                for (r, (row, &t)) in src.data().chunks(v).zip(targets).enumerate() {
                    if t == *pad {
                        continue;
                    }
                    let mut p = row.to_vec();
                    softmax_in_place(&mut p);
                    for j in 0..v {
                        let q = if j == t { on } else { off };
                        gl[r * v + j] = (p[j] - q) * scale;
                    }
                }
                accumulate(grads, *logits, src.shape(), gl);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g) {
                *e = *e + x;
            }
        }
        slot @ None => {
            *slot = Some(Tensor {
                shape: shape.to_vec(),
                data: g,
            });
        }
    }
}

/// Gradients of a scalar with respect to every node of a consumed graph.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; zeros of `v`'s shape when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z = z + *x;
    }
    for x in row.iter_mut() {
        *x = *x / z;
    }
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + z.ln()
}

// out (m,n) += a (m,k) · b (k,n)
fn mm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o = *o + x * y;
            }
        }
    }
}

// out (m,k) += g (m,n) · bᵀ where b is (k,n)
fn mm_nt<T: Real>(g: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            out[i * k + p] = out[i * k + p] + dot;
        }
    }
}

// out (k,n) += aᵀ · g where a is (m,k), g is (m,n)
fn mm_tn<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &y) in orow.iter_mut().zip(grow) {
                *o = *o + x * y;
            }
        }
    }
}
