use super::tensor::is_suffix;
use super::{NumericsError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Tape, &Tensor, &mut [Option<Tensor>])>;

struct Node {
    value: Tensor,
    back: Option<BackFn>,
}

/// Gradients indexed by the [`Var`]s of one backward sweep.
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Forward-order record of operations. Each op pushes its output value and a
/// closure that routes the output gradient to the op's inputs, so a single
/// reverse walk of the record is a topologically ordered backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn accum(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        back: Option<BackFn>,
    ) -> Result<Var, NumericsError> {
        value.check_finite(op)?;
        self.nodes.push(Node { value, back });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record an input or parameter value. Leaves receive gradients but do
    /// not propagate further.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, NumericsError> {
        self.push("leaf", value, None)
    }

    /// `a + b`, where the shape of `b` is `a`'s shape or a trailing suffix of
    /// it (a bias row added to every row, for instance).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if !is_suffix(vb.shape(), va.shape()) {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let inner = vb.len().max(1);
        let mut out = va.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += vb.data()[i % inner];
        }
        let back: BackFn = Box::new(move |tape, g, grads| {
            accum(&mut grads[a.0], g.clone());
            let bshape = tape.value(b).shape().to_vec();
            accum(&mut grads[b.0], g.sum_to_suffix(&bshape).expect("add backward"));
        });
        self.push("add", out, Some(back))
    }

    /// Elementwise `a * b` with the same trailing-suffix rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if !is_suffix(vb.shape(), va.shape()) {
            return Err(NumericsError::ShapeMismatch {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let inner = vb.len().max(1);
        let mut out = va.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= vb.data()[i % inner];
        }
        let back: BackFn = Box::new(move |tape, g, grads| {
            let (va, vb) = (tape.value(a), tape.value(b));
            let inner = vb.len().max(1);
            let mut da = g.clone();
            for (i, v) in da.data_mut().iter_mut().enumerate() {
                *v *= vb.data()[i % inner];
            }
            accum(&mut grads[a.0], da);
            let mut ga = g.clone();
            for (i, v) in ga.data_mut().iter_mut().enumerate() {
                *v *= va.data()[i];
            }
            accum(
                &mut grads[b.0],
                ga.sum_to_suffix(vb.shape()).expect("mul backward"),
            );
        });
        self.push("mul", out, Some(back))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|v| v * c);
        let back: BackFn = Box::new(move |_tape, g, grads| {
            accum(&mut grads[a.0], g.map(|v| v * c));
        });
        self.push("scale", out, Some(back))
    }

    /// `a · b`; see [`Tensor::matmul`] for the accepted shapes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul(self.value(b))?;
        let back: BackFn = Box::new(move |tape, g, grads| {
            let (va, vb) = (tape.value(a), tape.value(b));
            accum(&mut grads[a.0], g.matmul_nt(vb).expect("matmul backward dA"));
            let db = if vb.shape().len() == 2 {
                let k = vb.shape()[0];
                let n = vb.shape()[1];
                let rows = va.len() / k;
                let a2 = va.reshaped(&[rows, k]).unwrap();
                let g2 = g.reshaped(&[rows, n]).unwrap();
                a2.matmul_tn(&g2).expect("matmul backward dB")
            } else {
                va.matmul_tn(g).expect("matmul backward dB")
            };
            accum(&mut grads[b.0], db);
        });
        self.push("matmul", out, Some(back))
    }

    /// `a · bᵀ` over the last two dimensions.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        let back: BackFn = Box::new(move |tape, g, grads| {
            let (va, vb) = (tape.value(a), tape.value(b));
            // C = A·Bᵀ, so dA = g·B and dB = gᵀ·A.
            accum(&mut grads[a.0], g.matmul(vb).expect("matmul_nt backward dA"));
            let db = if vb.shape().len() == 2 {
                let n = vb.shape()[0];
                let k = vb.shape()[1];
                let rows = va.len() / k;
                let a2 = va.reshaped(&[rows, k]).unwrap();
                let g2 = g.reshaped(&[rows, n]).unwrap();
                g2.matmul_tn(&a2).expect("matmul_nt backward dB")
            } else {
                g.matmul_tn(va).expect("matmul_nt backward dB")
            };
            accum(&mut grads[b.0], db);
        });
        self.push("matmul_nt", out, Some(back))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(a).reshaped(shape)?;
        let back: BackFn = Box::new(move |tape, g, grads| {
            let ashape = tape.value(a).shape().to_vec();
            accum(&mut grads[a.0], g.reshaped(&ashape).expect("reshape backward"));
        });
        self.push("reshape", out, Some(back))
    }

    /// Swap dimensions 1 and 2 of a 4-D tensor, the head/sequence shuffle of
    /// multi-head attention.
    pub fn swap12(&mut self, a: Var) -> Result<Var, NumericsError> {
        let va = self.value(a);
        if va.shape().len() != 4 {
            return Err(NumericsError::InvalidShape {
                op: "swap12",
                shape: va.shape().to_vec(),
                why: "expects a 4-d tensor",
            });
        }
        let out = swap12_raw(va);
        let back: BackFn = Box::new(move |_tape, g, grads| {
            accum(&mut grads[a.0], swap12_raw(g));
        });
        self.push("swap12", out, Some(back))
    }

    /// Numerically stable softmax along `axis`; every lane sums to one.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let va = self.value(a);
        if axis >= va.shape().len() {
            return Err(NumericsError::InvalidShape {
                op: "softmax",
                shape: va.shape().to_vec(),
                why: "axis out of range",
            });
        }
        let out = softmax_raw(va, axis);
        let me = Var(self.nodes.len());
        let back: BackFn = Box::new(move |tape, g, grads| {
            let y = tape.value(me);
            let mut dx = Tensor::zeros(y.shape());
            for_each_lane(y.shape(), axis, |offset, stride, n| {
                let mut s = 0.0;
                for j in 0..n {
                    let p = offset + j * stride;
                    s += g.data()[p] * y.data()[p];
                }
                for j in 0..n {
                    let p = offset + j * stride;
                    dx.data_mut()[p] = y.data()[p] * (g.data()[p] - s);
                }
            });
            accum(&mut grads[a.0], dx);
        });
        self.push("softmax", out, Some(back))
    }

    /// Per-row normalization over the last dimension followed by the affine
    /// `gamma * xhat + beta`. A zero-variance row normalizes to zeros, so its
    /// output is exactly `beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = match vx.shape().last() {
            Some(&d) if d > 0 => d,
            _ => {
                return Err(NumericsError::InvalidShape {
                    op: "layer_norm",
                    shape: vx.shape().to_vec(),
                    why: "needs a non-empty last dimension",
                })
            }
        };
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                lhs: vx.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(vx.shape());
        for (row, orow) in vx.data().chunks(d).zip(out.data_mut().chunks_mut(d)) {
            let (mu, inv_std) = row_stats(row, eps);
            for j in 0..d {
                orow[j] = vg.data()[j] * (row[j] - mu) * inv_std + vb.data()[j];
            }
        }
        let back: BackFn = Box::new(move |tape, g, grads| {
            let (vx, vg) = (tape.value(x), tape.value(gamma));
            let mut dx = Tensor::zeros(vx.shape());
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for ((row, grow), dxrow) in vx
                .data()
                .chunks(d)
                .zip(g.data().chunks(d))
                .zip(dx.data_mut().chunks_mut(d))
            {
                let (mu, inv_std) = row_stats(row, eps);
                let xhat: Vec<f64> = row.iter().map(|&v| (v - mu) * inv_std).collect();
                let mut m1 = 0.0; // mean of dxhat
                let mut m2 = 0.0; // mean of dxhat ∘ xhat
                for j in 0..d {
                    let dxh = grow[j] * vg.data()[j];
                    m1 += dxh;
                    m2 += dxh * xhat[j];
                    dgamma[j] += grow[j] * xhat[j];
                    dbeta[j] += grow[j];
                }
                m1 /= d as f64;
                m2 /= d as f64;
                for j in 0..d {
                    let dxh = grow[j] * vg.data()[j];
                    dxrow[j] = (dxh - m1 - xhat[j] * m2) * inv_std;
                }
            }
            accum(&mut grads[x.0], dx);
            accum(&mut grads[gamma.0], Tensor::new(&[d], dgamma).unwrap());
            accum(&mut grads[beta.0], Tensor::new(&[d], dbeta).unwrap());
        });
        self.push("layer_norm", out, Some(back))
    }

    /// Exact Gaussian-error-linear unit, `x/2 * (1 + erf(x/sqrt(2)))`.
    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(gelu_scalar);
        let back: BackFn = Box::new(move |tape, g, grads| {
            let vx = tape.value(a);
            let dx = g
                .zip_map(vx, "gelu", |gv, xv| gv * gelu_grad_scalar(xv))
                .expect("gelu backward");
            accum(&mut grads[a.0], dx);
        });
        self.push("gelu", out, Some(back))
    }

    /// Row lookup into `table` (`[rows, d]`) for each id, producing
    /// `[ids.len(), d]`. Gradients scatter-add back into the table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(NumericsError::InvalidShape {
                op: "gather_rows",
                shape: vt.shape().to_vec(),
                why: "table must be 2-d",
            });
        }
        let (rows, d) = (vt.shape()[0], vt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::IndexOutOfBounds {
                op: "gather_rows",
                index: bad,
                size: rows,
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[ids.len(), d], data)?;
        let ids: Vec<usize> = ids.to_vec();
        let back: BackFn = Box::new(move |tape, g, grads| {
            let shape = tape.value(table).shape().to_vec();
            let mut dt = Tensor::zeros(&shape);
            for (r, &i) in ids.iter().enumerate() {
                let src = &g.data()[r * d..(r + 1) * d];
                let dst = &mut dt.data_mut()[i * d..(i + 1) * d];
                for (o, v) in dst.iter_mut().zip(src) {
                    *o += v;
                }
            }
            accum(&mut grads[table.0], dt);
        });
        self.push("gather_rows", out, Some(back))
    }

    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var, NumericsError> {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        self.gather_rows(table, &idx)
    }

    /// Expand a per-head bias table `[heads, buckets]` into additive
    /// attention logits `[batch, heads, seq, seq]`. `idx` holds one bucket
    /// per (i, j) pair, either shared across the batch (`seq*seq` entries) or
    /// per sample (`batch*seq*seq`).
    pub fn rel_bias(
        &mut self,
        table: Var,
        idx: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<Var, NumericsError> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(NumericsError::InvalidShape {
                op: "rel_bias",
                shape: vt.shape().to_vec(),
                why: "table must be [heads, buckets]",
            });
        }
        let (heads, buckets) = (vt.shape()[0], vt.shape()[1]);
        let shared = idx.len() == seq * seq;
        if !shared && idx.len() != batch * seq * seq {
            return Err(NumericsError::InvalidShape {
                op: "rel_bias",
                shape: vec![idx.len()],
                why: "index count must be seq*seq or batch*seq*seq",
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= buckets) {
            return Err(NumericsError::IndexOutOfBounds {
                op: "rel_bias",
                index: bad,
                size: buckets,
            });
        }
        let mut data = vec![0.0; batch * heads * seq * seq];
        for b in 0..batch {
            let base = if shared { 0 } else { b * seq * seq };
            for h in 0..heads {
                let trow = &vt.data()[h * buckets..(h + 1) * buckets];
                let orow = &mut data[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for (o, &ix) in orow.iter_mut().zip(&idx[base..base + seq * seq]) {
                    *o = trow[ix];
                }
            }
        }
        let out = Tensor::new(&[batch, heads, seq, seq], data)?;
        let idx: Vec<usize> = idx.to_vec();
        let back: BackFn = Box::new(move |_tape, g, grads| {
            let mut dt = Tensor::zeros(&[heads, buckets]);
            for b in 0..batch {
                let base = if shared { 0 } else { b * seq * seq };
                for h in 0..heads {
                    let grow = &g.data()[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                    for (gv, &ix) in grow.iter().zip(&idx[base..base + seq * seq]) {
                        dt.data_mut()[h * buckets + ix] += gv;
                    }
                }
            }
            accum(&mut grads[table.0], dt);
        });
        self.push("rel_bias", out, Some(back))
    }

    /// Concatenate along the last dimension; leading dimensions must match.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.is_empty()
            || sb.is_empty()
            || sa.len() != sb.len()
            || sa[..sa.len() - 1] != sb[..sb.len() - 1]
        {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_cols",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (p, q) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = va.len() / p.max(1);
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * p..(r + 1) * p]);
            data.extend_from_slice(&vb.data()[r * q..(r + 1) * q]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = p + q;
        let out = Tensor::new(&shape, data)?;
        let back: BackFn = Box::new(move |tape, g, grads| {
            let (sa, sb) = (
                tape.value(a).shape().to_vec(),
                tape.value(b).shape().to_vec(),
            );
            let mut da = Tensor::zeros(&sa);
            let mut db = Tensor::zeros(&sb);
            for r in 0..rows {
                let grow = &g.data()[r * (p + q)..(r + 1) * (p + q)];
                da.data_mut()[r * p..(r + 1) * p].copy_from_slice(&grow[..p]);
                db.data_mut()[r * q..(r + 1) * q].copy_from_slice(&grow[p..]);
            }
            accum(&mut grads[a.0], da);
            accum(&mut grads[b.0], db);
        });
        self.push("concat_cols", out, Some(back))
    }

    /// Stack along the first dimension; trailing dimensions must match.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.is_empty() || sb.is_empty() || sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_rows",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let out = Tensor::new(&shape, data)?;
        let na = va.len();
        let back: BackFn = Box::new(move |tape, g, grads| {
            let (sa, sb) = (
                tape.value(a).shape().to_vec(),
                tape.value(b).shape().to_vec(),
            );
            let da = Tensor::new(&sa, g.data()[..na].to_vec()).expect("front split");
            let db = Tensor::new(&sb, g.data()[na..].to_vec()).expect("back split");
            accum(&mut grads[a.0], da);
            accum(&mut grads[b.0], db);
        });
        self.push("concat_rows", out, Some(back))
    }

    /// Sum over the last dimension, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let n = match va.shape().last() {
            Some(&n) if n > 0 => n,
            _ => {
                return Err(NumericsError::EmptyReduction { op: "sum_last" });
            }
        };
        let shape: Vec<usize> = va.shape()[..va.shape().len() - 1].to_vec();
        let data: Vec<f64> = va.data().chunks(n).map(|c| c.iter().sum()).collect();
        let out = Tensor::new(&shape, data)?;
        let back: BackFn = Box::new(move |tape, g, grads| {
            let shape = tape.value(a).shape().to_vec();
            let mut da = Tensor::zeros(&shape);
            for (chunk, &gv) in da.data_mut().chunks_mut(n).zip(g.data()) {
                for v in chunk {
                    *v = gv;
                }
            }
            accum(&mut grads[a.0], da);
        });
        self.push("sum_last", out, Some(back))
    }

    /// Mean over every element, producing a scalar.
    pub fn mean_all(&mut self, a: Var) -> Result<Var, NumericsError> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(NumericsError::EmptyReduction { op: "mean_all" });
        }
        let n = va.len() as f64;
        let out = Tensor::scalar(va.data().iter().sum::<f64>() / n);
        let back: BackFn = Box::new(move |tape, g, grads| {
            let shape = tape.value(a).shape().to_vec();
            accum(&mut grads[a.0], Tensor::full(&shape, g.item() / n));
        });
        self.push("mean_all", out, Some(back))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[n, classes]`). Rows whose target equals `ignore` drop out
    /// of the mean; a batch with every row ignored is an error.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[i64],
        ignore: i64,
    ) -> Result<Var, NumericsError> {
        let vl = self.value(logits);
        if vl.shape().len() != 2 {
            return Err(NumericsError::InvalidShape {
                op: "cross_entropy",
                shape: vl.shape().to_vec(),
                why: "logits must be [rows, classes]",
            });
        }
        let (n, c) = (vl.shape()[0], vl.shape()[1]);
        if targets.len() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut kept = 0usize;
        let mut total = 0.0;
        for (row, &t) in vl.data().chunks(c).zip(targets) {
            if t == ignore {
                continue;
            }
            if t < 0 || t as usize >= c {
                return Err(NumericsError::IndexOutOfBounds {
                    op: "cross_entropy",
                    index: t.max(0) as usize,
                    size: c,
                });
            }
            total += log_sum_exp(row) - row[t as usize];
            kept += 1;
        }
        if kept == 0 {
            return Err(NumericsError::EmptyReduction { op: "cross_entropy" });
        }
        let out = Tensor::scalar(total / kept as f64);
        let targets: Vec<i64> = targets.to_vec();
        let back: BackFn = Box::new(move |tape, g, grads| {
            let vl = tape.value(logits);
            let scale = g.item() / kept as f64;
            let mut dl = Tensor::zeros(vl.shape());
            for ((row, drow), &t) in vl
                .data()
                .chunks(c)
                .zip(dl.data_mut().chunks_mut(c))
                .zip(&targets)
            {
                if t == ignore {
                    continue;
                }
                let lse = log_sum_exp(row);
                for j in 0..c {
                    let p = (row[j] - lse).exp();
                    drow[j] = scale * (p - if j == t as usize { 1.0 } else { 0.0 });
                }
            }
            accum(&mut grads[logits.0], dl);
        });
        self.push("cross_entropy", out, Some(back))
    }

    /// Reverse sweep from a scalar root. Returns one gradient slot per
    /// recorded var; untouched slots stay `None`.
    pub fn backward(&self, root: Var) -> Result<Grads, NumericsError> {
        if self.value(root).len() != 1 {
            return Err(NumericsError::InvalidShape {
                op: "backward",
                shape: self.value(root).shape().to_vec(),
                why: "root must be a scalar",
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::full(
            self.value(root).shape(),
            1.0,
        ));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            g.check_finite("backward")?;
            if let Some(back) = &self.nodes[i].back {
                back(self, &g, &mut grads);
            }
        }
        Ok(Grads(grads))
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mu = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d;
    (mu, 1.0 / (var + eps).sqrt())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)) + x * phi
}

fn swap12_raw(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(&[a, c, b, d]);
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = &x.data()[((i * b + j) * c + k) * d..((i * b + j) * c + k + 1) * d];
                let dst = &mut out.data_mut()[((i * c + k) * b + j) * d..((i * c + k) * b + j + 1) * d];
                dst.copy_from_slice(src);
            }
        }
    }
    out
}

fn softmax_raw(x: &Tensor, axis: usize) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for_each_lane(x.shape(), axis, |offset, stride, n| {
        let mut m = f64::NEG_INFINITY;
        for j in 0..n {
            m = m.max(x.data()[offset + j * stride]);
        }
        let mut sum = 0.0;
        for j in 0..n {
            let e = (x.data()[offset + j * stride] - m).exp();
            out.data_mut()[offset + j * stride] = e;
            sum += e;
        }
        for j in 0..n {
            out.data_mut()[offset + j * stride] /= sum;
        }
    });
    out
}

/// Visit every 1-d lane along `axis`, yielding (start offset, stride, length).
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * n * inner + i, inner, n);
        }
    }
}
