//! A small reverse-mode autodiff tape over [`Mat`] values.
//!
//! Every operation appends a node holding its value and enough cached state
//! to propagate gradients. `backward` walks the nodes in reverse.

use super::tensor::{dot, gelu, gelu_grad, norm, softmax_in_place, Mat};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gather { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Mat, inv_std: Vec<f64> },
    Gelu(Var),
    Tanh(Var),
    CausalSoftmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Mat },
    Row(Var, usize),
    MeanRows(Var),
    CosineDistance { u: Var, v: Var },
}

struct Node {
    value: Mat,
    op: Op,
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node on the tape.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    /// Gradient of `v`; zeros if the output does not depend on it.
    pub fn get(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.grads[v.0].clone().unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a @ b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds the `1 x c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows(), 1);
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            for (x, &y) in v.row_mut(r).iter_mut().zip(bias.row(0)) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.scale_assign(s);
        self.push(v, Op::Scale(a, s))
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Mat::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(v, Op::Gather { table, ids: ids.to_vec() })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let src = self.value(x);
        let mut v = Mat::zeros(src.rows(), len);
        for r in 0..src.rows() {
            v.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                v.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Row-wise layer normalization with learned gain and bias (`1 x c` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, cols) = xv.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut out = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (c, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.get(0, c) + b.get(0, c));
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// Row-wise softmax of a square score matrix where row `t` only sees
    /// columns `0..=t`.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let s = self.value(a);
        let mut v = Mat::zeros(s.rows(), s.cols());
        for r in 0..s.rows() {
            let n = (r + 1).min(s.cols());
            let row = &mut v.row_mut(r)[..n];
            row.copy_from_slice(&s.row(r)[..n]);
            softmax_in_place(row);
        }
        self.push(v, Op::CausalSoftmax(a))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows(), targets.len());
        let mut probs = l.clone();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            softmax_in_place(row);
            loss -= row[t].max(f64::MIN_POSITIVE).ln();
        }
        loss /= targets.len() as f64;
        self.push(Mat::filled(1, 1, loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        let v = Mat::row_vector(self.value(a).row(r).to_vec());
        self.push(v, Op::Row(a, r))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut v = vec![0.0; m.cols()];
        for r in 0..m.rows() {
            for (acc, x) in v.iter_mut().zip(m.row(r)) {
                *acc += x;
            }
        }
        let n = m.rows() as f64;
        v.iter_mut().for_each(|x| *x /= n);
        self.push(Mat::row_vector(v), Op::MeanRows(a))
    }

    /// `1 - cos(u, v)` for two row vectors.
    pub fn cosine_distance(&mut self, u: Var, v: Var) -> Result<Var> {
        let (a, b) = (self.value(u).data(), self.value(v).data());
        if a.len() != b.len() {
            return Err(Error::ShapeMismatch(format!("cosine of {} vs {} dims", a.len(), b.len())));
        }
        let (na, nb) = (norm(a), norm(b));
        if na < 1e-12 || nb < 1e-12 {
            return Err(Error::ZeroVector);
        }
        let d = 1.0 - dot(a, b) / (na * nb);
        Ok(self.push(Mat::filled(1, 1, d), Op::CosineDistance { u, v }))
    }

    /// Reverse pass from the scalar `out`.
    pub fn backward(&self, out: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar output");
        grads[out.0] = Some(Mat::filled(1, 1, 1.0));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    // out = a b^T: d a = g b, d b = g^T a
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(a, b) => {
                    let mut gb = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (x, y) in gb.iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    acc(&mut grads, *b, Mat::row_vector(gb));
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.scale_assign(*s);
                    acc(&mut grads, *a, ga);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut gt = Mat::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (x, y) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::SliceCols { x, start } => {
                    let src = self.value(*x);
                    let mut gx = Mat::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut gp = Mat::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        off += cols;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gv = self.value(*gain);
                    let (rows, cols) = g.shape();
                    let mut gg = vec![0.0; cols];
                    let mut gbias = vec![0.0; cols];
                    let mut gx = Mat::zeros(rows, cols);
                    let n = cols as f64;
                    for (r, &is) in inv_std.iter().enumerate() {
                        let (gr, hr) = (g.row(r), xhat.row(r));
                        let mut dxhat = vec![0.0; cols];
                        for c in 0..cols {
                            gg[c] += gr[c] * hr[c];
                            gbias[c] += gr[c];
                            dxhat[c] = gr[c] * gv.get(0, c);
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dh = dot(&dxhat, hr) / n;
                        for c in 0..cols {
                            gx.set(r, c, is * (dxhat[c] - mean_d - hr[c] * mean_dh));
                        }
                    }
                    acc(&mut grads, *gain, Mat::row_vector(gg));
                    acc(&mut grads, *bias, Mat::row_vector(gbias));
                    acc(&mut grads, *x, gx);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (gv, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                        *gv *= gelu_grad(xv);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    for (gv, &y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                        *gv *= 1.0 - y * y;
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::CausalSoftmax(a) => {
                    let p = &node.value;
                    let mut ga = Mat::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let n = (r + 1).min(p.cols());
                        let (pr, gr) = (&p.row(r)[..n], &g.row(r)[..n]);
                        let s = dot(pr, gr);
                        for c in 0..n {
                            ga.set(r, c, pr[c] * (gr[c] - s));
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let scale = g.scalar() / targets.len() as f64;
                    let mut gl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        gl.row_mut(r)[t] -= 1.0;
                    }
                    gl.scale_assign(scale);
                    acc(&mut grads, *logits, gl);
                }
                Op::Row(a, r) => {
                    let src = self.value(*a);
                    let mut ga = Mat::zeros(src.rows(), src.cols());
                    ga.row_mut(*r).copy_from_slice(g.row(0));
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let src = self.value(*a);
                    let n = src.rows() as f64;
                    let mut ga = Mat::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        for (x, y) in ga.row_mut(r).iter_mut().zip(g.row(0)) {
                            *x = y / n;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::CosineDistance { u, v } => {
                    let s = g.scalar();
                    let (a, b) = (self.value(*u).data(), self.value(*v).data());
                    let (na, nb) = (norm(a), norm(b));
                    let cos = dot(a, b) / (na * nb);
                    // d(1 - cos)/da = -(b / (|a||b|) - cos * a / |a|^2)
                    let ga: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| -s * (y / (na * nb) - cos * x / (na * na))).collect();
                    let gb: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| -s * (x / (na * nb) - cos * y / (nb * nb))).collect();
                    acc(&mut grads, *u, Mat::row_vector(ga));
                    acc(&mut grads, *v, Mat::row_vector(gb));
                }
            }
        }
        Grads { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(build)/d(input) for every input entry.
    fn check(inputs: &[Mat], build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out);
        let eval = |ins: &[Mat]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|m| t.leaf(m.clone())).collect();
            let o = build(&mut t, &vs);
            t.value(o).scalar()
        };
        for (k, m) in inputs.iter().enumerate() {
            let g = grads.get(vars[k], m.shape());
            for i in 0..m.data().len() {
                let h = 1e-6;
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g.data()[i];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "input {k}[{i}]: fd {fd} vs {an}");
            }
        }
    }

    fn rnd(r: usize, c: usize, seed: u64) -> Mat {
        Mat::randn(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn attention_block_gradients() {
        let inputs = [rnd(4, 6, 1), rnd(6, 6, 2), rnd(1, 6, 3), rnd(1, 6, 4)];
        check(&inputs, |t, v| {
            let ln = t.layer_norm(v[0], v[2], v[3]);
            let q = t.matmul(ln, v[1]);
            let qa = t.slice_cols(q, 0, 3);
            let qb = t.slice_cols(q, 3, 3);
            let s = t.matmul_t(qa, qb);
            let s = t.scale(s, 0.5);
            let p = t.causal_softmax(s);
            let o = t.matmul(p, qb);
            let cat = t.concat_cols(&[o, qa]);
            let act = t.gelu(cat);
            let logits = t.add_row(act, v[2]);
            t.cross_entropy(logits, &[0, 5, 2, 3])
        });
    }

    #[test]
    fn pooling_and_cosine_gradients() {
        let inputs = [rnd(5, 4, 7), rnd(3, 4, 8)];
        check(&inputs, |t, v| {
            let e = t.gather(v[0], &[1, 3, 1]);
            let h = t.tanh(e);
            let m = t.mean_rows(h);
            let r = t.row(v[1], 2);
            let d = t.cosine_distance(m, r).unwrap();
            let d2 = t.add(d, d);
            t.scale(d2, 0.25)
        });
    }

    #[test]
    fn cosine_rejects_zero_vectors() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::row_vector(vec![0.0, 0.0]));
        let b = t.leaf(Mat::row_vector(vec![1.0, 0.0]));
        assert!(matches!(t.cosine_distance(a, b), Err(Error::ZeroVector)));
    }
}
