//! Dense tensors and a reverse-mode tape.
//!
//! Operations are recorded on a [`Tape`] in execution order; each returns a
//! [`Var`] handle. [`Tape::backward`] walks the records in reverse and
//! returns [`Gradients`] for every recorded value. The tape is append-only,
//! so backward can be called any number of times.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward needs a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Build a `rows x cols` matrix from row vectors.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::ShapeMismatch("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all leading dimensions.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.cols().max(1)
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    fn same_shape(&self, other: &Tensor, what: &str) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Row-wise over the last dimension.
    Softmax,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Activation(Activation, Var),
    Add(Var, Var),
    /// Forward `a + b`; only `a` is kept since `b` receives no gradient.
    StopGradAdd(Var),
    ConcatCols(Vec<Var>),
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Record {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    records: Vec<Record>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` if no gradient reached the value.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data.chunks_mut(c.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.records.push(Record { value, op });
        Var(self.records.len() - 1)
    }

    /// Record an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.records[v.0].value
    }

    /// `x W + bias` for `x: [b, i]`, `W: [i, o]`, `bias: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.shape.len() != 2 || wv.shape.len() != 2 || xv.shape[1] != wv.shape[0] || bv.shape != [wv.shape[1]] {
            return Err(TensorError::ShapeMismatch(format!(
                "linear: x {:?}, W {:?}, bias {:?}",
                xv.shape, wv.shape, bv.shape
            )));
        }
        let (rows, inner, out) = (xv.shape[0], wv.shape[0], wv.shape[1]);
        let mut y = vec![0.0; rows * out];
        for r in 0..rows {
            let yr = &mut y[r * out..(r + 1) * out];
            yr.copy_from_slice(&bv.data);
            for k in 0..inner {
                let xk = xv.data[r * inner + k];
                if xk == 0.0 {
                    continue;
                }
                for (yj, wj) in yr.iter_mut().zip(&wv.data[k * out..(k + 1) * out]) {
                    *yj += xk * wj;
                }
            }
        }
        let value = Tensor::new(vec![rows, out], y)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn elementwise(&mut self, act: Activation, x: Var) -> Var {
        let xv = self.value(x);
        let value = match act {
            Activation::Relu => Tensor {
                shape: xv.shape.clone(),
                data: xv.data.iter().map(|v| v.max(0.0)).collect(),
            },
            Activation::Sigmoid => Tensor {
                shape: xv.shape.clone(),
                data: xv.data.iter().map(|&v| sigmoid(v)).collect(),
            },
            Activation::Softmax => softmax_rows(xv),
        };
        self.push(value, Op::Activation(act, x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.elementwise(Activation::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.elementwise(Activation::Sigmoid, x)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        self.elementwise(Activation::Softmax, x)
    }

    fn sum_values(&self, a: Var, b: Var, what: &str) -> Result<Tensor, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        av.same_shape(bv, what)?;
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.sum_values(a, b, "add")?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// `a + b` where `b` is treated as a constant by [`Tape::backward`].
    pub fn stop_grad_add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.sum_values(a, b, "stop_grad_add")?;
        Ok(self.push(value, Op::StopGradAdd(a)))
    }

    /// Concatenate 2-D tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).shape.len() != 2 || self.value(p).rows() != rows) {
            return Err(TensorError::ShapeMismatch("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let v = self.value(loss);
        if v.len() != 1 {
            return Err(TensorError::NotScalar(v.shape.clone()));
        }
        self.backward_from(&[(loss, Tensor::filled(&v.shape.clone(), 1.0))])
    }

    /// Reverse pass seeded with upstream gradients for several outputs.
    pub fn backward_from(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients, TensorError> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.records.len()];
        for (v, g) in seeds {
            self.value(*v).same_shape(g, "seed")?;
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.records.len()).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let rec = &self.records[idx];
            match &rec.op {
                Op::Leaf => {}
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (rows, inner, out) = (xv.shape[0], wv.shape[0], wv.shape[1]);
                    let mut gx = Tensor::zeros(&xv.shape);
                    let mut gw = Tensor::zeros(&wv.shape);
                    let mut gb = Tensor::zeros(&[out]);
                    for r in 0..rows {
                        let gr = &upstream.data[r * out..(r + 1) * out];
                        for (acc, g) in gb.data.iter_mut().zip(gr) {
                            *acc += g;
                        }
                        for k in 0..inner {
                            let wk = &wv.data[k * out..(k + 1) * out];
                            gx.data[r * inner + k] = wk.iter().zip(gr).map(|(a, b)| a * b).sum();
                            let xk = xv.data[r * inner + k];
                            for (acc, g) in gw.data[k * out..(k + 1) * out].iter_mut().zip(gr) {
                                *acc += xk * g;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Activation(act, x) => {
                    let y = &rec.value;
                    let mut g = upstream.clone();
                    match act {
                        Activation::Relu => {
                            for (gi, yi) in g.data.iter_mut().zip(&y.data) {
                                if *yi <= 0.0 {
                                    *gi = 0.0;
                                }
                            }
                        }
                        Activation::Sigmoid => {
                            for (gi, yi) in g.data.iter_mut().zip(&y.data) {
                                *gi *= yi * (1.0 - yi);
                            }
                        }
                        Activation::Softmax => {
                            let c = y.cols();
                            for (grow, yrow) in g.data.chunks_mut(c).zip(y.data.chunks(c)) {
                                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                                for (gi, yi) in grow.iter_mut().zip(yrow) {
                                    *gi = yi * (*gi - dot);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, upstream.clone());
                    accumulate(&mut grads, *b, upstream.clone());
                }
                Op::StopGradAdd(a) => {
                    accumulate(&mut grads, *a, upstream.clone());
                }
                Op::ConcatCols(parts) => {
                    let rows = upstream.rows();
                    let total = upstream.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let mut gp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gp.extend_from_slice(&upstream.data[r * total + offset..r * total + offset + c]);
                        }
                        offset += c;
                        accumulate(&mut grads, p, Tensor::new(vec![rows, c], gp)?);
                    }
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape.clone();
                    accumulate(&mut grads, *x, Tensor::filled(&shape, upstream.data[0]));
                }
            }
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn assert_close(a: f64, b: f64) {
        let tol = 1e-6f64.max(1e-4 * a.abs().max(b.abs()));
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn linear_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = t.leaf(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let b = t.leaf(Tensor::new(vec![1], vec![1.0]).unwrap());
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.value(y).data(), &[4.0]);

        let eye = t.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let zero = t.leaf(Tensor::zeros(&[2]));
        let y = t.linear(x, eye, zero).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0]);

        assert!(matches!(t.linear(x, b, zero), Err(TensorError::ShapeMismatch(_))));
    }

    #[test]
    fn activation_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        let s = t.sigmoid(x);
        assert_eq!(t.value(s).data(), &[0.5]);

        let logits = t.leaf(Tensor::filled(&[2, 11], 0.3));
        let sm = t.softmax(logits);
        for v in t.value(sm).data() {
            assert!((v - 1.0 / 11.0).abs() < 1e-15);
        }

        let neg = t.leaf(Tensor::new(vec![1], vec![-3.0]).unwrap());
        let r = t.relu(neg);
        assert_eq!(t.value(r).data(), &[0.0]);
        let total = t.sum(r);
        let g = t.backward(total).unwrap();
        assert_eq!(g.get(neg).unwrap().data(), &[0.0]);
    }

    #[test]
    fn add_and_truncated_add() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = t.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let z = t.leaf(Tensor::zeros(&[2]));
        let plain = t.add(a, b).unwrap();
        let trunc = t.stop_grad_add(a, b).unwrap();
        assert_eq!(t.value(plain).data(), &[4.0, 6.0]);
        assert_eq!(t.value(plain), t.value(trunc));
        let same = t.add(a, z).unwrap();
        assert_eq!(t.value(same), t.value(a));

        let s = t.sum(plain);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0]);

        let s = t.sum(trunc);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 1.0]);
        assert!(g.get(b).is_none());

        let short = t.leaf(Tensor::zeros(&[3]));
        assert!(t.add(a, short).is_err());
        assert!(t.stop_grad_add(a, short).is_err());
    }

    #[test]
    fn truncated_edge_blocks_upstream_parameters() {
        // b = x W_b feeds the output only through the truncated edge.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv = random(&mut rng, &[2, 3]);
        let wa = random(&mut rng, &[3, 2]);
        let wb = random(&mut rng, &[3, 2]);
        let build = |truncate: bool| {
            let mut t = Tape::new();
            let x = t.leaf(xv.clone());
            let (a_w, b_w) = (t.leaf(wa.clone()), t.leaf(wb.clone()));
            let zero = t.leaf(Tensor::zeros(&[2]));
            let a = t.linear(x, a_w, zero).unwrap();
            let b = t.linear(x, b_w, zero).unwrap();
            let y = if truncate { t.stop_grad_add(a, b).unwrap() } else { t.add(a, b).unwrap() };
            let s = t.sigmoid(y);
            let loss = t.sum(s);
            let g = t.backward(loss).unwrap();
            (g.get(a_w).cloned(), g.get(b_w).cloned())
        };
        let (ga_t, gb_t) = build(true);
        let (ga_p, gb_p) = build(false);
        assert!(gb_t.is_none());
        assert!(gb_p.unwrap().data().iter().any(|v| v.abs() > 0.0));
        assert_eq!(ga_t, ga_p);
    }

    #[test]
    fn sum_gives_all_ones_and_rejects_non_scalars() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::filled(&[2, 3], 0.7));
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
        assert_eq!(t.backward(x).unwrap_err(), TensorError::NotScalar(vec![2, 3]));
    }

    /// Sum of `weights * f(x)` where f is a composite exercising every op.
    fn composite(xv: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor, weights: &[f64]) -> (f64, Tape, [Var; 5]) {
        let mut t = Tape::new();
        let x = t.leaf(xv.clone());
        let (w1v, b1v, w2v, b2v) = (t.leaf(w1.clone()), t.leaf(b1.clone()), t.leaf(w2.clone()), t.leaf(b2.clone()));
        let h = t.linear(x, w1v, b1v).unwrap();
        let h = t.relu(h);
        let hc = t.concat_cols(&[h, x]).unwrap();
        let z = t.linear(hc, w2v, b2v).unwrap();
        let s = t.sigmoid(z);
        let sm = t.softmax(z);
        let y = t.add(s, sm).unwrap();
        let value: f64 = t.value(y).data().iter().zip(weights).map(|(a, b)| a * b).sum();
        (value, t, [x, w1v, b1v, w2v, b2v])
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let xv = random(&mut rng, &[4, 3]);
        let w1 = random(&mut rng, &[3, 5]);
        let b1 = random(&mut rng, &[5]);
        let w2 = random(&mut rng, &[8, 2]);
        let b2 = random(&mut rng, &[2]);
        let weights: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();

        let (_, tape, vars) = composite(&xv, &w1, &b1, &w2, &b2, &weights);
        let out = Var(tape.len() - 1);
        let seed = Tensor::new(vec![4, 2], weights.clone()).unwrap();
        let grads = tape.backward_from(&[(out, seed)]).unwrap();

        let inputs = [&xv, &w1, &b1, &w2, &b2];
        for (slot, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).unwrap();
            for i in 0..inputs[slot].len() {
                let h = 1e-5;
                let eval = |delta: f64| {
                    let mut args: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
                    args[slot].data_mut()[i] += delta;
                    composite(&args[0], &args[1], &args[2], &args[3], &args[4], &weights).0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert_close(analytic.data()[i], fd);
            }
        }
    }

    #[test]
    fn backward_is_repeatable() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![1, 3], vec![0.1, -0.4, 2.0]).unwrap());
        let s = t.softmax(x);
        let s = t.sigmoid(s);
        let l = t.sum(s);
        let a = t.backward(l).unwrap();
        let b = t.backward(l).unwrap();
        assert_eq!(a.get(x), b.get(x));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = Tape::new();
        let x = t.leaf(random(&mut rng, &[16, 11]));
        let s = t.softmax(x);
        for r in 0..16 {
            let total: f64 = t.value(s).row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
