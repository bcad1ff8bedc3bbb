//! Small deterministic neural substrate: the handful of layers the estimation
//! model needs, each with an explicit backward rule, plus Adam and a
//! finite-difference gradient checker.
//!
//! Everything is `f64`. Matrices are row-major. Backward functions accumulate
//! into the gradient buffers they are handed (`+=`), so a batch can be summed
//! in a fixed order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor value at {pos}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `y += a * x`
#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with four fixed accumulators (fixed summation order).
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn check_dense(n_in: usize, w: &Tensor, b: &Tensor) -> Result<usize> {
    if w.shape.len() != 2 || w.shape[0] != n_in {
        return Err(Error::Shape(format!(
            "dense weight {:?} does not accept {n_in} inputs",
            w.shape
        )));
    }
    let n_out = w.shape[1];
    if b.shape != [n_out] {
        return Err(Error::Shape(format!("dense bias {:?}, expected [{n_out}]", b.shape)));
    }
    Ok(n_out)
}

/// `x W + b` with `W` shaped `n_in × n_out`.
pub fn dense(x: &[f64], w: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let n_out = check_dense(x.len(), w, b)?;
    let mut y = b.data.clone();
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            axpy(&mut y, xi, &w.data[i * n_out..(i + 1) * n_out]);
        }
    }
    Ok(y)
}

/// Accumulates gradients of `dense`. `dx` receives `W dy` when given.
pub fn dense_backward(
    x: &[f64],
    w: &Tensor,
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: &mut Tensor,
    db: &mut Tensor,
) {
    let n_out = dy.len();
    axpy(&mut db.data, 1.0, dy);
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            axpy(&mut dw.data[i * n_out..(i + 1) * n_out], xi, dy);
        }
    }
    if let Some(dx) = dx {
        for (i, g) in dx.iter_mut().enumerate() {
            *g += dot(&w.data[i * n_out..(i + 1) * n_out], dy);
        }
    }
}

/// Kernel shape for `conv1d_causal`: `[width, c_in, c_out]`.
pub fn conv_kernel_shape(width: usize, c_in: usize, c_out: usize) -> [usize; 3] {
    [width, c_in, c_out]
}

fn check_conv(x: &Tensor, k: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if x.shape.len() != 2 || k.shape.len() != 3 {
        return Err(Error::Shape(format!(
            "conv expects x [time, c_in] and kernel [w, c_in, c_out], got {:?} and {:?}",
            x.shape, k.shape
        )));
    }
    let (time, c_in) = (x.shape[0], x.shape[1]);
    let (w, kc_in, c_out) = (k.shape[0], k.shape[1], k.shape[2]);
    if w == 0 {
        return Err(Error::Shape("conv kernel width must be >= 1".into()));
    }
    if kc_in != c_in {
        return Err(Error::Shape(format!("conv kernel takes {kc_in} channels, input has {c_in}")));
    }
    if b.shape != [c_out] {
        return Err(Error::Shape(format!("conv bias {:?}, expected [{c_out}]", b.shape)));
    }
    Ok((time, c_in, w, c_out))
}

/// Causal 1-D convolution. Input is left-padded with `w - 1` zero rows, so
/// `out[t]` depends on `x[t-w+1 ..= t]` only and the output keeps the input
/// length. Tap `j` of the kernel multiplies `x[t - (w-1) + j]`.
pub fn conv1d_causal(x: &Tensor, k: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (time, c_in, w, c_out) = check_conv(x, k, b)?;
    let mut out = Vec::with_capacity(time * c_out);
    for t in 0..time {
        let start = out.len();
        out.extend_from_slice(&b.data);
        let y = &mut out[start..];
        for j in 0..w {
            let Some(src) = (t + j).checked_sub(w - 1) else {
                continue;
            };
            let xrow = &x.data[src * c_in..(src + 1) * c_in];
            for (i, &xi) in xrow.iter().enumerate() {
                if xi != 0.0 {
                    let off = (j * c_in + i) * c_out;
                    axpy(y, xi, &k.data[off..off + c_out]);
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![time, c_out],
        data: out,
    })
}

/// Accumulates gradients of `conv1d_causal`.
pub fn conv1d_causal_backward(
    x: &Tensor,
    k: &Tensor,
    dy: &Tensor,
    mut dx: Option<&mut Tensor>,
    dk: &mut Tensor,
    db: &mut Tensor,
) {
    let (time, c_in) = (x.shape[0], x.shape[1]);
    let (w, c_out) = (k.shape[0], k.shape[2]);
    for t in 0..time {
        let g = &dy.data[t * c_out..(t + 1) * c_out];
        axpy(&mut db.data, 1.0, g);
        for j in 0..w {
            let Some(src) = (t + j).checked_sub(w - 1) else {
                continue;
            };
            for i in 0..c_in {
                let off = (j * c_in + i) * c_out;
                let xi = x.data[src * c_in + i];
                if xi != 0.0 {
                    axpy(&mut dk.data[off..off + c_out], xi, g);
                }
                if let Some(dx) = dx.as_deref_mut() {
                    dx.data[src * c_in + i] += dot(&k.data[off..off + c_out], g);
                }
            }
        }
    }
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

pub fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `dy` in place by the ReLU output `y`. The subgradient at 0 is 0.
pub fn relu_backward(y: &[f64], dy: &mut [f64]) {
    for (g, &v) in dy.iter_mut().zip(y) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gradient w.r.t. the logits given the softmax output `s` and `ds`.
pub fn softmax_backward(s: &[f64], ds: &[f64]) -> Vec<f64> {
    let inner: f64 = s.iter().zip(ds).map(|(a, b)| a * b).sum();
    s.iter().zip(ds).map(|(si, gi)| si * (gi - inner)).collect()
}

/// Per-channel mean over the time axis of `x: [time, c]`.
pub fn global_avg_pool_time(x: &Tensor) -> Result<Vec<f64>> {
    if x.shape.len() != 2 || x.shape[0] == 0 {
        return Err(Error::Shape(format!(
            "average pooling needs a non-empty [time, c] input, got {:?}",
            x.shape
        )));
    }
    let (time, c) = (x.shape[0], x.shape[1]);
    let mut out = vec![0.0; c];
    for row in x.data.chunks_exact(c) {
        axpy(&mut out, 1.0, row);
    }
    let inv = 1.0 / time as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

/// Gradient of pooling: `dy / time` broadcast over every row.
pub fn global_avg_pool_time_backward(time: usize, dy: &[f64]) -> Tensor {
    let inv = 1.0 / time as f64;
    let row: Vec<f64> = dy.iter().map(|g| g * inv).collect();
    let mut data = Vec::with_capacity(time * dy.len());
    for _ in 0..time {
        data.extend_from_slice(&row);
    }
    Tensor {
        shape: vec![time, dy.len()],
        data,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step_count: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(param: &Tensor, hyper: AdamHyper) -> Self {
        Self {
            first_moment: Tensor::zeros_like(param),
            second_moment: Tensor::zeros_like(param),
            step_count: 0,
            hyper,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient is rejected before
/// anything is modified.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState) -> Result<()> {
    if param.shape != grad.shape || state.first_moment.shape != param.shape {
        return Err(Error::Shape(format!(
            "adam: param {:?}, grad {:?}, moments {:?}",
            param.shape, grad.shape, state.first_moment.shape
        )));
    }
    if let Some(pos) = grad.data.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {pos} is {}", grad.data[pos])));
    }
    let h = state.hyper;
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    let m = &mut state.first_moment.data;
    let v = &mut state.second_moment.data;
    for i in 0..param.data.len() {
        let g = grad.data[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param.data[i] -= h.learning_rate * m_hat / (v_hat.sqrt() + h.eps);
    }
    Ok(())
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates where the one-sided differences disagree, i.e. a ReLU kink
    /// lies within `eps` of `x`. They are excluded from `max_rel_error`.
    pub skipped: usize,
}

/// Compares the analytic gradient returned by `f` against central
/// differences with step `eps`.
///
/// The per-coordinate error is `|a - n| / max(|a|, |n|, 1e-5 * max(1, |f(x)|))`;
/// the floor keeps round-off in `n` from dominating coordinates whose true
/// gradient is zero.
pub fn grad_check<F>(f: F, x: &[f64], eps: f64) -> GradCheck
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (f0, analytic) = f(x);
    assert_eq!(analytic.len(), x.len(), "gradient length must match x");
    let floor = 1e-5 * f0.abs().max(1.0);
    let mut probe = x.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let fp = f(&probe).0;
        probe[i] = x[i] - eps;
        let fm = f(&probe).0;
        probe[i] = x[i];
        let fwd = (fp - f0) / eps;
        let bwd = (f0 - fm) / eps;
        let numeric = (fp - fm) / (2.0 * eps);
        if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(floor * 1e3) {
            report.skipped += 1;
            continue;
        }
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.checked += 1;
        report.max_rel_error = report.max_rel_error.max(rel);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    /// Independent nested-sum oracle for the causal convolution, written
    /// against the `[w, c_in, c_out]` layout.
    fn conv_oracle(x: &Tensor, k: &Tensor, b: &Tensor) -> Vec<f64> {
        let (time, c_in) = (x.shape()[0], x.shape()[1]);
        let (w, _, c_out) = (k.shape()[0], k.shape()[1], k.shape()[2]);
        let mut out = vec![0.0; time * c_out];
        for t in 0..time {
            for o in 0..c_out {
                let mut s = b.data()[o];
                for j in 0..w {
                    let src = t as isize - (w as isize - 1) + j as isize;
                    if src < 0 {
                        continue;
                    }
                    for i in 0..c_in {
                        s += x.data()[src as usize * c_in + i] * k.data()[(j * c_in + i) * c_out + o];
                    }
                }
                out[t * c_out + o] = s;
            }
        }
        out
    }

    #[test]
    fn dense_examples() {
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        assert_eq!(dense(&[1.0, 2.0], &w, &b).unwrap(), vec![1.0, 2.0]);
        let b = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        assert_eq!(dense(&[0.0, 0.0], &w, &b).unwrap(), vec![0.5, -1.0]);
        assert!(dense(&[1.0], &w, &b).is_err());
    }

    #[test]
    fn dense_gradient_matches_finite_differences() {
        let mut r = rng();
        for _ in 0..100 {
            let (n_in, n_out) = (r.gen_range(1..6), r.gen_range(1..6));
            let x0 = Tensor::uniform(&[n_in], 1.0, &mut r);
            let w0 = Tensor::uniform(&[n_in, n_out], 1.0, &mut r);
            let b0 = Tensor::uniform(&[n_out], 1.0, &mut r);
            // pack x, W, b into one vector; f = sum(dense(x, W, b))
            let mut packed = x0.data().to_vec();
            packed.extend_from_slice(w0.data());
            packed.extend_from_slice(b0.data());
            let f = |p: &[f64]| {
                let x = &p[..n_in];
                let w = Tensor::new(vec![n_in, n_out], p[n_in..n_in + n_in * n_out].to_vec()).unwrap();
                let b = Tensor::new(vec![n_out], p[n_in + n_in * n_out..].to_vec()).unwrap();
                let y = dense(x, &w, &b).unwrap();
                let dy = vec![1.0; n_out];
                let mut dx = vec![0.0; n_in];
                let mut dw = Tensor::zeros_like(&w);
                let mut db = Tensor::zeros_like(&b);
                dense_backward(x, &w, &dy, Some(&mut dx), &mut dw, &mut db);
                let mut g = dx;
                g.extend_from_slice(dw.data());
                g.extend_from_slice(db.data());
                (y.iter().sum(), g)
            };
            let rep = grad_check(f, &packed, 1e-5);
            assert!(rep.max_rel_error < 1e-6, "{rep:?}");
        }
    }

    #[test]
    fn conv_examples() {
        let x = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let k = Tensor::new(vec![3, 1, 1], vec![1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv1d_causal(&x, &k, &b).unwrap().data(), &[1.0, 3.0, 6.0]);
        let k1 = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv1d_causal(&x, &k1, &b).unwrap().data(), x.data());
        let bad = Tensor::zeros(&[3, 2, 1]);
        assert!(conv1d_causal(&x, &bad, &b).is_err());
    }

    #[test]
    fn conv_matches_oracle_and_gradients() {
        let mut r = rng();
        for _ in 0..100 {
            let time = r.gen_range(1..9);
            let c_in = r.gen_range(1..4);
            let c_out = r.gen_range(1..4);
            let w = r.gen_range(1..4);
            let x = Tensor::uniform(&[time, c_in], 1.0, &mut r);
            let k = Tensor::uniform(&conv_kernel_shape(w, c_in, c_out), 1.0, &mut r);
            let b = Tensor::uniform(&[c_out], 1.0, &mut r);
            let fast = conv1d_causal(&x, &k, &b).unwrap();
            for (a, o) in fast.data().iter().zip(conv_oracle(&x, &k, &b)) {
                assert!((a - o).abs() < 1e-10);
            }
            // f = <c, conv(x)> with random c, gradient w.r.t. x, K, b
            let c: Vec<f64> = (0..time * c_out).map(|_| r.gen_range(-1.0..1.0)).collect();
            let (nx, nk) = (x.len(), k.len());
            let mut packed = x.data().to_vec();
            packed.extend_from_slice(k.data());
            packed.extend_from_slice(b.data());
            let kshape = k.shape().to_vec();
            let f = |p: &[f64]| {
                let x = Tensor::new(vec![time, c_in], p[..nx].to_vec()).unwrap();
                let k = Tensor::new(kshape.clone(), p[nx..nx + nk].to_vec()).unwrap();
                let b = Tensor::new(vec![c_out], p[nx + nk..].to_vec()).unwrap();
                let y = conv1d_causal(&x, &k, &b).unwrap();
                let dy = Tensor::new(vec![time, c_out], c.clone()).unwrap();
                let mut dx = Tensor::zeros_like(&x);
                let mut dk = Tensor::zeros_like(&k);
                let mut db = Tensor::zeros_like(&b);
                conv1d_causal_backward(&x, &k, &dy, Some(&mut dx), &mut dk, &mut db);
                let mut g = dx.data().to_vec();
                g.extend_from_slice(dk.data());
                g.extend_from_slice(db.data());
                (dot(y.data(), &c), g)
            };
            let rep = grad_check(f, &packed, 1e-5);
            assert!(rep.max_rel_error < 1e-6, "{rep:?}");
        }
    }

    #[test]
    fn conv_is_causal() {
        let mut r = rng();
        let x = Tensor::uniform(&[12, 2], 1.0, &mut r);
        let k = Tensor::uniform(&conv_kernel_shape(3, 2, 4), 1.0, &mut r);
        let b = Tensor::uniform(&[4], 1.0, &mut r);
        let y = conv1d_causal(&x, &k, &b).unwrap();
        for t in 0..12 {
            let mut x2 = x.clone();
            for v in &mut x2.data_mut()[(t + 1) * 2..] {
                *v += 5.0;
            }
            let y2 = conv1d_causal(&x2, &k, &b).unwrap();
            assert_eq!(&y.data()[..(t + 1) * 4], &y2.data()[..(t + 1) * 4]);
        }
    }

    #[test]
    fn relu_examples_and_subgradient() {
        assert_eq!(relu(&[-1.0, 2.0]), vec![0.0, 2.0]);
        assert_eq!(relu(&[-1.0, -3.0]), vec![0.0, 0.0]);
        let y = relu(&[0.0, 1.0, -1.0]);
        let mut dy = vec![1.0, 1.0, 1.0];
        relu_backward(&y, &mut dy);
        assert_eq!(dy, vec![0.0, 1.0, 0.0]);
        // away from 0, one-sided differences agree with the rule
        let mut r = rng();
        for _ in 0..100 {
            let mut x: f64 = r.gen_range(-1.0..1.0);
            if x.abs() < 1e-3 {
                x = 0.5;
            }
            let h = 1e-6;
            let fd = (x + h).max(0.0) - x.max(0.0);
            let mut g = [1.0];
            relu_backward(&[x.max(0.0)], &mut g);
            assert!((fd / h - g[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        assert_eq!(softmax(&[1000.0, 1000.0]), vec![0.5, 0.5]);
        let s = softmax(&[2f64.ln(), 0.0]);
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15 && (s[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_gradient() {
        let mut r = rng();
        for _ in 0..100 {
            let n = r.gen_range(1..8);
            let x: Vec<f64> = (0..n).map(|_| r.gen_range(-3.0..3.0)).collect();
            let c: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
            let f = |p: &[f64]| {
                let s = softmax(p);
                (dot(&s, &c), softmax_backward(&s, &c))
            };
            let rep = grad_check(f, &x, 1e-5);
            assert!(rep.max_rel_error < 1e-6, "{rep:?}");
        }
    }

    #[test]
    fn pooling_examples_and_gradient() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool_time(&x).unwrap(), vec![2.0, 3.0]);
        let one = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(global_avg_pool_time(&one).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(global_avg_pool_time(&Tensor::zeros(&[0, 3])).is_err());
        let mut r = rng();
        for _ in 0..100 {
            let (time, c) = (r.gen_range(1..6), r.gen_range(1..4));
            let x = Tensor::uniform(&[time, c], 1.0, &mut r);
            let w: Vec<f64> = (0..c).map(|_| r.gen_range(-1.0..1.0)).collect();
            let f = |p: &[f64]| {
                let t = Tensor::new(vec![time, c], p.to_vec()).unwrap();
                let y = global_avg_pool_time(&t).unwrap();
                (dot(&y, &w), global_avg_pool_time_backward(time, &w).data().to_vec())
            };
            assert!(grad_check(f, x.data(), 1e-5).max_rel_error < 1e-6);
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = Tensor::new(vec![1], vec![0.0]).unwrap();
        let g = Tensor::new(vec![1], vec![0.5]).unwrap();
        let mut st = AdamState::new(&p, AdamHyper::default());
        adam_step(&mut p, &g, &mut st).unwrap();
        let expected = 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p.data()[0] + expected).abs() < 1e-18);
        assert!((expected - 9.9999998e-4).abs() < 1e-12);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn adam_zero_gradient_and_non_finite() {
        let mut p = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let mut st = AdamState::new(&p, AdamHyper::default());
        adam_step(&mut p, &Tensor::zeros(&[2]), &mut st).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        let bad = Tensor {
            shape: vec![2],
            data: vec![f64::NAN, 0.0],
        };
        let before = (p.clone(), st.clone());
        assert!(matches!(adam_step(&mut p, &bad, &mut st), Err(Error::NonFinite(_))));
        assert_eq!((p, st), before);
    }

    #[test]
    fn adam_descends_quadratic() {
        // independent scalar recursion of the same update rule
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let (mut q, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * q;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            q -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }
        let hyper = AdamHyper {
            learning_rate: lr,
            ..AdamHyper::default()
        };
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut st = AdamState::new(&p, hyper);
        for _ in 0..100 {
            let g = Tensor::new(vec![1], vec![2.0 * p.data()[0]]).unwrap();
            adam_step(&mut p, &g, &mut st).unwrap();
        }
        assert!(p.data()[0].abs() < 1.0);
        assert!((p.data()[0] - q).abs() < 1e-12);
    }

    #[test]
    fn grad_check_trivial_functions() {
        let x = [0.3, -1.2, 4.0];
        let rep = grad_check(|p| (p.iter().sum(), vec![1.0; p.len()]), &x, 1e-5);
        assert!(rep.max_rel_error < 1e-10, "{rep:?}");
        let rep = grad_check(|p| (0.0, vec![0.0; p.len()]), &x, 1e-5);
        assert_eq!(rep.max_rel_error, 0.0);
    }

    #[test]
    fn grad_check_small_mlp() {
        // dense -> relu -> dense -> sum, gradient w.r.t. all parameters
        let mut r = rng();
        let (n_in, n_hid, n_out) = (4, 5, 3);
        let x: Vec<f64> = (0..n_in).map(|_| r.gen_range(-1.0..1.0)).collect();
        let sizes = [n_in * n_hid, n_hid, n_hid * n_out, n_out];
        let total: usize = sizes.iter().sum();
        let p0: Vec<f64> = (0..total).map(|_| r.gen_range(-1.0..1.0)).collect();
        let f = |p: &[f64]| {
            let mut o = 0;
            let mut take = |n: usize, shape: Vec<usize>| {
                let t = Tensor::new(shape, p[o..o + n].to_vec()).unwrap();
                o += n;
                t
            };
            let w1 = take(sizes[0], vec![n_in, n_hid]);
            let b1 = take(sizes[1], vec![n_hid]);
            let w2 = take(sizes[2], vec![n_hid, n_out]);
            let b2 = take(sizes[3], vec![n_out]);
            let h = relu(&dense(&x, &w1, &b1).unwrap());
            let y = dense(&h, &w2, &b2).unwrap();
            let (mut dw1, mut db1, mut dw2, mut db2) = (
                Tensor::zeros_like(&w1),
                Tensor::zeros_like(&b1),
                Tensor::zeros_like(&w2),
                Tensor::zeros_like(&b2),
            );
            let mut dh = vec![0.0; n_hid];
            dense_backward(&h, &w2, &vec![1.0; n_out], Some(&mut dh), &mut dw2, &mut db2);
            relu_backward(&h, &mut dh);
            dense_backward(&x, &w1, &dh, None, &mut dw1, &mut db1);
            let mut g = dw1.data().to_vec();
            g.extend_from_slice(db1.data());
            g.extend_from_slice(dw2.data());
            g.extend_from_slice(db2.data());
            (y.iter().sum(), g)
        };
        let rep = grad_check(f, &p0, 1e-5);
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }
}
