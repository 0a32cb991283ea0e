//! Small numeric kernels shared by the two neural models.

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut1};
use rand::Rng;

/// Log-softmax that stays accurate when one logit dominates.
pub(crate) fn log_softmax_into(logits: ArrayView1<f64>, mut out: ArrayViewMut1<f64>) {
    let (arg, max) = logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(a, m), (i, &v)| if v > m { (i, v) } else { (a, m) });
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != arg)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    let tail = rest.ln_1p();
    for (i, (o, &v)) in out.iter_mut().zip(logits.iter()).enumerate() {
        *o = if i == arg { -tail } else { (v - max) - tail };
    }
}

pub(crate) fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (row, out_row) in logits.rows().into_iter().zip(out.rows_mut()) {
        log_softmax_into(row, out_row);
    }
    out
}

pub(crate) fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

pub(crate) fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// tanh approximation of GELU.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Inverted dropout mask: entries are 0 or 1/(1-p).
pub(crate) fn dropout_mask(rng: &mut impl Rng, len: usize, p: f64) -> Array1<f64> {
    let scale = 1.0 / (1.0 - p);
    Array1::from_shape_fn(len, |_| if rng.gen::<f64>() < p { 0.0 } else { scale })
}

/// Named parameter tensors visited in a fixed order.
pub(crate) trait ParamVisitor {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, s| out.extend_from_slice(s));
        out
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, s| n += s.len());
        n
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub(crate) struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub(crate) fn new(lr: f64, n: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub(crate) fn update<P: ParamVisitor>(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let g = grads.flat();
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (m, v) = (&mut self.m, &mut self.v);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let mut k = 0;
        params.visit_mut(&mut |_, s| {
            for p in s.iter_mut() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                *p -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                k += 1;
            }
        });
    }
}

pub(crate) fn sgd_update<P: ParamVisitor>(params: &mut P, grads: &P, lr: f64) {
    let g = grads.flat();
    let mut k = 0;
    params.visit_mut(&mut |_, s| {
        for p in s.iter_mut() {
            *p -= lr * g[k];
            k += 1;
        }
    });
}

/// Max relative error between analytic and central-difference gradients
/// over every parameter.
pub(crate) fn finite_difference_check<P: ParamVisitor + Clone>(
    params: &P,
    analytic: &[f64],
    h: f64,
    mut loss: impl FnMut(&P) -> f64,
) -> f64 {
    let n = params.param_count();
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for (k, &a) in analytic.iter().enumerate().take(n) {
        let orig = nth(&probe, k);
        set_nth(&mut probe, k, orig + h);
        let plus = loss(&probe);
        set_nth(&mut probe, k, orig - h);
        let minus = loss(&probe);
        set_nth(&mut probe, k, orig);
        let numeric = (plus - minus) / (2.0 * h);
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

fn nth<P: ParamVisitor>(p: &P, k: usize) -> f64 {
    let mut seen = 0;
    let mut out = 0.0;
    p.visit(&mut |_, s| {
        if k >= seen && k < seen + s.len() {
            out = s[k - seen];
        }
        seen += s.len();
    });
    out
}

fn set_nth<P: ParamVisitor>(p: &mut P, k: usize, value: f64) {
    let mut seen = 0;
    p.visit_mut(&mut |_, s| {
        if k >= seen && k < seen + s.len() {
            s[k - seen] = value;
        }
        seen += s.len();
    });
}
