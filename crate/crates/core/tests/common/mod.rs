//! Test-only oracles shared by the integration suites. Nothing here calls
//! into the implementation paths it is used to check.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zsq_core::tensor::{Tape, Tensor, Var};

mod suites;
#[allow(unused_imports)]
pub use suites::*;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random tensor whose entries stay at least `gap` away from zero, so that
/// kinked functions (relu, clamps) are differentiable at every sample.
pub fn rand_away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let mag: f64 = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Result of one finite-difference comparison.
#[derive(Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: (usize, usize, f64, f64),
}

/// Relative error with a small absolute floor so that near-zero gradients
/// do not divide by zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Compares the tape's gradient of `f` with central differences (step 1e-4)
/// for every element of every input.
pub fn gradcheck<G>(inputs: &[Tensor<f64>], f: G) -> GradReport
where
    G: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let h = 1e-4;
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t)).collect();
        f(&tape, &vars).item()
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(analytic[i][j], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, j, analytic[i][j], numeric);
            }
        }
    }
    report
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// contributes a distinct gradient.
pub fn probe<'t>(tape: &'t Tape<f64>, v: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let mut r = rng(seed ^ 0x9e37_79b9);
    let w = Tensor::from_fn(&v.shape(), |_| r.random_range(-1.0..1.0));
    v.mul(tape.constant(&w)).unwrap().sum()
}

/// Direct quadruple-loop cross-correlation.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad_begin: usize,
    pad_end: usize,
    dilation: usize,
    groups: usize,
) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let og = o / groups;
    let ho = (h + pad_begin + pad_end - dilation * (kh - 1) - 1) / stride + 1;
    let wo = (wd + pad_begin + pad_end - dilation * (kw - 1) - 1) / stride + 1;
    let xv = |ni: usize, ci: usize, yi: isize, xi: isize| -> f64 {
        if yi < 0 || xi < 0 || yi >= h as isize || xi >= wd as isize {
            0.0
        } else {
            x.data()[((ni * c + ci) * h + yi as usize) * wd + xi as usize]
        }
    };
    let mut out = vec![0.0; n * o * ho * wo];
    for ni in 0..n {
        for oc in 0..o {
            let g = oc / og;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..cg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let yi =
                                    (oy * stride + ky * dilation) as isize - pad_begin as isize;
                                let xi =
                                    (ox * stride + kx * dilation) as isize - pad_begin as isize;
                                acc += w.data()[((oc * cg + ic) * kh + ky) * kw + kx]
                                    * xv(ni, g * cg + ic, yi, xi);
                            }
                        }
                    }
                    out[((ni * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, ho, wo], out).unwrap()
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Temperature-scaled `T²·KL(p_T ‖ p_S)` computed directly from logits.
pub fn direct_kd(student: &[f64], teacher: &[f64], t: f64) -> f64 {
    let soft = |z: &[f64]| {
        let m = z.iter().map(|v| v / t).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v / t - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let (p, q) = (soft(teacher), soft(student));
    t * t
        * p.iter()
            .zip(&q)
            .map(|(a, b)| if *a > 0.0 { a * (a / b).ln() } else { 0.0 })
            .sum::<f64>()
}
