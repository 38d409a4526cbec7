//! Independent oracles shared by the integration tests and the acceptance
//! runner: central finite differences and a direct-loop convolution.

#![allow(dead_code)]

use levit_core::blocks::{ParamKind, Params};
use levit_core::model::{Model, ModelSpec};
use levit_core::tensor::{Tape, Tensor, Var};
use levit_core::trainer::{loss, loss_and_gradients};
use levit_core::Mode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Central-difference step. Batch-statistic normalization makes the loss
/// sharply curved in early conv weights, so 1e-5 leaves a truncation error
/// near 0.3%; in f64 a step of 1e-6 still keeps roundoff around 1e-10.
pub const FD_STEP: f64 = 1e-6;
pub const FD_REL_TOL: f64 = 1e-3;
/// Below this magnitude both derivatives are indistinguishable from
/// finite-difference noise and only their absolute difference is judged.
pub const FD_ABS_FLOOR: f64 = 1e-7;

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
}

pub fn gradients_agree(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= FD_ABS_FLOOR || diff <= FD_REL_TOL * analytic.abs().max(numeric.abs())
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Checks the tape gradient of `sum(f(inputs) * weights)` against central
/// differences for every element of every input.
pub fn check_op<F>(inputs: &[Tensor<f64>], f: F) -> Vec<Mismatch>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> levit_core::Result<Var<'t, f64>>,
{
    let scalar = |values: &[Tensor<f64>], tape: &Tape<f64>| -> f64 {
        let vars: Vec<_> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&vars).expect("op evaluates");
        let w = randn(&out.shape(), 99);
        out.mul(tape.constant(w)).unwrap().sum().value().item().unwrap()
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&vars).expect("op evaluates");
    let w = randn(&out.shape(), 99);
    let total = out.mul(tape.constant(w)).unwrap().sum();
    let grads = tape.backward(total).unwrap();
    let mut bad = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (scalar(&plus, &Tape::inference()) - scalar(&minus, &Tape::inference())) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            if !gradients_agree(a, numeric) {
                bad.push(Mismatch { name: format!("input{k}"), index: i, analytic: a, numeric });
            }
        }
    }
    bad
}

/// Outcome of a whole-model finite-difference sweep.
#[derive(Debug, Default)]
pub struct ModelGradReport {
    pub checked: usize,
    pub parameters: usize,
    pub mismatches: Vec<Mismatch>,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

fn set_element(model: &mut Model<f64>, name: &str, index: usize, value: f64) {
    model.visit_mut(&mut |n, t, _| {
        if n == name {
            t.data_mut()[index] = value;
        }
    });
}

fn scalar_loss(model: &mut Model<f64>, images: &Tensor<f64>, labels: &[usize]) -> f64 {
    let tape = Tape::inference();
    let out = model.forward(&tape, images, 0).unwrap();
    loss(&out.logits, labels).unwrap().value().item().unwrap()
}

/// Compares every learnable parameter's analytic gradient with central
/// differences on a model whose norms and bias tables were randomized (so no
/// branch is silenced by zero-initialized gammas).
pub fn check_model_gradients(spec: &ModelSpec, batch: usize, seed: u64) -> ModelGradReport {
    check_model_gradients_with(spec, batch, seed, Mode::Train, FD_STEP)
}

pub fn check_model_gradients_with(spec: &ModelSpec, batch: usize, seed: u64, mode: Mode, step: f64) -> ModelGradReport {
    let mut model: Model<f64> = Model::build(spec, seed).unwrap();
    model.randomize_statistics(seed + 1);
    model.set_mode(mode).unwrap();
    let images = randn(&[batch, spec.in_channels, spec.img_size, spec.img_size], seed + 2);
    let labels: Vec<usize> = (0..batch).map(|i| i % spec.num_classes).collect();
    let (_, _, grads) = loss_and_gradients(&mut model, &images, &labels, 0).unwrap();
    let params: Vec<(String, Tensor<f64>)> = {
        let mut v = Vec::new();
        model.visit(&mut |n, t, kind| {
            if kind == ParamKind::Learnable {
                v.push((n.to_owned(), t.clone()));
            }
        });
        v
    };
    let mut report = ModelGradReport { parameters: params.len(), ..Default::default() };
    for (name, value) in &params {
        let analytic = grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(value.shape()));
        for i in 0..value.numel() {
            let x0 = value.data()[i];
            set_element(&mut model, name, i, x0 + step);
            let lp = scalar_loss(&mut model, &images, &labels);
            set_element(&mut model, name, i, x0 - step);
            let lm = scalar_loss(&mut model, &images, &labels);
            set_element(&mut model, name, i, x0);
            let numeric = (lp - lm) / (2.0 * step);
            let a = analytic.data()[i];
            report.checked += 1;
            let diff = (a - numeric).abs();
            report.max_abs_error = report.max_abs_error.max(diff);
            if diff > FD_ABS_FLOOR {
                report.max_rel_error = report.max_rel_error.max(diff / a.abs().max(numeric.abs()));
            }
            if !gradients_agree(a, numeric) {
                report.mismatches.push(Mismatch { name: name.clone(), index: i, analytic: a, numeric });
            }
        }
    }
    report
}

/// Seven nested loops over (batch, out channel, out row, out col, in channel, kernel row, kernel col).
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (b, cin, h, wd) = x.dims4().unwrap();
    let (cout, _, kh, kw) = w.dims4().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * cout * ho * wo];
    for n in 0..b {
        for o in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for p in 0..kh {
                            for q in 0..kw {
                                let (y, xx) = (
                                    (i * stride + p) as isize - pad as isize,
                                    (j * stride + q) as isize - pad as isize,
                                );
                                if y >= 0 && (y as usize) < h && xx >= 0 && (xx as usize) < wd {
                                    acc += x.data()[((n * cin + c) * h + y as usize) * wd + xx as usize]
                                        * w.data()[((o * cin + c) * kh + p) * kw + q];
                                }
                            }
                        }
                    }
                    out[((n * cout + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, cout, ho, wo], out).unwrap()
}

/// Pointwise-map MAC count by brute enumeration of every multiply.
pub fn count_pointwise_macs(cin: usize, cout: usize, sites: usize) -> u64 {
    let mut n = 0u64;
    for _site in 0..sites {
        for _o in 0..cout {
            for _c in 0..cin {
                n += 1;
            }
        }
    }
    n
}
