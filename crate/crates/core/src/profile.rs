//! Single-threaded timing harness.
//!
//! Every measured closure gets warm-up calls, then all closures are timed
//! round-robin, one call each per round, so slow drifts in machine state
//! hit them equally. Results are medians with the interquartile range as
//! dispersion.

use std::hint::black_box;
use std::io::{Read, Write};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blocks::{Attention, Mlp};
use crate::error::{LevitError, Result};
use crate::model::{Block, Model};
use crate::tensor::{ops, Element, Tensor};

pub const MIN_REPS: usize = 3;
pub const DEFAULT_REPS: usize = 30;
pub const DEFAULT_WARMUP: usize = 5;
/// Environment variable naming the CPU to pin the measuring thread to.
pub const PIN_ENV: &str = "LEVIT_BENCH_CPU";

/// Component names of one attention + MLP pair, in execution order.
pub const COMPONENTS: [&str; 7] =
    ["normalization", "keys Q,K", "values V", "product QK^T", "product AV", "attention projection", "MLP"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub component: String,
    pub reps: usize,
    pub median_us: f64,
    pub iqr_us: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimingConfig {
    pub reps: usize,
    pub warmup: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self { reps: DEFAULT_REPS, warmup: DEFAULT_WARMUP }
    }
}

impl TimingConfig {
    pub fn new(reps: usize, warmup: usize) -> Result<Self> {
        if reps < MIN_REPS {
            return Err(LevitError::config(
                "reps",
                format!("at least {MIN_REPS} repetitions are required, got {reps}"),
            ));
        }
        Ok(Self { reps, warmup })
    }
}

/// Pins the calling thread to the CPU named by [`PIN_ENV`] (default 0).
/// Returns the CPU on success; platforms without affinity control return `None`.
pub fn pin_current_thread() -> Option<usize> {
    let cpu = std::env::var(PIN_ENV).ok().and_then(|v| v.trim().parse().ok()).unwrap_or(0);
    pin_to(cpu).then_some(cpu)
}

#[cfg(target_os = "linux")]
fn pin_to(cpu: usize) -> bool {
    // SAFETY: the set is zero-initialised, CPU_SET stays within its fixed
    // capacity, and pid 0 targets the calling thread.
    unsafe {
        if cpu >= libc::CPU_SETSIZE as usize {
            return false;
        }
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_ZERO(&mut set);
        libc::CPU_SET(cpu, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
    }
}

#[cfg(not(target_os = "linux"))]
fn pin_to(_cpu: usize) -> bool {
    false
}

/// Median and interquartile range (linear interpolation between order statistics).
pub fn median_iqr(samples: &[f64]) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| {
        if s.is_empty() {
            return f64::NAN;
        }
        let pos = p * (s.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
    };
    (q(0.5), q(0.75) - q(0.25))
}

type Job<'a> = (String, Box<dyn FnMut() + 'a>);

/// Times each job `cfg.reps` times, interleaved.
pub fn time_interleaved(jobs: Vec<Job<'_>>, cfg: TimingConfig) -> Vec<BenchRecord> {
    let (names, mut fns): (Vec<_>, Vec<_>) = jobs.into_iter().unzip();
    for f in fns.iter_mut() {
        for _ in 0..cfg.warmup {
            f();
        }
    }
    let mut samples = vec![Vec::with_capacity(cfg.reps); fns.len()];
    for _ in 0..cfg.reps {
        for (f, s) in fns.iter_mut().zip(samples.iter_mut()) {
            let start = Instant::now();
            f();
            s.push(start.elapsed().as_secs_f64() * 1e6);
        }
    }
    names
        .into_iter()
        .zip(samples)
        .map(|(component, s)| {
            let (median_us, iqr_us) = median_iqr(&s);
            BenchRecord { component, reps: cfg.reps, median_us, iqr_us }
        })
        .collect()
}

pub fn random_tensor<E: Element>(shape: &[usize], seed: u64) -> Tensor<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| E::from_f64(StandardNormal.sample(&mut rng)))
}

/// Component timings of one attention + MLP pair plus the whole pair.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub components: Vec<BenchRecord>,
    pub whole: BenchRecord,
}

impl Decomposition {
    pub fn component_sum(&self) -> f64 {
        self.components.iter().map(|r| r.median_us).sum()
    }

    /// `|sum - whole| / whole`.
    pub fn relative_gap(&self) -> f64 {
        (self.component_sum() - self.whole.median_us).abs() / self.whole.median_us
    }
}

/// First regular attention block of the first stage and the MLP after it.
pub fn first_pair<E: Element>(model: &Model<E>) -> Result<(&Attention<E>, &Mlp<E>)> {
    let blocks = &model.stages[0].blocks;
    match (blocks.first(), blocks.get(1)) {
        (Some(Block::Attention(a)), Some(Block::Mlp(m))) => Ok((a, m)),
        _ => Err(LevitError::config("stages[0]", "first stage does not open with an attention + MLP pair")),
    }
}

/// Times the pieces of an attention + MLP pair on a random `(batch, C, H, W)` input.
///
/// The pieces partition the pair's eval forward: projections are timed
/// without their batch norm, which is charged to `normalization`; the
/// attention bias and softmax go with the QK product; the Hardswish and the
/// residual add go with the projection.
pub fn decompose_pair<E: Element>(
    attn: &Attention<E>,
    mlp: &Mlp<E>,
    batch: usize,
    cfg: TimingConfig,
) -> Result<Decomposition> {
    let (h, w) = attn.grid;
    let x: Tensor<E> = random_tensor(&[batch, attn.in_channels(), h, w], 17);
    let norm_of = |conv: &crate::blocks::ConvBn<E>, y: &Tensor<E>| -> Result<Tensor<E>> {
        match &conv.norm {
            Some(bn) => bn.infer(y),
            None => Ok(y.clone()),
        }
    };
    let xn = match &attn.pre_norm {
        Some(n) => n.infer(&x)?,
        None => x.clone(),
    };
    let q_raw = attn.q.infer_conv(&xn)?;
    let k_raw = attn.k.infer_conv(&xn)?;
    let v_raw = attn.v.infer_conv(&xn)?;
    let q = norm_of(&attn.q, &q_raw)?;
    let k = norm_of(&attn.k, &k_raw)?;
    let v = norm_of(&attn.v, &v_raw)?;
    let weights = attn.infer_weights(&q, &k)?;
    let context = attn.infer_context(&v, &weights)?;
    let proj_raw = attn.proj.infer_conv(&ops::hardswish(&context))?;
    let attn_out = x.add(&norm_of(&attn.proj, &proj_raw)?)?;

    let jobs: Vec<Job<'_>> = vec![
        (
            COMPONENTS[0].into(),
            Box::new(|| {
                if let Some(n) = &attn.pre_norm {
                    black_box(n.infer(&x).ok());
                }
                for (conv, y) in [(&attn.q, &q_raw), (&attn.k, &k_raw), (&attn.v, &v_raw), (&attn.proj, &proj_raw)] {
                    black_box(norm_of(conv, y).ok());
                }
            }),
        ),
        (
            COMPONENTS[1].into(),
            Box::new(|| {
                black_box(attn.q.infer_conv(&xn).ok());
                black_box(attn.k.infer_conv(&xn).ok());
            }),
        ),
        (COMPONENTS[2].into(), Box::new(|| drop(black_box(attn.v.infer_conv(&xn).ok())))),
        (COMPONENTS[3].into(), Box::new(|| drop(black_box(attn.infer_weights(&q, &k).ok())))),
        (COMPONENTS[4].into(), Box::new(|| drop(black_box(attn.infer_context(&v, &weights).ok())))),
        (
            COMPONENTS[5].into(),
            Box::new(|| {
                let y = attn.proj.infer_conv(&ops::hardswish(&context)).expect("shapes fixed above");
                black_box(x.add(&y).ok());
            }),
        ),
        (COMPONENTS[6].into(), Box::new(|| drop(black_box(mlp.infer(&attn_out).ok())))),
        (
            "block".into(),
            Box::new(|| {
                let y = attn.infer(&x).expect("shapes fixed above");
                black_box(mlp.infer(&y).ok());
            }),
        ),
    ];
    let mut records = time_interleaved(jobs, cfg);
    let whole = records.pop().expect("block job present");
    Ok(Decomposition { components: records, whole })
}

/// Median eval forward time of a whole model on random images.
pub fn bench_forward<E: Element>(
    model: &Model<E>,
    batch: usize,
    cfg: TimingConfig,
    label: &str,
) -> Result<BenchRecord> {
    let spec = model.spec();
    let x: Tensor<E> = random_tensor(&[batch, spec.in_channels, spec.img_size, spec.img_size], 23);
    model.predict(&x)?;
    let job: Job<'_> = (label.to_owned(), Box::new(|| drop(black_box(model.predict(&x).ok()))));
    Ok(time_interleaved(vec![job], cfg).remove(0))
}

/// Times several models round-robin so they see the same machine state.
pub fn bench_models<E: Element>(
    models: &[(&str, &Model<E>)],
    batch: usize,
    cfg: TimingConfig,
) -> Result<Vec<BenchRecord>> {
    let mut jobs: Vec<Job<'_>> = Vec::new();
    for &(label, model) in models {
        let spec = model.spec();
        let x: Tensor<E> = random_tensor(&[batch, spec.in_channels, spec.img_size, spec.img_size], 23);
        model.predict(&x)?;
        jobs.push((label.to_owned(), Box::new(move || drop(black_box(model.predict(&x).ok())))));
    }
    Ok(time_interleaved(jobs, cfg))
}

pub fn write_records<W: Write>(records: &[BenchRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<BenchRecord>> {
    csv::Reader::from_reader(input).deserialize().map(|r| r.map_err(LevitError::from)).collect()
}
