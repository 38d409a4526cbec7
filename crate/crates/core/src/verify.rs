//! Property suite run against a single spec: output shapes, attention-bias
//! structure, softmax normalisation, identity at initialisation, cost
//! consistency and fusion equivalence.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::blocks::{AttentionBiasTable, AttentionKind};
use crate::error::Result;
use crate::fusion::{fuse_model, parity};
use crate::model::{count_model, count_spec, halve, Block, Model, ModelSpec, NormKind};
use crate::profile::random_tensor;
use crate::tensor::{ops, Element, Tensor};

/// Largest forward difference accepted between a model and its fused copy.
pub const FUSION_TOLERANCE: f64 = 1e-4;
/// Largest deviation of an attention row sum from 1.
pub const SOFTMAX_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn from_outcome(check: &str, outcome: Result<std::result::Result<String, String>>) -> Self {
        let (passed, detail) = match outcome {
            Ok(Ok(d)) => (true, d),
            Ok(Err(d)) => (false, d),
            Err(e) => (false, format!("error: {e}")),
        };
        Self { check: check.to_owned(), passed, detail }
    }
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

pub fn write_results<W: Write>(results: &[CheckResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in results {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every check on `images` random inputs at the spec's own resolution.
pub fn run_suite(spec: &ModelSpec, seed: u64, images: usize) -> Result<Vec<CheckResult>> {
    spec.validate()?;
    let fresh: Model<f32> = Model::build(spec, seed)?;
    let mut generic = fresh.clone();
    generic.randomize_statistics(seed.wrapping_add(1));
    let x: Tensor<f32> = random_tensor(&[images, spec.in_channels, spec.img_size, spec.img_size], seed.wrapping_add(2));
    Ok(vec![
        CheckResult::from_outcome("stage shapes", stage_shapes(&fresh, &x)),
        CheckResult::from_outcome("cost consistency", cost_consistency(&fresh)),
        CheckResult::from_outcome("bias symmetry", bias_structure(&generic)),
        CheckResult::from_outcome("softmax rows", softmax_rows(&generic, &x)),
        CheckResult::from_outcome("identity at init", identity_at_init(&fresh, &x)),
        CheckResult::from_outcome("fusion equivalence", fusion_equivalence(&generic, &x)),
    ])
}

type Check = Result<std::result::Result<String, String>>;

fn expected_stage_shapes(spec: &ModelSpec, batch: usize) -> Vec<Vec<usize>> {
    let mut grid = spec.first_grid();
    let mut shapes = vec![vec![batch, spec.stages[0].channels, grid, grid]];
    for (i, stage) in spec.stages.iter().enumerate() {
        if i > 0 {
            grid = halve(grid);
        }
        shapes.push(vec![batch, stage.channels, grid, grid]);
    }
    shapes
}

fn stage_shapes<E: Element>(model: &Model<E>, x: &Tensor<E>) -> Check {
    let got: Vec<Vec<usize>> = model.infer_stages(x)?.iter().map(|t| t.shape().to_vec()).collect();
    let want = expected_stage_shapes(model.spec(), x.shape()[0]);
    let logits = model.predict(x)?;
    let classes = model.spec().num_classes;
    if got != want {
        return Ok(Err(format!("stage outputs {got:?}, expected {want:?}")));
    }
    if logits.shape() != [x.shape()[0], classes] {
        return Ok(Err(format!("logits {:?}", logits.shape())));
    }
    Ok(Ok(got[1..].iter().map(|s| format!("{:?}", &s[1..])).collect::<Vec<_>>().join(" -> ")))
}

fn cost_consistency<E: Element>(model: &Model<E>) -> Check {
    let walked = count_model(model);
    let analytic = count_spec(model.spec())?;
    if walked.blocks != analytic.blocks {
        return Ok(Err("per-block costs of the built model differ from the spec's".into()));
    }
    if walked.total_params() != model.param_count() as u64 {
        return Ok(Err(format!("{} counted params vs {} stored", walked.total_params(), model.param_count())));
    }
    Ok(Ok(format!("{} MACs, {} params", walked.total_macs(), walked.total_params())))
}

/// Every expanded entry equals the table value at the absolute offset
/// between the (strided) query and the key; regular tables are symmetric.
fn check_table<E: Element>(table: &AttentionBiasTable<E>) -> std::result::Result<(), String> {
    let (h, w) = table.grid();
    let (hq, wq) = table.query_grid();
    let s = table.query_stride();
    let expanded = table.expanded();
    let (e, v) = (expanded.data(), table.values.data());
    let (pq, pk) = (hq * wq, h * w);
    for n in 0..table.heads() {
        for a in 0..pq {
            let (ai, aj) = (s * (a / wq), s * (a % wq));
            for b in 0..pk {
                let (bi, bj) = (b / w, b % w);
                let want = v[(n * h + ai.abs_diff(bi)) * w + aj.abs_diff(bj)];
                let got = e[(n * pq + a) * pk + b];
                if got != want {
                    return Err(format!("head {n}, query {a}, key {b}: {got:?} vs {want:?}"));
                }
                if s == 1 && got != e[(n * pq + b) * pk + a] {
                    return Err(format!("head {n}: entry ({a}, {b}) differs from ({b}, {a})"));
                }
            }
        }
    }
    Ok(())
}

fn bias_structure<E: Element>(model: &Model<E>) -> Check {
    let mut count = 0;
    for block in model.blocks() {
        if let Block::Attention(a) = block {
            if let Some(table) = &a.bias {
                if let Err(e) = check_table(table) {
                    return Ok(Err(format!("{}: {e}", table.name)));
                }
                count += 1;
            }
        }
    }
    Ok(Ok(format!("{count} tables follow |dx|,|dy| indexing")))
}

fn softmax_rows<E: Element>(model: &Model<E>, x: &Tensor<E>) -> Check {
    let mut h = model.infer_stages(x)?.remove(0);
    let mut worst = 0f64;
    let mut blocks = 0;
    for block in model.blocks() {
        if let Block::Attention(a) = block {
            let xn = match &a.pre_norm {
                Some(norm) => norm.infer(&h)?,
                None => h.clone(),
            };
            let xq = match a.kind {
                AttentionKind::Regular => xn.clone(),
                AttentionKind::Shrinking => ops::subsample(&xn, 2)?,
            };
            let weights = a.infer_weights(&a.q.infer(&xq)?, &a.k.infer(&xn)?)?;
            let keys = *weights.shape().last().expect("4-d weights");
            for row in weights.data().chunks(keys) {
                if row.iter().any(|p| p.as_f64() < 0.0) {
                    return Ok(Err(format!("{}: negative attention weight", a.name)));
                }
                worst = worst.max((row.iter().map(|p| p.as_f64()).sum::<f64>() - 1.0).abs());
            }
            blocks += 1;
        }
        h = block.infer(&h)?;
    }
    if worst > SOFTMAX_TOLERANCE {
        return Ok(Err(format!("row sum off by {worst:e}")));
    }
    Ok(Ok(format!("{blocks} blocks, worst row-sum error {worst:.1e}")))
}

fn identity_at_init<E: Element>(model: &Model<E>, x: &Tensor<E>) -> Check {
    // only batch norm carries the zero gamma that closes each residual branch
    if model.spec().ablation.norm == NormKind::Layer {
        return Ok(Ok("not applicable to pre-norm layer norm".into()));
    }
    let mut h = model.infer_stages(x)?.remove(0);
    let mut residual = 0;
    for block in model.blocks() {
        let y = block.infer(&h)?;
        if block.is_residual() {
            if y != h {
                return Ok(Err(format!("{} changes its input at initialisation", block.name())));
            }
            residual += 1;
        }
        h = y;
    }
    Ok(Ok(format!("{residual} residual blocks are exact identities")))
}

fn fusion_equivalence(model: &Model<f32>, x: &Tensor<f32>) -> Check {
    let fused = fuse_model(model.clone())?.into_model();
    let gap = parity(model, &fused, x)?;
    if gap >= FUSION_TOLERANCE {
        return Ok(Err(format!("max abs logit difference {gap:e}")));
    }
    Ok(Ok(format!("max abs logit difference {gap:.1e}")))
}
