//! Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use levit_core::blocks::{AttentionBiasTable, AttentionKind, Ctx};
use levit_core::fusion::{fuse_model, parity};
use levit_core::model::{count_spec, preset, tiny, toy, Block, Model, EMBED_BLOCK, PRESET_NAMES};
use levit_core::profile::{decompose_pair, first_pair, pin_current_thread, TimingConfig, COMPONENTS};
use levit_core::tensor::{ops, Tape};
use levit_core::trainer::{train, SyntheticDataset, TrainConfig};
use levit_core::{Mode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn images(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol * target
}

fn patch_embed_cost() -> Outcome {
    let report = count_spec(&preset("LeViT-256").map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let macs = report.block(EMBED_BLOCK).ok_or("no embed row")?.macs as f64;
    ensure(within(macs, 184e6, 0.01), format!("embed {:.2}M MACs", macs / 1e6))?;
    Ok(format!("LeViT-256 patch embed {:.2}M MACs (target 184M +-1%)", macs / 1e6))
}

fn family_cost_table() -> Outcome {
    let targets = [(305.0, 7.8), (406.0, 9.2), (658.0, 10.9), (1120.0, 18.9), (2353.0, 39.1)];
    let mut rows = Vec::new();
    let mut previous = 0;
    for (name, (macs_m, params_m)) in PRESET_NAMES[..5].iter().zip(targets) {
        let r = count_spec(&preset(name).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let macs = r.total_macs();
        let (both, one) = (r.total_params() as f64 / 1e6, r.single_head_params() as f64 / 1e6);
        ensure(within(macs as f64 / 1e6, macs_m, 0.10), format!("{name}: {} MACs vs {macs_m}M", macs))?;
        ensure(
            within(both, params_m, 0.10) || within(one, params_m, 0.10),
            format!("{name}: params {both:.2}M / {one:.2}M vs {params_m}M"),
        )?;
        ensure(macs > previous, format!("{name} is not larger than its predecessor"))?;
        previous = macs;
        rows.push(format!("{name} {:.0}M/{both:.2}M", macs as f64 / 1e6));
    }
    Ok(rows.join(", "))
}

fn shape_pipeline() -> Outcome {
    let model: Model<f32> =
        Model::build(&preset("LeViT-256").map_err(|e| e.to_string())?, 0).map_err(|e| e.to_string())?;
    let stages = model.infer_stages(&images(&[1, 3, 224, 224], 1)).map_err(|e| e.to_string())?;
    let got: Vec<Vec<usize>> = stages[1..].iter().map(|t| t.shape()[1..].to_vec()).collect();
    let want = vec![vec![256, 14, 14], vec![384, 7, 7], vec![512, 4, 4]];
    ensure(got == want, format!("{got:?}"))?;
    Ok("(256,14,14) -> (384,7,7) -> (512,4,4)".into())
}

fn fusion_equivalence() -> Outcome {
    let mut worst = 0f64;
    for (i, name) in PRESET_NAMES.iter().enumerate() {
        let spec = preset(name).and_then(|s| s.with_resolution(64)).map_err(|e| e.to_string())?;
        let mut model: Model<f32> = Model::build(&spec, i as u64).map_err(|e| e.to_string())?;
        model.randomize_statistics(100 + i as u64);
        let fused = fuse_model(model.clone()).map_err(|e| e.to_string())?.into_model();
        let gap = parity(&model, &fused, &images(&[10, 3, 64, 64], 7 + i as u64)).map_err(|e| e.to_string())?;
        ensure(gap < 1e-4, format!("{name}: max abs diff {gap:e}"))?;
        worst = worst.max(gap);
    }
    Ok(format!("{} presets at 64x64, 10 inputs, f32, worst max-abs {worst:.2e}", PRESET_NAMES.len()))
}

fn gradient_correctness() -> Outcome {
    let spec = tiny(3);
    let literal = common::check_model_gradients_with(&spec, 4, 31, Mode::Eval, 1e-5);
    ensure(
        literal.mismatches.is_empty(),
        format!(
            "eval-mode BN, step 1e-5: {} of {} mismatched, first {:?}",
            literal.mismatches.len(),
            literal.checked,
            literal.mismatches.first()
        ),
    )?;
    let train_mode = common::check_model_gradients_with(&spec, 4, 31, Mode::Train, 1e-6);
    ensure(
        train_mode.mismatches.is_empty(),
        format!(
            "train-mode BN, step 1e-6: {} of {} mismatched, first {:?}",
            train_mode.mismatches.len(),
            train_mode.checked,
            train_mode.mismatches.first()
        ),
    )?;
    Ok(format!(
        "{} parameter tensors, {} elements each sweep; eval BN at step 1e-5 max abs diff {:.1e}; train BN at step 1e-6 max abs diff {:.1e}",
        literal.parameters, literal.checked, literal.max_abs_error, train_mode.max_abs_error
    ))
}

fn bias_properties() -> Outcome {
    for (seed, (h, w)) in [(1, (14, 14)), (2, (7, 7)), (3, (4, 4)), (4, (5, 3))] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = Tensor::<f64>::from_fn(&[3, h, w], |_| StandardNormal.sample(&mut rng));
        let table = AttentionBiasTable::from_values("t", values.clone(), 1).map_err(|e| e.to_string())?;
        let e = table.expanded();
        let p = h * w;
        for n in 0..3 {
            for a in 0..p {
                for b in 0..p {
                    let at = |a: usize, b: usize| e.data()[(n * p + a) * p + b];
                    let (ai, aj, bi, bj) = (a / w, a % w, b / w, b % w);
                    let v = at(a, b);
                    ensure(v == at(b, a), format!("asymmetric at {a},{b}"))?;
                    let fx = |i: usize, j: usize| (h - 1 - i) * w + j;
                    let fy = |i: usize, j: usize| i * w + (w - 1 - j);
                    ensure(v == at(fx(ai, aj), fx(bi, bj)), "not invariant to a vertical flip")?;
                    ensure(v == at(fy(ai, aj), fy(bi, bj)), "not invariant to a horizontal flip")?;
                    let (dx, dy) = (ai.abs_diff(bi), aj.abs_diff(bj));
                    ensure(v == values.data()[(n * h + dx) * w + dy], "differs from its offset entry")?;
                }
            }
        }
    }

    let mut model: Model<f32> =
        Model::build(&preset("LeViT-256").map_err(|e| e.to_string())?, 3).map_err(|e| e.to_string())?;
    model.randomize_statistics(4);
    let Some(Block::Attention(attn)) = model.stages[0].blocks.first_mut() else {
        return Err("first block is not attention".into());
    };
    if let Some(t) = attn.bias.as_mut() {
        t.values.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let (h, w) = attn.grid;
    let p = h * w;
    let x = images(&[2, attn.in_channels(), h, w], 5);
    let perm: Vec<usize> = (0..p).map(|i| (i * 37 + 11) % p).collect();
    let permute = |t: &Tensor<f32>| Tensor::from_fn(t.shape(), |idx| t.data()[(idx / p) * p + perm[idx % p]]);
    let mut branch = |x: &Tensor<f32>| {
        let tape = Tape::inference();
        let mut ctx = Ctx::new(&tape, Mode::Eval, 0);
        let input = ctx.input(x);
        attn.branch(&mut ctx, input).map(|v| v.value()).map_err(|e| e.to_string())
    };
    let a = permute(&branch(&x)?);
    let b = branch(&permute(&x))?;
    let gap = a.max_abs_diff(&b).ok_or("shape mismatch")?;
    ensure(gap < 1e-5, format!("permutation equivariance gap {gap:e}"))?;
    Ok(format!(
        "symmetry, flips and offset constancy on 4 random tables; zero-bias LeViT-256 block equivariance gap {gap:.1e}"
    ))
}

fn identity_at_init() -> Outcome {
    let mut regular = 0;
    for (i, name) in PRESET_NAMES.iter().enumerate() {
        let spec = preset(name).and_then(|s| s.with_resolution(64)).map_err(|e| e.to_string())?;
        let model: Model<f32> = Model::build(&spec, i as u64).map_err(|e| e.to_string())?;
        let stages = model.infer_stages(&images(&[2, 3, 64, 64], 20 + i as u64)).map_err(|e| e.to_string())?;
        let mut x = stages[0].clone();
        let mut shrink_only = stages[0].clone();
        for block in model.blocks() {
            let y = block.infer(&x).map_err(|e| e.to_string())?;
            if block.is_residual() {
                ensure(y == x, format!("{name}: {} is not an exact identity", block.name()))?;
                regular += 1;
            }
            if let Block::Attention(a) = block {
                if a.kind == AttentionKind::Shrinking {
                    shrink_only = a.infer(&shrink_only).map_err(|e| e.to_string())?;
                }
            }
            x = y;
        }
        ensure(x == shrink_only, format!("{name}: trunk differs from the shrink-only path"))?;
    }
    let spec = preset("A1-straight").map_err(|e| e.to_string())?;
    let model: Model<f32> = Model::build(&spec, 9).map_err(|e| e.to_string())?;
    let x = images(&[2, 3, 224, 224], 10);
    let pooled =
        ops::avgpool_global(&model.patch_embed.infer(&x).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let direct = model.head.infer(&pooled).map_err(|e| e.to_string())?;
    ensure(
        model.predict(&x).map_err(|e| e.to_string())? == direct,
        "A1 output differs from head(pool(patch_embed(x)))",
    )?;
    Ok(format!("{regular} residual blocks bitwise identities; A1 at 224 equals head(pool(patch_embed(x))); multi-stage trunks equal the shrink-only path"))
}

fn learnability() -> Outcome {
    let data = SyntheticDataset::new(4, 512, 32, 0).map_err(|e| e.to_string())?;
    let config = TrainConfig::default();
    let run = || -> Result<_, String> {
        let mut model: Model<f32> = Model::build(&toy(4), 0).map_err(|e| e.to_string())?;
        train(&mut model, &data, &config).map_err(|e| e.to_string())
    };
    let start = Instant::now();
    let first = run()?;
    let elapsed = start.elapsed().as_secs_f64();
    ensure(first.succeeded(), format!("{:?}", first.status))?;
    let drop = 1.0 - first.tail_loss(20) / first.initial_loss();
    ensure(first.final_accuracy >= 0.9, format!("final accuracy {:.3}", first.final_accuracy))?;
    ensure(drop >= 0.5, format!("loss drop {:.1}%", drop * 100.0))?;
    let second = run()?;
    ensure(
        first.curve == second.curve && first.final_accuracy == second.final_accuracy,
        "second run diverged from the first",
    )?;
    Ok(format!(
        "{} steps in {elapsed:.0}s, final accuracy {:.3}, loss {:.3} -> {:.4} ({:.1}% drop), rerun identical",
        config.steps,
        first.final_accuracy,
        first.initial_loss(),
        first.tail_loss(20),
        drop * 100.0
    ))
}

fn ablation_fidelity() -> Outcome {
    let base =
        count_spec(&preset("LeViT-128S").map_err(|e| e.to_string())?).map_err(|e| e.to_string())?.total_macs() as f64;
    let a1 = preset("A1-straight").map_err(|e| e.to_string())?;
    let s = &a1.stages[0];
    ensure(a1.stages.len() == 1 && (s.depth, s.key_dim, s.heads, s.channels) == (11, 19, 3, 114), format!("A1 {s:?}"))?;
    let a6 = preset("A6-classic-blocks").map_err(|e| e.to_string())?;
    let widths: Vec<usize> = a6.stages.iter().map(|s| s.channels).collect();
    let sub_heads: Vec<usize> = a6.subsamples.iter().map(|s| s.heads).collect();
    ensure(
        widths == [120, 180, 240]
            && a6.stages.iter().all(|s| s.key_dim == 30)
            && a6.mlp_ratio == 4
            && sub_heads == [16, 24],
        format!("A6 widths {widths:?}, subsample heads {sub_heads:?}"),
    )?;
    let mut parts = Vec::new();
    for spec in [a1, a6] {
        let macs = count_spec(&spec).map_err(|e| e.to_string())?.total_macs() as f64;
        ensure(within(macs, base, 0.10), format!("{}: {:.1}M vs base {:.1}M", spec.name, macs / 1e6, base / 1e6))?;
        parts.push(format!("{} {:.1}M", spec.name, macs / 1e6));
    }
    Ok(format!("{} vs LeViT-128S {:.1}M", parts.join(", "), base / 1e6))
}

fn bench_decomposition() -> Outcome {
    let pinned = pin_current_thread();
    let model: Model<f32> =
        Model::build(&preset("LeViT-256").map_err(|e| e.to_string())?, 0).map_err(|e| e.to_string())?;
    let (attn, mlp) = first_pair(&model).map_err(|e| e.to_string())?;
    let d = decompose_pair(attn, mlp, 1, TimingConfig::default()).map_err(|e| e.to_string())?;
    let names: Vec<&str> = d.components.iter().map(|r| r.component.as_str()).collect();
    ensure(names == COMPONENTS, format!("components {names:?}"))?;
    let gap = d.relative_gap();
    ensure(
        gap <= 0.20,
        format!("sum {:.0}us vs whole {:.0}us ({:.1}%)", d.component_sum(), d.whole.median_us, gap * 100.0),
    )?;
    Ok(format!(
        "7 components, sum {:.0}us vs block {:.0}us ({:.1}% gap), pinned cpu {:?}",
        d.component_sum(),
        d.whole.median_us,
        gap * 100.0,
        pinned
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("patch-embed cost", patch_embed_cost),
        ("family cost table", family_cost_table),
        ("shape pipeline", shape_pipeline),
        ("fusion equivalence", fusion_equivalence),
        ("gradient correctness", gradient_correctness),
        ("bias properties", bias_properties),
        ("identity at init", identity_at_init),
        ("learnability", learnability),
        ("ablation fidelity", ablation_fidelity),
        ("bench decomposition", bench_decomposition),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
