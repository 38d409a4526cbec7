//! The LeViT family, the two reworked ablation networks and the small
//! configurations used by tests and the toy trainer.

use super::spec::{halve, Ablation, ModelSpec, NormKind, PatchEmbedSpec, PositionKind, StageSpec, SubsampleSpec};
use crate::error::{LevitError, Result};

pub const PRESET_NAMES: [&str; 7] =
    ["LeViT-128S", "LeViT-128", "LeViT-192", "LeViT-256", "LeViT-384", "A1-straight", "A6-classic-blocks"];

pub const IMAGENET_CLASSES: usize = 1000;
pub const IMAGENET_RESOLUTION: usize = 224;

/// Patch-embed widths halving down from the first stage width.
pub fn embed_schedule(in_channels: usize, c: usize) -> Vec<usize> {
    vec![in_channels, c / 8, c / 4, c / 2, c]
}

/// One row of the family table: key dim, drop path, per-stage (depth, C, N).
struct Family {
    key_dim: usize,
    drop_path: f64,
    stages: [(usize, usize, usize); 3],
}

fn family(name: &str) -> Option<Family> {
    let f = |key_dim, drop_path, stages| Some(Family { key_dim, drop_path, stages });
    match name {
        "LeViT-128S" => f(16, 0.0, [(2, 128, 4), (3, 256, 6), (4, 384, 8)]),
        "LeViT-128" => f(16, 0.0, [(4, 128, 4), (4, 256, 8), (4, 384, 12)]),
        "LeViT-192" => f(32, 0.0, [(4, 192, 3), (4, 288, 5), (4, 384, 6)]),
        "LeViT-256" => f(32, 0.0, [(4, 256, 4), (4, 384, 6), (4, 512, 8)]),
        "LeViT-384" => f(32, 0.1, [(4, 384, 6), (4, 512, 9), (4, 768, 12)]),
        _ => None,
    }
}

/// Builds a pyramid spec; subsample heads are `C * 4 / (key_dim * shrink_value_ratio)`.
#[allow(clippy::too_many_arguments)]
pub fn pyramid(
    name: &str,
    img_size: usize,
    num_classes: usize,
    key_dim: usize,
    stages: &[(usize, usize, usize)],
    drop_path: f64,
    mlp_ratio: usize,
    value_ratio: usize,
    shrink_value_ratio: usize,
) -> ModelSpec {
    let mut grid = img_size / 16;
    let stage_specs: Vec<StageSpec> = stages
        .iter()
        .map(|&(depth, channels, heads)| {
            let s = StageSpec { depth, channels, heads, key_dim, grid: [grid, grid] };
            grid = halve(grid);
            s
        })
        .collect();
    let subsamples = stage_specs
        .windows(2)
        .map(|w| SubsampleSpec {
            heads: 4 * w[0].channels / (key_dim * shrink_value_ratio),
            key_dim,
            in_channels: w[0].channels,
            out_channels: w[1].channels,
        })
        .collect();
    ModelSpec {
        name: name.to_owned(),
        img_size,
        in_channels: 3,
        num_classes,
        drop_path,
        mlp_ratio,
        value_ratio,
        shrink_value_ratio,
        ablation: Ablation::default(),
        patch_embed: PatchEmbedSpec::Conv { channels: embed_schedule(3, stage_specs[0].channels) },
        stages: stage_specs,
        subsamples,
    }
}

/// Looks up a named preset at 224x224 with 1000 classes.
pub fn preset(name: &str) -> Result<ModelSpec> {
    let canonical =
        PRESET_NAMES.iter().find(|n| n.eq_ignore_ascii_case(name)).ok_or_else(|| LevitError::UnknownPreset {
            name: name.to_owned(),
            alternatives: PRESET_NAMES.iter().map(|s| s.to_string()).collect(),
        })?;
    let res = IMAGENET_RESOLUTION;
    let spec = match *canonical {
        "A1-straight" => {
            // single 14x14 stage, width C = 2ND
            let (depth, key_dim, heads) = (11, 19, 3);
            let channels = 2 * heads * key_dim;
            let mut spec =
                pyramid(canonical, res, IMAGENET_CLASSES, key_dim, &[(depth, channels, heads)], 0.0, 2, 2, 4);
            spec.patch_embed = PatchEmbedSpec::Conv { channels: embed_schedule(3, channels) };
            spec
        }
        "A6-classic-blocks" => {
            // LeViT-128S with V as wide as Q/K, C = N*D and 4x MLPs
            let key_dim = 30;
            pyramid(canonical, res, IMAGENET_CLASSES, key_dim, &[(2, 120, 4), (3, 180, 6), (4, 240, 8)], 0.0, 4, 1, 1)
        }
        other => {
            let f = family(other).expect("listed preset");
            pyramid(other, res, IMAGENET_CLASSES, f.key_dim, &f.stages, f.drop_path, 2, 2, 4)
        }
    };
    spec.validate()?;
    Ok(spec)
}

/// One-component-at-a-time ablations of LeViT-128S that only flip build flags.
pub fn ablation(id: &str) -> Result<ModelSpec> {
    let base = preset("LeViT-128S")?;
    let mut flags = Ablation::default();
    let mut spec = base.clone();
    match id.to_ascii_uppercase().as_str() {
        "A2" => spec.patch_embed = PatchEmbedSpec::Single,
        "A3" => flags.norm = NormKind::Layer,
        "A4" => flags.distillation = false,
        "A5" => flags.position = PositionKind::Absolute,
        "A7" => flags.attention_activation = false,
        _ => {
            return Err(LevitError::UnknownPreset {
                name: id.to_owned(),
                alternatives: ["A2", "A3", "A4", "A5", "A7"].iter().map(|s| s.to_string()).collect(),
            })
        }
    }
    spec.ablation = flags;
    spec.name = format!("{}-{}", base.name, id.to_ascii_uppercase());
    Ok(spec)
}

/// Three-stage desk-scale network for 32x32 inputs: C=(64,96,128), N=(2,3,4), D=16, depth 2.
pub fn toy(num_classes: usize) -> ModelSpec {
    pyramid("toy", 32, num_classes, 16, &[(2, 64, 2), (2, 96, 3), (2, 128, 4)], 0.0, 2, 2, 4)
}

/// Single stage, C=16, N=2, D=8 on an 8x8 grid (128x128 input).
pub fn tiny(num_classes: usize) -> ModelSpec {
    pyramid("tiny", 128, num_classes, 8, &[(1, 16, 2)], 0.0, 2, 2, 4)
}
