use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::PatchEmbed;
use crate::error::{LevitError, Result};

fn default_in_channels() -> usize {
    3
}
fn default_two() -> usize {
    2
}
fn default_four() -> usize {
    4
}
fn default_true() -> bool {
    true
}

/// A run of attention + MLP residual pairs at one resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    /// Number of (attention, MLP) pairs.
    pub depth: usize,
    pub channels: usize,
    pub heads: usize,
    /// Q/K dimension per head.
    pub key_dim: usize,
    /// Activation-map resolution (H, W) this stage runs at.
    pub grid: [usize; 2],
}

/// Shrinking attention between two stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsampleSpec {
    pub heads: usize,
    pub key_dim: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PatchEmbedSpec {
    /// Four stride-2 3x3 convolutions through the listed widths.
    Conv { channels: Vec<usize> },
    /// One 16x16 stride-16 convolution straight to the first stage width.
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// BN after every convolution.
    #[default]
    Batch,
    /// Pre-activation layer norm in front of every residual branch.
    Layer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PositionKind {
    /// Per-head offset bias inside every attention block.
    #[default]
    Bias,
    /// One learned embedding added after the patch embedding.
    Absolute,
}

/// Component switches; the defaults are the full architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    #[serde(default)]
    pub norm: NormKind,
    #[serde(default = "default_true")]
    pub distillation: bool,
    #[serde(default)]
    pub position: PositionKind,
    #[serde(default = "default_true")]
    pub attention_activation: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { norm: NormKind::Batch, distillation: true, position: PositionKind::Bias, attention_activation: true }
    }
}

/// Declarative description of a whole network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub img_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub drop_path: f64,
    /// Hidden/in width of the MLP blocks.
    #[serde(default = "default_two")]
    pub mlp_ratio: usize,
    /// Value width per head in regular attention, in units of `key_dim`.
    #[serde(default = "default_two")]
    pub value_ratio: usize,
    /// Value width per head in shrinking attention, in units of `key_dim`.
    #[serde(default = "default_four")]
    pub shrink_value_ratio: usize,
    #[serde(default)]
    pub ablation: Ablation,
    pub patch_embed: PatchEmbedSpec,
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub subsamples: Vec<SubsampleSpec>,
}

/// Grid after `k` ceil-halvings.
pub fn halve(extent: usize) -> usize {
    extent.div_ceil(2)
}

impl ModelSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| LevitError::SpecParse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn embed_channels(&self) -> Vec<usize> {
        match &self.patch_embed {
            PatchEmbedSpec::Conv { channels } => channels.clone(),
            PatchEmbedSpec::Single => vec![self.in_channels, self.stages.first().map_or(0, |s| s.channels)],
        }
    }

    pub fn first_grid(&self) -> usize {
        self.img_size / PatchEmbed::<f32>::REDUCTION
    }

    /// Same network at another input resolution (grids recomputed).
    pub fn with_resolution(&self, img_size: usize) -> Result<Self> {
        let mut spec = self.clone();
        spec.img_size = img_size;
        let mut grid = spec.first_grid();
        for stage in &mut spec.stages {
            stage.grid = [grid, grid];
            grid = halve(grid);
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_ablation(&self, ablation: Ablation) -> Self {
        Self { ablation, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: String, reason: String| Err(LevitError::config(field, reason));
        let reduction = PatchEmbed::<f32>::REDUCTION;
        if self.img_size == 0 || !self.img_size.is_multiple_of(reduction) {
            return fail(
                "img_size".into(),
                format!("must be a positive multiple of {reduction}, got {}", self.img_size),
            );
        }
        if self.in_channels == 0 {
            return fail("in_channels".into(), "must be positive".into());
        }
        if self.num_classes == 0 {
            return fail("num_classes".into(), "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return fail("drop_path".into(), format!("must lie in [0, 1), got {}", self.drop_path));
        }
        for (field, v) in [
            ("mlp_ratio", self.mlp_ratio),
            ("value_ratio", self.value_ratio),
            ("shrink_value_ratio", self.shrink_value_ratio),
        ] {
            if v == 0 {
                return fail(field.into(), "must be positive".into());
            }
        }
        if self.stages.is_empty() {
            return fail("stages".into(), "at least one stage is required".into());
        }
        if self.subsamples.len() + 1 != self.stages.len() {
            return fail(
                "subsamples".into(),
                format!(
                    "{} stages need {} subsamples, got {}",
                    self.stages.len(),
                    self.stages.len() - 1,
                    self.subsamples.len()
                ),
            );
        }
        if let PatchEmbedSpec::Conv { channels } = &self.patch_embed {
            if channels.len() != 5 {
                return fail(
                    "patch_embed.channels".into(),
                    format!("four stages need 5 widths, got {}", channels.len()),
                );
            }
            if channels[0] != self.in_channels {
                return fail("patch_embed.channels[0]".into(), format!("must equal in_channels {}", self.in_channels));
            }
            if channels[4] != self.stages[0].channels {
                return fail(
                    "patch_embed.channels[4]".into(),
                    format!("must equal stages[0].channels {}", self.stages[0].channels),
                );
            }
            if channels.contains(&0) {
                return fail("patch_embed.channels".into(), "widths must be positive".into());
            }
        }
        let mut grid = self.first_grid();
        for (i, s) in self.stages.iter().enumerate() {
            for (field, v) in [("depth", s.depth), ("channels", s.channels), ("heads", s.heads), ("key_dim", s.key_dim)]
            {
                if v == 0 {
                    return fail(format!("stages[{i}].{field}"), "must be positive".into());
                }
            }
            if s.grid != [grid, grid] {
                return fail(
                    format!("stages[{i}].grid"),
                    format!("expected [{grid}, {grid}] at {}px input, got {:?}", self.img_size, s.grid),
                );
            }
            grid = halve(grid);
        }
        for (i, sub) in self.subsamples.iter().enumerate() {
            let (before, after) = (&self.stages[i], &self.stages[i + 1]);
            if sub.in_channels != before.channels {
                return fail(
                    format!("subsamples[{i}].in_channels"),
                    format!("must equal stages[{i}].channels {}", before.channels),
                );
            }
            if sub.out_channels != after.channels {
                return fail(
                    format!("subsamples[{i}].out_channels"),
                    format!("must equal stages[{}].channels {}", i + 1, after.channels),
                );
            }
            if sub.out_channels <= sub.in_channels {
                return fail(format!("subsamples[{i}].out_channels"), "shrinking attention must widen the map".into());
            }
            if sub.key_dim == 0 {
                return fail(format!("subsamples[{i}].key_dim"), "must be positive".into());
            }
            // value channels of the shrinking block total 4C so no information is dropped
            if sub.heads * sub.key_dim * self.shrink_value_ratio != 4 * sub.in_channels {
                return fail(
                    format!("subsamples[{i}].heads"),
                    format!(
                        "heads * key_dim * shrink_value_ratio must equal 4 * in_channels ({} * {} * {} != {})",
                        sub.heads,
                        sub.key_dim,
                        self.shrink_value_ratio,
                        4 * sub.in_channels
                    ),
                );
            }
        }
        Ok(())
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({}px", self.name, self.img_size)?;
        for s in &self.stages {
            write!(f, ", {}x[C={} N={} D={}]@{}x{}", s.depth, s.channels, s.heads, s.key_dim, s.grid[0], s.grid[1])?;
        }
        write!(f, ")")
    }
}
