//! Subcommands of the `levit` binary. Each command takes its parsed
//! arguments and writes tabular output as CSV to the given writer, so the
//! commands can be driven from tests without spawning a process.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use levit_core::blocks::{AttentionBiasTable, AttentionKind};
use levit_core::fusion::{self, fuse_model, parity, WeightArchive};
use levit_core::model::{ablation, count_spec, toy, Block};
use levit_core::profile::{self, BenchRecord, TimingConfig, DEFAULT_REPS, DEFAULT_WARMUP};
use levit_core::tensor::DType;
use levit_core::trainer::{self, RunStatus, SyntheticDataset, TrainConfig, TrainReport};
use levit_core::verify::{self, CheckResult};
use levit_core::{preset, Element, LevitError, Model, ModelSpec};

#[derive(Debug, Parser)]
#[command(
    name = "levit",
    version,
    about = "LeViT model family: cost summaries, fusion, toy training, timing and checks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-block (or per-layer) MACs, parameters and output shapes.
    Summary {
        #[command(flatten)]
        model: ModelArgs,
        /// One row per primitive layer instead of per block.
        #[arg(long)]
        layers: bool,
        /// Aligned text table instead of CSV.
        #[arg(long, conflicts_with = "layers")]
        pretty: bool,
    },
    /// Single-threaded forward timings: unfused vs fused, or the components of one block.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = DEFAULT_REPS)]
        reps: usize,
        #[arg(long, default_value_t = DEFAULT_WARMUP)]
        warmup: usize,
        /// Time the parts of the first attention + MLP pair.
        #[arg(long)]
        decompose: bool,
    },
    /// SGD on the synthetic dataset; prints the loss curve as CSV.
    Train {
        /// TOML file with a `[train]` table and optional `[model]` and `[data]` tables.
        #[arg(long)]
        config: PathBuf,
        /// Write the curve here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Save the trained weights as an archive.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Folds every batch norm into the preceding convolution or linear layer.
    Fuse {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Random images used to report the forward difference.
        #[arg(long, default_value_t = 4)]
        check_images: usize,
    },
    /// Runs the property suite; exits nonzero if any check fails.
    Verify {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        images: usize,
    },
    /// Writes every attention bias table and its expanded upper-left row as CSV grids.
    ExportBias {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Builds a freshly initialised model and saves it as an archive.
    Init {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replace norm statistics, biases and bias tables with random values.
        #[arg(long)]
        randomize: bool,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        dtype: Precision,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Where the architecture comes from.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Preset name (LeViT-128S ... LeViT-384, A1-straight, A6-classic-blocks)
    /// or a LeViT-128S ablation id (A2, A3, A4, A5, A7).
    #[arg(long, group = "source", required_unless_present = "spec")]
    pub model: Option<String>,
    /// TOML model spec file.
    #[arg(long, group = "source")]
    pub spec: Option<PathBuf>,
    /// Override the input resolution.
    #[arg(long)]
    pub resolution: Option<usize>,
}

impl ModelArgs {
    pub fn resolve(&self) -> Result<ModelSpec> {
        let spec = match (&self.model, &self.spec) {
            (Some(name), _) => preset(name).or_else(|e| ablation(name).map_err(|_| e))?,
            (None, Some(path)) => ModelSpec::load(path).with_context(|| format!("reading spec {}", path.display()))?,
            (None, None) => bail!("either --model or --spec is required"),
        };
        match self.resolution {
            Some(r) => Ok(spec.with_resolution(r)?),
            None => Ok(spec),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

/// Writer for `path`, or stdout when absent.
pub fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

pub fn summary(spec: &ModelSpec, layers: bool, pretty: bool, out: &mut dyn Write) -> Result<()> {
    if layers {
        let model: Model<f32> = Model::build(spec, 0)?;
        model.cost_report().write_layers_csv(out)?;
    } else if pretty {
        out.write_all(count_spec(spec)?.render().as_bytes())?;
    } else {
        count_spec(spec)?.write_csv(out)?;
    }
    Ok(())
}

/// Rows for `--decompose`: the seven components, then the whole pair.
/// Otherwise one row each for the unfused and the fused model.
pub fn bench(spec: &ModelSpec, batch: usize, cfg: TimingConfig, decompose: bool) -> Result<Vec<BenchRecord>> {
    if batch == 0 {
        bail!("--batch must be positive");
    }
    let model: Model<f32> = Model::build(spec, 0)?;
    if decompose {
        let (attn, mlp) = profile::first_pair(&model)?;
        let d = profile::decompose_pair(attn, mlp, batch, cfg)?;
        let mut rows = d.components;
        rows.push(d.whole);
        return Ok(rows);
    }
    let fused = fuse_model(model.clone())?.into_model();
    Ok(profile::bench_models(&[("unfused", &model), ("fused", &fused)], batch, cfg)?)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub samples: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { samples: 512, seed: 0 }
    }
}

/// Contents of a `train --config` file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub train: TrainConfig,
    /// Defaults to the four-class toy spec.
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn spec(&self) -> ModelSpec {
        self.model.clone().unwrap_or_else(|| toy(4))
    }
}

/// Trains from scratch; the model is initialised from the training seed.
pub fn train(config: &RunConfig) -> Result<(Model<f32>, TrainReport)> {
    let spec = config.spec();
    let data = SyntheticDataset::new(spec.num_classes, config.data.samples, spec.img_size, config.data.seed)?;
    let mut model: Model<f32> = Model::build(&spec, config.train.seed)?;
    let report = trainer::train(&mut model, &data, &config.train)?;
    Ok((model, report))
}

pub fn status_line(report: &TrainReport) -> String {
    match &report.status {
        RunStatus::Completed => {
            format!("final accuracy {:.4}, final loss {:.4}", report.final_accuracy, report.final_loss)
        }
        other => format!("training stopped: {other:?}"),
    }
}

fn archive_dtype(archive: &WeightArchive) -> DType {
    archive.entries.first().map_or(DType::F32, |e| e.dtype)
}

fn fuse_typed<E: Element>(archive: &WeightArchive, out: &Path, check_images: usize) -> Result<Option<f64>> {
    let model: Model<E> = archive.into_model()?;
    let outcome = fuse_model(model.clone())?;
    let already = outcome.was_already_fused();
    let fused = outcome.into_model();
    fusion::save(&fused, out).with_context(|| format!("writing {}", out.display()))?;
    if already || check_images == 0 {
        return Ok(None);
    }
    let spec = model.spec();
    let x = profile::random_tensor(&[check_images, spec.in_channels, spec.img_size, spec.img_size], 1);
    Ok(Some(parity(&model, &fused, &x)?))
}

/// Fuses an archive; returns the largest logit difference on random images
/// (`None` when the input was already fused).
pub fn fuse(weights: &Path, out: &Path, check_images: usize) -> Result<Option<f64>> {
    let archive = fusion::load_archive(weights).with_context(|| format!("reading {}", weights.display()))?;
    match archive_dtype(&archive) {
        DType::F32 => fuse_typed::<f32>(&archive, out, check_images),
        DType::F64 => fuse_typed::<f64>(&archive, out, check_images),
    }
}

pub fn verify(spec: &ModelSpec, seed: u64, images: usize, out: &mut dyn Write) -> Result<Vec<CheckResult>> {
    let results = verify::run_suite(spec, seed, images)?;
    verify::write_results(&results, out)?;
    Ok(results)
}

pub fn init(spec: &ModelSpec, seed: u64, randomize: bool, dtype: Precision, out: &Path) -> Result<()> {
    fn build<E: Element>(spec: &ModelSpec, seed: u64, randomize: bool, out: &Path) -> Result<()> {
        let mut model: Model<E> = Model::build(spec, seed)?;
        if randomize {
            model.randomize_statistics(seed.wrapping_add(1));
        }
        fusion::save(&model, out).with_context(|| format!("writing {}", out.display()))?;
        Ok(())
    }
    match dtype {
        Precision::F32 => build::<f32>(spec, seed, randomize, out),
        Precision::F64 => build::<f64>(spec, seed, randomize, out),
    }
}

/// Writes a row-major `rows x cols` grid as CSV; the header names the columns.
pub fn write_grid(path: &Path, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    let header: Vec<String> = (0..cols).map(|j| format!("col{j}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for row in values.chunks(cols).take(rows) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a grid written by [`write_grid`].
pub fn read_grid(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let width = lines.next().context("empty grid file")?.split(',').count();
    lines
        .map(|line| {
            let row: Vec<f64> = line.split(',').map(str::parse).collect::<std::result::Result<_, _>>()?;
            if row.len() != width {
                bail!("row of {} cells under a {width}-column header", row.len());
            }
            Ok(row)
        })
        .collect()
}

/// Files written for one head of one block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportedHead {
    pub block: String,
    pub head: usize,
    /// Offset table `(|dy|, |dx|)`, the key grid's shape.
    pub offsets: PathBuf,
    /// Bias from the upper-left query to every key, laid out on the key grid.
    pub first_row: PathBuf,
}

fn table_values<E: Element>(archive: &WeightArchive, name: &str) -> Result<Vec<f64>> {
    let entry = archive.entry(name).ok_or_else(|| LevitError::MissingEntry(name.to_owned()))?;
    Ok(entry.to_tensor::<E>()?.data().iter().map(|v| v.as_f64()).collect())
}

pub fn export_bias(weights: &Path, dir: &Path) -> Result<Vec<ExportedHead>> {
    let archive = fusion::load_archive(weights).with_context(|| format!("reading {}", weights.display()))?;
    // the architecture says which tables must be present
    let skeleton: Model<f32> = Model::build(&archive.meta.model, 0)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for block in skeleton.blocks() {
        let Block::Attention(attn) = block else { continue };
        let Some(table) = &attn.bias else { continue };
        let values = match archive_dtype(&archive) {
            DType::F32 => table_values::<f32>(&archive, &table.name)?,
            DType::F64 => table_values::<f64>(&archive, &table.name)?,
        };
        let stride = if attn.kind == AttentionKind::Shrinking { 2 } else { 1 };
        let shape = table.values.shape().to_vec();
        let loaded = AttentionBiasTable::from_values(&table.name, levit_core::Tensor::new(&shape, values)?, stride)?;
        let (h, w) = loaded.grid();
        let expanded = loaded.expanded();
        let queries = expanded.shape()[1];
        for head in 0..loaded.heads() {
            let offsets = dir.join(format!("{}.head{head}.offsets.csv", attn.name));
            let first_row = dir.join(format!("{}.head{head}.row0.csv", attn.name));
            write_grid(&offsets, h, w, &loaded.values.data()[head * h * w..(head + 1) * h * w])?;
            let start = head * queries * h * w;
            write_grid(&first_row, h, w, &expanded.data()[start..start + h * w])?;
            written.push(ExportedHead { block: attn.name.clone(), head, offsets, first_row });
        }
    }
    if written.is_empty() {
        bail!("{} has no attention bias tables (absolute position embedding?)", archive.meta.model.name);
    }
    Ok(written)
}

/// Runs one parsed command. `Ok(false)` means the command ran but reported failure.
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Summary { model, layers, pretty } => {
            summary(&model.resolve()?, layers, pretty, &mut output(None)?)?;
        }
        Command::Bench { model, batch, reps, warmup, decompose } => {
            let cfg = TimingConfig::new(reps, warmup)?;
            let spec = model.resolve()?;
            match profile::pin_current_thread() {
                Some(cpu) => eprintln!("pinned to cpu {cpu}"),
                None => eprintln!("thread pinning unavailable; timings are unpinned"),
            }
            let rows = bench(&spec, batch, cfg, decompose)?;
            profile::write_records(&rows, output(None)?)?;
        }
        Command::Train { config, out, save } => {
            let config = RunConfig::load(&config)?;
            let (model, report) = train(&config)?;
            report.write_csv(output(out.as_deref())?)?;
            if let Some(path) = save {
                fusion::save(&model, &path).with_context(|| format!("writing {}", path.display()))?;
            }
            eprintln!("{}", status_line(&report));
            return Ok(report.succeeded());
        }
        Command::Fuse { weights, out, check_images } => match fuse(&weights, &out, check_images)? {
            Some(gap) => eprintln!("fused; max abs logit difference on {check_images} random images: {gap:.3e}"),
            None => eprintln!("nothing to fuse; input already fused or not checked"),
        },
        Command::Verify { model, seed, images } => {
            let results = verify(&model.resolve()?, seed, images, &mut output(None)?)?;
            return Ok(verify::all_passed(&results));
        }
        Command::ExportBias { weights, out } => {
            let written = export_bias(&weights, &out)?;
            eprintln!("wrote {} head tables to {}", written.len(), out.display());
        }
        Command::Init { model, seed, randomize, dtype, out } => {
            init(&model.resolve()?, seed, randomize, dtype, &out)?;
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn argument_definitions_are_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn model_source_is_required() {
        assert!(Cli::try_parse_from(["levit", "summary"]).is_err());
        assert!(Cli::try_parse_from(["levit", "summary", "--model", "x", "--spec", "y"]).is_err());
        assert!(Cli::try_parse_from(["levit", "summary", "--model", "LeViT-256"]).is_ok());
    }

    #[test]
    fn run_config_defaults_to_toy() {
        let config: RunConfig = toml::from_str("[train]\nsteps = 3\n").unwrap();
        assert_eq!(config.train.steps, 3);
        assert_eq!(config.spec(), toy(4));
        assert_eq!(config.data.samples, 512);
        assert!(toml::from_str::<RunConfig>("[train]\nstep = 3\n").is_err());
    }

    #[test]
    fn grids_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        write_grid(&path, 2, 3, &[1.0, -2.5, 0.0, 3.25, 1e-9, 7.0]).unwrap();
        assert_eq!(read_grid(&path).unwrap(), vec![vec![1.0, -2.5, 0.0], vec![3.25, 1e-9, 7.0]]);
    }
}
