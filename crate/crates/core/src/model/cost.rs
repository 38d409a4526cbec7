//! Multiply-accumulate and parameter accounting.
//!
//! Two independent routes produce a [`CostReport`]: [`count_spec`] works from
//! the declarative spec with closed-form per-block formulas, and
//! [`count_model`] walks the built layers one by one. Batch norm, layer norm,
//! activations, softmax, bias addition and pooling count as zero MACs.

use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::net::{Block, Model};
use super::spec::{ModelSpec, NormKind, PatchEmbedSpec, PositionKind};
use crate::blocks::{Attention, AttentionKind, Classifier, ConvBn, FeatureNorm, Mlp, Params};
use crate::error::{LevitError, Result};
use crate::tensor::{format_shape, ops, Element};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Norm,
    Activation,
    Product,
    Bias,
    Softmax,
    Embedding,
    Pool,
    Linear,
}

/// Cost of one row: a block in the summary or a layer in the detailed view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRecord {
    pub name: String,
    pub macs: u64,
    pub params: u64,
    /// Per-image output shape, e.g. `[256, 14, 14]`.
    pub out_shape: Vec<usize>,
}

/// One primitive layer inside a block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub block: String,
    pub kind: LayerKind,
    pub record: CostRecord,
}

/// Per-block costs of a model for one image, with the distillation head's
/// share kept apart so both parameter conventions can be reported.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub model: String,
    pub blocks: Vec<CostRecord>,
    /// Empty when counted from the spec alone.
    pub layers: Vec<LayerCost>,
    pub distillation_macs: u64,
    pub distillation_params: u64,
}

pub const EMBED_BLOCK: &str = "patch_embed";
pub const HEAD_BLOCK: &str = "head";

impl CostReport {
    pub fn total_macs(&self) -> u64 {
        self.blocks.iter().map(|r| r.macs).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.blocks.iter().map(|r| r.params).sum()
    }

    /// Totals without the distillation classifier.
    pub fn single_head_macs(&self) -> u64 {
        self.total_macs() - self.distillation_macs
    }

    pub fn single_head_params(&self) -> u64 {
        self.total_params() - self.distillation_params
    }

    pub fn block(&self, name: &str) -> Option<&CostRecord> {
        self.blocks.iter().find(|r| r.name == name)
    }

    pub fn layers_of_kind(&self, kind: LayerKind) -> impl Iterator<Item = &LayerCost> {
        self.layers.iter().filter(move |l| l.kind == kind)
    }

    /// Block rows followed by `total` and `total_single_head` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, self.blocks.iter(), Some(self))
    }

    /// Every primitive layer, numbered in execution order.
    pub fn write_layers_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, self.layers.iter().map(|l| &l.record), None)
    }

    /// Parses the output of [`CostReport::write_csv`], checking that the
    /// total rows agree with the block rows.
    pub fn read_csv<R: Read>(model: &str, input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let header = reader.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != CSV_HEADER {
            return Err(LevitError::Malformed { what: "cost csv", reason: format!("header {header:?}") });
        }
        let mut blocks = Vec::new();
        let mut totals = Vec::new();
        for row in reader.records() {
            let row = row?;
            let num = |i: usize| -> Result<u64> {
                row[i].parse().map_err(|_| LevitError::Malformed {
                    what: "cost csv",
                    reason: format!("bad number {:?}", &row[i]),
                })
            };
            let record = CostRecord {
                name: row[1].to_owned(),
                macs: num(2)?,
                params: num(3)?,
                out_shape: parse_shape(&row[4])?,
            };
            if row[0].is_empty() {
                totals.push(record);
            } else {
                blocks.push(record);
            }
        }
        let [total, single] = &totals[..] else {
            return Err(LevitError::Malformed {
                what: "cost csv",
                reason: format!("expected 2 total rows, got {}", totals.len()),
            });
        };
        let report = CostReport {
            model: model.to_owned(),
            blocks,
            layers: Vec::new(),
            distillation_macs: total.macs.saturating_sub(single.macs),
            distillation_params: total.params.saturating_sub(single.params),
        };
        if report.total_macs() != total.macs || report.total_params() != total.params {
            return Err(LevitError::Malformed {
                what: "cost csv",
                reason: "total row disagrees with block rows".into(),
            });
        }
        Ok(report)
    }

    /// Human-readable table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<4} {:<22} {:>14} {:>12} {:>14}", "#", "block", "MACs", "params", "output");
        for (i, r) in self.blocks.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:<4} {:<22} {:>14} {:>12} {:>14}",
                i,
                r.name,
                r.macs,
                r.params,
                format_shape(&r.out_shape)
            );
        }
        let m = |v: u64| v as f64 / 1e6;
        let _ = writeln!(
            s,
            "total: {:.1} M MACs, {:.3} M params (both heads); {:.1} M MACs, {:.3} M params (classification head only)",
            m(self.total_macs()),
            m(self.total_params()),
            m(self.single_head_macs()),
            m(self.single_head_params())
        );
        s
    }
}

const CSV_HEADER: [&str; 5] = ["layer", "name", "macs", "params", "out_shape"];

fn write_rows<'a, W: Write>(
    out: W,
    rows: impl Iterator<Item = &'a CostRecord>,
    totals: Option<&CostReport>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for (i, r) in rows.enumerate() {
        w.write_record([
            i.to_string(),
            r.name.clone(),
            r.macs.to_string(),
            r.params.to_string(),
            format_shape(&r.out_shape),
        ])?;
    }
    if let Some(report) = totals {
        let last = report.blocks.last().map(|r| format_shape(&r.out_shape)).unwrap_or_default();
        for (name, macs, params) in [
            ("total", report.total_macs(), report.total_params()),
            ("total_single_head", report.single_head_macs(), report.single_head_params()),
        ] {
            w.write_record([String::new(), name.to_owned(), macs.to_string(), params.to_string(), last.clone()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|d| d.parse().map_err(|_| LevitError::Malformed { what: "cost csv", reason: format!("bad shape {s:?}") }))
        .collect()
}

// ---------------------------------------------------------------------------
// closed-form route

struct Norm {
    kind: NormKind,
}

impl Norm {
    /// Parameters attached to a conv producing `c` channels: BN affine or conv bias.
    fn after_conv(&self, c: usize) -> usize {
        match self.kind {
            NormKind::Batch => 2 * c,
            NormKind::Layer => c,
        }
    }

    /// Pre-norm in front of a residual branch.
    fn pre(&self, c: usize) -> usize {
        match self.kind {
            NormKind::Batch => 0,
            NormKind::Layer => 2 * c,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_formula(
    norm: &Norm,
    c_in: usize,
    c_out: usize,
    heads: usize,
    d: usize,
    vd: usize,
    grid: usize,
    stride: usize,
    bias: bool,
) -> (usize, usize) {
    let hw = grid * grid;
    let hwq = grid.div_ceil(stride).pow(2);
    let (nd, nv) = (heads * d, heads * vd);
    let macs = c_in * nd * hwq + c_in * nd * hw + c_in * nv * hw + heads * hwq * hw * (d + vd) + nv * c_out * hwq;
    let params = norm.pre(c_in)
        + 2 * (c_in * nd + norm.after_conv(nd))
        + c_in * nv
        + norm.after_conv(nv)
        + nv * c_out
        + norm.after_conv(c_out)
        + if bias { heads * hw } else { 0 };
    (macs, params)
}

fn mlp_formula(norm: &Norm, c: usize, ratio: usize, grid: usize) -> (usize, usize) {
    let h = c * ratio;
    (2 * c * h * grid * grid, norm.pre(c) + 2 * c * h + norm.after_conv(h) + norm.after_conv(c))
}

/// Counts a spec analytically, without building it.
pub fn count_spec(spec: &ModelSpec) -> Result<CostReport> {
    spec.validate()?;
    let norm = Norm { kind: spec.ablation.norm };
    let bias = spec.ablation.position == PositionKind::Bias;
    let c0 = spec.stages[0].channels;
    let g0 = spec.first_grid();
    let rec = |name: String, macs: usize, params: usize, shape: Vec<usize>| CostRecord {
        name,
        macs: macs as u64,
        params: params as u64,
        out_shape: shape,
    };
    let mut blocks = Vec::new();

    let (mut macs, mut params) = (0, 0);
    match &spec.patch_embed {
        PatchEmbedSpec::Conv { channels } => {
            let mut extent = spec.img_size;
            for pair in channels.windows(2) {
                extent /= 2;
                macs += pair[0] * pair[1] * 9 * extent * extent;
                params += pair[0] * pair[1] * 9 + norm.after_conv(pair[1]);
            }
        }
        PatchEmbedSpec::Single => {
            macs += spec.in_channels * c0 * 256 * g0 * g0;
            params += spec.in_channels * c0 * 256 + norm.after_conv(c0);
        }
    }
    if !bias {
        params += c0 * g0 * g0;
    }
    blocks.push(rec(EMBED_BLOCK.into(), macs, params, vec![c0, g0, g0]));

    for (s, stage) in spec.stages.iter().enumerate() {
        let g = stage.grid[0];
        let c = stage.channels;
        if s > 0 {
            let sub = &spec.subsamples[s - 1];
            let prev = spec.stages[s - 1].grid[0];
            let vd = spec.shrink_value_ratio * sub.key_dim;
            let (m, p) = attention_formula(&norm, sub.in_channels, c, sub.heads, sub.key_dim, vd, prev, 2, bias);
            blocks.push(rec(format!("subsample{}.attn", s - 1), m, p, vec![c, g, g]));
            let (m, p) = mlp_formula(&norm, c, spec.mlp_ratio, g);
            blocks.push(rec(format!("subsample{}.mlp", s - 1), m, p, vec![c, g, g]));
        }
        for j in 0..stage.depth {
            let vd = spec.value_ratio * stage.key_dim;
            let (m, p) = attention_formula(&norm, c, c, stage.heads, stage.key_dim, vd, g, 1, bias);
            blocks.push(rec(format!("stage{s}.{j}.attn"), m, p, vec![c, g, g]));
            let (m, p) = mlp_formula(&norm, c, spec.mlp_ratio, g);
            blocks.push(rec(format!("stage{s}.{j}.mlp"), m, p, vec![c, g, g]));
        }
    }

    let c = spec.stages.last().expect("validated").channels;
    let k = spec.num_classes;
    let one_head = (c * k, 2 * c + c * k + k);
    let heads = if spec.ablation.distillation { 2 } else { 1 };
    blocks.push(rec(HEAD_BLOCK.into(), heads * one_head.0, heads * one_head.1, vec![k]));
    let dist = if spec.ablation.distillation { one_head } else { (0, 0) };
    Ok(CostReport {
        model: spec.name.clone(),
        blocks,
        layers: Vec::new(),
        distillation_macs: dist.0 as u64,
        distillation_params: dist.1 as u64,
    })
}

// ---------------------------------------------------------------------------
// layer-walking route

struct Walker {
    layers: Vec<LayerCost>,
    block: String,
}

impl Walker {
    fn push(&mut self, name: String, kind: LayerKind, macs: usize, params: usize, out_shape: Vec<usize>) {
        let record = CostRecord { name, macs: macs as u64, params: params as u64, out_shape };
        self.layers.push(LayerCost { block: self.block.clone(), kind, record });
    }

    fn conv<E: Element>(&mut self, conv: &ConvBn<E>, shape: [usize; 3]) -> [usize; 3] {
        let (kh, kw) = conv.kernel();
        let ho =
            ops::conv_out_extent(shape[1], kh, conv.stride, conv.padding).expect("built convs have positive stride");
        let wo =
            ops::conv_out_extent(shape[2], kw, conv.stride, conv.padding).expect("built convs have positive stride");
        let cout = conv.out_channels();
        let out = [cout, ho, wo];
        let macs = ops::conv2d_macs(&[1, shape[0], shape[1], shape[2]], conv.weight.shape(), conv.stride, conv.padding)
            .expect("built convs have positive stride");
        let params = conv.weight.numel() + conv.bias.as_ref().map_or(0, |b| b.numel());
        self.push(format!("{}.conv", conv.name), LayerKind::Conv, macs as usize, params, out.to_vec());
        if let Some(bn) = &conv.norm {
            self.push(bn.name.clone(), LayerKind::Norm, 0, bn.param_count(), out.to_vec());
        }
        out
    }

    fn activation(&mut self, name: String, shape: [usize; 3]) {
        self.push(name, LayerKind::Activation, 0, 0, shape.to_vec());
    }

    fn attention<E: Element>(&mut self, a: &Attention<E>, shape: [usize; 3]) -> [usize; 3] {
        if let Some(n) = &a.pre_norm {
            self.push(n.name.clone(), LayerKind::Norm, 0, n.param_count(), shape.to_vec());
        }
        let (hq, wq) = a.query_grid();
        let query_shape = match a.kind {
            AttentionKind::Regular => shape,
            AttentionKind::Shrinking => [shape[0], hq, wq],
        };
        self.conv(&a.q, query_shape);
        self.conv(&a.k, shape);
        self.conv(&a.v, shape);
        let (nq, nk) = (hq * wq, shape[1] * shape[2]);
        let n = a.heads;
        self.push(format!("{}.qk", a.name), LayerKind::Product, n * nq * nk * a.key_dim, 0, vec![n, nq, nk]);
        if let Some(t) = &a.bias {
            self.push(t.name.clone(), LayerKind::Bias, 0, t.param_count(), vec![n, nq, nk]);
        }
        self.push(format!("{}.softmax", a.name), LayerKind::Softmax, 0, 0, vec![n, nq, nk]);
        let context = [n * a.value_dim, hq, wq];
        self.push(format!("{}.av", a.name), LayerKind::Product, n * nq * nk * a.value_dim, 0, context.to_vec());
        if a.activation {
            self.activation(format!("{}.act", a.name), context);
        }
        self.conv(&a.proj, context)
    }

    fn mlp<E: Element>(&mut self, m: &Mlp<E>, shape: [usize; 3]) -> [usize; 3] {
        if let Some(n) = &m.pre_norm {
            self.push(n.name.clone(), LayerKind::Norm, 0, n.param_count(), shape.to_vec());
        }
        let hidden = self.conv(&m.expand, shape);
        self.activation(format!("{}.act", m.name), hidden);
        self.conv(&m.contract, hidden)
    }

    fn classifier<E: Element>(&mut self, c: &Classifier<E>) -> usize {
        let start = self.layers.len();
        match &c.norm {
            Some(FeatureNorm::Batch(bn)) => {
                self.push(bn.name.clone(), LayerKind::Norm, 0, bn.param_count(), vec![c.features()])
            }
            Some(FeatureNorm::Layer(ln)) => {
                self.push(ln.name.clone(), LayerKind::Norm, 0, ln.param_count(), vec![c.features()])
            }
            None => {}
        }
        let (k, f) = (c.classes(), c.features());
        self.push(format!("{}.linear", c.name), LayerKind::Linear, k * f, c.weight.numel() + c.bias.numel(), vec![k]);
        start
    }
}

/// Counts a built (possibly fused) model layer by layer.
pub fn count_model<E: Element>(model: &Model<E>) -> CostReport {
    let spec = model.spec();
    let mut walker = Walker { layers: Vec::new(), block: EMBED_BLOCK.into() };
    let mut shape = [spec.in_channels, spec.img_size, spec.img_size];
    for (i, conv) in model.patch_embed.convs.iter().enumerate() {
        shape = walker.conv(conv, shape);
        walker.activation(format!("{EMBED_BLOCK}.{i}.act"), shape);
    }
    if let Some(pos) = &model.pos_embed {
        walker.push(super::net::POS_EMBED.into(), LayerKind::Embedding, 0, pos.numel(), shape.to_vec());
    }
    for block in model.blocks() {
        walker.block = block.name().to_owned();
        shape = match block {
            Block::Attention(a) => walker.attention(a, shape),
            Block::Mlp(m) => walker.mlp(m, shape),
        };
    }
    walker.block = HEAD_BLOCK.into();
    walker.push(format!("{HEAD_BLOCK}.pool"), LayerKind::Pool, 0, 0, vec![shape[0]]);
    walker.classifier(&model.head.classification);
    let (mut dist_macs, mut dist_params) = (0, 0);
    if let Some(d) = &model.head.distillation {
        let start = walker.classifier(d);
        for l in &walker.layers[start..] {
            dist_macs += l.record.macs;
            dist_params += l.record.params;
        }
    }

    // aggregate consecutive layers of the same block
    let mut blocks: Vec<CostRecord> = Vec::new();
    for layer in &walker.layers {
        match blocks.last_mut() {
            Some(last) if last.name == layer.block => {
                last.macs += layer.record.macs;
                last.params += layer.record.params;
                last.out_shape = layer.record.out_shape.clone();
            }
            _ => blocks.push(CostRecord {
                name: layer.block.clone(),
                macs: layer.record.macs,
                params: layer.record.params,
                out_shape: layer.record.out_shape.clone(),
            }),
        }
    }
    // block rows report the block's output map; attention sub-layers end on the projection
    if let Some(head) = blocks.last_mut() {
        head.out_shape = vec![spec.num_classes];
    }
    CostReport {
        model: spec.name.clone(),
        blocks,
        layers: walker.layers,
        distillation_macs: dist_macs,
        distillation_params: dist_params,
    }
}

impl<E: Element> Model<E> {
    pub fn cost_report(&self) -> CostReport {
        count_model(self)
    }
}
