use super::{drop_path, AttentionBiasTable, ConvBn, Ctx, Init, LayerNorm, ParamKind, Params};
use crate::error::{LevitError, Result};
use crate::tensor::{ops, Element, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// Residual block at constant resolution.
    Regular,
    /// Queries on the stride-2 subsampled grid, no residual.
    Shrinking,
}

/// Construction parameters for an [`Attention`] block.
#[derive(Debug, Clone)]
pub struct AttentionConfig {
    pub name: String,
    pub kind: AttentionKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub heads: usize,
    pub key_dim: usize,
    /// Value channels per head (2D regular, 4D shrinking in LeViT).
    pub value_dim: usize,
    /// Input grid (H, W).
    pub grid: (usize, usize),
    pub bias_table: bool,
    pub activation: bool,
    pub layer_norm: bool,
    pub drop_path: f64,
}

/// Multi-head attention with per-head offset bias, pointwise Q/K/V maps, a
/// Hardswish on the per-head context and a pointwise output projection.
#[derive(Debug, Clone)]
pub struct Attention<E: Element> {
    pub name: String,
    pub kind: AttentionKind,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub grid: (usize, usize),
    pub scale: f64,
    pub activation: bool,
    pub drop_path: f64,
    pub pre_norm: Option<LayerNorm<E>>,
    pub q: ConvBn<E>,
    pub k: ConvBn<E>,
    pub v: ConvBn<E>,
    pub proj: ConvBn<E>,
    pub bias: Option<AttentionBiasTable<E>>,
}

impl<E: Element> Attention<E> {
    pub fn new(cfg: &AttentionConfig, init: &mut Init) -> Result<Self> {
        if cfg.kind == AttentionKind::Regular && cfg.in_channels != cfg.out_channels {
            return Err(LevitError::config(
                format!("{}.out_channels", cfg.name),
                "a residual attention block keeps its channel count",
            ));
        }
        let name = &cfg.name;
        let bn = |g: f64| if cfg.layer_norm { None } else { Some(g) };
        // the projection BN feeding a residual add starts at zero
        let proj_gamma = match cfg.kind {
            AttentionKind::Regular => 0.0,
            AttentionKind::Shrinking => 1.0,
        };
        let qk = cfg.heads * cfg.key_dim;
        let vd = cfg.heads * cfg.value_dim;
        let q = ConvBn::pointwise(format!("{name}.q"), cfg.in_channels, qk, bn(1.0), init);
        let k = ConvBn::pointwise(format!("{name}.k"), cfg.in_channels, qk, bn(1.0), init);
        let v = ConvBn::pointwise(format!("{name}.v"), cfg.in_channels, vd, bn(1.0), init);
        let proj = ConvBn::pointwise(format!("{name}.proj"), vd, cfg.out_channels, bn(proj_gamma), init);
        let stride = match cfg.kind {
            AttentionKind::Regular => 1,
            AttentionKind::Shrinking => 2,
        };
        let bias = cfg
            .bias_table
            .then(|| AttentionBiasTable::zeros(format!("{name}.bias_table"), cfg.heads, cfg.grid, stride));
        Ok(Self {
            name: cfg.name.clone(),
            kind: cfg.kind,
            heads: cfg.heads,
            key_dim: cfg.key_dim,
            value_dim: cfg.value_dim,
            grid: cfg.grid,
            scale: 1.0 / (cfg.key_dim as f64).sqrt(),
            activation: cfg.activation,
            drop_path: cfg.drop_path,
            pre_norm: cfg.layer_norm.then(|| LayerNorm::new(format!("{name}.norm"), cfg.in_channels)),
            q,
            k,
            v,
            proj,
            bias,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.k.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.proj.out_channels()
    }

    pub fn query_stride(&self) -> usize {
        match self.kind {
            AttentionKind::Regular => 1,
            AttentionKind::Shrinking => 2,
        }
    }

    pub fn query_grid(&self) -> (usize, usize) {
        let s = self.query_stride();
        (self.grid.0.div_ceil(s), self.grid.1.div_ceil(s))
    }

    fn check_input(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        let [b, c, h, w] = shape[..] else {
            return Err(LevitError::shape("attention", "BCHW input", format!("{shape:?}")));
        };
        if c != self.in_channels() {
            return Err(LevitError::shape("attention", format!("{} channels", self.in_channels()), c));
        }
        if (h, w) != self.grid {
            return Err(LevitError::config(
                format!("{}.grid", self.name),
                format!("block serves a {:?} grid, input is {h}x{w}", self.grid),
            ));
        }
        Ok((b, h, w))
    }

    /// Full block: residual add for regular blocks, plain branch for shrinking ones.
    pub fn forward<'t>(&mut self, ctx: &mut Ctx<'t, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let branch = self.branch(ctx, x)?;
        match self.kind {
            AttentionKind::Regular => {
                let branch = drop_path(ctx, branch, self.drop_path)?;
                x.add(branch)
            }
            AttentionKind::Shrinking => Ok(branch),
        }
    }

    /// Everything before the residual add.
    pub fn branch<'t>(&mut self, ctx: &mut Ctx<'t, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let (b, h, w) = self.check_input(&x.shape())?;
        let (hq, wq) = self.query_grid();
        let (n, d, vd) = (self.heads, self.key_dim, self.value_dim);
        let x = match &self.pre_norm {
            Some(norm) => norm.forward(ctx, x)?,
            None => x,
        };
        let xq = match self.kind {
            AttentionKind::Regular => x,
            AttentionKind::Shrinking => x.subsample(2)?,
        };
        let q = self.q.forward(ctx, xq)?.reshape(&[b, n, d, hq * wq])?;
        let k = self.k.forward(ctx, x)?.reshape(&[b, n, d, h * w])?;
        let v = self.v.forward(ctx, x)?.reshape(&[b, n, vd, h * w])?;
        let mut logits = q.matmul(k, true, false)?.scale(E::from_f64(self.scale));
        if let Some(table) = &self.bias {
            logits = logits.add_batch_broadcast(table.forward(ctx)?)?;
        }
        let weights = logits.softmax()?;
        let mut context = v.matmul(weights, false, true)?.reshape(&[b, n * vd, hq, wq])?;
        if self.activation {
            context = context.hardswish();
        }
        self.proj.forward(ctx, context)
    }

    /// Softmax attention weights `(B, N, Hq*Wq, H*W)` from projected queries
    /// `(B, N*D, Hq, Wq)` and keys `(B, N*D, H, W)`.
    pub fn infer_weights(&self, q: &Tensor<E>, k: &Tensor<E>) -> Result<Tensor<E>> {
        let (b, _, hq, wq) = q.dims4()?;
        let (_, _, h, w) = k.dims4()?;
        let (n, d) = (self.heads, self.key_dim);
        let q = q.reshape(&[b, n, d, hq * wq])?;
        let k = k.reshape(&[b, n, d, h * w])?;
        let mut logits = ops::matmul(&q, &k, true, false)?.scale(E::from_f64(self.scale));
        if let Some(table) = &self.bias {
            let bias = table.expanded();
            let bias = bias.reshape(&[1, n, hq * wq, h * w])?;
            logits = ops::add_batch_broadcast(&logits, &bias)?;
        }
        ops::softmax_lastdim(&logits)
    }

    /// Per-head context `(B, N*vD, Hq, Wq)` from values `(B, N*vD, H, W)`.
    pub fn infer_context(&self, v: &Tensor<E>, weights: &Tensor<E>) -> Result<Tensor<E>> {
        let (b, _, h, w) = v.dims4()?;
        let (hq, wq) = self.query_grid();
        let (n, vd) = (self.heads, self.value_dim);
        let v = v.reshape(&[b, n, vd, h * w])?;
        ops::matmul(&v, weights, false, true)?.reshape(&[b, n * vd, hq, wq])
    }

    /// Tape-free eval-mode forward, composed from the same pieces the
    /// timing harness measures.
    pub fn infer(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_input(x.shape())?;
        let xn = match &self.pre_norm {
            Some(norm) => norm.infer(x)?,
            None => x.clone(),
        };
        let xq = match self.kind {
            AttentionKind::Regular => xn.clone(),
            AttentionKind::Shrinking => ops::subsample(&xn, 2)?,
        };
        let q = self.q.infer(&xq)?;
        let k = self.k.infer(&xn)?;
        let v = self.v.infer(&xn)?;
        let weights = self.infer_weights(&q, &k)?;
        let mut context = self.infer_context(&v, &weights)?;
        if self.activation {
            context = ops::hardswish(&context);
        }
        let out = self.proj.infer(&context)?;
        match self.kind {
            AttentionKind::Regular => x.add(&out),
            AttentionKind::Shrinking => Ok(out),
        }
    }
}

impl<E: Element> Params<E> for Attention<E> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<E>, ParamKind)) {
        if let Some(n) = &self.pre_norm {
            n.visit(f);
        }
        self.q.visit(f);
        self.k.visit(f);
        self.v.visit(f);
        if let Some(t) = &self.bias {
            t.visit(f);
        }
        self.proj.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>, ParamKind)) {
        if let Some(n) = self.pre_norm.as_mut() {
            n.visit_mut(f);
        }
        self.q.visit_mut(f);
        self.k.visit_mut(f);
        self.v.visit_mut(f);
        if let Some(t) = self.bias.as_mut() {
            t.visit_mut(f);
        }
        self.proj.visit_mut(f);
    }
}
