use super::spec::{ModelSpec, NormKind, PatchEmbedSpec, PositionKind};
use crate::blocks::{
    Attention, AttentionConfig, AttentionKind, Ctx, Head, HeadOutput, Init, Mlp, ParamKind, Params, PatchEmbed,
};
use crate::error::{LevitError, Result};
use crate::tensor::{ops, Element, Tape, Tensor, Var};
use crate::Mode;

/// One residual or shrinking unit inside a stage.
// blocks live in a Vec built once, so the size gap between variants costs nothing
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum Block<E: Element> {
    Attention(Attention<E>),
    Mlp(Mlp<E>),
}

impl<E: Element> Block<E> {
    pub fn name(&self) -> &str {
        match self {
            Block::Attention(a) => &a.name,
            Block::Mlp(m) => &m.name,
        }
    }

    pub fn forward<'t>(&mut self, ctx: &mut Ctx<'t, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        match self {
            Block::Attention(a) => a.forward(ctx, x),
            Block::Mlp(m) => m.forward(ctx, x),
        }
    }

    pub fn infer(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        match self {
            Block::Attention(a) => a.infer(x),
            Block::Mlp(m) => m.infer(x),
        }
    }

    /// True for blocks that add their branch back onto the input.
    pub fn is_residual(&self) -> bool {
        !matches!(self, Block::Attention(a) if a.kind == AttentionKind::Shrinking)
    }
}

impl<E: Element> Params<E> for Block<E> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<E>, ParamKind)) {
        match self {
            Block::Attention(a) => a.visit(f),
            Block::Mlp(m) => m.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>, ParamKind)) {
        match self {
            Block::Attention(a) => a.visit_mut(f),
            Block::Mlp(m) => m.visit_mut(f),
        }
    }
}

/// Blocks running at one resolution. Every stage after the first opens with
/// the shrinking attention and its MLP.
#[derive(Debug, Clone)]
pub struct Stage<E: Element> {
    pub blocks: Vec<Block<E>>,
}

/// Result of a taped forward pass.
pub struct ModelOutput<'t, E: Element> {
    pub logits: HeadOutput<'t, E>,
    /// Activation map after each stage, `(B, C, H, W)`.
    pub stages: Vec<Var<'t, E>>,
    pub bindings: Vec<(String, Var<'t, E>)>,
}

/// A built LeViT network.
#[derive(Debug, Clone)]
pub struct Model<E: Element = f32> {
    spec: ModelSpec,
    mode: Mode,
    fused: bool,
    pub patch_embed: PatchEmbed<E>,
    /// Learned absolute position embedding `(1, C, H, W)`, only when bias tables are ablated.
    pub pos_embed: Option<Tensor<E>>,
    pub stages: Vec<Stage<E>>,
    pub head: Head<E>,
}

pub const POS_EMBED: &str = "pos_embed";

impl<E: Element> Model<E> {
    /// Builds the network with parameters drawn deterministically from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut init = Init::new(seed);
        let layer_norm = spec.ablation.norm == NormKind::Layer;
        let bias_table = spec.ablation.position == PositionKind::Bias;
        let activation = spec.ablation.attention_activation;
        let c0 = spec.stages[0].channels;
        let patch_embed = match &spec.patch_embed {
            PatchEmbedSpec::Conv { channels } => {
                PatchEmbed::conv_stack("patch_embed", channels, layer_norm, &mut init)?
            }
            PatchEmbedSpec::Single => PatchEmbed::single("patch_embed", spec.in_channels, c0, layer_norm, &mut init),
        };
        let g0 = spec.stages[0].grid;
        let pos_embed = (!bias_table).then(|| init.weight(&[1, c0, g0[0], g0[1]]));

        let mut stages = Vec::with_capacity(spec.stages.len());
        for (s, stage) in spec.stages.iter().enumerate() {
            let mut blocks = Vec::new();
            let grid = (stage.grid[0], stage.grid[1]);
            if s > 0 {
                let sub = &spec.subsamples[s - 1];
                let prev = spec.stages[s - 1].grid;
                let cfg = AttentionConfig {
                    name: format!("subsample{}.attn", s - 1),
                    kind: AttentionKind::Shrinking,
                    in_channels: sub.in_channels,
                    out_channels: sub.out_channels,
                    heads: sub.heads,
                    key_dim: sub.key_dim,
                    value_dim: spec.shrink_value_ratio * sub.key_dim,
                    grid: (prev[0], prev[1]),
                    bias_table,
                    activation,
                    layer_norm,
                    drop_path: 0.0,
                };
                blocks.push(Block::Attention(Attention::new(&cfg, &mut init)?));
                blocks.push(Block::Mlp(Mlp::new(
                    format!("subsample{}.mlp", s - 1),
                    sub.out_channels,
                    spec.mlp_ratio,
                    layer_norm,
                    spec.drop_path,
                    &mut init,
                )));
            }
            for j in 0..stage.depth {
                let cfg = AttentionConfig {
                    name: format!("stage{s}.{j}.attn"),
                    kind: AttentionKind::Regular,
                    in_channels: stage.channels,
                    out_channels: stage.channels,
                    heads: stage.heads,
                    key_dim: stage.key_dim,
                    value_dim: spec.value_ratio * stage.key_dim,
                    grid,
                    bias_table,
                    activation,
                    layer_norm,
                    drop_path: spec.drop_path,
                };
                blocks.push(Block::Attention(Attention::new(&cfg, &mut init)?));
                blocks.push(Block::Mlp(Mlp::new(
                    format!("stage{s}.{j}.mlp"),
                    stage.channels,
                    spec.mlp_ratio,
                    layer_norm,
                    spec.drop_path,
                    &mut init,
                )));
            }
            stages.push(Stage { blocks });
        }
        let features = spec.stages.last().expect("validated").channels;
        let head = Head::new("head", features, spec.num_classes, spec.ablation.distillation, layer_norm, &mut init);
        Ok(Self { spec: spec.clone(), mode: Mode::Eval, fused: false, patch_embed, pos_embed, stages, head })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Switches train/eval. A fused model has no batch norms left to train and stays in eval.
    pub fn set_mode(&mut self, mode: Mode) -> Result<()> {
        if self.fused && mode == Mode::Train {
            return Err(LevitError::TrainMode);
        }
        self.mode = mode;
        Ok(())
    }

    /// Overrides the drop-path probability of every residual block.
    pub fn set_drop_path(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(LevitError::InvalidProbability(p));
        }
        for block in self.blocks_mut() {
            match block {
                Block::Attention(a) if a.kind == AttentionKind::Regular => a.drop_path = p,
                Block::Attention(_) => {}
                Block::Mlp(m) => m.drop_path = p,
            }
        }
        self.spec.drop_path = p;
        Ok(())
    }

    pub fn is_fused(&self) -> bool {
        self.fused
    }

    pub(crate) fn mark_fused(&mut self) {
        self.fused = true;
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block<E>> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Block<E>> {
        self.stages.iter_mut().flat_map(|s| s.blocks.iter_mut())
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let expected = [self.spec.in_channels, self.spec.img_size, self.spec.img_size];
        match shape {
            [_, c, h, w] if [*c, *h, *w] == expected => Ok(()),
            _ => Err(LevitError::shape(
                "model",
                format!("(B, {}, {}, {})", expected[0], expected[1], expected[2]),
                format!("{shape:?}"),
            )),
        }
    }

    /// Taped forward pass in the model's current mode. `seed` drives drop path.
    pub fn forward<'t>(&mut self, tape: &'t Tape<E>, images: &Tensor<E>, seed: u64) -> Result<ModelOutput<'t, E>> {
        let mut ctx = Ctx::new(tape, self.mode, seed);
        let x = ctx.input(images);
        self.forward_ctx(&mut ctx, x).map(|(logits, stages)| ModelOutput {
            logits,
            stages,
            bindings: ctx.into_bindings(),
        })
    }

    /// Taped forward pass against an existing context (the images may themselves be a tape variable).
    pub fn forward_ctx<'t>(
        &mut self,
        ctx: &mut Ctx<'t, E>,
        images: Var<'t, E>,
    ) -> Result<(HeadOutput<'t, E>, Vec<Var<'t, E>>)> {
        self.check_images(&images.shape())?;
        let mut x = self.patch_embed.forward(ctx, images)?;
        if let Some(pos) = &self.pos_embed {
            let p = ctx.param(POS_EMBED, pos);
            x = x.add_batch_broadcast(p)?;
        }
        let mut outputs = Vec::with_capacity(self.stages.len());
        for stage in &mut self.stages {
            for block in &mut stage.blocks {
                x = block.forward(ctx, x)?;
            }
            outputs.push(x);
        }
        let pooled = x.avgpool_global()?;
        let logits = self.head.forward(ctx, pooled)?;
        Ok((logits, outputs))
    }

    /// Activation maps after the patch embedding (index 0) and after every stage.
    pub fn infer_stages(&self, images: &Tensor<E>) -> Result<Vec<Tensor<E>>> {
        self.check_images(images.shape())?;
        let mut x = self.patch_embed.infer(images)?;
        if let Some(pos) = &self.pos_embed {
            x = ops::add_batch_broadcast(&x, pos)?;
        }
        let mut out = vec![x.clone()];
        for stage in &self.stages {
            for block in &stage.blocks {
                x = block.infer(&x)?;
            }
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Eval-mode logits `(B, classes)` without recording a tape; the mean of both heads.
    pub fn predict(&self, images: &Tensor<E>) -> Result<Tensor<E>> {
        let stages = self.infer_stages(images)?;
        let last = stages.last().expect("at least the embedding");
        self.head.infer(&ops::avgpool_global(last)?)
    }

    /// Replaces the quantities a fresh model keeps at trivial values (norm
    /// affines, running statistics, attention bias tables, zero biases) with
    /// seeded random ones, so fusion and symmetry checks see generic numbers.
    /// Convolution and linear weights are left alone.
    pub fn randomize_statistics(&mut self, seed: u64) {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut draw = |t: &mut Tensor<E>, f: &dyn Fn(f64) -> f64| {
            let values: Vec<E> = (0..t.numel()).map(|_| E::from_f64(f(normal.sample(&mut rng)))).collect();
            *t = Tensor::new(t.shape(), values).expect("same size");
        };
        self.visit_mut(&mut |name, t, _| {
            if name.ends_with(".gamma") {
                draw(t, &|z| 1.0 + 0.25 * z);
            } else if name.ends_with(".running_var") {
                draw(t, &|z| 0.5 + 0.5 * z.abs());
            } else if name.ends_with(".beta") || name.ends_with(".running_mean") || name.ends_with(".bias") {
                draw(t, &|z| 0.2 * z);
            } else if name.ends_with("bias_table") {
                draw(t, &|z| 0.5 * z);
            }
        });
    }

    /// Total learnable parameter count.
    pub fn param_count(&self) -> usize {
        Params::param_count(self)
    }

    /// Every stored tensor by name, in a fixed traversal order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<E>, ParamKind)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t, kind| out.push((name.to_owned(), t.clone(), kind)));
        out
    }

    /// Converts every tensor to another element type.
    pub fn cast<F: Element>(&self) -> Model<F> {
        let mut out: Model<F> = Model::build(&self.spec, 0).expect("spec already validated");
        if self.fused {
            crate::fusion::fuse_in_place(&mut out);
        }
        let src = self.named_tensors();
        let mut i = 0;
        out.visit_mut(&mut |name, t, _| {
            debug_assert_eq!(name, src[i].0);
            *t = src[i].1.cast();
            i += 1;
        });
        out.mode = self.mode;
        out
    }
}

impl<E: Element> Params<E> for Model<E> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<E>, ParamKind)) {
        self.patch_embed.visit(f);
        if let Some(p) = &self.pos_embed {
            f(POS_EMBED, p, ParamKind::Learnable);
        }
        self.blocks().for_each(|b| b.visit(f));
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>, ParamKind)) {
        self.patch_embed.visit_mut(f);
        if let Some(p) = self.pos_embed.as_mut() {
            f(POS_EMBED, p, ParamKind::Learnable);
        }
        self.blocks_mut().for_each(|b| b.visit_mut(f));
        self.head.visit_mut(f);
    }
}
