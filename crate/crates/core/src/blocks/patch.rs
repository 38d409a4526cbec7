use super::{ConvBn, Ctx, Init, ParamKind, Params};
use crate::error::{LevitError, Result};
use crate::tensor::{ops, Element, Tensor, Var};

/// Convolutional patch embedding: a stack of stride-2 3x3 conv + BN +
/// Hardswish stages (or, for the single-conv ablation, one 16x16 stride-16
/// conv) reducing the input resolution by 16.
#[derive(Debug, Clone)]
pub struct PatchEmbed<E: Element> {
    pub name: String,
    pub convs: Vec<ConvBn<E>>,
}

impl<E: Element> PatchEmbed<E> {
    pub const REDUCTION: usize = 16;

    /// `channels` lists every width from the image channels to the first
    /// stage, e.g. `[3, 32, 64, 128, 256]`.
    pub fn conv_stack(name: impl Into<String>, channels: &[usize], layer_norm: bool, init: &mut Init) -> Result<Self> {
        let name = name.into();
        if channels.len() < 2 || (1usize << (channels.len() - 1)) != Self::REDUCTION {
            return Err(LevitError::config(
                format!("{name}.channels"),
                format!("need {} stride-2 stages, got {:?}", Self::REDUCTION.trailing_zeros(), channels),
            ));
        }
        let bn = if layer_norm { None } else { Some(1.0) };
        let convs = channels
            .windows(2)
            .enumerate()
            .map(|(i, pair)| ConvBn::new(format!("{name}.{i}"), pair[0], pair[1], 3, 2, 1, bn, init))
            .collect();
        Ok(Self { name, convs })
    }

    pub fn single(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        layer_norm: bool,
        init: &mut Init,
    ) -> Self {
        let name = name.into();
        let bn = if layer_norm { None } else { Some(1.0) };
        let p = Self::REDUCTION;
        let conv = ConvBn::new(format!("{name}.0"), in_channels, out_channels, p, p, 0, bn, init);
        Self { name, convs: vec![conv] }
    }

    pub fn out_channels(&self) -> usize {
        self.convs.last().map_or(0, ConvBn::out_channels)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape[..] else {
            return Err(LevitError::shape("patch_embed", "BCHW image", format!("{shape:?}")));
        };
        let cin = self.convs[0].in_channels();
        if c != cin {
            return Err(LevitError::shape("patch_embed", format!("{cin} channels"), c));
        }
        if h % Self::REDUCTION != 0 || w % Self::REDUCTION != 0 || h == 0 || w == 0 {
            return Err(LevitError::config(
                "image",
                format!("spatial extents must be positive multiples of {}, got {h}x{w}", Self::REDUCTION),
            ));
        }
        Ok(())
    }

    pub fn forward<'t>(&mut self, ctx: &mut Ctx<'t, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        self.check_input(&x.shape())?;
        let mut x = x;
        for conv in &mut self.convs {
            x = conv.forward(ctx, x)?.hardswish();
        }
        Ok(x)
    }

    pub fn infer(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_input(x.shape())?;
        let mut x = x.clone();
        for conv in &self.convs {
            x = ops::hardswish(&conv.infer(&x)?);
        }
        Ok(x)
    }
}

impl<E: Element> Params<E> for PatchEmbed<E> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<E>, ParamKind)) {
        self.convs.iter().for_each(|c| c.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>, ParamKind)) {
        self.convs.iter_mut().for_each(|c| c.visit_mut(f));
    }
}
