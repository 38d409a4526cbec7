use super::{drop_path, ConvBn, Ctx, Init, LayerNorm, ParamKind, Params};
use crate::error::{LevitError, Result};
use crate::tensor::{ops, Element, Tensor, Var};

/// Residual pointwise MLP: conv(C -> rC), BN, Hardswish, conv(rC -> C), BN.
#[derive(Debug, Clone)]
pub struct Mlp<E: Element> {
    pub name: String,
    pub drop_path: f64,
    pub pre_norm: Option<LayerNorm<E>>,
    pub expand: ConvBn<E>,
    pub contract: ConvBn<E>,
}

impl<E: Element> Mlp<E> {
    pub fn new(
        name: impl Into<String>,
        channels: usize,
        ratio: usize,
        layer_norm: bool,
        drop_path: f64,
        init: &mut Init,
    ) -> Self {
        let name = name.into();
        let hidden = channels * ratio;
        let bn = |g: f64| if layer_norm { None } else { Some(g) };
        Self {
            pre_norm: layer_norm.then(|| LayerNorm::new(format!("{name}.norm"), channels)),
            expand: ConvBn::pointwise(format!("{name}.expand"), channels, hidden, bn(1.0), init),
            contract: ConvBn::pointwise(format!("{name}.contract"), hidden, channels, bn(0.0), init),
            drop_path,
            name,
        }
    }

    pub fn channels(&self) -> usize {
        self.expand.in_channels()
    }

    pub fn hidden(&self) -> usize {
        self.expand.out_channels()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, c, _, _] if *c == self.channels() => Ok(()),
            _ => Err(LevitError::shape("mlp", format!("(B, {}, H, W)", self.channels()), format!("{shape:?}"))),
        }
    }

    pub fn forward<'t>(&mut self, ctx: &mut Ctx<'t, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let branch = self.branch(ctx, x)?;
        let branch = drop_path(ctx, branch, self.drop_path)?;
        x.add(branch)
    }

    pub fn branch<'t>(&mut self, ctx: &mut Ctx<'t, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        self.check_input(&x.shape())?;
        let x = match &self.pre_norm {
            Some(norm) => norm.forward(ctx, x)?,
            None => x,
        };
        let hidden = self.expand.forward(ctx, x)?.hardswish();
        self.contract.forward(ctx, hidden)
    }

    pub fn infer(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_input(x.shape())?;
        let xn = match &self.pre_norm {
            Some(norm) => norm.infer(x)?,
            None => x.clone(),
        };
        let hidden = ops::hardswish(&self.expand.infer(&xn)?);
        x.add(&self.contract.infer(&hidden)?)
    }
}

impl<E: Element> Params<E> for Mlp<E> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<E>, ParamKind)) {
        if let Some(n) = &self.pre_norm {
            n.visit(f);
        }
        self.expand.visit(f);
        self.contract.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>, ParamKind)) {
        if let Some(n) = self.pre_norm.as_mut() {
            n.visit_mut(f);
        }
        self.expand.visit_mut(f);
        self.contract.visit_mut(f);
    }
}
