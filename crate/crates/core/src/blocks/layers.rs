use super::{Ctx, Init, ParamKind, Params};
use crate::error::Result;
use crate::tensor::{ops, Element, Tensor, Var};
use crate::Mode;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over axis 1 with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm<E: Element> {
    pub name: String,
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
    pub eps: f64,
    pub momentum: f64,
}

impl<E: Element> BatchNorm<E> {
    pub fn new(name: impl Into<String>, channels: usize, gamma_init: f64) -> Self {
        Self {
            name: name.into(),
            gamma: Tensor::full(&[channels], E::from_f64(gamma_init)),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn forward<'t>(&mut self, ctx: &mut Ctx<'t, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let gamma = ctx.param(&format!("{}.gamma", self.name), &self.gamma);
        let beta = ctx.param(&format!("{}.beta", self.name), &self.beta);
        let eps = E::from_f64(self.eps);
        match ctx.mode() {
            Mode::Eval => x.batch_norm_eval(gamma, beta, &self.running_mean, &self.running_var, eps),
            Mode::Train => {
                let (y, mean, var) = x.batch_norm_train(gamma, beta, eps)?;
                let momentum = E::from_f64(self.momentum);
                ops::update_running(&mut self.running_mean, &mean, momentum);
                ops::update_running(&mut self.running_var, &var, momentum);
                Ok(y)
            }
        }
    }

    /// Eval-mode `(scale, shift)` such that `bn(x) = x * scale + shift`.
    pub fn coefficients(&self) -> (Vec<E>, Vec<E>) {
        ops::batchnorm_eval_coefficients(
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            E::from_f64(self.eps),
        )
    }

    pub fn infer(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (scale, shift) = self.coefficients();
        ops::channel_affine(x, &scale, &shift)
    }
}

impl<E: Element> Params<E> for BatchNorm<E> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<E>, ParamKind)) {
        f(&format!("{}.gamma", self.name), &self.gamma, ParamKind::Learnable);
        f(&format!("{}.beta", self.name), &self.beta, ParamKind::Learnable);
        f(&format!("{}.running_mean", self.name), &self.running_mean, ParamKind::Buffer);
        f(&format!("{}.running_var", self.name), &self.running_var, ParamKind::Buffer);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>, ParamKind)) {
        f(&format!("{}.gamma", self.name), &mut self.gamma, ParamKind::Learnable);
        f(&format!("{}.beta", self.name), &mut self.beta, ParamKind::Learnable);
        f(&format!("{}.running_mean", self.name), &mut self.running_mean, ParamKind::Buffer);
        f(&format!("{}.running_var", self.name), &mut self.running_var, ParamKind::Buffer);
    }
}

/// Layer normalization across channels (pre-norm ablation only).
#[derive(Debug, Clone)]
pub struct LayerNorm<E: Element> {
    pub name: String,
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub eps: f64,
}

impl<E: Element> LayerNorm<E> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self { name: name.into(), gamma: Tensor::ones(&[channels]), beta: Tensor::zeros(&[channels]), eps: BN_EPS }
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let gamma = ctx.param(&format!("{}.gamma", self.name), &self.gamma);
        let beta = ctx.param(&format!("{}.beta", self.name), &self.beta);
        x.layer_norm(gamma, beta, E::from_f64(self.eps))
    }

    pub fn infer(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(ops::layer_norm_channels(x, &self.gamma, &self.beta, E::from_f64(self.eps))?.output)
    }
}

impl<E: Element> Params<E> for LayerNorm<E> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<E>, ParamKind)) {
        f(&format!("{}.gamma", self.name), &self.gamma, ParamKind::Learnable);
        f(&format!("{}.beta", self.name), &self.beta, ParamKind::Learnable);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>, ParamKind)) {
        f(&format!("{}.gamma", self.name), &mut self.gamma, ParamKind::Learnable);
        f(&format!("{}.beta", self.name), &mut self.beta, ParamKind::Learnable);
    }
}

/// Convolution followed by batch norm. After fusion the norm is gone and the
/// folded shift lives in `bias`; the layer-norm ablation uses a plain bias
/// and no norm at all.
#[derive(Debug, Clone)]
pub struct ConvBn<E: Element> {
    pub name: String,
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
    pub norm: Option<BatchNorm<E>>,
    pub stride: usize,
    pub padding: usize,
}

impl<E: Element> ConvBn<E> {
    /// `bn_gamma = None` builds the conv with a bias and no norm.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bn_gamma: Option<f64>,
        init: &mut Init,
    ) -> Self {
        let name = name.into();
        let weight = init.weight(&[cout, cin, kernel, kernel]);
        let (bias, norm) = match bn_gamma {
            Some(g) => (None, Some(BatchNorm::new(format!("{name}.bn"), cout, g))),
            None => (Some(Tensor::zeros(&[cout])), None),
        };
        Self { name, weight, bias, norm, stride, padding }
    }

    pub fn pointwise(name: impl Into<String>, cin: usize, cout: usize, bn_gamma: Option<f64>, init: &mut Init) -> Self {
        Self::new(name, cin, cout, 1, 1, 0, bn_gamma, init)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn forward<'t>(&mut self, ctx: &mut Ctx<'t, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let w = ctx.param(&format!("{}.weight", self.name), &self.weight);
        let mut y = x.conv2d(w, self.stride, self.padding)?;
        if let Some(bias) = &self.bias {
            let b = ctx.param(&format!("{}.bias", self.name), bias);
            y = y.add_channel_bias(b)?;
        }
        match self.norm.as_mut() {
            Some(bn) => bn.forward(ctx, y),
            None => Ok(y),
        }
    }

    /// Convolution (plus bias) without the trailing norm.
    pub fn infer_conv(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        ops::conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }

    /// Eval-mode forward without a tape.
    pub fn infer(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let y = self.infer_conv(x)?;
        match &self.norm {
            Some(bn) => bn.infer(&y),
            None => Ok(y),
        }
    }

    pub fn is_fused(&self) -> bool {
        self.norm.is_none()
    }
}

impl<E: Element> Params<E> for ConvBn<E> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<E>, ParamKind)) {
        f(&format!("{}.weight", self.name), &self.weight, ParamKind::Learnable);
        if let Some(b) = &self.bias {
            f(&format!("{}.bias", self.name), b, ParamKind::Learnable);
        }
        if let Some(bn) = &self.norm {
            bn.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>, ParamKind)) {
        f(&format!("{}.weight", self.name), &mut self.weight, ParamKind::Learnable);
        if let Some(b) = self.bias.as_mut() {
            f(&format!("{}.bias", self.name), b, ParamKind::Learnable);
        }
        if let Some(bn) = self.norm.as_mut() {
            bn.visit_mut(f);
        }
    }
}
