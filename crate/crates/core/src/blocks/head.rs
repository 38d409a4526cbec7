use super::{BatchNorm, Ctx, Init, LayerNorm, ParamKind, Params};
use crate::error::{LevitError, Result};
use crate::tensor::{ops, Element, Tensor, Var};
use crate::Mode;

/// Feature normalization in front of a classifier.
#[derive(Debug, Clone)]
pub enum FeatureNorm<E: Element> {
    Batch(BatchNorm<E>),
    Layer(LayerNorm<E>),
}

/// Normalization followed by a linear map to class logits.
#[derive(Debug, Clone)]
pub struct Classifier<E: Element> {
    pub name: String,
    pub norm: Option<FeatureNorm<E>>,
    /// (classes, features)
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Element> Classifier<E> {
    pub fn new(name: impl Into<String>, features: usize, classes: usize, layer_norm: bool, init: &mut Init) -> Self {
        let name = name.into();
        let norm = if layer_norm {
            FeatureNorm::Layer(LayerNorm::new(format!("{name}.norm"), features))
        } else {
            FeatureNorm::Batch(BatchNorm::new(format!("{name}.bn"), features, 1.0))
        };
        Self { weight: init.weight(&[classes, features]), bias: Tensor::zeros(&[classes]), norm: Some(norm), name }
    }

    pub fn features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, c] if *c == self.features() => Ok(()),
            _ => Err(LevitError::shape("head", format!("(B, {})", self.features()), format!("{shape:?}"))),
        }
    }

    pub fn forward<'t>(&mut self, ctx: &mut Ctx<'t, E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        self.check_input(&x.shape())?;
        let x = match self.norm.as_mut() {
            Some(FeatureNorm::Batch(bn)) => bn.forward(ctx, x)?,
            Some(FeatureNorm::Layer(ln)) => ln.forward(ctx, x)?,
            None => x,
        };
        let w = ctx.param(&format!("{}.weight", self.name), &self.weight);
        let b = ctx.param(&format!("{}.bias", self.name), &self.bias);
        x.matmul(w, false, true)?.add_channel_bias(b)
    }

    pub fn infer(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_input(x.shape())?;
        let x = match &self.norm {
            Some(FeatureNorm::Batch(bn)) => bn.infer(x)?,
            Some(FeatureNorm::Layer(ln)) => ln.infer(x)?,
            None => x.clone(),
        };
        ops::add_channel_bias(&ops::matmul(&x, &self.weight, false, true)?, &self.bias)
    }
}

impl<E: Element> Params<E> for Classifier<E> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<E>, ParamKind)) {
        match &self.norm {
            Some(FeatureNorm::Batch(bn)) => bn.visit(f),
            Some(FeatureNorm::Layer(ln)) => ln.visit(f),
            None => {}
        }
        f(&format!("{}.weight", self.name), &self.weight, ParamKind::Learnable);
        f(&format!("{}.bias", self.name), &self.bias, ParamKind::Learnable);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>, ParamKind)) {
        match self.norm.as_mut() {
            Some(FeatureNorm::Batch(bn)) => bn.visit_mut(f),
            Some(FeatureNorm::Layer(ln)) => ln.visit_mut(f),
            None => {}
        }
        f(&format!("{}.weight", self.name), &mut self.weight, ParamKind::Learnable);
        f(&format!("{}.bias", self.name), &mut self.bias, ParamKind::Learnable);
    }
}

/// Logits from the head: both heads separately in training, their mean at eval.
#[derive(Debug, Clone, Copy)]
pub enum HeadOutput<'t, E: Element> {
    Single(Var<'t, E>),
    Pair { classification: Var<'t, E>, distillation: Var<'t, E> },
}

impl<'t, E: Element> HeadOutput<'t, E> {
    /// The prediction used for accuracy: the single logits or the mean of the pair.
    pub fn combined(&self) -> Result<Var<'t, E>> {
        match *self {
            HeadOutput::Single(v) => Ok(v),
            HeadOutput::Pair { classification, distillation } => {
                Ok(classification.add(distillation)?.scale(E::from_f64(0.5)))
            }
        }
    }
}

/// Classification head plus an optional distillation head.
#[derive(Debug, Clone)]
pub struct Head<E: Element> {
    pub classification: Classifier<E>,
    pub distillation: Option<Classifier<E>>,
}

impl<E: Element> Head<E> {
    pub fn new(
        name: &str,
        features: usize,
        classes: usize,
        distillation: bool,
        layer_norm: bool,
        init: &mut Init,
    ) -> Self {
        Self {
            classification: Classifier::new(format!("{name}.cls"), features, classes, layer_norm, init),
            distillation: distillation
                .then(|| Classifier::new(format!("{name}.dist"), features, classes, layer_norm, init)),
        }
    }

    pub fn forward<'t>(&mut self, ctx: &mut Ctx<'t, E>, x: Var<'t, E>) -> Result<HeadOutput<'t, E>> {
        let cls = self.classification.forward(ctx, x)?;
        let Some(dist_head) = self.distillation.as_mut() else {
            return Ok(HeadOutput::Single(cls));
        };
        let dist = dist_head.forward(ctx, x)?;
        let pair = HeadOutput::Pair { classification: cls, distillation: dist };
        match ctx.mode() {
            Mode::Train => Ok(pair),
            Mode::Eval => Ok(HeadOutput::Single(pair.combined()?)),
        }
    }

    pub fn infer(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let cls = self.classification.infer(x)?;
        match &self.distillation {
            Some(d) => Ok(cls.add(&d.infer(x)?)?.scale(E::from_f64(0.5))),
            None => Ok(cls),
        }
    }
}

impl<E: Element> Params<E> for Head<E> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<E>, ParamKind)) {
        self.classification.visit(f);
        if let Some(d) = &self.distillation {
            d.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>, ParamKind)) {
        self.classification.visit_mut(f);
        if let Some(d) = self.distillation.as_mut() {
            d.visit_mut(f);
        }
    }
}
