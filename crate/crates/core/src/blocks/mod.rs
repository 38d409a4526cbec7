//! LeViT building blocks.
//!
//! Every block owns its parameters as plain tensors and records its forward
//! pass on a [`Tape`] through a [`Ctx`], which also collects the
//! `(name, Var)` bindings the trainer needs to map gradients back.

mod attention;
mod bias;
mod drop_path;
mod head;
mod layers;
mod mlp;
mod patch;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use attention::{Attention, AttentionConfig, AttentionKind};
pub use bias::{bias_index, AttentionBiasTable};
pub use drop_path::{drop_path, drop_path_factors, drop_path_tensor};
pub use head::{Classifier, FeatureNorm, Head, HeadOutput};
pub use layers::{BatchNorm, ConvBn, LayerNorm, BN_EPS, BN_MOMENTUM};
pub use mlp::Mlp;
pub use patch::PatchEmbed;

use crate::tensor::{Element, Tape, Tensor, Var};
use crate::Mode;

/// Learnable parameters receive gradients; buffers (running statistics) do not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Learnable,
    Buffer,
}

/// Named traversal over everything a module stores.
pub trait Params<E: Element> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<E>, ParamKind));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>, ParamKind));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t, kind| {
            if kind == ParamKind::Learnable {
                n += t.numel();
            }
        });
        n
    }
}

/// Per-forward state: the tape, train/eval mode, drop-path randomness and the
/// parameter bindings recorded so far.
pub struct Ctx<'t, E: Element> {
    tape: &'t Tape<E>,
    mode: Mode,
    rng: ChaCha8Rng,
    bindings: Vec<(String, Var<'t, E>)>,
}

impl<'t, E: Element> Ctx<'t, E> {
    pub fn new(tape: &'t Tape<E>, mode: Mode, seed: u64) -> Self {
        Self { tape, mode, rng: ChaCha8Rng::seed_from_u64(seed), bindings: Vec::new() }
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn input(&self, t: &Tensor<E>) -> Var<'t, E> {
        self.tape.constant(t.clone())
    }

    /// Puts a parameter on the tape and remembers its name.
    pub fn param(&mut self, name: &str, t: &Tensor<E>) -> Var<'t, E> {
        let var = self.tape.param(t.clone());
        if self.tape.grad_enabled() {
            self.bindings.push((name.to_owned(), var));
        }
        var
    }

    pub fn bindings(&self) -> &[(String, Var<'t, E>)] {
        &self.bindings
    }

    pub fn into_bindings(self) -> Vec<(String, Var<'t, E>)> {
        self.bindings
    }
}

/// Source of initial parameter values.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub const WEIGHT_STD: f64 = 0.02;

    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Normal(0, std) truncated to two standard deviations.
    pub fn trunc_normal<E: Element>(&mut self, shape: &[usize], std: f64) -> Tensor<E> {
        let normal = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| loop {
            let v: f64 = normal.sample(&mut self.rng);
            if v.abs() <= 2.0 * std {
                break E::from_f64(v);
            }
        })
    }

    pub fn weight<E: Element>(&mut self, shape: &[usize]) -> Tensor<E> {
        self.trunc_normal(shape, Self::WEIGHT_STD)
    }
}
