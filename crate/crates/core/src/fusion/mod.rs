//! Inference-time folding of batch norm into the preceding convolution or
//! linear map, and the binary weight archive.

mod archive;

pub use archive::{load, load_archive, save, ArchiveEntry, ArchiveMeta, WeightArchive, FORMAT_VERSION, MAGIC};

use crate::blocks::{BatchNorm, Classifier, ConvBn, FeatureNorm};
use crate::error::{LevitError, Result};
use crate::model::{Block, Model};
use crate::tensor::{ops, Element, Tensor};
use crate::Mode;

/// Folds `y = BN(conv(x, W) + b)` into a single conv `(W', b')`:
/// `W' = W * gamma / sqrt(var + eps)` per output channel and
/// `b' = beta + (b - mean) * gamma / sqrt(var + eps)`.
pub fn fuse_conv_bn<E: Element>(
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    mean: &Tensor<E>,
    var: &Tensor<E>,
    eps: f64,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let cout = *weight.shape().first().unwrap_or(&0);
    for (what, t) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
        if t.shape() != [cout] {
            return Err(LevitError::shape(
                "fuse_conv_bn",
                format!("{what} of {cout} channels"),
                format!("{:?}", t.shape()),
            ));
        }
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(LevitError::shape(
                "fuse_conv_bn",
                format!("bias of {cout} channels"),
                format!("{:?}", b.shape()),
            ));
        }
    }
    let eps = E::from_f64(eps);
    let scale: Vec<E> = gamma.data().iter().zip(var.data()).map(|(&g, &v)| g / (v + eps).sqrt()).collect();
    let per = weight.numel() / cout.max(1);
    let mut w = weight.clone();
    for (o, chunk) in w.data_mut().chunks_mut(per.max(1)).enumerate() {
        chunk.iter_mut().for_each(|v| *v = *v * scale[o]);
    }
    let b = Tensor::from_fn(&[cout], |o| {
        let b0 = bias.map_or(E::zero(), |b| b.data()[o]);
        beta.data()[o] + (b0 - mean.data()[o]) * scale[o]
    });
    Ok((w, b))
}

fn fuse_conv<E: Element>(conv: &mut ConvBn<E>) -> bool {
    let Some(bn) = conv.norm.take() else { return false };
    let (w, b) =
        fuse_conv_bn(&conv.weight, conv.bias.as_ref(), &bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var, bn.eps)
            .expect("a built conv and its norm agree on channels");
    conv.weight = w;
    conv.bias = Some(b);
    true
}

/// `W (x * s + t) + b` becomes `(W * s) x + (W t + b)`.
fn fuse_classifier<E: Element>(c: &mut Classifier<E>) -> bool {
    let Some(FeatureNorm::Batch(bn)) = &c.norm else { return false };
    let bn: &BatchNorm<E> = bn;
    let (scale, shift) = bn.coefficients();
    let (k, f) = (c.classes(), c.features());
    let mut w = c.weight.clone();
    let mut b = c.bias.clone();
    {
        let wd = w.data_mut();
        let bd = b.data_mut();
        for i in 0..k {
            let row = &mut wd[i * f..(i + 1) * f];
            let mut acc = E::zero();
            for j in 0..f {
                acc = acc + row[j] * shift[j];
                row[j] = row[j] * scale[j];
            }
            bd[i] = bd[i] + acc;
        }
    }
    c.weight = w;
    c.bias = b;
    c.norm = None;
    true
}

/// Folds every conv+BN pair and the head norms in place; returns how many norms were removed.
pub(crate) fn fuse_in_place<E: Element>(model: &mut Model<E>) -> usize {
    let mut n = 0;
    for conv in &mut model.patch_embed.convs {
        n += fuse_conv(conv) as usize;
    }
    for block in model.blocks_mut() {
        match block {
            Block::Attention(a) => {
                for conv in [&mut a.q, &mut a.k, &mut a.v, &mut a.proj] {
                    n += fuse_conv(conv) as usize;
                }
            }
            Block::Mlp(m) => {
                n += fuse_conv(&mut m.expand) as usize;
                n += fuse_conv(&mut m.contract) as usize;
            }
        }
    }
    n += fuse_classifier(&mut model.head.classification) as usize;
    if let Some(d) = model.head.distillation.as_mut() {
        n += fuse_classifier(d) as usize;
    }
    model.mark_fused();
    n
}

/// Result of [`fuse_model`].
#[derive(Debug)]
pub enum FuseOutcome<E: Element> {
    Fused(Model<E>),
    /// The input had already been fused and is returned unchanged.
    AlreadyFused(Model<E>),
}

impl<E: Element> FuseOutcome<E> {
    pub fn into_model(self) -> Model<E> {
        match self {
            FuseOutcome::Fused(m) | FuseOutcome::AlreadyFused(m) => m,
        }
    }

    pub fn was_already_fused(&self) -> bool {
        matches!(self, FuseOutcome::AlreadyFused(_))
    }
}

/// Consumes an eval-mode model and returns one with every batch norm folded away.
pub fn fuse_model<E: Element>(mut model: Model<E>) -> Result<FuseOutcome<E>> {
    if model.mode() == Mode::Train {
        return Err(LevitError::TrainMode);
    }
    if model.is_fused() {
        return Ok(FuseOutcome::AlreadyFused(model));
    }
    fuse_in_place(&mut model);
    Ok(FuseOutcome::Fused(model))
}

/// Largest absolute logit difference between two models on the same images.
pub fn parity<E: Element>(a: &Model<E>, b: &Model<E>, images: &Tensor<E>) -> Result<f64> {
    let (ya, yb) = (a.predict(images)?, b.predict(images)?);
    ya.max_abs_diff(&yb)
        .ok_or_else(|| LevitError::shape("parity", format!("{:?}", ya.shape()), format!("{:?}", yb.shape())))
}

/// Convenience used by the timing harness: a conv's eval output with and without folding.
pub fn fused_conv_output<E: Element>(conv: &ConvBn<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    let mut c = conv.clone();
    fuse_conv(&mut c);
    ops::conv2d(x, &c.weight, c.bias.as_ref(), c.stride, c.padding)
}
