use std::sync::Arc;

use super::{Ctx, ParamKind, Params};
use crate::error::{LevitError, Result};
use crate::tensor::{Element, Tensor, Var};

/// Offset `(|x - x'|, |y - y'|)` between two pixels of an `H x W` grid.
pub fn bias_index(p: (usize, usize), q: (usize, usize), grid: (usize, usize)) -> Result<(usize, usize)> {
    let (height, width) = grid;
    for &(x, y) in &[p, q] {
        if x >= height || y >= width {
            return Err(LevitError::OutOfGrid { x, y, height, width });
        }
    }
    Ok((p.0.abs_diff(q.0), p.1.abs_diff(q.1)))
}

/// Per-head learnable bias indexed by absolute pixel offsets.
///
/// The table has one entry per offset of the key grid, `heads x H x W`.
/// Queries sit on the key grid at positions `(stride*i, stride*j)`, so a
/// shrinking block with stride 2 uses the same table shape as a regular block
/// over its input resolution.
#[derive(Debug, Clone)]
pub struct AttentionBiasTable<E: Element> {
    pub name: String,
    pub values: Tensor<E>,
    query_stride: usize,
    index: Arc<[usize]>,
}

impl<E: Element> AttentionBiasTable<E> {
    pub fn zeros(name: impl Into<String>, heads: usize, grid: (usize, usize), query_stride: usize) -> Self {
        Self::from_values(name, Tensor::zeros(&[heads, grid.0, grid.1]), query_stride).expect("three-axis table")
    }

    pub fn from_values(name: impl Into<String>, values: Tensor<E>, query_stride: usize) -> Result<Self> {
        let [heads, h, w] = values.shape()[..] else {
            return Err(LevitError::shape("AttentionBiasTable", "(heads, H, W)", format!("{:?}", values.shape())));
        };
        let (hq, wq) = (h.div_ceil(query_stride), w.div_ceil(query_stride));
        let per_head = h * w;
        let mut index = Vec::with_capacity(heads * hq * wq * per_head);
        for head in 0..heads {
            for qi in 0..hq {
                for qj in 0..wq {
                    for kx in 0..h {
                        for ky in 0..w {
                            let (dx, dy) = bias_index((qi * query_stride, qj * query_stride), (kx, ky), (h, w))?;
                            index.push(head * per_head + dx * w + dy);
                        }
                    }
                }
            }
        }
        Ok(Self { name: name.into(), values, query_stride, index: index.into() })
    }

    pub fn heads(&self) -> usize {
        self.values.shape()[0]
    }

    /// Key grid `(H, W)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }

    pub fn query_grid(&self) -> (usize, usize) {
        let (h, w) = self.grid();
        (h.div_ceil(self.query_stride), w.div_ceil(self.query_stride))
    }

    pub fn query_stride(&self) -> usize {
        self.query_stride
    }

    fn expanded_shape(&self) -> [usize; 4] {
        let (hq, wq) = self.query_grid();
        let (h, w) = self.grid();
        [1, self.heads(), hq * wq, h * w]
    }

    /// Bias between query pixel `p` (query-grid coordinates) and key pixel `q`.
    pub fn lookup(&self, head: usize, p: (usize, usize), q: (usize, usize)) -> Result<E> {
        let (hq, wq) = self.query_grid();
        if p.0 >= hq || p.1 >= wq {
            return Err(LevitError::OutOfGrid { x: p.0, y: p.1, height: hq, width: wq });
        }
        let s = self.query_stride;
        let (h, w) = self.grid();
        let (dx, dy) = bias_index((p.0 * s, p.1 * s), q, (h, w))?;
        Ok(self.values.data()[head * h * w + dx * w + dy])
    }

    /// `(heads, Hq*Wq, H*W)` bias matrix added to the attention logits.
    pub fn expanded(&self) -> Tensor<E> {
        let [_, n, q, k] = self.expanded_shape();
        crate::tensor::ops::gather(&self.values, &self.index, &[n, q, k]).expect("index built from the table")
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, E>) -> Result<Var<'t, E>> {
        let table = ctx.param(&self.name, &self.values);
        table.gather(Arc::clone(&self.index), &self.expanded_shape())
    }

    /// Rebuilds the lookup after `values` was replaced wholesale.
    pub fn with_values(&self, values: Tensor<E>) -> Result<Self> {
        Self::from_values(self.name.clone(), values, self.query_stride)
    }
}

impl<E: Element> Params<E> for AttentionBiasTable<E> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<E>, ParamKind)) {
        f(&self.name, &self.values, ParamKind::Learnable);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>, ParamKind)) {
        let shape = self.values.shape().to_vec();
        f(&self.name, &mut self.values, ParamKind::Learnable);
        assert_eq!(self.values.shape(), shape.as_slice(), "bias table shape is fixed");
    }
}
