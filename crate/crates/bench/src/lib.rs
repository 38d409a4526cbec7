//! Fixtures shared by the criterion benches under `benches/`.

use levit_core::fusion::fuse_model;
use levit_core::profile::random_tensor;
use levit_core::{preset, Model, Tensor};

/// A preset built with a fixed seed, plus its fused copy.
pub struct Fixture {
    pub unfused: Model<f32>,
    pub fused: Model<f32>,
    pub images: Tensor<f32>,
}

impl Fixture {
    pub fn new(name: &str, resolution: usize, batch: usize) -> Self {
        let spec = preset(name).and_then(|s| s.with_resolution(resolution)).expect("known preset and valid resolution");
        let unfused: Model<f32> = Model::build(&spec, 0).expect("presets build");
        let fused = fuse_model(unfused.clone()).expect("eval-mode model fuses").into_model();
        let images = random_tensor(&[batch, 3, resolution, resolution], 1);
        Self { unfused, fused, images }
    }

    /// Input to the first stage, i.e. the patch embedding's output.
    pub fn stage_input(&self) -> Tensor<f32> {
        self.unfused.infer_stages(&self.images).expect("valid images").swap_remove(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_shapes() {
        let f = Fixture::new("LeViT-128S", 64, 2);
        assert_eq!(f.stage_input().shape(), &[2, 128, 4, 4]);
        assert!(f.fused.is_fused());
    }
}
