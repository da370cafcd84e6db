//! Shared fixtures for the benchmarks: a synthetic avatar and one of its
//! training frames at a chosen resolution.

use motionsplat::model::{AvatarModel, ModelConfig};
use motionsplat::render::RenderSettings;
use motionsplat::synthdata::{synthesize, Dataset, SceneConfig, SynthConfig};

pub struct Fixture {
    pub data: Dataset,
    pub model: AvatarModel,
}

/// A 3-frame dataset at `size`x`size` and a compact model of `gaussians`.
pub fn fixture(size: usize, gaussians: usize) -> Fixture {
    let (_, data) = synthesize(&SynthConfig {
        frames: 3,
        blur_size: 9,
        scene: SceneConfig {
            width: size,
            height: size,
            ..SceneConfig::default()
        },
        ..SynthConfig::default()
    })
    .expect("fixture synthesis");
    let config = ModelConfig {
        num_gaussians: gaussians,
        ..ModelConfig::compact()
    };
    let model = AvatarModel::new(data.manifest.chain.clone(), config, data.num_frames(), RenderSettings::default(), 0)
        .expect("fixture model");
    Fixture { data, model }
}
