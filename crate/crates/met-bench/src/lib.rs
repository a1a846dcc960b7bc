//! Shared fixtures for the criterion benchmarks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use met_core::multi_exit::{ExitPlan, MergeMode, MetModel};
use met_core::vit::{BackboneWeights, ImageBatch, ViTConfig};
use met_core::Parameter;

/// A small but non-trivial model: 4 layers, 3 exits, randomized adapters.
pub fn bench_model() -> MetModel {
    let config = ViTConfig {
        image_height: 32,
        image_width: 32,
        patch: 8,
        dim: 32,
        layers: 4,
        heads: 4,
        num_classes: 4,
    };
    let backbone = BackboneWeights::seeded(&config, 1).unwrap();
    let plan = ExitPlan::last_layers(3, 4).unwrap();
    let mut model =
        MetModel::new(backbone, plan, 8, MergeMode::ResidualOnce, false, false, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    model.for_each_trainable_mut(&mut |p: &mut Parameter| {
        for v in p.tensor.data.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    });
    model
}

pub fn bench_batch(model: &MetModel, count: usize, seed: u64) -> ImageBatch {
    let config = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = count * 3 * config.image_height * config.image_width;
    let images = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels = (0..count).map(|i| i % config.num_classes).collect();
    ImageBatch::new(
        count,
        config.image_height,
        config.image_width,
        images,
        labels,
    )
    .unwrap()
}
