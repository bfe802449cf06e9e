pub mod assign;
pub mod augment;
pub mod config;
pub mod data;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod netcore;
pub mod pretrain;
pub mod proposals;

pub use config::RunConfig;
pub use data::{Dataset, DatasetManifest, UnlabeledImage};
pub use geometry::{BBox, Label};
pub use image::Image;
pub use metrics::StepMetrics;
pub use netcore::{DetectorNet, Flavor, NetConfig, ParamSet};
pub use pretrain::{BoxState, CheckpointManifest, TrainConfig};
pub use proposals::ProposalSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const STREAM_SCENE: u64 = 1;
pub(crate) const STREAM_FOLD: u64 = 2;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent rng stream for `(seed, tag, index)`.
pub fn stream_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed ^ splitmix64(tag)) ^ index))
}
