//! Fixtures shared by the criterion benches.

use boxalign_core::data::{generate_scene, Scene, SyntheticSceneSpec};
use boxalign_core::{BBox, Label};
use boxalign_core::losses::EmbeddingSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn scene(seed: u64) -> Scene {
    generate_scene(&mut rng(seed), &SyntheticSceneSpec::default()).expect("default spec places objects")
}

/// `n` random boxes inside a 64x64 image.
pub fn random_boxes(r: &mut ChaCha8Rng, n: usize) -> Vec<BBox> {
    (0..n)
        .map(|_| {
            let x0 = r.random_range(0.0..48.0);
            let y0 = r.random_range(0.0..48.0);
            BBox::from_corners(x0, y0, x0 + r.random_range(4.0..16.0), y0 + r.random_range(4.0..16.0)).expect("positive size")
        })
        .collect()
}

/// Unit embeddings with labels over `groups` proposals plus some background.
pub fn embeddings(r: &mut ChaCha8Rng, rows: usize, dim: usize, groups: usize) -> EmbeddingSet {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let v: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| x / n));
    }
    let labels = (0..rows)
        .map(|i| if i % 4 == 3 { Label::Background } else { Label::Proposal(i % groups) })
        .collect();
    EmbeddingSet::new(dim, data, labels).expect("consistent shapes")
}
