use std::collections::HashMap;

use boxalign_bench::{embeddings, random_boxes, rng, scene};
use boxalign_core::assign::{assign_iou, hungarian, IouAssignConfig};
use boxalign_core::data::UnlabeledImage;
use boxalign_core::geometry::{nms, ScoredBox};
use boxalign_core::losses::{contrastive_forward, LossConfig};
use boxalign_core::{DetectorNet, Flavor, NetConfig};
use boxalign_core::pretrain::{box_domain_step, BoxState, PseudoClasses, TrainConfig};
use boxalign_core::proposals::{generate_proposals, ProposalConfig};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;

fn geometry(c: &mut Criterion) {
    let mut r = rng(1);
    let boxes: Vec<ScoredBox> = random_boxes(&mut r, 300)
        .into_iter()
        .map(|bbox| ScoredBox { bbox, score: r.random() })
        .collect();
    c.bench_function("nms_300", |b| b.iter(|| nms(&boxes, 0.5)));
    let cands = random_boxes(&mut r, 240);
    let props = random_boxes(&mut r, 16);
    let cfg = IouAssignConfig::default();
    c.bench_function("assign_iou_240x16", |b| b.iter(|| assign_iou(&cands, &props, &cfg).unwrap()));
    let cost: Vec<f64> = (0..64 * 16).map(|_| r.random()).collect();
    c.bench_function("hungarian_64x16", |b| b.iter(|| hungarian(&cost, 16, 64).unwrap()));
}

fn proposals(c: &mut Criterion) {
    let s = scene(2);
    let cfg = ProposalConfig::default();
    c.bench_function("selective_search_64", |b| b.iter(|| generate_proposals(0, &s.image, &cfg)));
}

fn contrastive(c: &mut Criterion) {
    let mut r = rng(3);
    let z1 = embeddings(&mut r, 256, 32, 12);
    let z2 = embeddings(&mut r, 256, 32, 12);
    let cfg = LossConfig::default();
    c.bench_function("contrastive_256x32", |b| b.iter(|| contrastive_forward(&z1, &z2, &cfg).unwrap()));
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("box_step");
    group.sample_size(10);
    let images: Vec<UnlabeledImage> = (0..4).map(|i| UnlabeledImage { id: i, image: scene(10 + i).image }).collect();
    let props: HashMap<_, _> = images.iter().map(|u| (u.id, generate_proposals(u.id, &u.image, &ProposalConfig::default()))).collect();
    for flavor in Flavor::ALL {
        let cfg = TrainConfig::new(flavor);
        let backbone = DetectorNet::new(NetConfig::new(flavor), &mut rng(4)).params;
        let batch: Vec<&UnlabeledImage> = images.iter().collect();
        let pseudo: PseudoClasses = props.iter().map(|(id, p)| (*id, vec![0; p.len()])).collect();
        let mut state = BoxState::new(&cfg, &backbone).unwrap();
        group.bench_function(flavor.to_string(), |b| b.iter(|| box_domain_step(&mut state, &cfg, &batch, &props, &pseudo).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, geometry, proposals, contrastive, train_step);
criterion_main!(benches);
