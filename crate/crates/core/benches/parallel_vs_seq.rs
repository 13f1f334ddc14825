//! Rayon vs sequential throughput on the two data-parallel hot paths:
//! MPC rollout scoring and per-tuple loss gradients.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use travnav::bev::{InputImage, VoxelGridSpec, INPUT_CHANNELS};
use travnav::camera::{CameraModel, CameraMount, DepthBins, DepthImage};
use travnav::controller::{score_sequences_par, score_sequences_seq, MpcConfig, Reference};
use travnav::grid::TraversabilityMap;
use travnav::kinodynamics::{Control, State2D};
use travnav::model::{FrameInput, ModelConfig, TravNet, Variant};
use travnav::trainer::{loss, LossConfig, TrainingTuple};
use travnav::util::{par_map, seq_map};

fn bench_mpc_scoring(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut map = TraversabilityMap::uniform(80, 80, (-10.0, -10.0), 0.25, 1.0, 1.0);
    for v in map.mu.data.iter_mut() {
        *v = rng.gen_range(0.2..1.0);
    }
    let cfg = MpcConfig::default();
    let reference = Reference::new(vec![(5.0, 2.0)], 0.5).unwrap();
    let x0 = State2D::new(0.0, 0.0, 0.0);
    let sequences: Vec<Vec<Control>> = (0..512)
        .map(|_| {
            (0..cfg.n)
                .map(|_| Control::new(rng.gen_range(0.0..1.0), rng.gen_range(-1.5..1.5)))
                .collect()
        })
        .collect();

    let mut group = c.benchmark_group("mpc_rollout_scoring");
    group.bench_function(BenchmarkId::new("sequential", sequences.len()), |b| {
        b.iter(|| score_sequences_seq(&x0, &sequences, &reference, &map, &cfg))
    });
    group.bench_function(BenchmarkId::new("rayon", sequences.len()), |b| {
        b.iter(|| score_sequences_par(&x0, &sequences, &reference, &map, &cfg))
    });
    group.finish();
}

fn make_net_and_tuples() -> (TravNet, Vec<TrainingTuple>) {
    let cam = CameraModel::from_fov(
        24,
        18,
        90f64.to_radians(),
        &CameraMount { height: 0.3, forward: 0.0, pitch_down: 15f64.to_radians() },
    );
    let cfg = ModelConfig {
        context_channels: 4,
        bins: DepthBins::new(0.5, 8.0, 12).unwrap(),
        grid: VoxelGridSpec {
            origin: (-1.0, -3.0, -0.05),
            cell_xy: 0.25,
            cell_z: 0.4,
            nx: 24,
            ny: 24,
            nz: 3,
        },
        frames: 3,
        variant: Variant::VoxelTemporal,
    };
    let mut net = TravNet::new(cfg, cam).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    net.init_random(&mut rng, 0.2);
    let tuples: Vec<TrainingTuple> = (0..16)
        .map(|_| {
            let frames: Vec<FrameInput> = (0..3)
                .map(|t| {
                    let mut input = InputImage::zeros(24, 18, INPUT_CHANNELS);
                    for v in input.data.iter_mut() {
                        *v = rng.gen_range(0.0..1.0);
                    }
                    let mut occ = DepthImage::invalid(24, 18);
                    for d in occ.data.iter_mut() {
                        if rng.gen_bool(0.7) {
                            *d = rng.gen_range(0.6..7.5);
                        }
                    }
                    FrameInput {
                        input,
                        occ_depth: occ,
                        rel_pose: State2D::new(-0.1 * (2 - t) as f64, 0.0, 0.0),
                    }
                })
                .collect();
            let depth_targets = frames.iter().map(|f| f.occ_depth.clone()).collect();
            TrainingTuple {
                frames,
                depth_targets,
                label_poses: (0..8)
                    .map(|_| State2D::new(rng.gen_range(-0.5..2.0), rng.gen_range(-2.0..2.0), 0.0))
                    .collect(),
                label_trav: (0..8)
                    .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
                    .collect(),
            }
        })
        .collect();
    (net, tuples)
}

fn bench_batch_gradients(c: &mut Criterion) {
    let (net, tuples) = make_net_and_tuples();
    let cfg = LossConfig::default();
    let weights: Vec<Vec<f64>> = tuples.iter().map(|t| vec![1.0; t.label_trav.len()]).collect();
    let items: Vec<(usize, &TrainingTuple)> = tuples.iter().enumerate().collect();

    let mut group = c.benchmark_group("batch_loss_gradients");
    group.sample_size(20);
    group.bench_function(BenchmarkId::new("sequential", tuples.len()), |b| {
        b.iter(|| seq_map(&items, |(i, t)| loss(&net, t, &weights[*i], &cfg).unwrap().loss))
    });
    group.bench_function(BenchmarkId::new("rayon", tuples.len()), |b| {
        b.iter(|| par_map(&items, |(i, t)| loss(&net, t, &weights[*i], &cfg).unwrap().loss))
    });
    group.finish();
}

criterion_group!(benches, bench_mpc_scoring, bench_batch_gradients);
criterion_main!(benches);
