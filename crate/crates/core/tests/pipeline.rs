//! End-to-end library flows: scene files on disk, training in every mode,
//! checkpoints and evaluation.

use feddy_core::dynamic_gnn::{self, init_params, read_checkpoint, write_checkpoint, Activation, Hyperparams};
use feddy_core::federated::{
    partition_clients, train, Mode, PartitionStrategy, PlainTransport, RoundPlan, SecureTransport,
};
use feddy_core::graph_model::{validate_sequence, GraphSequence};
use feddy_core::ingest::{
    parse_sdd_annotations, read_native, split_sequence, synth_scene, tracks_to_graph_sequence, write_native,
    RecordFilter, SplitFractions, SynthConfig,
};
use feddy_core::secure_agg::setup_params;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};

fn scene(seed: u64, frames: usize) -> GraphSequence {
    synth_scene(&SynthConfig {
        n_objects: 4,
        n_frames: frames,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn native_file_round_trip_preserves_training() {
    let dir = tempfile::tempdir().unwrap();
    let seq = scene(3, 50);
    let path = dir.path().join("scene.jsonl");
    let mut w = BufWriter::new(File::create(&path).unwrap());
    write_native(&seq, &mut w).unwrap();
    w.flush().unwrap();
    drop(w);
    let back = read_native(BufReader::new(File::open(&path).unwrap())).unwrap();
    assert!(validate_sequence(&back).is_empty());

    let hyper = Hyperparams::new(6, seq.feature_len, 2, 0.1, 0.1, Activation::Tanh);
    let params = init_params(hyper, 1).unwrap();
    let a = dynamic_gnn::loss(&seq, &params, 5).unwrap();
    let b = dynamic_gnn::loss(&back, &params, 5).unwrap();
    assert!((a - b).abs() <= 1e-12 * a.abs());
}

#[test]
fn train_checkpoint_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let seq = scene(4, 200);
    let split = split_sequence(&seq, seq.fps, Some(SplitFractions::default())).unwrap();
    let hyper = Hyperparams::new(8, seq.feature_len, 2, 0.1, 0.1, Activation::Tanh);
    let clients = partition_clients(std::slice::from_ref(&split.train), 1, PartitionStrategy::ByTime, &hyper, 5).unwrap();
    let plan = RoundPlan {
        sync_every: 1,
        eta: 0.2,
        epochs: 15,
        mode: Mode::Central,
    };
    let out = train(&plan, &clients, init_params(hyper, 0).unwrap(), &mut PlainTransport, "t").unwrap();
    assert_eq!(out.metrics.len(), 15);
    assert!(out.metrics.last().unwrap().loss < out.metrics[0].loss);

    let path = dir.path().join("ckpt.txt");
    write_checkpoint(&out.params, BufWriter::new(File::create(&path).unwrap())).unwrap();
    let back = read_checkpoint(BufReader::new(File::open(&path).unwrap())).unwrap();
    assert_eq!(back.as_flat(), out.params.as_flat());

    let on_test = dynamic_gnn::evaluate_rmse(&split.test, &back, 5).unwrap();
    assert!(on_test.x.is_finite() && on_test.y.is_finite());
}

#[test]
fn by_time_secure_run_matches_plain_within_fixed_point_error() {
    let seq = scene(5, 120);
    let hyper = Hyperparams::new(4, seq.feature_len, 1, 0.2, 0.1, Activation::Tanh);
    let clients = partition_clients(&[seq], 3, PartitionStrategy::ByTime, &hyper, 4).unwrap();
    let init = init_params(hyper, 2).unwrap();
    let plan = |mode| RoundPlan {
        sync_every: 3,
        eta: 0.1,
        epochs: 9,
        mode,
    };
    let plain = train(&plan(Mode::FedPlain), &clients, init.clone(), &mut PlainTransport, "p").unwrap();
    let (params, _) = setup_params(512, 20, Some(1), 1).unwrap();
    let mut secure_t = SecureTransport::new(params, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let secure = train(&plan(Mode::FedSecure), &clients, init, &mut secure_t, "s").unwrap();
    let bound = 3.0 * 0.1 * 3.0 * 2f64.powi(-21) * (1.0 + 1e-9);
    assert!(plain.params.max_abs_diff(&secure.params) <= bound);
}

#[test]
fn annotations_to_trainable_sequence() {
    let mut text = String::new();
    for f in 0..30u64 {
        for id in 0..3u64 {
            let x = 10 + id as i64 * 40 + f as i64 * 2;
            let y = 20 + id as i64 * 30 + f as i64;
            text.push_str(&format!("{id} {x} {y} {} {} {f} 0 0 0 \"Pedestrian\"\n", x + 10, y + 20));
        }
    }
    let records = parse_sdd_annotations(text.as_bytes()).unwrap();
    let seq = tracks_to_graph_sequence(&records, 400.0, 300.0, 30.0, RecordFilter::default()).unwrap();
    assert_eq!(seq.total_nodes(), 90);
    let hyper = Hyperparams::new(4, seq.feature_len, 2, 0.1, 0.1, Activation::Tanh);
    let params = init_params(hyper, 0).unwrap();
    assert!(dynamic_gnn::gradient(&seq, &params, 5).unwrap().is_finite());
}
