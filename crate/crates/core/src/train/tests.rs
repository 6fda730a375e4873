use super::*;
use crate::ingest::{synth_sequence, SynthParams};
use crate::preprocess::make_segments;
use crate::tfbrt::ModelConfig;

fn model_cfg() -> ModelConfig {
    ModelConfig {
        window: 16,
        hidden: 8,
        heads: 2,
        kernel: 3,
        depth: 1,
        dropout: 0.1,
        rpe_radius: 2,
    }
}

fn segments(seed: u64) -> Vec<SegmentSample> {
    let rec = synth_sequence(&SynthParams {
        duration: 3.0,
        waypoints: 4,
        seed,
        ..SynthParams::default()
    })
    .unwrap();
    make_segments(&rec, 16, 3, 48).unwrap()
}

fn trainer(train: TrainConfig, segs: &[SegmentSample]) -> Trainer {
    let mut p = ModelParams::init(&model_cfg(), 7).unwrap();
    fit_normalization(&mut p, segs).unwrap();
    Trainer::new(
        p,
        TrainConfig {
            segment_windows: 3,
            segment_step: 48,
            ..train
        },
    )
    .unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        lr: 1e-3,
        loss_warmup: 3,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic() {
    let segs = segments(1);
    let run = || {
        let mut t = trainer(small_config(), &segs);
        let mut log = TrainLog::none();
        let mut recs = Vec::new();
        for _ in 0..3 {
            t.train_epoch(&segs, None, &mut log).unwrap();
        }
        recs.push(t.params.clone());
        (recs, t.step)
    };
    assert_eq!(run(), run());
}

#[test]
fn identical_segments_average_to_single_gradient() {
    let segs = segments(2);
    let cfg = TrainConfig {
        augment: false,
        ..small_config()
    };
    let mut single = trainer(cfg.clone(), &segs);
    single.params.config.dropout = 0.0;
    let mut double = single.clone();
    let (g1, r1, ..) = single.batch_gradients(&segs[..1]).unwrap();
    let (g2, r2, ..) = double.batch_gradients(&[segs[0].clone(), segs[0].clone()]).unwrap();
    assert_eq!(r1, r2);
    for (k, a) in &g1 {
        assert!(a.max_abs_diff(&g2[k]) < 1e-12 * (1.0 + a.norm()), "{k}");
    }
    assert_eq!(single.loss_state, double.loss_state);
}

#[test]
fn training_reduces_loss() {
    let segs = segments(3);
    let mut t = trainer(
        TrainConfig {
            augment: false,
            lr: 3e-3,
            ..small_config()
        },
        &segs,
    );
    let before = evaluate_losses(&t.params, &segs, 0.05).unwrap()[0];
    let mut log = TrainLog::none();
    for _ in 0..40 {
        t.train_epoch(&segs, Some(&segs), &mut log).unwrap();
    }
    let after = evaluate_losses(&t.params, &segs, 0.05).unwrap()[0];
    assert!(after < 0.5 * before, "{before} -> {after}");
}

#[test]
fn empty_split_rejected() {
    let segs = segments(0);
    let mut t = trainer(small_config(), &segs);
    assert!(t.train_epoch(&[], None, &mut TrainLog::none()).is_err());
    assert!(validation_loss(&t.params, &[], &t.loss_state, 0.05).is_err());
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let segs = segments(4);
    let mut a = trainer(small_config(), &segs);
    let mut log = TrainLog::none();
    a.train_epoch(&segs, Some(&segs), &mut log).unwrap();

    let path = dir.path().join("a.ckpt");
    a.checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, a.checkpoint());
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), bytes);
    assert_eq!(
        evaluate_losses(&loaded.model, &segs, 0.05).unwrap(),
        evaluate_losses(&a.params, &segs, 0.05).unwrap()
    );

    let mut b = Trainer::from_checkpoint(loaded.clone()).unwrap();
    let sa = a.train_epoch(&segs, Some(&segs), &mut log).unwrap();
    let sb = b.train_epoch(&segs, Some(&segs), &mut log).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(a.params, b.params);

    assert!(loaded.require_config(&model_cfg()).is_ok());
    assert!(loaded.require_config(&ModelConfig { hidden: 16, ..model_cfg() }).is_err());
}

#[test]
fn corrupt_checkpoints_rejected() {
    let segs = segments(5);
    let t = trainer(small_config(), &segs);
    let bytes = t.checkpoint().to_bytes().unwrap();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
    let mut wrong_version = bytes.clone();
    wrong_version[8] = 99;
    match Checkpoint::from_bytes(&wrong_version) {
        Err(Error::Checkpoint(m)) => assert!(m.contains("version")),
        other => panic!("{other:?}"),
    }
    let mut bad_magic = bytes;
    bad_magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad_magic).is_err());
}

#[test]
fn heading_bins() {
    assert_eq!(heading_bin([1.0, 0.0]), 0);
    assert_eq!(heading_bin([0.0, 1.0]), 2);
    assert_eq!(heading_bin([-1.0, 0.0]), 5);
    assert_eq!(heading_bin([1.0, -1e-9]), 9);
    let mut seen = [false; HEADING_BINS];
    for k in 0..360 {
        let a = (k as f64 + 0.5).to_radians();
        seen[heading_bin([a.cos(), a.sin()])] = true;
    }
    assert!(seen.iter().all(|&s| s));
}

#[test]
fn export_rows_and_width() {
    let dir = tempfile::tempdir().unwrap();
    let segs = segments(6);
    let t = trainer(small_config(), &segs);
    let windows: Vec<_> = segs.iter().flat_map(|s| s.windows.clone()).collect();
    let path = dir.path().join("h.csv");
    let rows = export_hidden_features(&t.params, &windows, 3, &path).unwrap();
    assert_eq!(rows, windows.len());
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), windows.len() + 1);
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f.len(), 4 + model_cfg().hidden);
        assert!(f[3].parse::<usize>().unwrap() < HEADING_BINS);
    }
}
