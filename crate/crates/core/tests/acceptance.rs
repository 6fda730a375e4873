//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line with the
//! measured value next to its threshold.
//!
//! ```bash
//! cargo test -p magtrack --test acceptance -- --nocapture --test-threads 1
//! ```

use std::time::Instant;

use magtrack::baseline::{ekf_orientations, gyro_heading, gyro_orientations, mag_heading, ndi_track, EkfConfig};
use magtrack::config::RunConfig;
use magtrack::geom::{rotate_planar, wrap_angle, yaw_rotation, Quaternion, Vec3};
use magtrack::ingest::{synth_sequence, synth_with_truth, SequenceRecord, Split, SynthParams};
use magtrack::loss::weighted_total;
use magtrack::metrics::{ate, aye, integrate_velocity, pde, rte};
use magtrack::pipeline::{self, Method};
use magtrack::preprocess::{augment_rotation, compute_features, mag_body_derivative, make_segments, segments_from, FeatureOptions};
use magtrack::tfbrt::{forward, init_state, ForwardCtx, ModelConfig, ModelParams};
use magtrack::train::{evaluate_losses, fit_normalization, segment_forward, Checkpoint, TrainConfig, Trainer};
use magtrack_tensor::gradcheck::catalogue::{self, VARIANTS};
use magtrack_tensor::{grad_check_many, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(name: &str, ok: bool, detail: String) {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

fn yaw_rmse(est: &[f64], truth: &[Quaternion]) -> f64 {
    let s: f64 = est.iter().zip(truth).map(|(e, q)| wrap_angle(e - q.yaw()).powi(2)).sum();
    (s / est.len() as f64).sqrt()
}

fn planar(v: Vec3) -> [f64; 2] {
    [v.x, v.y]
}

#[test]
fn gradient_oracle() {
    let t0 = Instant::now();
    let mut worst_op = (0.0f64, "");
    for case in catalogue::all() {
        for variant in 0..VARIANTS {
            for seed in 0..5 {
                let e = catalogue::check_case(&case, variant, seed).unwrap();
                if e > worst_op.0 {
                    worst_op = (e, case.name);
                }
            }
        }
    }

    let cfg = ModelConfig {
        window: 8,
        hidden: 16,
        heads: 2,
        kernel: 3,
        depth: 1,
        dropout: 0.0,
        rpe_radius: 2,
    };
    let rec = synth_sequence(&SynthParams {
        duration: 3.0,
        waypoints: 3,
        seed: 4,
        ..SynthParams::default()
    })
    .unwrap();
    let segs = make_segments(&rec, 8, 2, 40).unwrap();
    let seg = &segs[2];
    let mut params = ModelParams::init(&cfg, 3).unwrap();
    fit_normalization(&mut params, &segs).unwrap();
    let names: Vec<String> = params.arrays.keys().cloned().collect();
    let inputs: Vec<Tensor> = names.iter().map(|n| params.arrays[n].clone()).collect();
    let e2e = grad_check_many(
        |tape, vars| {
            let mut b = params.bind(tape, false);
            for (n, v) in names.iter().zip(vars) {
                b.vars.insert(n.clone(), *v);
            }
            let l = segment_forward(tape, &params, &b, seg, &ForwardCtx::eval(), 0, 0.05).unwrap();
            Ok(weighted_total(tape, l.as_array(), [0.7, 0.2, 0.1]).unwrap())
        },
        &inputs,
    )
    .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "gradient oracle",
        worst_op.0 < 1e-4 && e2e < 1e-3 && secs < 120.0,
        format!(
            "worst op {:.2e} ({}) < 1e-4, end-to-end {e2e:.2e} < 1e-3 over {} scalars, {secs:.1} s",
            worst_op.0,
            worst_op.1,
            params.num_scalars()
        ),
    );
}

#[test]
fn mag_derivative_oracle() {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let p = SynthParams {
            duration: 30.0,
            waypoints: 10,
            seed,
            ..SynthParams::default()
        }
        .noiseless();
        let (rec, truth) = synth_with_truth(&p).unwrap();
        assert!((rec.fs() - 200.0).abs() < 1e-6);
        let dm = mag_body_derivative(&rec, None).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for (i, s) in rec.samples().iter().enumerate() {
            // body→world orientation: m^b = Rᵀ m^w, so d/dt m^b = -ω^b × m^b
            let analytic = -truth.omega_body[i].cross(s.mag);
            num += (dm[i] - analytic).dot(dm[i] - analytic);
            den += analytic.dot(analytic);
        }
        worst = worst.max((num / den).sqrt());
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "mag derivative oracle",
        worst < 1e-2 && secs < 10.0,
        format!("worst relative rms {worst:.2e} < 1e-2 on 5 sequences, {secs:.1} s"),
    );
}

#[test]
fn dct_properties() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut norm_err, mut inv_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let len = rng.random_range(2..=200);
        let cols = rng.random_range(1..=9);
        let x = Tensor::from_fn(&[len, cols], |_| rng.random_range(-5.0..5.0));
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.dct2(v).unwrap();
        let back = tape.dct3(y).unwrap();
        let sq = |t: &Tensor| t.data().iter().map(|a| a * a).sum::<f64>();
        let nx = sq(&x);
        norm_err = norm_err.max((sq(tape.value(y)) - nx).abs() / nx);
        let d = tape.value(back).data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        inv_err = inv_err.max(d);
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "dct properties",
        norm_err < 1e-9 && inv_err < 1e-9 && secs < 5.0,
        format!("relative norm change {norm_err:.2e}, round trip {inv_err:.2e} (both < 1e-9) on 100 inputs, {secs:.2} s"),
    );
}

#[test]
fn heading_drift_reproduction() {
    let t0 = Instant::now();
    let p = SynthParams {
        duration: 300.0,
        waypoints: 60,
        bias_gyro: Vec3::new(0.0, 0.0, 0.002),
        seed: 21,
        ..SynthParams::default()
    };
    let (rec, truth) = synth_with_truth(&p).unwrap();
    let gyro = yaw_rmse(&gyro_heading(&rec).unwrap(), &truth.orient);
    let mag = yaw_rmse(&mag_heading(&rec).unwrap(), &truth.orient);
    let yaws = |q: Vec<Quaternion>| q.iter().map(Quaternion::yaw).collect::<Vec<_>>();
    let ekf = yaw_rmse(&yaws(ekf_orientations(&rec, &EkfConfig::default()).unwrap()), &truth.orient);
    let gyro_only = yaw_rmse(&yaws(gyro_orientations(&rec).unwrap()), &truth.orient);
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "heading drift reproduction",
        mag < gyro && ekf < gyro_only && secs < 30.0,
        format!("mag {mag:.4} < gyro {gyro:.4} rad, ekf {ekf:.4} < gyro-only {gyro_only:.4} rad over 300 s, {secs:.1} s"),
    );
}

fn ndi_ate(fs: f64) -> f64 {
    let p = SynthParams {
        duration: 60.0,
        fs,
        waypoints: 20,
        seed: 5,
        ..SynthParams::default()
    }
    .noiseless();
    let rec = synth_sequence(&p).unwrap();
    let track = ndi_track(&rec).unwrap();
    let pred = track.pos.clone();
    let gt: Vec<[f64; 2]> = rec.samples().iter().map(|s| planar(s.gt_pos.unwrap())).collect();
    ate(&pred, &gt).unwrap()
}

#[test]
fn ndi_oracle() {
    let t0 = Instant::now();
    let coarse = ndi_ate(200.0);
    let fine = ndi_ate(400.0);
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "ndi oracle",
        coarse < 0.05 && coarse >= 3.0 * fine && secs < 30.0,
        format!("ATE {coarse:.2e} m < 0.05 at 200 Hz, {fine:.2e} m at 400 Hz (ratio {:.1} >= 3), {secs:.1} s", coarse / fine),
    );
}

#[test]
fn metric_unit_suite() {
    let t0 = Instant::now();
    let fs = 10.0;
    let n = 1201;
    let gt: Vec<[f64; 2]> = (0..n).map(|i| [0.5 * i as f64 / fs, (i as f64 / 200.0).sin()]).collect();
    let mut checks = Vec::new();

    let offset: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] + 3.0, p[1] - 4.0]).collect();
    checks.push(("offset ATE", ate(&offset, &gt).unwrap(), 0.0));

    let rate = 0.02;
    let drift: Vec<[f64; 2]> = gt.iter().enumerate().map(|(i, p)| [p[0] + rate * i as f64 / fs, p[1]]).collect();
    checks.push(("drift RTE", rte(&drift, &gt, fs, 60.0).unwrap(), rate * 60.0));
    let ms: f64 = (0..n).map(|i| (rate * i as f64 / fs).powi(2)).sum::<f64>() / n as f64;
    checks.push(("drift ATE", ate(&drift, &gt).unwrap(), ms.sqrt()));

    let square = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]];
    let off_end = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.3, 0.4]];
    checks.push(("PDE arithmetic", pde(&off_end, &square).unwrap(), 0.5 / 4.0));

    let vg: Vec<[f64; 2]> = (0..50).map(|i| { let a = i as f64 * 0.1; [a.cos(), a.sin()] }).collect();
    let ortho: Vec<[f64; 2]> = vg.iter().map(|v| [-2.0 * v[1], 2.0 * v[0]]).collect();
    let (deg, unit) = aye(&ortho, &vg, 0.1).unwrap();
    checks.push(("AYE orthogonal degrees", deg, 90.0));
    checks.push(("AYE orthogonal unit vector", unit, 2f64.sqrt()));

    let tr = integrate_velocity(&[[1.0, 2.0]; 11], 0.1, [5.0, 5.0]).unwrap();
    checks.push(("constant velocity integral x", tr.pos[10][0], 6.0));
    checks.push(("constant velocity integral y", tr.pos[10][1], 7.0));

    let worst = checks.iter().map(|(_, got, want)| (got - want).abs()).fold(0.0, f64::max);
    for (name, got, want) in &checks {
        println!("  {name}: {got:.12} vs {want:.12}");
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "metric unit suite",
        worst < 1e-9 && secs < 5.0,
        format!("{} cases, worst deviation {worst:.2e} < 1e-9, {secs:.2} s", checks.len()),
    );
}

#[test]
fn overfit_smoke() {
    let t0 = Instant::now();
    let rec = synth_sequence(&SynthParams {
        duration: 6.0,
        waypoints: 4,
        seed: 3,
        ..SynthParams::default()
    })
    .unwrap();
    let cfg = ModelConfig {
        window: 50,
        hidden: 32,
        heads: 4,
        kernel: 5,
        depth: 1,
        dropout: 0.0,
        rpe_radius: 8,
    };
    let segs = make_segments(&rec, cfg.window, 4, 1000).unwrap();
    let seg = &segs[1..2];
    let mut params = ModelParams::init(&cfg, 1).unwrap();
    fit_normalization(&mut params, seg).unwrap();
    let mut trainer = Trainer::new(
        params,
        TrainConfig {
            batch_size: 1,
            lr: 3e-3,
            augment: false,
            loss_warmup: 20,
            segment_windows: 4,
            segment_step: 1000,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let mut rmse = f64::INFINITY;
    let mut steps = 0;
    while steps < 2000 && rmse >= 0.05 {
        trainer.train_step(seg).unwrap();
        steps += 1;
        if steps % 50 == 0 {
            rmse = evaluate_losses(&trainer.params, seg, 0.05).unwrap()[0];
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "overfit smoke",
        rmse < 0.05 && secs < 600.0,
        format!("velocity rmse {rmse:.4} < 0.05 m/s after {steps} steps (limit 2000), {secs:.0} s"),
    );
}

fn smoke_config(dir: &std::path::Path) -> RunConfig {
    RunConfig::parse(&format!(
        "synth.count = 25\nsynth.duration = 90\nsynth.waypoints = 25\n\
         model.window = 50\nmodel.hidden = 32\nmodel.heads = 4\nmodel.depth = 1\nmodel.rpe_radius = 8\n\
         train.batch_size = 8\ntrain.lr = 1e-3\ntrain.segment_windows = 4\ntrain.segment_step = 200\n\
         train.loss_warmup = 20\ntrain.max_epochs = 4\neval.chunk = 4\n\
         data.manifest = {}\n",
        dir.join("data").join(pipeline::MANIFEST_FILE).display()
    ))
    .unwrap()
}

#[test]
fn generalization_smoke() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let manifest = pipeline::synth_dataset(&cfg.synth, 7, &dir.path().join("data")).unwrap();
    assert_eq!(manifest.get(Split::Train).len(), 15);
    let run = pipeline::train_run(&cfg, dir.path(), false).unwrap();
    let model = pipeline::load_model(&run.best).unwrap();
    let mut held_out = pipeline::load_split(&manifest, Split::TestSeen).unwrap();
    held_out.extend(pipeline::load_split(&manifest, Split::TestUnseen).unwrap());
    let score = |m: Method| pipeline::evaluate_records(m, Some(&model), &held_out, &cfg).unwrap().aggregate;
    let (tf, ndi, ekf) = (score(Method::Tfbrt), score(Method::Ndi), score(Method::Ekf));
    let r = |s: &magtrack::metrics::MetricsSummary| s.rte.unwrap();
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "generalization smoke",
        tf.ate < ndi.ate && tf.ate < ekf.ate && r(&tf) < r(&ndi) && r(&tf) < r(&ekf) && secs < 2700.0,
        format!(
            "ATE tfbrt {:.2} < ndi {:.2}, ekf {:.2} m; RTE tfbrt {:.2} < ndi {:.2}, ekf {:.2} m on {} held-out sequences, {secs:.0} s",
            tf.ate,
            ndi.ate,
            ekf.ate,
            r(&tf),
            r(&ndi),
            r(&ekf),
            held_out.len()
        ),
    );
}

fn rotate_record(rec: &SequenceRecord, phi: f64) -> SequenceRecord {
    let q = yaw_rotation(phi);
    rec.map_samples(|s| magtrack::ingest::ImuSample {
        orient: q.hamilton(s.orient).canonical(),
        gt_pos: s.gt_pos.map(|p| q.rotate(p)),
        ..s.clone()
    })
    .unwrap()
}

fn rotate_all(v: &[[f64; 2]], phi: f64) -> Vec<[f64; 2]> {
    v.iter().map(|&p| rotate_planar(p, phi)).collect()
}

#[test]
fn augmentation_invariance() {
    let t0 = Instant::now();
    let phi = 1.1;
    let rec = synth_sequence(&SynthParams {
        duration: 80.0,
        waypoints: 25,
        seed: 12,
        ..SynthParams::default()
    })
    .unwrap();
    let rotated = rotate_record(&rec, phi);

    let opts = FeatureOptions::default();
    let base = segments_from(&compute_features(&rec, &opts).unwrap(), 16, 4, 400).unwrap();
    let turned = segments_from(&compute_features(&rotated, &opts).unwrap(), 16, 4, 400).unwrap();
    let mut feat_err = 0.0f64;
    for (a, b) in base.iter().zip(&turned) {
        let a = augment_rotation(a, phi);
        for (wa, wb) in a.windows.iter().zip(&b.windows) {
            for (ra, rb) in wa.features.iter().zip(&wb.features) {
                feat_err = ra.iter().zip(rb).map(|(x, y)| (x - y).abs()).fold(feat_err, f64::max);
            }
            for (va, vb) in wa.gt_vel.iter().zip(&wb.gt_vel) {
                feat_err = feat_err.max((va[0] - vb[0]).abs()).max((va[1] - vb[1]).abs());
            }
        }
    }

    let cfg = RunConfig::parse("model.window = 16\nmodel.hidden = 16\nmodel.heads = 2\nmodel.depth = 1\neval.chunk = 4").unwrap();
    let mut params = ModelParams::init(&cfg.model, 2).unwrap();
    fit_normalization(&mut params, &base).unwrap();
    let mut trainer = Trainer::new(
        params,
        TrainConfig {
            batch_size: 4,
            lr: 1e-3,
            segment_windows: 4,
            segment_step: 400,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    for batch in base.chunks(4).take(20) {
        trainer.train_step(batch).unwrap();
    }
    let model = trainer.params;

    let tr = pipeline::track(Method::Tfbrt, Some(&model), &rec, &cfg).unwrap();
    let gt = tr.gt_pos.clone().unwrap();
    let (pred_r, gt_r) = (rotate_all(&tr.pos, phi), rotate_all(&gt, phi));
    let d_ate = (ate(&pred_r, &gt_r).unwrap() - ate(&tr.pos, &gt).unwrap()).abs();
    let d_rte = (rte(&pred_r, &gt_r, tr.fs, 60.0).unwrap() - rte(&tr.pos, &gt, tr.fs, 60.0).unwrap()).abs();

    let tr_rot = pipeline::track(Method::Tfbrt, Some(&model), &rotated, &cfg).unwrap();
    let model_shift = (ate(&tr_rot.pos, tr_rot.gt_pos.as_ref().unwrap()).unwrap() - ate(&tr.pos, &gt).unwrap()).abs();
    println!("  (info) ATE change when the model consumes the rotated input: {model_shift:.3} m");

    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "augmentation invariance",
        feat_err < 1e-9 && d_ate < 1e-6 && d_rte < 1e-6 && secs < 120.0,
        format!("feature mismatch {feat_err:.2e} < 1e-9, |ΔATE| {d_ate:.2e}, |ΔRTE| {d_rte:.2e} (< 1e-6), {secs:.1} s"),
    );
}

#[test]
fn determinism_and_persistence() {
    let t0 = Instant::now();
    let rec = synth_sequence(&SynthParams {
        duration: 30.0,
        waypoints: 10,
        seed: 9,
        ..SynthParams::default()
    })
    .unwrap();
    let cfg = ModelConfig {
        window: 16,
        hidden: 16,
        heads: 2,
        kernel: 3,
        depth: 1,
        dropout: 0.1,
        rpe_radius: 4,
    };
    let segs = make_segments(&rec, 16, 4, 64).unwrap();
    let run = || {
        let mut p = ModelParams::init(&cfg, 5).unwrap();
        fit_normalization(&mut p, &segs).unwrap();
        let mut t = Trainer::new(
            p,
            TrainConfig {
                batch_size: 4,
                lr: 1e-3,
                loss_warmup: 10,
                segment_windows: 4,
                segment_step: 64,
                seed: 3,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let losses: Vec<u64> = (0..100)
            .map(|i| {
                let start = (i * 4) % (segs.len() - 4);
                t.train_step(&segs[start..start + 4]).unwrap().total.to_bits()
            })
            .collect();
        (losses, t)
    };
    let (a, trainer) = run();
    let (b, _) = run();
    let same_losses = a == b;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let ckpt = trainer.checkpoint();
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let bytes_stable = loaded.to_bytes().unwrap() == std::fs::read(&path).unwrap();
    let run_cfg = RunConfig {
        model: cfg.clone(),
        ..RunConfig::default()
    };
    let before = pipeline::track(Method::Tfbrt, Some(&trainer.params), &rec, &run_cfg).unwrap();
    let after = pipeline::track(Method::Tfbrt, Some(&loaded.model), &rec, &run_cfg).unwrap();
    let bits = |v: &[[f64; 2]]| v.iter().flat_map(|p| [p[0].to_bits(), p[1].to_bits()]).collect::<Vec<_>>();
    let eval_stable = loaded == ckpt && bits(&before.pos) == bits(&after.pos) && bits(&before.vel) == bits(&after.vel);

    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "determinism and persistence",
        same_losses && bytes_stable && eval_stable && secs < 300.0,
        format!("100-step losses identical: {same_losses}, checkpoint bytes stable: {bytes_stable}, evaluation identical after reload: {eval_stable}, {secs:.1} s"),
    );
}

#[test]
fn streaming_equivalence() {
    let t0 = Instant::now();
    let rec = synth_sequence(&SynthParams {
        duration: 10.0,
        waypoints: 5,
        seed: 6,
        ..SynthParams::default()
    })
    .unwrap();
    let cfg = ModelConfig {
        window: 25,
        hidden: 16,
        heads: 4,
        kernel: 5,
        depth: 2,
        dropout: 0.1,
        rpe_radius: 4,
    };
    let seg = &make_segments(&rec, 25, 8, 500).unwrap()[0];
    let mut params = ModelParams::init(&cfg, 4).unwrap();
    fit_normalization(&mut params, std::slice::from_ref(seg)).unwrap();
    let inputs: Vec<Tensor> = seg.windows.iter().map(|w| params.input_tensor(w).unwrap()).collect();
    let run = |xs: &[Tensor], state: Option<Tensor>, first: usize| {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let s = match state {
            Some(s) => tape.constant(s),
            None => init_state(&b).unwrap(),
        };
        let (outs, s) = forward(&mut tape, &b, &cfg, &vars, s, &ForwardCtx::eval(), first).unwrap();
        let v: Vec<Tensor> = outs.iter().map(|o| tape.value(o.velocity).clone()).collect();
        (v, tape.value(s).clone())
    };
    let (whole, s_whole) = run(&inputs, None, 0);
    let mut streamed = Vec::new();
    let mut state = None;
    for piece in [0..3, 3..4, 4..8] {
        let first = piece.start;
        let (v, s) = run(&inputs[piece], state.take(), first);
        streamed.extend(v);
        state = Some(s);
    }
    let equal = whole == streamed && Some(s_whole) == state;
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "streaming equivalence",
        equal && secs < 60.0,
        format!("8 windows split 3+1+4 vs unsplit, bitwise equal outputs and final state: {equal}, {secs:.2} s"),
    );
}
