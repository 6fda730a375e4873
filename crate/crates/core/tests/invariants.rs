use magtrack::baseline::{ekf_track, ndi_track, EkfConfig};
use magtrack::geom::{skew, rotate_planar, Quaternion, Vec3};
use magtrack::ingest::{load_sequence, save_sequence, synth_sequence, synth_with_truth, SynthParams};
use magtrack::metrics::{ate, aye, pde, rte};
use magtrack::preprocess::{compute_features, windows_from, FeatureOptions};
use proptest::prelude::*;

fn vec3() -> impl Strategy<Value = Vec3> {
    (-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn unit_quat() -> impl Strategy<Value = Quaternion> {
    (vec3(), -7.0f64..7.0).prop_filter_map("axis too short", |(a, ang)| {
        (a.norm() > 1e-3).then(|| Quaternion::from_axis_angle(a, ang).unwrap())
    })
}

fn short_params() -> impl Strategy<Value = SynthParams> {
    (0u64..1000, 0.3f64..1.5, 0.0f64..0.2).prop_map(|(seed, speed, tilt)| SynthParams {
        duration: 8.0,
        waypoints: 5,
        speed,
        tilt_amp: tilt,
        seed,
        ..SynthParams::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotation_matrix_is_orthonormal_and_agrees(q in unit_quat(), v in vec3(), w in vec3()) {
        let r = q.to_matrix();
        let rtr = r.transpose() * r;
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { 1.0 } else { 0.0 };
                prop_assert!((rtr.0[i][j] - id).abs() < 1e-9);
            }
        }
        prop_assert!((r.det() - 1.0).abs() < 1e-9);
        let (a, b) = (q.rotate(v), r.mul_vec(v));
        prop_assert!((a - b).norm() <= 1e-12 * v.norm().max(1.0));
        prop_assert!((a.norm() - v.norm()).abs() <= 1e-12 * v.norm().max(1.0));
        prop_assert!((q.rotate(v).dot(q.rotate(w)) - v.dot(w)).abs() <= 1e-12 * (v.norm() * w.norm()).max(1.0));
        prop_assert!(q.canonical().w >= 0.0);
        let s = skew(v);
        for i in 0..3 {
            for j in 0..3 {
                prop_assert_eq!(s.0[i][j], -s.0[j][i]);
            }
        }
        prop_assert!((s.mul_vec(w) - v.cross(w)).norm() < 1e-12 * (v.norm() * w.norm()).max(1.0));
    }

    #[test]
    fn metrics_are_yaw_invariant_and_vanish_on_equal_inputs(
        phi in -7.0f64..7.0,
        seed in 0u64..500,
        drift in 0.001f64..0.1,
    ) {
        let n = 700;
        let fs = 10.0;
        let gt: Vec<[f64; 2]> = (0..n).map(|i| {
            let t = i as f64 / fs;
            [t * 0.8 + (t * 0.1 + seed as f64).sin(), (t * 0.05).cos() * 10.0]
        }).collect();
        let pred: Vec<[f64; 2]> = gt.iter().enumerate().map(|(i, p)| [p[0] + drift * i as f64 / fs, p[1] - 0.5 * drift]).collect();
        let turn = |v: &[[f64; 2]]| v.iter().map(|&p| rotate_planar(p, phi)).collect::<Vec<_>>();
        let (pr, gr) = (turn(&pred), turn(&gt));
        prop_assert!((ate(&pr, &gr).unwrap() - ate(&pred, &gt).unwrap()).abs() < 1e-9);
        prop_assert!((rte(&pr, &gr, fs, 60.0).unwrap() - rte(&pred, &gt, fs, 60.0).unwrap()).abs() < 1e-9);
        prop_assert!((pde(&pr, &gr).unwrap() - pde(&pred, &gt).unwrap()).abs() < 1e-9);
        prop_assert!((rte(&pred, &gt, fs, 60.0).unwrap() - drift * 60.0).abs() < 1e-9);
        prop_assert_eq!(ate(&gt, &gt).unwrap(), 0.0);
        prop_assert_eq!(rte(&gt, &gt, fs, 60.0).unwrap(), 0.0);
        prop_assert!(ate(&pred, &gt).unwrap() > 0.0);
        let vel: Vec<[f64; 2]> = gt.windows(2).map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1]]).collect();
        prop_assert_eq!(aye(&vel, &vel, 1e-6).unwrap(), (0.0, 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn zero_noise_world_field_is_constant(p in short_params()) {
        let p = p.noiseless();
        let (rec, truth) = synth_with_truth(&p).unwrap();
        let m0 = rec.samples()[0].orient.rotate(rec.samples()[0].mag);
        for s in rec.samples() {
            prop_assert!((s.orient.rotate(s.mag) - m0).norm() < 1e-9);
        }
        prop_assert!(truth.mag_world.iter().all(|m| (*m - p.mag_world).norm() < 1e-12));
    }

    #[test]
    fn files_round_trip_and_windows_partition(p in short_params(), len in 5usize..60) {
        let rec = synth_sequence(&p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(format!("{}.csv", rec.id));
        save_sequence(&rec, &path).unwrap();
        let back = load_sequence(&path).unwrap();
        prop_assert_eq!(&back, &rec);

        let f = compute_features(&rec, &FeatureOptions::default()).unwrap();
        let ws = windows_from(&f, len, len).unwrap();
        let joined: Vec<_> = ws.iter().flat_map(|w| w.features.clone()).collect();
        prop_assert_eq!(joined.len(), f.len() / len * len);
        prop_assert_eq!(&joined[..], &f.features[..joined.len()]);
        for (i, w) in ws.iter().enumerate() {
            prop_assert_eq!(w.start, i * len);
        }
    }

    #[test]
    fn baselines_stay_finite(p in short_params(), ekf_gate in 0.5f64..5.0) {
        let rec = synth_sequence(&SynthParams { bias_acc: Vec3::new(0.05, -0.03, 0.02), ..p }).unwrap();
        let ndi = ndi_track(&rec).unwrap();
        let ekf = ekf_track(&rec, &EkfConfig { acc_gate: ekf_gate, ..EkfConfig::default() }).unwrap();
        prop_assert_eq!(ndi.pos.len(), rec.len());
        prop_assert!(ekf.pos.iter().chain(&ndi.pos).all(|p| p[0].is_finite() && p[1].is_finite()));
        prop_assert!(ekf.orient.iter().all(|q| (q.norm() - 1.0).abs() < 1e-9));
    }
}
