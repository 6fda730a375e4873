//! Naive double integration and the EKF tracker on one biased walk, scored
//! with the trajectory metrics.
//!
//! ```bash
//! cargo run --release -p magtrack --example baselines -- 0.05
//! ```

use magtrack::config::RunConfig;
use magtrack::geom::Vec3;
use magtrack::ingest::{synth_sequence, SynthParams};
use magtrack::pipeline::{track, Method};

fn main() -> magtrack::Result<()> {
    let acc_bias: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let rec = synth_sequence(&SynthParams {
        duration: 120.0,
        waypoints: 30,
        bias_acc: Vec3::new(acc_bias, -0.5 * acc_bias, 0.0),
        bias_gyro: Vec3::new(0.0, 0.0, 0.001),
        seed: 4,
        ..SynthParams::default()
    })?;
    let cfg = RunConfig::default();
    for method in [Method::Ndi, Method::Ekf] {
        let m = track(method, None, &rec, &cfg)?.metrics(&cfg)?;
        println!(
            "{method:4}  ATE {:9.2} m  RTE {:9.2} m  PDE {:7.3}  AYE {:6.2} deg  over {:.0} m",
            m.ate,
            m.rte.unwrap_or(f64::NAN),
            m.pde,
            m.aye_deg,
            m.length
        );
    }
    Ok(())
}
