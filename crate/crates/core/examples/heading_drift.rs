//! Heading from integrated gyro, from the magnetometer and from the EKF on a
//! five-minute walk with a gyro bias, printed once a minute.
//!
//! ```bash
//! cargo run --release -p magtrack --example heading_drift -- 0.002
//! ```

use magtrack::baseline::{ekf_orientations, gyro_heading, mag_heading, EkfConfig};
use magtrack::geom::{wrap_angle, Vec3};
use magtrack::ingest::{synth_with_truth, SynthParams};

fn main() -> magtrack::Result<()> {
    let bias: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.002);
    let (rec, truth) = synth_with_truth(&SynthParams {
        duration: 300.0,
        waypoints: 60,
        bias_gyro: Vec3::new(0.0, 0.0, bias),
        random_patches: std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(4),
        seed: 21,
        ..SynthParams::default()
    })?;
    let gyro = gyro_heading(&rec)?;
    let mag = mag_heading(&rec)?;
    let ekf: Vec<f64> = ekf_orientations(&rec, &EkfConfig::default())?.iter().map(|q| q.yaw()).collect();
    let err = |h: &[f64], i: usize| wrap_angle(h[i] - truth.orient[i].yaw()).to_degrees();
    println!("  t (s)   gyro (deg)   mag (deg)   ekf (deg)");
    let step = (60.0 * rec.fs()) as usize;
    for i in (0..rec.len()).step_by(step).chain([rec.len() - 1]) {
        println!("{:7.0} {:12.2} {:11.2} {:11.2}", rec.samples()[i].t, err(&gyro, i), err(&mag, i), err(&ekf, i));
    }
    Ok(())
}
