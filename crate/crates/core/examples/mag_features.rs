//! Computes model features for one synthetic walk, compares the numerical
//! magnetometer derivative with `-ω × m` and writes the feature table.
//!
//! ```bash
//! cargo run --release -p magtrack --example mag_features -- features.csv
//! ```

use magtrack::ingest::{synth_with_truth, SynthParams};
use magtrack::pipeline::write_features;
use magtrack::preprocess::{compute_features, mag_body_derivative, FeatureOptions};

fn main() -> magtrack::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "features.csv".into());
    let params = SynthParams {
        duration: 30.0,
        waypoints: 10,
        tilt_amp: 0.1,
        seed: 2,
        ..SynthParams::default()
    };
    for (label, p) in [("noiseless", params.noiseless()), ("noisy", params.clone())] {
        let (rec, truth) = synth_with_truth(&p)?;
        for lowpass in [None, Some(5.0)] {
            let dm = mag_body_derivative(&rec, lowpass)?;
            let (mut num, mut den) = (0.0, 0.0);
            for (i, s) in rec.samples().iter().enumerate() {
                let analytic = -truth.omega_body[i].cross(s.mag);
                num += (dm[i] - analytic).dot(dm[i] - analytic);
                den += analytic.dot(analytic);
            }
            println!("{label:9} low-pass {lowpass:?}: relative rms error {:.4}", (num / den).sqrt());
        }
    }
    let rec = synth_with_truth(&params)?.0;
    let f = compute_features(&rec, &FeatureOptions::default())?;
    write_features(&f, &out)?;
    println!("{} rows -> {out}", f.len());
    Ok(())
}
