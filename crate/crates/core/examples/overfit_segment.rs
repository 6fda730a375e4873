//! Fits a small TF-BRT to a single segment and reports the velocity RMSE.
//!
//! ```bash
//! cargo run --release -p magtrack --example overfit_segment -- 2000
//! ```

use magtrack::ingest::{synth_sequence, SynthParams};
use magtrack::preprocess::make_segments;
use magtrack::tfbrt::{ModelConfig, ModelParams};
use magtrack::train::{evaluate_losses, fit_normalization, TrainConfig, Trainer};

fn main() -> magtrack::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let rec = synth_sequence(&SynthParams {
        duration: 6.0,
        waypoints: 4,
        seed: 3,
        ..SynthParams::default()
    })?;
    let cfg = ModelConfig {
        window: 50,
        hidden: 32,
        heads: 4,
        kernel: 5,
        depth: 1,
        dropout: 0.0,
        rpe_radius: 8,
    };
    let segs = make_segments(&rec, cfg.window, 4, 1000)?;
    let seg = &segs[1..2];
    let mut params = ModelParams::init(&cfg, 1)?;
    fit_normalization(&mut params, seg)?;
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
    )?;
    let t0 = std::time::Instant::now();
    for step in 1..=steps {
        trainer.train_step(seg)?;
        if step % 100 == 0 {
            let [lv, lp, lo] = evaluate_losses(&trainer.params, seg, 0.05)?;
            println!("step {step:5}  velocity rmse {lv:.4}  position {lp:.4}  orientation {lo:.4}  ({:.1?})", t0.elapsed());
            if lv < 0.05 {
                break;
            }
        }
    }
    Ok(())
}
