//! Trains a small model for a few hundred steps and writes its time-averaged
//! hidden activations per window, labelled with the ground-truth heading bin.
//!
//! ```bash
//! cargo run --release -p magtrack --example export_features -- hidden.csv 300
//! ```

use magtrack::config::RunConfig;
use magtrack::ingest::{synth_sequence, SynthParams};
use magtrack::pipeline::{build_segments, export_features};
use magtrack::tfbrt::ModelParams;
use magtrack::train::{fit_normalization, heading_bin, Trainer, HEADING_BINS};

fn main() -> magtrack::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "hidden.csv".into());
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let cfg = RunConfig::parse(
        "model.window = 50\nmodel.hidden = 32\nmodel.depth = 1\nmodel.rpe_radius = 8\n\
         train.batch_size = 8\ntrain.lr = 1e-3\ntrain.segment_windows = 4\ntrain.segment_step = 200\neval.chunk = 4",
    )?;
    let records = (0..4)
        .map(|seed| synth_sequence(&SynthParams { duration: 60.0, waypoints: 20, seed, ..SynthParams::default() }))
        .collect::<magtrack::Result<Vec<_>>>()?;
    let segments = build_segments(&records, &cfg)?;
    let mut params = ModelParams::init(&cfg.model, cfg.train.seed)?;
    fit_normalization(&mut params, &segments)?;
    let mut trainer = Trainer::new(params, cfg.train.clone())?;
    for (i, batch) in segments.chunks(cfg.train.batch_size).cycle().take(steps).enumerate() {
        let r = trainer.train_step(batch)?;
        if i % 50 == 0 {
            println!("step {i:4}  velocity loss {:.4}", r.l_v);
        }
    }
    let rows = export_features(&trainer.params, &records, &cfg, &out)?;
    println!("{rows} rows -> {out}");
    println!("{HEADING_BINS} heading bins; due north (+y) is bin {}", heading_bin([0.0, 1.0]));
    Ok(())
}
