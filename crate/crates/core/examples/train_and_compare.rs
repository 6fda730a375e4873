//! Synthesizes a small dataset, trains TF-BRT on it and compares the model
//! with naive double integration and the EKF on the held-out splits.
//!
//! ```bash
//! cargo run --release -p magtrack --example train_and_compare -- runs/compare 4
//! ```
//!
//! Further arguments are `key=value` config overrides.

use std::path::PathBuf;

use magtrack::config::RunConfig;
use magtrack::ingest::Split;
use magtrack::pipeline::{self, Method};

fn main() -> magtrack::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/compare".into()));
    let epochs = args.next().unwrap_or_else(|| "4".into());
    let data = out.join("data");
    let cfg = RunConfig::parse(&format!(
        "synth.count = 25\nsynth.duration = 90\nsynth.waypoints = 25\n\
         model.window = 50\nmodel.hidden = 32\nmodel.heads = 4\nmodel.depth = 1\nmodel.rpe_radius = 8\n\
         train.batch_size = 8\ntrain.lr = 1e-3\ntrain.segment_windows = 4\ntrain.segment_step = 200\n\
         train.loss_warmup = 20\ntrain.max_epochs = {epochs}\neval.chunk = 4\n\
         data.manifest = {}\n",
        data.join(pipeline::MANIFEST_FILE).display()
    ))?;
    let extra: Vec<String> = args.collect();
    let cfg = cfg.with_overrides(extra.iter().filter_map(|a| a.split_once('=')))?;
    let t0 = std::time::Instant::now();
    pipeline::synth_dataset(&cfg.synth, 7, &data)?;
    let run = pipeline::train_run(&cfg, &out, false)?;
    for e in &run.epochs {
        println!("epoch {}  train {:.4}  val {:.4}", e.epoch, e.total, e.val_total.unwrap_or(f64::NAN));
    }
    println!("trained in {:.0?}", t0.elapsed());
    let model = pipeline::load_model(&run.best)?;
    let manifest = pipeline::manifest_from_config(&cfg)?;
    let mut held_out = pipeline::load_split(&manifest, Split::TestSeen)?;
    held_out.extend(pipeline::load_split(&manifest, Split::TestUnseen)?);
    for method in [Method::Tfbrt, Method::Ndi, Method::Ekf] {
        let r = pipeline::evaluate_records(method, Some(&model), &held_out, &cfg)?.aggregate;
        println!(
            "{method:6} ATE {:8.3} m  RTE {:8.3} m  PDE {:.4}  AYE {:6.2} deg",
            r.ate,
            r.rte.unwrap_or(f64::NAN),
            r.pde,
            r.aye_deg
        );
    }
    Ok(())
}
