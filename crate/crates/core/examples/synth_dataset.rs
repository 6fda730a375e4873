//! Writes a synthetic dataset with a split manifest and lists what was drawn
//! for each sequence.
//!
//! ```bash
//! cargo run --release -p magtrack --example synth_dataset -- runs/data 25 7
//! ```

use std::path::PathBuf;

use magtrack::config::SynthSetConfig;
use magtrack::ingest::Split;
use magtrack::pipeline;

fn main() -> magtrack::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "runs/data".into()));
    let count = args.next().and_then(|s| s.parse().ok()).unwrap_or(25);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(7);
    let set = SynthSetConfig { count, ..SynthSetConfig::default() };
    let manifest = pipeline::synth_dataset(&set, seed, &dir)?;
    for i in 0..count {
        let p = pipeline::synth_params_for(&set, seed, i);
        println!(
            "{}  speed {:.2} m/s  acc bias ({:+.3}, {:+.3}, {:+.3})  gyro bias z {:+.4}",
            p.id.as_deref().unwrap_or("?"),
            p.speed,
            p.bias_acc.x,
            p.bias_acc.y,
            p.bias_acc.z,
            p.bias_gyro.z
        );
    }
    for split in Split::ALL {
        println!("{split:>12}: {} sequences", manifest.get(split).len());
    }
    println!("manifest: {}", dir.join(pipeline::MANIFEST_FILE).display());
    Ok(())
}
