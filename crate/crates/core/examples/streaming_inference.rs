//! Runs TF-BRT window by window, carrying the recurrent state between calls,
//! and checks the result against one batched pass over the same windows.
//!
//! ```bash
//! cargo run --release -p magtrack --example streaming_inference -- [model.ckpt]
//! ```

use magtrack::ingest::{synth_sequence, SynthParams};
use magtrack::pipeline::{self, processed_len};
use magtrack::preprocess::{compute_features, segments_from, windows_from, FeatureOptions};
use magtrack::tfbrt::{forward, init_state, ForwardCtx, ModelConfig, ModelParams};
use magtrack::train::fit_normalization;
use magtrack_tensor::{Tape, Tensor};

fn main() -> magtrack::Result<()> {
    let rec = synth_sequence(&SynthParams {
        duration: 20.0,
        waypoints: 6,
        seed: 5,
        ..SynthParams::default()
    })?;
    let feats = compute_features(&rec, &FeatureOptions::default())?;
    let model = match std::env::args().nth(1) {
        Some(path) => pipeline::load_model(path)?,
        None => {
            let cfg = ModelConfig { window: 50, hidden: 32, depth: 1, rpe_radius: 8, ..ModelConfig::default() };
            let mut p = ModelParams::init(&cfg, 1)?;
            fit_normalization(&mut p, &segments_from(&feats, cfg.window, 4, 200)?)?;
            p
        }
    };
    let l = model.config.window;
    let windows = windows_from(&feats, l, l)?;
    let inputs: Vec<Tensor> = windows.iter().map(|w| model.input_tensor(w)).collect::<magtrack::Result<_>>()?;

    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let xs: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let s0 = init_state(&b)?;
    let (outs, _) = forward(&mut tape, &b, &model.config, &xs, s0, &ForwardCtx::eval(), 0)?;
    let batched: Vec<Tensor> = outs.iter().map(|o| tape.value(o.velocity).clone()).collect();

    let mut state: Option<Tensor> = None;
    let mut identical = true;
    for (i, x) in inputs.iter().enumerate() {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false);
        let s = match state.take() {
            Some(s) => tape.constant(s),
            None => init_state(&b)?,
        };
        let xv = tape.constant(x.clone());
        let (o, s) = forward(&mut tape, &b, &model.config, &[xv], s, &ForwardCtx::eval(), i)?;
        let v = tape.value(o[0].velocity);
        identical &= *v == batched[i];
        if i % 10 == 0 {
            let d = v.data();
            println!("window {i:3}  first sample v = ({:+.4}, {:+.4}) m/s", d[0], d[1]);
        }
        state = Some(tape.value(s).clone());
    }
    println!(
        "{} windows ({} of {} samples); streamed output identical to batched: {identical}",
        windows.len(),
        processed_len(rec.len(), l),
        rec.len()
    );
    Ok(())
}
