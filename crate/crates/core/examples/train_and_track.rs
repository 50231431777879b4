//! Trains the toy tracker briefly, then tracks a static object.
//!
//! `cargo run --release --example train_and_track [steps]`

use lpat::config::RunConfig;
use lpat::harness::{gen_sequence, track_sequence, train_toy};
use lpat::model::Model;

fn main() -> lpat::Result<()> {
    let mut cfg = RunConfig::default();
    if let Some(steps) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        cfg.harness.train.steps = steps;
    }
    let model = Model::new(cfg.model())?;
    let geom = &model.geometry;
    println!(
        "score grid {}x{}, stride {}",
        geom.height, geom.width, geom.stride
    );

    let out = train_toy::<f32>(&model, &cfg.harness.train, cfg.harness.seed)?;
    for r in out.records.iter().step_by(25) {
        println!(
            "step {:>4}  total {:.4}  cls1 {:.4}  cls2 {:.4}  reg {:.4}",
            r.step, r.total, r.cls1, r.cls2, r.reg
        );
    }
    println!(
        "eval loss {:.4} -> {:.4}",
        out.initial_eval.total, out.final_eval.total
    );

    let t = &cfg.harness.track;
    let seq = gen_sequence(&t.sequence(), t.seq_seed)?;
    let result = track_sequence(&model, &out.params, &seq)?;
    for f in &result.frames {
        println!("frame {:>2}  iou {:.3}", f.frame, f.iou);
    }
    println!("mean IoU {:.3}", result.mean_iou);
    Ok(())
}
