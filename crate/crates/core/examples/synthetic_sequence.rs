//! Generates a drifting synthetic sequence and writes PNG frames plus
//! ground truth.
//!
//! `cargo run --example synthetic_sequence [dir]`

use std::path::PathBuf;

use lpat::harness::{export_sequence, gen_sequence, Motion, SequenceConfig, ShapeKind};

fn main() -> lpat::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "sequence".into()));
    let cfg = SequenceConfig {
        frames: 12,
        shape: ShapeKind::Ellipse,
        motion: Motion::RandomWalk { step: 2.5 },
        ..SequenceConfig::default()
    };
    let seq = gen_sequence(&cfg, 42)?;
    for (t, b) in seq.gt.iter().enumerate() {
        let (cx, cy) = b.center();
        println!(
            "frame {t:>2}: center ({cx:6.2}, {cy:6.2}) size {:.1}x{:.1}",
            b.width(),
            b.height()
        );
    }
    export_sequence(&seq, &dir)?;
    println!("wrote {}", dir.display());
    Ok(())
}
