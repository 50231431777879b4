//! Finite-difference check of a few primitives and one attention layer.
//!
//! `cargo run --release --example gradcheck [seed]`

use lpat::checks::{layer_cases, primitive_cases};
use lpat::gradcheck::{DEFAULT_EPS, DEFAULT_REFINE_ABOVE};

fn main() -> lpat::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let wanted = [
        "matmul",
        "softmax_rows",
        "layer_norm",
        "local_mix",
        "iou_loss",
        "mh_lra",
    ];
    let cases = primitive_cases(seed).into_iter().chain(layer_cases(seed));
    for case in cases.filter(|c| wanted.contains(&c.name.as_str())) {
        let o = case.run(DEFAULT_EPS, DEFAULT_REFINE_ABOVE)?;
        println!(
            "{:<14} {:>5} entries  max rel {:.2e}  (64-bit only {:.2e})  {}",
            o.name,
            o.report.entries,
            o.report.max_rel_error,
            o.report.max_rel_error_f64,
            if o.passed(1e-5) { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}
