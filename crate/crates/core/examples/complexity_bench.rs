//! Windowed vs dense score timing; slopes are fitted on a log-log scale.
//!
//! `cargo run --release --example complexity_bench [out.csv]`

use lpat::bench::{run_bench, write_csv, BenchConfig};

fn main() -> lpat::Result<()> {
    let r = run_bench(&BenchConfig::default())?;
    println!(
        "{:>6} {:>14} {:>16} {:>8}",
        "n", "lra ns", "global ns", "scores"
    );
    for row in &r.rows {
        println!(
            "{:>6} {:>14.0} {:>16.0} {:>8}",
            row.n, row.lra_ns, row.global_ns, row.lra_scores_counted
        );
    }
    println!(
        "slope lra {:.2}, global {:.2}, worst cv {:.1}%",
        r.lra_slope,
        r.global_slope,
        r.max_cv * 100.0
    );
    if let Some(path) = std::env::args().nth(1) {
        write_csv(&path, &r.rows)?;
        println!("wrote {path}");
    }
    Ok(())
}
