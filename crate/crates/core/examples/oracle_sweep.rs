//! Local attention against the dense masked oracle on random small grids.

use lpat::checks::{global_limit, oracle_sweep};

fn main() -> lpat::Result<()> {
    let r = oracle_sweep(200, 6, 0)?;
    println!("trials            {}", r.trials);
    println!("max output diff   {:.3e}", r.max_output_diff);
    println!("max weight diff   {:.3e}", r.max_weight_diff);
    println!("rows checked      {}", r.rows_checked);
    println!("max |row sum - 1| {:.3e}", r.max_row_sum_err);
    println!("nonzero outside   {}", r.outside_nonzero);

    for seed in 0..3 {
        let (inst, d) = global_limit(seed, 6)?;
        println!(
            "{}x{} grid, window {}: full window vs plain attention {d:.1e}",
            inst.height, inst.width, inst.window
        );
    }
    Ok(())
}
