//! Reads a JSON run configuration, filling everything left out with the
//! defaults, and shows how bad keys are reported.

use lpat::config::RunConfig;

fn main() -> lpat::Result<()> {
    let cfg = RunConfig::from_json(
        r#"{ "tensor": { "precision": "f64" },
             "attention": { "k": 5 },
             "harness": { "train": { "steps": 50, "lr": 0.01 } } }"#,
    )?;
    println!("{}", cfg.to_json()?);

    let model = lpat::model::Model::new(cfg.model())?;
    println!("window 5 scopes hold {} entries", model.scopes[0].nnz());

    match RunConfig::from_json(r#"{ "harness": { "train": { "stpes": 3 } } }"#) {
        Ok(_) => println!("unexpectedly accepted"),
        Err(e) => println!("rejected: {e}"),
    }
    Ok(())
}
