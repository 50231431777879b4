//! The detail-correction branch: two multi-kernel generators inside a
//! residual block, fed by the concatenated query and key grids.

use lpat::autodiff::Graph;
use lpat::correction::{din, init_lec, lec, DinParams, LecConfig, LecParams};
use lpat::params::{Init, ModelParams};
use lpat::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lpat::Result<()> {
    let cfg = LecConfig::with_default_paths(16);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ModelParams::<f64>::new();
    init_lec(&mut Init::new(&mut store, &mut rng), "lec", &cfg);
    for (name, t) in store.iter() {
        println!("{name:<22} {:?}", t.shape());
    }

    let (h, w) = (6, 6);
    let g = Graph::new();
    let b = store.bind(&g);
    let p = LecParams::bind(&b, "lec")?;
    let q = g.leaf(Tensor::uniform(&[h * w, 16], 1.0, &mut rng));
    let k = g.leaf(Tensor::uniform(&[h * w, 16], 1.0, &mut rng));
    println!("lec output {:?}", lec(q, k, &p, h, w)?.shape());

    // with silent generators the block passes its input through
    for (name, t) in store.iter_mut() {
        if name.contains(".eg") || name.ends_with("proj_out.bias") {
            t.data_mut().fill(0.0);
        }
    }
    let g = Graph::new();
    let b = store.bind(&g);
    let p = DinParams::bind(&b, "lec")?;
    let x = g.leaf(Tensor::uniform(&[16, h, w], 1.0, &mut rng));
    println!("din(x) == x: {}", din(x, &p)?.value().bit_eq(&x.value()));
    Ok(())
}
