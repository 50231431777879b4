//! Saves freshly initialized weights and checks the reloaded copy gives
//! the same predictions bit for bit.

use lpat::archive;
use lpat::model::{Model, ModelConfig};
use lpat::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lpat::Result<()> {
    let model = Model::new(ModelConfig::toy())?;
    let params = model.init_params::<f32>(9);
    println!("{} tensors, {} values", params.len(), params.numel());

    let path = std::env::temp_dir().join("lpat_example.lpat");
    archive::save(&params, &path)?;
    println!(
        "{} bytes at {}",
        std::fs::metadata(&path)?.len(),
        path.display()
    );
    let loaded = archive::load::<f32>(&path)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = Tensor::uniform(&[3, 32, 32], 1.0, &mut rng);
    let x = Tensor::uniform(&[3, 64, 64], 1.0, &mut rng);
    let a = model.predict(&params, &z, &x)?;
    let b = model.predict(&loaded, &z, &x)?;
    println!("identical maps: {}", a == b && a.reg.bit_eq(&b.reg));
    std::fs::remove_file(&path)?;
    Ok(())
}
