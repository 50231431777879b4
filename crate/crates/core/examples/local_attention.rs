//! Windowed attention on a 5×5 token grid, checked against the dense
//! masked computation.

use lpat::attention::{
    build_scope, init_lra, lra_head_weights, masked_oracle_weights, mh_lra, AttentionParams,
    LraConfig,
};
use lpat::autodiff::Graph;
use lpat::params::{Init, ModelParams};
use lpat::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lpat::Result<()> {
    let cfg = LraConfig {
        channels: 8,
        heads: 2,
        window: 3,
    };
    let (h, w) = (5, 5);
    let scope = build_scope(h, w, cfg.window)?;
    println!("scope of corner token 0: {:?}", scope.scope(0));
    println!("scope of center token 12: {:?}", scope.scope(12));
    println!("{} scores instead of {}", scope.nnz(), (h * w) * (h * w));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ModelParams::<f64>::new();
    init_lra(&mut Init::new(&mut store, &mut rng), "attn", &cfg);
    let g = Graph::new();
    let b = store.bind(&g);
    let params = AttentionParams::bind(&b, "attn", cfg)?;
    let x = g.leaf(Tensor::uniform(&[h * w, cfg.channels], 1.0, &mut rng));

    let out = mh_lra(x, x, x, &params, &scope)?;
    println!("output shape {:?}", out.shape());

    // head 0 weights, one per scope entry
    let local = lra_head_weights(x, x, &params, 0, &scope)?;
    let emb = lpat::attention::lra_embed(x, x, &params, &scope)?;
    let d = cfg.head_dim();
    let q = emb.queries.slice_cols(0, d)?.value();
    let k = emb.keys.slice_cols(0, d)?.value();
    let dense = masked_oracle_weights(&q, &k, &scope)?;
    let mut diff = 0.0f64;
    for i in 0..scope.len() {
        for (e, &j) in scope.range(i).zip(scope.scope(i)) {
            diff = diff.max((local.data()[e] - dense.at2(i, j)).abs());
        }
    }
    println!("max |local - dense| over head 0 weights: {diff:.2e}");
    Ok(())
}
