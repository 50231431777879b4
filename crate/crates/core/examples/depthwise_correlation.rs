//! Template features correlated over search features, one channel at a time.
//! The response peaks where the template was cut from.

use lpat::autodiff::Graph;
use lpat::backbone::dwc;
use lpat::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lpat::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (c, hx, wx, hz, wz) = (2, 10, 10, 3, 3);
    let search = Tensor::<f64>::uniform(&[c, hx, wx], 1.0, &mut rng);
    let (oy, ox) = (4, 2);
    let template = Tensor::from_fn(&[c, hz, wz], |i| {
        let (ch, y, x) = (i / (hz * wz), i / wz % hz, i % wz);
        search.data()[(ch * hx + oy + y) * wx + ox + x]
    });

    let g = Graph::new();
    let r = dwc(g.leaf(template), g.leaf(search))?.value();
    let (_, ho, wo) = r.dims3()?;
    for ch in 0..c {
        let map = &r.data()[ch * ho * wo..(ch + 1) * ho * wo];
        let best = (0..map.len())
            .max_by(|&a, &b| map[a].total_cmp(&map[b]))
            .unwrap();
        println!(
            "channel {ch}: peak at ({}, {}), cut at ({oy}, {ox})",
            best / wo,
            best % wo
        );
    }
    Ok(())
}
