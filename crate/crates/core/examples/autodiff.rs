//! Reverse-mode gradients through a tiny two-layer network.

use lpat::autodiff::Graph;
use lpat::tensor::Tensor;

fn main() -> lpat::Result<()> {
    let g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5])?);
    let w1 = g.leaf(Tensor::new(
        &[3, 4],
        (0..12).map(|i| 0.1 * i as f64 - 0.5).collect(),
    )?);
    let w2 = g.leaf(Tensor::new(&[4, 1], vec![1.0, -1.0, 0.5, 0.25])?);

    let loss = x.matmul(w1)?.relu().matmul(w2)?.exp().mean();
    println!("loss = {:.6}", loss.value().item());

    let grads = g.backward(loss)?;
    println!("dL/dw2 = {:?}", grads.wrt(w2).data());
    println!("dL/dx  = {:?}", grads.wrt(x).data());
    Ok(())
}
