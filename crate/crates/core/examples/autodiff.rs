//! The tape-based autodiff engine on a small expression, checked against a
//! central difference.

use genelm::kernels::{Graph, Tensor};

fn f(w: &Tensor, x: &Tensor) -> genelm::Result<(f32, Tensor)> {
    let mut g = Graph::new();
    let wv = g.param(w.clone());
    let xv = g.constant(x.clone());
    let h = g.matmul(xv, wv)?;
    let h = g.silu(h);
    let loss = g.sum(h);
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), grads.get(wv).cloned().unwrap()))
}

fn main() -> genelm::Result<()> {
    let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75])?;
    let w = Tensor::new(vec![3, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6])?;
    let (loss, grad) = f(&w, &x)?;
    println!("loss {loss:.6}");
    let h = 1e-2;
    for k in 0..w.numel() {
        let mut plus = w.clone();
        plus.data_mut()[k] += h;
        let mut minus = w.clone();
        minus.data_mut()[k] -= h;
        let numeric = (f(&plus, &x)?.0 - f(&minus, &x)?.0) / (2.0 * h);
        println!("dL/dw[{k}] analytic {:+.5} numeric {numeric:+.5}", grad.data()[k]);
    }
    Ok(())
}
