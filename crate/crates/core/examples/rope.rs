//! Rotary embeddings: dot products depend only on relative position and norms
//! are preserved.

use genelm::kernels::Tensor;
use genelm::model::{rope_angles, rope_frequencies};

fn rotate(x: &[f32], pos: usize, base: f64) -> genelm::Result<Vec<f32>> {
    let t = Tensor::new(vec![1, x.len()], x.to_vec())?;
    Ok(rope_angles(x.len(), base, &[pos])?.apply(&t)?.data().to_vec())
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn main() -> genelm::Result<()> {
    let q = [0.3, -0.1, 0.8, 0.2, -0.5, 0.4, 0.1, 0.9];
    let k = [0.7, 0.2, -0.3, 0.6, 0.1, -0.8, 0.5, 0.05];
    for base in [1e4, 1.6e5] {
        println!("base {base}: frequencies {:?}", rope_frequencies(8, base));
        for (m, n) in [(3, 1), (103, 101), (1003, 1001)] {
            println!("  <q@{m}, k@{n}> = {:.6}", dot(&rotate(&q, m, base)?, &rotate(&k, n, base)?));
        }
    }
    let r = rotate(&q, 77, 1e4)?;
    println!("|q| = {:.6}, |rope(q, 77)| = {:.6}", dot(&q, &q).sqrt(), dot(&r, &r).sqrt());
    Ok(())
}
