//! Builds a small attention block on the tape, backpropagates, and compares
//! every input gradient against central finite differences.
//!
//! ```text
//! cargo run -p dualpaint-autograd --example gradcheck -- [seeds]
//! ```

use dualpaint_autograd::gradcheck;
use dualpaint_autograd::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).expect("shape matches data")
}

fn main() -> Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[5, 8]);
        let wq = random(&mut rng, &[8, 8]);
        let wk = random(&mut rng, &[8, 8]);
        let gamma = random(&mut rng, &[8]);
        let beta = random(&mut rng, &[8]);
        let r = gradcheck::check(&[x, wq, wk, gamma, beta], 1e-5, |_, v| {
            let h = v[0].layer_norm(v[3], v[4], 1e-5)?;
            let q = h.matmul(v[1])?;
            let k = h.matmul(v[2])?;
            let a = q.multi_head_attention(k, h, 2)?;
            a.gelu()?.add(v[0])?.mul(a)?.mean()
        })?;
        println!("seed {seed}: {} coordinates, max rel err {:.2e}", r.checked, r.max_rel_err);
        worst = worst.max(r.max_rel_err);
    }
    println!("worst relative error {worst:.2e} ({})", if worst < 1e-4 { "ok" } else { "FAIL" });
    Ok(())
}
