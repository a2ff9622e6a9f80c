//! Times forward+backward of one transformer-sized block.
//!
//! cargo run -p dualpaint-autograd --example layer_throughput -- 512 64

use std::time::Instant;

use dualpaint_autograd::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand(rng: &mut ChaCha8Rng, shape: &[usize], s: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(-s..s)).collect(), shape).unwrap()
}

fn main() -> dualpaint_autograd::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let tokens = args.first().copied().unwrap_or(512);
    let d = args.get(1).copied().unwrap_or(64);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = rand(&mut rng, &[tokens, d], 1.0);
    let ws: Vec<Tensor> = [[d, d], [d, d], [d, d], [d, d], [d, 4 * d], [4 * d, d]]
        .iter()
        .map(|s| rand(&mut rng, s, 0.1).with_grad())
        .collect();
    let (g, b) = (Tensor::ones(&[d]), Tensor::zeros(&[d]));
    for rep in 0..3 {
        let t0 = Instant::now();
        let tape = Tape::new();
        let w: Vec<_> = ws.iter().map(|w| tape.leaf(w)).collect();
        let x = tape.constant(&x);
        let h = x.layer_norm(tape.constant(&g), tape.constant(&b), 1e-6)?;
        let a = h
            .matmul(w[0])?
            .multi_head_attention(h.matmul(w[1])?, h.matmul(w[2])?, 4)?
            .matmul(w[3])?;
        let x = x.add(a)?;
        let m = x.matmul(w[4])?.gelu()?.matmul(w[5])?;
        let loss = x.add(m)?.mean()?;
        let t1 = Instant::now();
        tape.backward(loss)?;
        println!(
            "rep {rep}: forward {:?}, backward {:?}",
            t1 - t0,
            t1.elapsed()
        );
    }
    Ok(())
}
