//! Forward throughput of every conv in a zoo model plus a whole inference pass.
//! Usage: `cargo run --release --example conv_throughput [model] [batch]`

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refconv::models::{build_zoo, Network};
use refconv::tensor::{conv2d_forward, Tensor4};

fn main() -> refconv::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let model = args.get(1).map(String::as_str).unwrap_or("tiny_dw");
    let batch: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(32);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let graph = build_zoo(model)?;
    let shapes = graph.shapes()?;
    let mut total_macs = 0u64;
    let mut total_secs = 0.0;
    for (i, layer) in graph.layers.iter().enumerate() {
        let Some(spec) = layer.kind.conv_spec() else { continue };
        let [c, h, w] = if i == 0 { graph.input } else { shapes[i - 1] };
        let x = Tensor4::<f32>::normal([batch, c, h, w], 1.0, &mut rng);
        let k = Tensor4::<f32>::normal(spec.weight_dims(), 0.1, &mut rng);
        let (ho, wo) = spec.output_hw(h, w)?;
        let macs = (batch * ho * wo * spec.c_out * spec.in_per_group() * spec.kernel * spec.kernel) as u64;
        let t = Instant::now();
        let reps = 3;
        for _ in 0..reps {
            conv2d_forward(&x, &k, spec, None)?;
        }
        let secs = t.elapsed().as_secs_f64() / reps as f64;
        total_macs += macs;
        total_secs += secs;
        println!("{:<12} {:>4}x{:<4} k{} g{:<4} {:>8.2} ms  {:>6.2} GMAC/s", layer.name, spec.c_in, spec.c_out, spec.kernel, spec.groups, secs * 1e3, macs as f64 / secs / 1e9);
    }
    println!("convs: {:.1} ms, {:.2} GMAC/s", total_secs * 1e3, total_macs as f64 / total_secs / 1e9);

    let net = Network::<f32>::init(graph.clone(), &mut rng)?;
    let [c, h, w] = graph.input;
    let x = Tensor4::<f32>::normal([batch, c, h, w], 1.0, &mut rng);
    let mut best = f64::INFINITY;
    for _ in 0..5 {
        let t = Instant::now();
        net.predict(&x)?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    println!("predict (batch {batch}, best of 5): {:.1} ms", best * 1e3);
    Ok(())
}
