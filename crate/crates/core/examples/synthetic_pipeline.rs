//! Pretrain, refocus, merge and compare against the retrain arm on synthetic
//! textures. Usage: `cargo run --release --example synthetic_pipeline [model] [epochs]`

use std::time::Instant;

use refconv::data::synth_split;
use refconv::models::{build_zoo, SurgeryOptions};
use refconv::training::{evaluate_with, pretrain, refocus_train, retrain_arm, TrainConfig};

fn main() -> refconv::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let model = args.get(1).map(String::as_str).unwrap_or("tiny_dw");
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);

    let (train, test) = synth_split(640, 320, 10, 32, 1)?;

    let cfg = TrainConfig { epochs, warmup_epochs: 1, batch_size: 32, verbose: true, ..Default::default() };
    let t = Instant::now();
    let (base, _) = pretrain::<f32>(build_zoo(model)?, &train, Some(&test), &cfg)?;
    println!("pretrain {model}: {:.1}s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let (rc, _) = refocus_train(&base, &train, Some(&test), &cfg, &SurgeryOptions::default())?;
    let merged = rc.merged()?;
    println!("refocus: {:.1}s", t.elapsed().as_secs_f64());

    let (retrained, _) = retrain_arm(&base, &train, Some(&test), &cfg)?;

    for (name, net) in [("baseline", &base), ("retrain", &retrained), ("refconv (merged)", &merged)] {
        let (loss, acc) = evaluate_with(net, &test, &train.stats)?;
        println!("{name:>18}: loss {loss:.4}  acc {:.2}%  params {}", acc * 100.0, net.param_count());
    }
    Ok(())
}
