//! A filter-normalized 2-D loss slice around a briefly trained model.
//! Usage: `cargo run --release --example loss_landscape [resolution] [samples]`

use refconv::analysis::{loss_landscape, LandscapeOptions};
use refconv::cli::landscape_subset;
use refconv::data::synth_split;
use refconv::models::build_zoo;
use refconv::training::{pretrain, TrainConfig};

fn main() -> refconv::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let resolution = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let samples = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(128);
    let (train, _) = synth_split(512, 10, 10, 32, 3)?;
    let cfg = TrainConfig { epochs: 2, warmup_epochs: 1, batch_size: 32, ..Default::default() };
    let (net, _) = pretrain::<f32>(build_zoo("tiny_dense")?, &train, None, &cfg)?;

    let opts = LandscapeOptions { resolution, samples, ..Default::default() };
    let data = landscape_subset(&train, samples, opts.seed)?;
    let grid = loss_landscape(&net, &data, &train.stats, &opts)?;
    println!("center loss {:.4}", grid.center());
    print!("{:>7}", "b \\ a");
    grid.coords.iter().for_each(|a| print!("{a:>8.2}"));
    println!();
    for (b, beta) in grid.coords.iter().enumerate() {
        print!("{beta:>7.2}");
        (0..grid.resolution).for_each(|a| print!("{:>8.3}", grid.at(b, a)));
        println!();
    }
    Ok(())
}
