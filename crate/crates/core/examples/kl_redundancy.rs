//! Channel redundancy of `W_b` and `W_t` after a short refocus run, plus the
//! connection-degree matrix of the first depthwise layer.

use refconv::analysis::{connection_degree, kl_redundancy, skeleton_magnitude};
use refconv::data::synth_split;
use refconv::models::{build_zoo, SurgeryOptions};
use refconv::training::{pretrain, refocus_train, TrainConfig};

fn main() -> refconv::Result<()> {
    let (train, _) = synth_split(320, 10, 10, 32, 2)?;
    let cfg = TrainConfig { epochs: 2, warmup_epochs: 1, batch_size: 32, ..Default::default() };
    let (base, _) = pretrain::<f32>(build_zoo("tiny_dw")?, &train, None, &cfg)?;
    let (rc, _) = refocus_train(&base, &train, None, &cfg, &SurgeryOptions::default())?;

    println!("{:<10} {:>10} {:>10}", "layer", "KL(W_b)", "KL(W_t)");
    for name in rc.refconv_names() {
        let layer = rc.refconv(&name).expect("listed layer");
        let [o, i, _, _] = layer.basis.weights.dims();
        let n = (o * i).min(64);
        let kb = kl_redundancy(&layer.basis.weights, n)?.mean_offdiag();
        let kt = kl_redundancy(&layer.transform()?, n)?.mean_offdiag();
        println!("{name:<10} {kb:>10.5} {kt:>10.5}");
    }

    let first = rc.refconv("block1.dw").expect("block1.dw");
    let conn = connection_degree(first, 8)?;
    println!("\nconnection degree, block1.dw, first 8 channels (row = basis channel):");
    for r in 0..conn.order {
        println!("{}", (0..conn.order).map(|c| format!("{:6.3}", conn.get(r, c))).collect::<Vec<_>>().join(" "));
    }
    let skel = skeleton_magnitude(&first.transform()?)?;
    println!("\nskeleton of W_t, block1.dw:");
    for r in 0..skel.order {
        println!("{}", (0..skel.order).map(|c| format!("{:5.2}", skel.get(r, c))).collect::<Vec<_>>().join(" "));
    }
    Ok(())
}
