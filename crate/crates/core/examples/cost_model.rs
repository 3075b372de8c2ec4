//! Training-time cost of refocusing for a few conv geometries.
//! Usage: `cargo run --example cost_model`

use refconv::refconv::cost_report;
use refconv::tensor::ConvSpec;

fn main() -> refconv::Result<()> {
    let cases = [
        ("depthwise 512, 28x28", ConvSpec::depthwise(512, 3)?, 28),
        ("depthwise 128, 56x56", ConvSpec::depthwise(128, 3)?, 56),
        ("group-wise 64/2, 32x32", ConvSpec::new(64, 64, 3, 1, 1, 2)?, 32),
        ("dense 64, 32x32", ConvSpec::dense(64, 64, 3)?, 32),
    ];
    println!("{:<24} {:>16} {:>14} {:>12} {:>14}", "layer", "MAC original", "MAC refocus", "params", "params W_r");
    for (name, spec, size) in cases {
        let r = cost_report(&spec, 256, size, size, 3)?;
        println!(
            "{name:<24} {:>16} {:>14} {:>12} {:>14}",
            r.flops_original, r.flops_refocus, r.params_original, r.params_refocus
        );
    }
    Ok(())
}
