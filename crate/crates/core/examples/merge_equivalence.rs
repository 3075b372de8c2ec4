//! Surgery on an initialized model, a short refocus run, then merging back:
//! zero-init logits are unchanged and merged logits match the training form.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refconv::data::synth_split;
use refconv::models::{build_zoo, Network, SurgeryOptions};
use refconv::refconv::RefocusInit;
use refconv::tensor::Tensor4;
use refconv::training::{refocus_train, TrainConfig};

fn main() -> refconv::Result<()> {
    let model = std::env::args().nth(1).unwrap_or_else(|| "tiny_dense".into());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let base = Network::<f32>::init(build_zoo(&model)?, &mut rng)?;
    let x = Tensor4::<f32>::normal([8, 3, 32, 32], 1.0, &mut rng);

    let zero = base.surgery(&SurgeryOptions { init: RefocusInit::Zero, ..Default::default() }, &mut rng)?;
    println!("zero-init: logits identical = {}", zero.predict(&x)? == base.predict(&x)?);

    let (train, _) = synth_split(256, 10, 10, 32, 0)?;
    let cfg = TrainConfig { epochs: 1, warmup_epochs: 0, batch_size: 32, ..Default::default() };
    let (rc, _) = refocus_train(&base, &train, None, &cfg, &SurgeryOptions::default())?;
    let merged = rc.merged()?;
    let diff = rc.predict(&x)?.max_abs_diff(&merged.predict(&x)?)?;
    println!("refocused layers: {:?}", rc.refconv_names());
    println!(
        "params: training form {} (trainable {}), merged {}, baseline {}",
        rc.param_count(),
        rc.trainable_param_count(),
        merged.param_count(),
        base.param_count()
    );
    println!("merged vs training form: max|diff| = {diff:e}");
    Ok(())
}
