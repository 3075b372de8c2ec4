//! Builds a refocusing layer over a random depthwise kernel and shows how
//! `W_t` relates to `W_b` for zero, identity-like and random `W_r`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refconv::refconv::{compute_groups, RefConvLayer, RefocusInit};
use refconv::tensor::{ConvSpec, Tensor4};

fn main() -> refconv::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spec = ConvSpec::depthwise(4, 3)?;
    let w_b = Tensor4::<f64>::uniform(spec.weight_dims(), -1.0, 1.0, &mut rng);
    println!("W_b {:?}, map groups G = {}", w_b.dims(), compute_groups(&spec)?);

    let zero = RefConvLayer::new(spec, w_b.clone(), 3, RefocusInit::Zero, &mut rng)?;
    println!("zero W_r: max|W_t - W_b| = {}", zero.transform()?.max_abs_diff(&w_b)?);

    // a centred delta on the diagonal copies each channel once more
    let mut delta = zero.clone();
    delta.refocus.weights = Tensor4::from_fn(delta.refocus.weights.dims(), |[o, i, y, x]| {
        if o == i && y == 1 && x == 1 {
            1.0
        } else {
            0.0
        }
    });
    let doubled = w_b.map(|v| 2.0 * v);
    println!("delta W_r: max|W_t - 2 W_b| = {}", delta.transform()?.max_abs_diff(&doubled)?);

    let xavier = RefConvLayer::new(spec, w_b.clone(), 3, RefocusInit::Xavier, &mut rng)?;
    let w_t = xavier.transform()?;
    println!("xavier W_r {:?} ({} params): |W_t - W_b| = {:.4}, |W_b| = {:.4}", xavier.refocus.weights.dims(), xavier.refocus_params(), w_t.max_abs_diff(&w_b)?, w_b.norm());
    for c in 0..2 {
        println!("channel {c} W_b: {:?}", &w_b.data()[c * 9..c * 9 + 9].iter().map(|v| format!("{v:+.3}")).collect::<Vec<_>>());
        println!("channel {c} W_t: {:?}", &w_t.data()[c * 9..c * 9 + 9].iter().map(|v| format!("{v:+.3}")).collect::<Vec<_>>());
    }
    Ok(())
}
