//! Central-difference check of the refocusing-kernel gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refconv::refconv::{RefConvLayer, RefocusInit};
use refconv::tensor::{finite_diff_grad, max_relative_error, ConvSpec, Tensor4};

fn main() -> refconv::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let specs = [ConvSpec::depthwise(4, 3)?, ConvSpec::new(4, 4, 3, 1, 1, 2)?, ConvSpec::dense(2, 3, 3)?.with_stride(2)?];
    for spec in specs {
        let w_b = Tensor4::<f64>::uniform(spec.weight_dims(), -1.0, 1.0, &mut rng);
        let layer = RefConvLayer::new(spec, w_b, 3, RefocusInit::Xavier, &mut rng)?;
        let x = Tensor4::uniform([2, spec.c_in, 6, 6], -1.0, 1.0, &mut rng);
        let g = Tensor4::uniform(layer.forward(&x)?.dims(), -1.0, 1.0, &mut rng);
        let analytic = layer.backward(&x, &g)?.grad_refocus;
        let numeric = finite_diff_grad(
            |w_r| {
                let mut m = layer.clone();
                m.refocus.weights = w_r.clone();
                m.forward(&x).map(|y| y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()).unwrap_or(f64::NAN)
            },
            &layer.refocus.weights,
            1e-3,
        )?;
        println!(
            "c_in {} c_out {} groups {} stride {}: max rel err {:.2e} over {} entries",
            spec.c_in,
            spec.c_out,
            spec.groups,
            spec.stride,
            max_relative_error(&analytic, &numeric, 1e-6)?,
            analytic.len()
        );
    }
    Ok(())
}
