use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::models::Network;
use crate::tensor::Scalar;
use crate::training::{derived_rng, evaluate_with};

const STREAM_DIRECTION: u64 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeOptions {
    /// Odd, so the unperturbed model sits on the grid.
    pub resolution: usize,
    /// Half-width of the square `[-span, span]^2`.
    pub span: f64,
    pub seed: u64,
    pub samples: usize,
}

impl Default for LandscapeOptions {
    fn default() -> Self {
        LandscapeOptions { resolution: 25, span: 1.0, seed: 0, samples: 1024 }
    }
}

/// Loss over `theta + alpha * d1 + beta * d2`, row-major with `beta` as row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub resolution: usize,
    pub span: f64,
    pub coords: Vec<f64>,
    pub losses: Vec<f64>,
    pub seed: u64,
    /// Generator streams of `d1` and `d2` under `seed`.
    pub direction_streams: [u64; 2],
}

impl LandscapeGrid {
    pub fn at(&self, beta: usize, alpha: usize) -> f64 {
        self.losses[beta * self.resolution + alpha]
    }

    pub fn center(&self) -> f64 {
        let c = self.resolution / 2;
        self.at(c, c)
    }

    /// Long format: `alpha,beta,loss`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,beta,loss\n");
        for (b, beta) in self.coords.iter().enumerate() {
            for (a, alpha) in self.coords.iter().enumerate() {
                s.push_str(&format!("{alpha:.6},{beta:.6},{:.9e}\n", self.at(b, a)));
            }
        }
        s
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        let meta = serde_json::json!({
            "statistic": "cross_entropy",
            "resolution": self.resolution,
            "span": self.span,
            "seed": self.seed,
            "direction_streams": self.direction_streams,
            "normalization": "filter",
            "batchnorm": "running statistics",
            "center_loss": self.center(),
        });
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }
}

/// Rescales every filter (slice along the first axis) of `direction` to the
/// norm of the matching filter of `theta`.
pub fn filter_normalize<T: Scalar>(direction: &mut [T], theta: &[T], dims: [usize; 4]) {
    let filter = dims[1] * dims[2] * dims[3];
    for (d, t) in direction.chunks_mut(filter).zip(theta.chunks(filter)) {
        let dn = d.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        let tn = t.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        let s = if dn > 0.0 { tn / dn } else { 0.0 };
        d.iter_mut().for_each(|v| *v = T::of(v.as_f64() * s));
    }
}

/// A Gaussian direction over the trainable parameters of `net`, aligned with
/// [`Network::params`]. Multi-dimensional tensors are filter-normalized;
/// biases and batchnorm affine vectors get a zero direction. Frozen
/// parameters and buffers are `None`.
pub fn random_direction<T: Scalar, R: Rng + ?Sized>(net: &Network<T>, rng: &mut R) -> Vec<Option<Vec<T>>> {
    net.params()
        .into_iter()
        .map(|(info, theta)| {
            if !info.is_trainable() {
                return None;
            }
            let mut d: Vec<T> = (0..theta.len()).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
            if matches!(info.role, "weight" | "refocus" | "basis") {
                filter_normalize(&mut d, theta, info.dims);
            } else {
                d.iter_mut().for_each(|v| *v = T::zero());
            }
            Some(d)
        })
        .collect()
}

/// Evaluates `f(alpha, beta)` on an odd `resolution x resolution` grid over
/// `[-span, span]^2`. Non-finite values and numerical failures become `+inf`.
pub fn grid_over(resolution: usize, span: f64, mut f: impl FnMut(f64, f64) -> Result<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    if resolution < 3 || resolution % 2 == 0 {
        return Err(Error::InvalidArgument(format!("grid resolution must be odd and at least 3, got {resolution}")));
    }
    if !(span.is_finite() && span > 0.0) {
        return Err(Error::InvalidArgument(format!("grid span must be positive, got {span}")));
    }
    let half = (resolution - 1) as f64;
    let coords: Vec<f64> = (0..resolution).map(|i| span * (2.0 * i as f64 - half) / half).collect();
    let mut values = Vec::with_capacity(resolution * resolution);
    for &beta in &coords {
        for &alpha in &coords {
            let v = match f(alpha, beta) {
                Ok(v) if v.is_finite() => v,
                Ok(_) | Err(Error::NonFinite(_)) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            values.push(v);
        }
    }
    Ok((coords, values))
}

/// Loss surface around `net` on `data`, batchnorm fixed at running statistics.
pub fn loss_landscape<T: Scalar>(
    net: &Network<T>,
    data: &Dataset,
    stats: &ChannelStats,
    options: &LandscapeOptions,
) -> Result<LandscapeGrid> {
    let d1 = random_direction(net, &mut derived_rng(options.seed, STREAM_DIRECTION, 0));
    let d2 = random_direction(net, &mut derived_rng(options.seed, STREAM_DIRECTION, 1));
    let theta: Vec<Vec<T>> = net.params().into_iter().map(|(_, d)| d.to_vec()).collect();
    let mut probe = net.clone();
    let (coords, losses) = grid_over(options.resolution, options.span, |alpha, beta| {
        let (a, b) = (T::of(alpha), T::of(beta));
        let mut idx = 0;
        probe.visit_params_mut(|_, p| {
            if let (Some(x), Some(y)) = (&d1[idx], &d2[idx]) {
                for (((pi, &t), &u), &v) in p.iter_mut().zip(&theta[idx]).zip(x).zip(y) {
                    *pi = t + a * u + b * v;
                }
            }
            idx += 1;
            Ok(())
        })?;
        evaluate_with(&probe, data, stats).map(|(loss, _)| loss)
    })?;
    Ok(LandscapeGrid {
        resolution: options.resolution,
        span: options.span,
        coords,
        losses,
        seed: options.seed,
        direction_streams: [(STREAM_DIRECTION << 32), (STREAM_DIRECTION << 32) | 1],
    })
}

/// Per-filter L2 norms, for checking filter normalization.
pub fn filter_norms<T: Scalar>(values: &[T], dims: [usize; 4]) -> Vec<f64> {
    values
        .chunks(dims[1] * dims[2] * dims[3])
        .map(|f| f.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_split;
    use crate::models::build_zoo;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_rejects_even_resolution_and_maps_failures_to_inf() {
        assert!(grid_over(4, 1.0, |_, _| Ok(0.0)).is_err());
        let (c, v) = grid_over(3, 2.0, |a, _| if a > 0.0 { Ok(f64::NAN) } else { Ok(a) }).unwrap();
        assert_eq!(c, vec![-2.0, 0.0, 2.0]);
        assert_eq!(v[2], f64::INFINITY);
        assert_eq!(v[4], 0.0);
    }

    #[test]
    fn directions_match_filter_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::<f64>::init(build_zoo("tiny_dense").unwrap(), &mut rng).unwrap();
        let d = random_direction(&net, &mut rng);
        for ((info, theta), dir) in net.params().into_iter().zip(&d) {
            let Some(dir) = dir else { continue };
            if info.role == "weight" {
                for (a, b) in filter_norms(dir, info.dims).iter().zip(filter_norms(theta, info.dims)) {
                    assert!((a - b).abs() <= 1e-6 * b.max(1.0));
                }
            } else {
                assert!(dir.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn center_equals_evaluation_and_is_reproducible() {
        let (train, _) = synth_split(24, 0, 3, 8, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::<f32>::init(build_zoo("tiny_dense").unwrap(), &mut rng).unwrap();
        let opts = LandscapeOptions { resolution: 3, span: 0.5, seed: 4, samples: 24 };
        let g = loss_landscape(&net, &train, &train.stats, &opts).unwrap();
        let (loss, _) = evaluate_with(&net, &train, &train.stats).unwrap();
        assert!((g.center() - loss).abs() <= 1e-6);
        assert_eq!(loss_landscape(&net, &train, &train.stats, &opts).unwrap(), g);
        assert!(g.losses.iter().any(|&l| l != g.center()));
    }
}
