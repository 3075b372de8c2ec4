//! Kernel diagnostics: connection degree of refocusing weights, KL channel
//! redundancy, skeleton magnitude maps and filter-normalized loss landscapes.

mod landscape;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refconv::RefConvLayer;
use crate::tensor::{Scalar, Tensor4};

pub use landscape::{filter_norms, filter_normalize, grid_over, loss_landscape, random_direction, LandscapeGrid, LandscapeOptions};

/// Default matrix order: the first 64 kernel channels.
pub const DEFAULT_CHANNELS: usize = 64;

/// A dense `order x order` matrix of per-channel statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SquareMatrix {
    pub order: usize,
    pub values: Vec<f64>,
    pub layer: String,
    pub statistic: String,
    pub transform: String,
}

impl SquareMatrix {
    fn new(order: usize, values: Vec<f64>, statistic: &str, transform: &str) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{statistic} produced {v}")));
        }
        Ok(SquareMatrix { order, values, layer: String::new(), statistic: statistic.into(), transform: transform.into() })
    }

    pub fn with_layer(mut self, layer: &str) -> Self {
        self.layer = layer.into();
        self
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.order + j]
    }

    pub fn transpose(&self) -> SquareMatrix {
        let n = self.order;
        let values = (0..n * n).map(|idx| self.values[(idx % n) * n + idx / n]).collect();
        SquareMatrix { values, ..self.clone() }
    }

    /// Mean over the `n(n-1)` entries with `i != j`; zero for order one.
    pub fn mean_offdiag(&self) -> f64 {
        let n = self.order;
        if n < 2 {
            return 0.0;
        }
        let total: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| self.get(i, j)).sum();
        total / (n * (n - 1)) as f64
    }

    pub fn to_csv(&self) -> String {
        self.values
            .chunks(self.order)
            .map(|row| row.iter().map(|v| format!("{v:.9e}")).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }

    /// Writes `<stem>.csv` and a `<stem>.json` metadata sidecar.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        let meta = serde_json::json!({
            "layer": self.layer,
            "statistic": self.statistic,
            "transform": self.transform,
            "order": self.order,
        });
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }
}

/// Entry `(i, j)` is the summed magnitude of the refocusing filter that maps
/// basis channel `j` into transformed channel `i`. Only defined when the map
/// conv is dense over kernel channels (`G = 1`, the depthwise case).
pub fn connection_degree<T: Scalar>(layer: &RefConvLayer<T>, n_channels: usize) -> Result<SquareMatrix> {
    if layer.refocus.map_groups != 1 {
        return Err(Error::InvalidArgument(format!(
            "connection degree needs a map conv with one group, this layer has {}",
            layer.refocus.map_groups
        )));
    }
    let [n, m, k, _] = layer.refocus.weights.dims();
    if n_channels == 0 || n_channels > n.min(m) {
        return Err(Error::InvalidArgument(format!("{n_channels} channels requested, layer has {n}")));
    }
    let w = layer.refocus.weights.data();
    let mut values = Vec::with_capacity(n_channels * n_channels);
    for i in 0..n_channels {
        for j in 0..n_channels {
            let start = (i * m + j) * k * k;
            values.push(w[start..start + k * k].iter().map(|v| v.as_f64().abs()).sum());
        }
    }
    SquareMatrix::new(n_channels, values, "connection_degree", "sum_abs")
}

fn softmax_channels<T: Scalar>(kernel: &Tensor4<T>, n_channels: usize) -> Result<Vec<Vec<f64>>> {
    let [o, i, kh, kw] = kernel.dims();
    let plane = kh * kw;
    if n_channels == 0 || n_channels > o * i {
        return Err(Error::InvalidArgument(format!("{n_channels} channels requested, kernel has {}", o * i)));
    }
    Ok(kernel
        .data()
        .chunks(plane)
        .take(n_channels)
        .map(|ch| {
            let m = ch.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = ch.iter().map(|v| (v.as_f64() - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect())
}

/// `log10(1 + KL(p_i || p_j))` between softmax-normalized kernel channels,
/// with the KL divergence in nats. Row `i` is the reference distribution.
pub fn kl_redundancy<T: Scalar>(kernel: &Tensor4<T>, n_channels: usize) -> Result<SquareMatrix> {
    kernel.ensure_finite("kernel")?;
    let p = softmax_channels(kernel, n_channels)?;
    let n = p.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let kl: f64 = p[i].iter().zip(&p[j]).map(|(a, b)| a * (a / b).ln()).sum();
            values[i * n + j] = (1.0 + kl.max(0.0)).log10();
        }
    }
    SquareMatrix::new(n, values, "kl_divergence", "log10(1+kl_nats)")
}

/// Mean off-diagonal KL redundancy of the basis and of the transformed kernel.
pub fn redundancy_summary<T: Scalar>(w_b: &Tensor4<T>, w_t: &Tensor4<T>, n_channels: usize) -> Result<(f64, f64)> {
    Ok((kl_redundancy(w_b, n_channels)?.mean_offdiag(), kl_redundancy(w_t, n_channels)?.mean_offdiag()))
}

/// Channel-averaged `|w|` at every kernel position, divided by its maximum.
pub fn skeleton_magnitude<T: Scalar>(kernel: &Tensor4<T>) -> Result<SquareMatrix> {
    let [o, i, kh, kw] = kernel.dims();
    if kh != kw {
        return Err(Error::Shape(format!("skeleton map needs a square kernel, got {kh}x{kw}")));
    }
    let plane = kh * kw;
    let mut acc = vec![0.0; plane];
    for ch in kernel.data().chunks(plane) {
        for (a, v) in acc.iter_mut().zip(ch) {
            *a += v.as_f64().abs();
        }
    }
    let count = (o * i) as f64;
    acc.iter_mut().for_each(|a| *a /= count);
    let max = acc.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::InvalidArgument("skeleton map of an all-zero kernel is undefined".into()));
    }
    acc.iter_mut().for_each(|a| *a /= max);
    SquareMatrix::new(kh, acc, "skeleton_magnitude", "mean_abs/max")
}

/// `W_t - W_b`.
pub fn delta_weights<T: Scalar>(w_t: &Tensor4<T>, w_b: &Tensor4<T>) -> Result<Tensor4<T>> {
    if w_t.dims() != w_b.dims() {
        return Err(Error::Shape(format!("delta of {:?} and {:?}", w_t.dims(), w_b.dims())));
    }
    Tensor4::new(w_t.dims(), w_t.data().iter().zip(w_b.data()).map(|(&a, &b)| a - b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refconv::RefocusInit;
    use crate::tensor::ConvSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dw_layer(c: usize, init: RefocusInit, seed: u64) -> RefConvLayer<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ConvSpec::depthwise(c, 3).unwrap();
        let basis = Tensor4::normal(spec.weight_dims(), 1.0, &mut rng);
        RefConvLayer::new(spec, basis, 3, init, &mut rng).unwrap()
    }

    #[test]
    fn connection_degree_of_zero_and_single_slice() {
        let mut layer = dw_layer(4, RefocusInit::Zero, 0);
        let m = connection_degree(&layer, 4).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
        let k2 = 9;
        layer.refocus.weights.data_mut()[(0 * 4 + 1) * k2..][..k2].iter_mut().for_each(|v| *v = 1.0);
        let m = connection_degree(&layer, 4).unwrap();
        assert_eq!(m.get(0, 1), 9.0);
        assert_eq!(m.values.iter().sum::<f64>(), 9.0);
    }

    #[test]
    fn connection_degree_rejects_grouped_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = ConvSpec::new(4, 4, 3, 1, 1, 2).unwrap();
        let basis = Tensor4::normal(spec.weight_dims(), 1.0, &mut rng);
        let layer = RefConvLayer::<f64>::new(spec, basis, 3, RefocusInit::Xavier, &mut rng).unwrap();
        assert!(connection_degree(&layer, 2).is_err());
        assert!(connection_degree(&dw_layer(4, RefocusInit::Xavier, 2), 5).is_err());
    }

    #[test]
    fn kl_matrix_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Tensor4::<f64>::normal([6, 1, 3, 3], 1.0, &mut rng);
        let m = kl_redundancy(&k, 6).unwrap();
        assert!((0..6).all(|i| m.get(i, i) == 0.0));
        assert!(m.values.iter().all(|&v| v >= 0.0));
        assert_ne!(m, m.transpose());
        let (b, t) = redundancy_summary(&k, &k, 6).unwrap();
        assert_eq!(b, t);
    }

    #[test]
    fn constant_kernels_have_no_redundancy_signal() {
        let k = Tensor4::<f64>::from_fn([4, 2, 3, 3], |[o, i, _, _]| (o * 2 + i) as f64);
        let m = kl_redundancy(&k, 8).unwrap();
        assert!(m.values.iter().all(|&v| v.abs() < 1e-15));
        assert_eq!(m.mean_offdiag(), 0.0);
    }

    #[test]
    fn skeleton_of_a_cross() {
        let k = Tensor4::new([1, 1, 3, 3], vec![0.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let m = skeleton_magnitude(&k).unwrap();
        assert_eq!(m.values, vec![0.0, 0.5, 0.0, 0.5, 1.0, 0.5, 0.0, 0.5, 0.0]);
        assert!(skeleton_magnitude(&Tensor4::<f64>::zeros([2, 1, 3, 3])).is_err());
    }

    #[test]
    fn delta_of_identical_kernels_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = Tensor4::<f32>::normal([3, 2, 3, 3], 1.0, &mut rng);
        assert!(delta_weights(&k, &k).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(delta_weights(&k, &Tensor4::zeros([3, 2, 1, 1])).is_err());
    }

    #[test]
    fn sidecar_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let k = Tensor4::<f64>::from_fn([2, 1, 3, 3], |[o, _, y, x]| (o + y * x) as f64);
        kl_redundancy(&k, 2).unwrap().with_layer("conv1").write(dir.path(), "kl").unwrap();
        let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("kl.json")).unwrap()).unwrap();
        assert_eq!(meta["layer"], "conv1");
        assert_eq!(std::fs::read_to_string(dir.path().join("kl.csv")).unwrap().lines().count(), 2);
    }
}
