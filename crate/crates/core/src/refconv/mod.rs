//! Re-parameterized refocusing convolution.
//!
//! A [`RefConvLayer`] keeps the kernel of a pre-trained conv as frozen *basis*
//! weights `W_b` and learns a small *refocusing* kernel `W_r`. The kernel the
//! layer actually convolves with is
//!
//! ```text
//! W_t = W_b * W_r + W_b
//! ```
//!
//! where `*` treats `W_b` as a one-sample image with `N = c_out * c_in / g`
//! channels of size `K x K` and convolves it with `W_r` (stride 1, padding
//! `k / 2`, `G` groups, no bias). Because `W_t` has the shape of `W_b`, a
//! trained layer collapses back into a plain conv with [`RefConvLayer::merge`].

mod cost;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv2d_backward, conv2d_forward, ConvSpec, Scalar, Tensor4};

pub use cost::{cost_report, CostReport};

/// Group count of the map conv: `G = c_out * c_in / g^2`.
///
/// Each map-conv group then spans `g` kernel channels: all of them for a
/// depthwise conv (`G = 1`), a single one for a dense conv (`G = c_out * c_in`).
pub fn compute_groups(spec: &ConvSpec) -> Result<usize> {
    spec.validate()?;
    let num = spec.c_out * spec.c_in;
    let den = spec.groups * spec.groups;
    if num % den != 0 {
        return Err(Error::Geometry(format!(
            "c_out * c_in = {num} is not divisible by groups^2 = {den}; refocusing group count would be fractional"
        )));
    }
    Ok(num / den)
}

/// How the refocusing kernel starts out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefocusInit {
    /// Glorot-uniform over the map-conv kernel shape.
    Xavier,
    /// All zeros, so that `W_t == W_b` before training.
    Zero,
}

/// The frozen kernel inherited from the pre-trained layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisWeights<T> {
    pub weights: Tensor4<T>,
    pub frozen: bool,
}

/// The trainable map-conv kernel, `(N, N / G, k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefocusingWeights<T> {
    pub weights: Tensor4<T>,
    pub map_kernel: usize,
    pub map_groups: usize,
}

/// Gradients produced by [`RefConvLayer::backward`].
#[derive(Clone, Debug)]
pub struct RefConvGrads<T> {
    pub grad_x: Tensor4<T>,
    pub grad_refocus: Tensor4<T>,
    /// Only computed when the basis is not frozen.
    pub grad_basis: Option<Tensor4<T>>,
}

/// A plain conv parameter set recovered from a trained refocusing layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedConv<T> {
    pub spec: ConvSpec,
    pub weight: Tensor4<T>,
    pub bias: Option<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefConvLayer<T> {
    pub spec: ConvSpec,
    pub basis: BasisWeights<T>,
    pub refocus: RefocusingWeights<T>,
    pub use_identity_shortcut: bool,
    /// Bias of the original layer; frozen and passed through unchanged.
    pub bias: Option<Vec<T>>,
}

/// Shape of the refocusing kernel for a conv geometry.
pub fn refocus_dims(spec: &ConvSpec, map_kernel: usize, map_groups: usize) -> [usize; 4] {
    let n = spec.c_out * spec.in_per_group();
    [n, n / map_groups, map_kernel, map_kernel]
}

impl<T: Scalar> RefConvLayer<T> {
    /// Wraps pre-trained weights with a freshly initialized refocusing kernel.
    pub fn new<R: Rng + ?Sized>(
        spec: ConvSpec,
        basis: Tensor4<T>,
        map_kernel: usize,
        init: RefocusInit,
        rng: &mut R,
    ) -> Result<Self> {
        let groups = compute_groups(&spec)?;
        let dims = refocus_dims(&spec, map_kernel, groups);
        let weights = match init {
            RefocusInit::Zero => Tensor4::zeros(dims),
            RefocusInit::Xavier => {
                let receptive = map_kernel * map_kernel;
                let fan_in = dims[1] * receptive;
                let fan_out = dims[0] * receptive;
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor4::uniform(dims, -bound, bound, rng)
            }
        };
        Self::from_parts(spec, basis, weights, groups, true, None)
    }

    /// Assembles a layer from explicit tensors, validating every shape.
    pub fn from_parts(
        spec: ConvSpec,
        basis: Tensor4<T>,
        refocus: Tensor4<T>,
        map_groups: usize,
        use_identity_shortcut: bool,
        bias: Option<Vec<T>>,
    ) -> Result<Self> {
        spec.validate()?;
        basis.expect_dims(spec.weight_dims(), "basis weights")?;
        let [_, _, mk, mk2] = refocus.dims();
        if mk != mk2 {
            return Err(Error::Shape(format!("refocusing kernel must be square, got {:?}", refocus.dims())));
        }
        if mk > spec.kernel {
            return Err(Error::Geometry(format!(
                "refocusing kernel {mk} exceeds basis kernel {}",
                spec.kernel
            )));
        }
        if mk % 2 == 0 {
            return Err(Error::Geometry(format!("refocusing kernel must be odd, got {mk}")));
        }
        let n = spec.c_out * spec.in_per_group();
        if map_groups == 0 || n % map_groups != 0 {
            return Err(Error::Geometry(format!("map groups {map_groups} must divide {n} kernel channels")));
        }
        refocus.expect_dims(refocus_dims(&spec, mk, map_groups), "refocusing weights")?;
        if let Some(b) = &bias {
            if b.len() != spec.c_out {
                return Err(Error::Shape(format!("bias has {} entries, conv has {} outputs", b.len(), spec.c_out)));
            }
        }
        Ok(RefConvLayer {
            spec,
            basis: BasisWeights { weights: basis, frozen: true },
            refocus: RefocusingWeights { weights: refocus, map_kernel: mk, map_groups },
            use_identity_shortcut,
            bias,
        })
    }

    /// Number of `K x K` kernel channels, `N = c_out * c_in / g`.
    pub fn kernel_channels(&self) -> usize {
        self.spec.c_out * self.spec.in_per_group()
    }

    /// Geometry of the conv that runs over the basis "image".
    pub fn map_spec(&self) -> ConvSpec {
        let n = self.kernel_channels();
        let k = self.refocus.map_kernel;
        ConvSpec { c_in: n, c_out: n, kernel: k, stride: 1, padding: k / 2, groups: self.refocus.map_groups }
    }

    fn basis_image(&self) -> Result<Tensor4<T>> {
        let k = self.spec.kernel;
        self.basis.weights.clone().reshape([1, self.kernel_channels(), k, k])
    }

    /// `W_t = W_b * W_r (+ W_b)`, shaped like `W_b`.
    pub fn transform(&self) -> Result<Tensor4<T>> {
        let mapped = conv2d_forward(&self.basis_image()?, &self.refocus.weights, &self.map_spec(), None)?;
        let mut w_t = mapped.reshape(self.spec.weight_dims())?;
        if self.use_identity_shortcut {
            for (t, &b) in w_t.data_mut().iter_mut().zip(self.basis.weights.data()) {
                *t += b;
            }
        }
        Ok(w_t)
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let w_t = self.transform()?;
        self.forward_with(x, &w_t)
    }

    /// Forward pass with an already computed transformed kernel.
    pub fn forward_with(&self, x: &Tensor4<T>, w_t: &Tensor4<T>) -> Result<Tensor4<T>> {
        conv2d_forward(x, w_t, &self.spec, self.bias.as_deref())
    }

    pub fn backward(&self, x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<RefConvGrads<T>> {
        let w_t = self.transform()?;
        self.backward_with(x, &w_t, grad_out)
    }

    /// Chains the feature-map conv gradient through the refocusing transform.
    pub fn backward_with(&self, x: &Tensor4<T>, w_t: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<RefConvGrads<T>> {
        let outer = conv2d_backward(x, w_t, &self.spec, grad_out)?;
        let k = self.spec.kernel;
        let grad_t = outer.grad_w.reshape([1, self.kernel_channels(), k, k])?;
        let inner = conv2d_backward(&self.basis_image()?, &self.refocus.weights, &self.map_spec(), &grad_t)?;
        let grad_basis = if self.basis.frozen {
            None
        } else {
            let mut g = inner.grad_x.reshape(self.spec.weight_dims())?;
            if self.use_identity_shortcut {
                for (a, &b) in g.data_mut().iter_mut().zip(grad_t.data()) {
                    *a += b;
                }
            }
            Some(g)
        };
        Ok(RefConvGrads { grad_x: outer.grad_x, grad_refocus: inner.grad_w, grad_basis })
    }

    /// Collapses the layer into the original conv structure.
    pub fn merge(&self) -> Result<MergedConv<T>> {
        Ok(MergedConv { spec: self.spec, weight: self.transform()?, bias: self.bias.clone() })
    }

    pub fn refocus_params(&self) -> usize {
        self.refocus.weights.len()
    }
}

/// Free-function form of [`RefConvLayer::transform`].
pub fn refocusing_transform<T: Scalar>(layer: &RefConvLayer<T>) -> Result<Tensor4<T>> {
    layer.transform()
}

/// Free-function form of [`RefConvLayer::forward`].
pub fn refconv_forward<T: Scalar>(layer: &RefConvLayer<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    layer.forward(x)
}

/// `(grad_x, grad_w_r)` for an upstream gradient.
pub fn refconv_backward<T: Scalar>(
    layer: &RefConvLayer<T>,
    x: &Tensor4<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let g = layer.backward(x, grad_out)?;
    Ok((g.grad_x, g.grad_refocus))
}

pub fn merge<T: Scalar>(layer: &RefConvLayer<T>) -> Result<(Tensor4<T>, Option<Vec<T>>)> {
    let m = layer.merge()?;
    Ok((m.weight, m.bias))
}
