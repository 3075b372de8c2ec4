use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor4;

/// Random crop after reflect padding, then a random horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub random_crop: bool,
    pub pad: usize,
    pub horizontal_flip: bool,
    pub flip_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy { random_crop: true, pad: 4, horizontal_flip: true, flip_prob: 0.5 }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        AugmentPolicy { random_crop: false, horizontal_flip: false, ..Default::default() }
    }

    pub fn is_enabled(&self) -> bool {
        self.random_crop || self.horizontal_flip
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
    r.clamp(0, n - 1) as usize
}

/// Mirrors every sample left-right.
pub fn flip_horizontal(batch: &Tensor4<f32>) -> Tensor4<f32> {
    let [_, _, _, w] = batch.dims();
    let mut out = batch.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Per-sample independent augmentation. Draws, in order per sample: the crop
/// offsets (when cropping) and the flip coin (when flipping).
pub fn augment<R: Rng + ?Sized>(batch: &Tensor4<f32>, policy: &AugmentPolicy, rng: &mut R) -> Tensor4<f32> {
    if !policy.is_enabled() {
        return batch.clone();
    }
    let [n, c, h, w] = batch.dims();
    let plane = h * w;
    let mut out = Tensor4::zeros(batch.dims());
    let pad = policy.pad.min(h.saturating_sub(1)).min(w.saturating_sub(1)) as isize;
    for b in 0..n {
        let (dy, dx) = if policy.random_crop {
            (rng.gen_range(0..=2 * pad) - pad, rng.gen_range(0..=2 * pad) - pad)
        } else {
            (0, 0)
        };
        let flip = policy.horizontal_flip && rng.gen_bool(policy.flip_prob);
        let src = batch.sample(b);
        let dst = &mut out.data_mut()[b * c * plane..][..c * plane];
        for ch in 0..c {
            for y in 0..h {
                let sy = reflect(y as isize + dy, h);
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = reflect(xx as isize + dx, w);
                    dst[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
                }
            }
        }
    }
    out
}
