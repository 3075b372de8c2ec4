use serde::{Deserialize, Serialize};

use super::compute_groups;
use crate::error::Result;
use crate::tensor::ConvSpec;

/// Training-time cost of one conv layer and of its refocusing transform.
///
/// FLOPs are multiply-accumulate counts. The original-conv figure uses the
/// input spatial size `H x W`, which is exact for stride-1 "same" convs and an
/// approximation otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops_original: u64,
    pub flops_refocus: u64,
    pub params_original: u64,
    pub params_refocus: u64,
}

/// Cost model for a conv of geometry `spec` on a `batch x c_in x h x w` input
/// with a `map_kernel x map_kernel` refocusing kernel.
pub fn cost_report(spec: &ConvSpec, batch: u64, h: u64, w: u64, map_kernel: u64) -> Result<CostReport> {
    let groups = compute_groups(spec)? as u64;
    let (c_in, c_out, g) = (spec.c_in as u64, spec.c_out as u64, spec.groups as u64);
    let kk = (spec.kernel * spec.kernel) as u64;
    let mk = map_kernel * map_kernel;
    Ok(CostReport {
        flops_original: batch * h * w * c_in * c_out * kk / g,
        // N output positions * K^2 * (N / G) * k^2 reduces to K^2 k^2 c_in c_out.
        flops_refocus: kk * mk * c_in * c_out,
        params_original: c_out * (c_in / g) * kk,
        params_refocus: c_out * c_out * c_in * c_in * mk / (g * g * groups),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depthwise_worked_example() {
        let spec = ConvSpec::depthwise(512, 3).unwrap();
        let r = cost_report(&spec, 256, 28, 28, 3).unwrap();
        assert_eq!(r.flops_original, 924_844_032);
        assert_eq!(r.flops_refocus, 21_233_664);
        assert_eq!(r.params_original, 512 * 9);
    }

    #[test]
    fn refocus_params() {
        let dw = ConvSpec::depthwise(4, 3).unwrap();
        assert_eq!(cost_report(&dw, 1, 8, 8, 3).unwrap().params_refocus, 144);
        let dense = ConvSpec::dense(8, 8, 3).unwrap();
        assert_eq!(cost_report(&dense, 1, 8, 8, 3).unwrap().params_refocus, 576);
    }

    #[test]
    fn refocus_flops_ignore_batch() {
        let spec = ConvSpec::new(16, 32, 3, 2, 1, 4).unwrap();
        let a = cost_report(&spec, 1, 32, 32, 3).unwrap();
        let b = cost_report(&spec, 4096, 32, 32, 3).unwrap();
        assert_eq!(a.flops_refocus, b.flops_refocus);
        assert_eq!(b.flops_original, 4096 * a.flops_original);
    }
}
