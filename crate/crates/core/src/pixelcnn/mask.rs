use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mask type: `A` hides the current position's own group, `B` exposes it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    A,
    B,
}

/// Masked convolution with channels split into contiguous groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskedConvSpec {
    pub kind: MaskKind,
    pub kernel: usize,
    pub groups: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Group of channel `c` when `channels` are split into `groups` contiguous runs.
pub fn contiguous_groups(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::InvalidArgument(format!("{channels} channels cannot be split into {groups} groups")));
    }
    Ok((0..channels).map(|c| c * groups / channels).collect())
}

/// Weight mask `[C_out, C_in, k, k]` for a causal raster-order convolution.
pub fn make_weight_mask(spec: &MaskedConvSpec) -> Result<Tensor> {
    let in_groups = contiguous_groups(spec.in_channels, spec.groups)?;
    let out_groups = contiguous_groups(spec.out_channels, spec.groups)?;
    weight_mask_with_groups(spec.kind, spec.kernel, &in_groups, &out_groups)
}

/// Weight mask with an explicit group index per input and output channel.
///
/// Taps in rows above the centre are open; in the centre row, taps left of
/// the centre are open; the centre tap connects output group `g` to input
/// groups `< g` (kind A) or `<= g` (kind B); everything else is closed.
pub fn weight_mask_with_groups(kind: MaskKind, kernel: usize, in_groups: &[usize], out_groups: &[usize]) -> Result<Tensor> {
    if kernel % 2 == 0 {
        return Err(Error::EvenKernel(kernel, kernel));
    }
    let c = kernel / 2;
    let (ci, co) = (in_groups.len(), out_groups.len());
    let mut mask = Tensor::zeros(vec![co, ci, kernel, kernel]);
    let data = mask.data_mut();
    for (o, &go) in out_groups.iter().enumerate() {
        for (i, &gi) in in_groups.iter().enumerate() {
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let open = if ky < c || (ky == c && kx < c) {
                        true
                    } else if ky == c && kx == c {
                        match kind {
                            MaskKind::A => gi < go,
                            MaskKind::B => gi <= go,
                        }
                    } else {
                        false
                    };
                    if open {
                        data[((o * ci + i) * kernel + ky) * kernel + kx] = 1.0;
                    }
                }
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spatial(kind: MaskKind) -> Vec<f64> {
        let spec = MaskedConvSpec { kind, kernel: 3, groups: 1, in_channels: 1, out_channels: 1 };
        make_weight_mask(&spec).unwrap().into_data()
    }

    #[test]
    fn kind_a_three_by_three() {
        assert_eq!(spatial(MaskKind::A), vec![1., 1., 1., 1., 0., 0., 0., 0., 0.]);
    }

    #[test]
    fn kind_b_three_by_three() {
        assert_eq!(spatial(MaskKind::B), vec![1., 1., 1., 1., 1., 0., 0., 0., 0.]);
    }

    #[test]
    fn kind_a_pointwise_rgb_is_strictly_lower_triangular() {
        let spec = MaskedConvSpec { kind: MaskKind::A, kernel: 1, groups: 3, in_channels: 3, out_channels: 3 };
        let m = make_weight_mask(&spec).unwrap().into_data();
        assert_eq!(m, vec![0., 0., 0., 1., 0., 0., 1., 1., 0.]);
        let spec = MaskedConvSpec { kind: MaskKind::B, ..spec };
        let m = make_weight_mask(&spec).unwrap().into_data();
        assert_eq!(m, vec![1., 0., 0., 1., 1., 0., 1., 1., 1.]);
    }

    #[test]
    fn even_kernel_rejected() {
        let spec = MaskedConvSpec { kind: MaskKind::B, kernel: 4, groups: 1, in_channels: 1, out_channels: 1 };
        assert!(matches!(make_weight_mask(&spec), Err(Error::EvenKernel(4, 4))));
    }

    #[test]
    fn masks_are_binary() {
        let spec = MaskedConvSpec { kind: MaskKind::B, kernel: 5, groups: 3, in_channels: 6, out_channels: 9 };
        let m = make_weight_mask(&spec).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
