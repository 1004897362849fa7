use super::ModelError;
use crate::numerics::{Real, Tensor};

/// Splits `[C, H, W]` into `(H/p)^2` row-major patches. Each patch row is
/// laid out channel-major: `(c, dy, dx)`.
pub fn patchify<T: Real>(image: &Tensor<T>, p: usize) -> Result<Tensor<T>, ModelError> {
    let &[c, h, w] = image.shape() else {
        return Err(ModelError::ImageShape {
            expected: vec![0, 0, 0],
            got: image.shape().to_vec(),
        });
    };
    if h != w || p == 0 || h % p != 0 {
        return Err(ModelError::Config(format!("image {h}x{w} cannot be split into {p}x{p} patches")));
    }
    let g = h / p;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for gy in 0..g {
        for gx in 0..g {
            for ch in 0..c {
                for dy in 0..p {
                    let start = (ch * h + gy * p + dy) * w + gx * p;
                    out.extend_from_slice(&src[start..start + p]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![g * g, c * p * p], out)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(patches: &Tensor<T>, channels: usize, side: usize, p: usize) -> Result<Tensor<T>, ModelError> {
    if p == 0 || !side.is_multiple_of(p) {
        return Err(ModelError::Config(format!("side {side} not divisible by patch size {p}")));
    }
    let g = side / p;
    let expected = vec![g * g, channels * p * p];
    if patches.shape() != expected.as_slice() {
        return Err(ModelError::ImageShape {
            expected,
            got: patches.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); channels * side * side];
    let src = patches.data();
    let mut k = 0;
    for gy in 0..g {
        for gx in 0..g {
            for ch in 0..channels {
                for dy in 0..p {
                    let start = (ch * side + gy * p + dy) * side + gx * p;
                    out[start..start + p].copy_from_slice(&src[k..k + p]);
                    k += p;
                }
            }
        }
    }
    Ok(Tensor::new(vec![channels, side, side], out)?)
}
