use super::{ModulationError, BASE_LENGTH};
use crate::numerics::Tensor;

const GRID: usize = 32;

/// Bilinear resize of a square image with corner-aligned sampling.
pub fn bilinear_resize(src: &[f64], src_side: usize, dst_side: usize) -> Vec<f64> {
    assert_eq!(src.len(), src_side * src_side);
    if dst_side == src_side {
        return src.to_vec();
    }
    let scale = if dst_side > 1 {
        (src_side - 1) as f64 / (dst_side - 1) as f64
    } else {
        0.0
    };
    let coord = |i: usize| {
        let pos = i as f64 * scale;
        let lo = (pos.floor() as usize).min(src_side - 1);
        let hi = (lo + 1).min(src_side - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = Vec::with_capacity(dst_side * dst_side);
    for i in 0..dst_side {
        let (y0, y1, ty) = coord(i);
        for j in 0..dst_side {
            let (x0, x1, tx) = coord(j);
            let top = src[y0 * src_side + x0] + (src[y0 * src_side + x1] - src[y0 * src_side + x0]) * tx;
            let bot = src[y1 * src_side + x0] + (src[y1 * src_side + x1] - src[y1 * src_side + x0]) * tx;
            out.push(top + (bot - top) * ty);
        }
    }
    out
}

/// Affine map onto [0, 1]; a constant input maps to all zeros.
pub fn min_max_normalize(values: &mut [f64]) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if span > 0.0 && span.is_finite() {
        values.iter_mut().for_each(|v| *v = (*v - lo) / span);
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Turns a length-1024 real series into a `[3, side, side]` image: row-major
/// reshape to 32x32, bilinear interpolation to `side`, min-max normalization,
/// then three identical channels.
pub fn signal_to_image(series: &[f64], side: usize) -> Result<Tensor, ModulationError> {
    if series.len() != BASE_LENGTH {
        return Err(ModulationError::LengthMismatch {
            expected: BASE_LENGTH,
            got: series.len(),
        });
    }
    if side < GRID {
        return Err(ModulationError::ImageSide(side));
    }
    let mut plane = bilinear_resize(series, GRID, side);
    min_max_normalize(&mut plane);
    let plane: Vec<f32> = plane.into_iter().map(|v| v as f32).collect();
    let mut data = Vec::with_capacity(3 * plane.len());
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Ok(Tensor::new(vec![3, side, side], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Vec<f64> {
        (0..1024).map(|i| ((i * 37) % 101) as f64 * 0.1 - 3.0).collect()
    }

    #[test]
    fn constant_series_maps_to_zeros() {
        let img = signal_to_image(&[2.5; 1024], 64).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn side_32_is_reshape_only() {
        let s = ramp();
        let img = signal_to_image(&s, 32).unwrap();
        let mut expected = s.clone();
        min_max_normalize(&mut expected);
        for (a, b) in img.data()[..1024].iter().zip(&expected) {
            assert_eq!(*a, *b as f32);
        }
        let d = img.data();
        assert_eq!(&d[..1024], &d[1024..2048]);
        assert_eq!(&d[..1024], &d[2048..]);
    }

    #[test]
    fn side_224_shape_and_range() {
        let img = signal_to_image(&ramp(), 224).unwrap();
        assert_eq!(img.shape(), &[3, 224, 224]);
        let (lo, hi) = img.data().iter().fold((1.0f32, 0.0f32), |(l, h), &v| (l.min(v), h.max(v)));
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn bilinear_keeps_corners_and_constants() {
        let src: Vec<f64> = (0..1024).map(|i| i as f64).collect();
        let out = bilinear_resize(&src, 32, 100);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[99], 31.0);
        assert_eq!(out[99 * 100 + 99], 1023.0);
        let flat = bilinear_resize(&[4.0; 1024], 32, 77);
        assert!(flat.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn wrong_length_rejected() {
        assert!(signal_to_image(&[0.0; 1000], 32).is_err());
        assert!(signal_to_image(&[0.0; 1024], 16).is_err());
    }
}
