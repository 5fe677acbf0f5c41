//! Row-major single-channel `f32` images and the bilinear resampler shared by
//! dataset preparation and metric evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Image {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Image {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} image",
                data.len()
            )));
        }
        Ok(Image { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Image { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn ensure_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )))
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, k: f32) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }
}

/// Bilinear resampling with corner-aligned sampling: output pixel `i` reads
/// input coordinate `i·(in - 1)/(out - 1)`, so the corner pixels coincide.
pub fn resize(img: &Image, out_rows: usize, out_cols: usize) -> Result<Image> {
    if img.rows < 2 || img.cols < 2 || out_rows < 2 || out_cols < 2 {
        return Err(Error::Shape(format!(
            "resize needs dims >= 2, got {}x{} -> {out_rows}x{out_cols}",
            img.rows, img.cols
        )));
    }
    if img.rows == out_rows && img.cols == out_cols {
        return Ok(img.clone());
    }
    let rows = axis_taps(img.rows, out_rows);
    let cols = axis_taps(img.cols, out_cols);
    let mut out = Image::zeros(out_rows, out_cols);
    for (r, &(r0, r1, fr)) in rows.iter().enumerate() {
        let a = &img.data[r0 * img.cols..(r0 + 1) * img.cols];
        let b = &img.data[r1 * img.cols..(r1 + 1) * img.cols];
        let dst = &mut out.data[r * out_cols..(r + 1) * out_cols];
        for (d, &(c0, c1, fc)) in dst.iter_mut().zip(&cols) {
            let top = a[c0] as f64 * (1.0 - fc) + a[c1] as f64 * fc;
            let bot = b[c0] as f64 * (1.0 - fc) + b[c1] as f64 * fc;
            *d = (top * (1.0 - fr) + bot * fr) as f32;
        }
    }
    Ok(out)
}

/// Source taps `(lo, hi, frac)` for each output sample along one axis.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = (n_in - 1) as f64 / (n_out - 1) as f64;
    (0..n_out)
        .map(|i| {
            let x = i as f64 * scale;
            let lo = (x.floor() as usize).min(n_in - 2);
            let frac = x - lo as f64;
            // Snap round-off so exact grid hits reproduce the input sample.
            if frac < 1e-12 {
                (lo, lo + 1, 0.0)
            } else if frac > 1.0 - 1e-12 {
                (lo, lo + 1, 1.0)
            } else {
                (lo, lo + 1, frac)
            }
        })
        .collect()
}

/// Resize restricted to a support mask: values are averaged only over
/// in-mask taps (`resize(img·m) / resize(m)`), and output pixels whose
/// resampled mask falls below `keep` are set to zero.
///
/// Returns the resized image and the output mask.
pub fn resize_masked(
    img: &Image,
    mask: &[bool],
    out_rows: usize,
    out_cols: usize,
    keep: f32,
) -> Result<(Image, Vec<bool>)> {
    if mask.len() != img.data.len() {
        return Err(Error::Shape(format!(
            "mask has {} entries for {} pixels",
            mask.len(),
            img.data.len()
        )));
    }
    let masked = Image {
        rows: img.rows,
        cols: img.cols,
        data: img
            .data
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect(),
    };
    let weights = Image {
        rows: img.rows,
        cols: img.cols,
        data: mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    };
    let num = resize(&masked, out_rows, out_cols)?;
    let den = resize(&weights, out_rows, out_cols)?;
    let mut out = Image::zeros(out_rows, out_cols);
    let mut out_mask = vec![false; out_rows * out_cols];
    for i in 0..out.data.len() {
        if den.data[i] >= keep && den.data[i] > 0.0 {
            out.data[i] = num.data[i] / den.data[i];
            out_mask[i] = true;
        }
    }
    Ok((out, out_mask))
}

/// Expand a coarse cell-centered grid (each cell covering `factor x factor`
/// fine pixels) back to the fine grid with bilinear interpolation between
/// cell centers; edges clamp to the nearest cell.
pub fn upsample_cells(coarse: &Image, factor: usize, rows: usize, cols: usize) -> Image {
    let mut out = Image::zeros(rows, cols);
    let f = factor as f64;
    let tap = |i: usize, n: usize| -> (usize, usize, f64) {
        let x = ((i as f64 + 0.5) / f - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = (x.floor() as usize).min(n.saturating_sub(1));
        let hi = (lo + 1).min(n - 1);
        (lo, hi, x - lo as f64)
    };
    let rt: Vec<_> = (0..rows).map(|r| tap(r, coarse.rows)).collect();
    let ct: Vec<_> = (0..cols).map(|c| tap(c, coarse.cols)).collect();
    for (r, &(r0, r1, fr)) in rt.iter().enumerate() {
        for (c, &(c0, c1, fc)) in ct.iter().enumerate() {
            let top = coarse.get(r0, c0) as f64 * (1.0 - fc) + coarse.get(r0, c1) as f64 * fc;
            let bot = coarse.get(r1, c0) as f64 * (1.0 - fc) + coarse.get(r1, c1) as f64 * fc;
            out.set(r, c, (top * (1.0 - fr) + bot * fr) as f32);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize() {
        let img = Image::from_fn(5, 7, |r, c| (r * 7 + c) as f32);
        assert_eq!(resize(&img, 5, 7).unwrap(), img);
    }

    #[test]
    fn constant_stays_constant() {
        let img = Image::filled(13, 9, 0.7);
        for (r, c) in [(2, 2), (96, 80), (300, 250), (7, 31)] {
            let out = resize(&img, r, c).unwrap();
            assert!(out.data.iter().all(|&v| (v - 0.7).abs() < 1e-7));
        }
    }

    #[test]
    fn two_by_two_to_two_by_three() {
        let img = Image::from_vec(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let out = resize(&img, 2, 3).unwrap();
        assert_eq!(out.data, vec![0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn rejects_degenerate_dims() {
        let img = Image::filled(1, 5, 1.0);
        assert!(resize(&img, 4, 4).is_err());
        assert!(resize(&Image::filled(4, 4, 1.0), 1, 4).is_err());
    }

    #[test]
    fn affine_images_are_reproduced_exactly() {
        let f = |r: f64, c: f64| 0.3 + 0.02 * r - 0.05 * c;
        let img = Image::from_fn(24, 20, |r, c| f(r as f64, c as f64) as f32);
        let out = resize(&img, 120, 100).unwrap();
        for r in 0..120 {
            for c in 0..100 {
                let sr = r as f64 * 23.0 / 119.0;
                let sc = c as f64 * 19.0 / 99.0;
                assert!((out.get(r, c) as f64 - f(sr, sc)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn smooth_round_trip_error_is_small() {
        let img = Image::from_fn(120, 100, |r, c| {
            let x = c as f64 / 99.0;
            let y = r as f64 / 119.0;
            ((3.0 * x).sin() * (2.0 * y).cos()) as f32
        });
        let down = resize(&img, 96, 80).unwrap();
        let back = resize(&down, 120, 100).unwrap();
        let range = img.max() - img.min();
        let err = img
            .data
            .iter()
            .zip(&back.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 0.02 * range, "round-trip error {err}");
    }

    #[test]
    fn masked_resize_ignores_outside_values() {
        let img = Image::from_fn(10, 10, |_, c| if c < 5 { 2.0 } else { 99.0 });
        let mask: Vec<bool> = (0..100).map(|i| i % 10 < 5).collect();
        let (out, m) = resize_masked(&img, &mask, 7, 7, 0.5).unwrap();
        for i in 0..49 {
            if m[i] {
                assert!((out.data[i] - 2.0).abs() < 1e-6);
            } else {
                assert_eq!(out.data[i], 0.0);
            }
        }
        assert!(m.iter().any(|&b| b));
    }

    #[test]
    fn cell_upsample_preserves_constants() {
        let coarse = Image::filled(5, 4, 3.0);
        let fine = upsample_cells(&coarse, 4, 20, 16);
        assert!(fine.data.iter().all(|&v| (v - 3.0).abs() < 1e-6));
    }

    proptest::proptest! {
        #[test]
        fn resize_is_convex(vals in proptest::collection::vec(0.0f32..1.0, 36), r in 2usize..20, c in 2usize..20) {
            let img = Image::from_vec(6, 6, vals).unwrap();
            let out = resize(&img, r, c).unwrap();
            let (lo, hi) = (img.min(), img.max());
            for v in out.data {
                proptest::prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }
    }
}
