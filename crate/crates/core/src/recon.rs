//! Scatter subtraction and short-scan FDK reconstruction.
//!
//! Projections are filtered on a virtual detector through the isocenter
//! (`u' = u·SOD/SDD`). Short scans are weighted with Parker weights using the
//! full overscan `δ = (B − π)/2`, where `B` is the angular span between the
//! first and last view.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ScanGeometry, ShadowMask};
use crate::image::Image;
use crate::phantom::{sidecar_path, CylinderSpec};
use crate::plot::{gray_png, line_plot, Curve};

/// Floor applied to corrected intensities before taking the logarithm.
pub const RECON_FLOOR: f64 = 1e-6;

/// `max(t − ŝ, floor)` inside `mask`; 0 outside.
pub fn scatter_subtract(t: &Image, s_est: &Image, mask: &ShadowMask, floor: f64) -> Result<Image> {
    t.ensure_same_shape(s_est, "measurement vs scatter estimate")?;
    let mut out = Image::zeros(t.rows, t.cols);
    for r in mask.row_range.0..mask.row_range.1 {
        for c in mask.col_range.0..mask.col_range.1 {
            let i = r * t.cols + c;
            out.data[i] = (t.data[i] as f64 - s_est.data[i] as f64).max(floor) as f32;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeSemantics {
    /// Linear attenuation, 1/mm.
    Attenuation,
    Hu,
}

/// Reconstruction grid: voxel centers are symmetric about the isocenter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeSpec {
    pub dims: [usize; 3],
    pub voxel_size: f64,
}

impl VolumeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) || !(self.voxel_size > 0.0) {
            return Err(Error::Config(format!("invalid volume grid {:?} @ {} mm", self.dims, self.voxel_size)));
        }
        Ok(())
    }

    /// Center coordinate (mm) of voxel `i` along axis `axis`.
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        (i as f64 - 0.5 * (self.dims[axis] as f64 - 1.0)) * self.voxel_size
    }
}

/// `x` fastest, then `y`, then `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    pub spec: VolumeSpec,
    pub semantics: VolumeSemantics,
    #[serde(skip)]
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(spec: VolumeSpec, semantics: VolumeSemantics) -> Self {
        let n = spec.dims.iter().product();
        Volume {
            spec,
            semantics,
            data: vec![0.0; n],
        }
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        let [nx, ny, _] = self.spec.dims;
        self.data[(z * ny + y) * nx + x]
    }

    /// Axial slice `z` as an image with rows along `y` and columns along `x`.
    pub fn axial(&self, z: usize) -> Image {
        let [nx, ny, _] = self.spec.dims;
        Image {
            rows: ny,
            cols: nx,
            data: self.data[z * nx * ny..(z + 1) * nx * ny].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Sidecar metadata of a raw `f32` little-endian volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeFileMeta {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub semantics: VolumeSemantics,
    pub dtype: String,
    pub order: String,
}

pub fn write_volume(vol: &Volume, raw: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * vol.data.len());
    for v in &vol.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(raw, bytes).map_err(|e| Error::io(raw, e))?;
    let meta = VolumeFileMeta {
        dims: vol.spec.dims,
        voxel_size: vol.spec.voxel_size,
        semantics: vol.semantics,
        dtype: "f32le".into(),
        order: "x-fastest".into(),
    };
    let side = sidecar_path(raw);
    fs::write(&side, serde_json::to_string_pretty(&meta).expect("json")).map_err(|e| Error::io(&side, e))
}

pub fn read_volume(raw: &Path) -> Result<Volume> {
    let side = sidecar_path(raw);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: VolumeFileMeta = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    let bytes = fs::read(raw).map_err(|e| Error::io(raw, e))?;
    let n: usize = meta.dims.iter().product();
    if meta.dtype != "f32le" || bytes.len() != 4 * n {
        return Err(Error::format(
            raw,
            format!("expected {} f32 values, file has {} bytes", n, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Volume {
        spec: VolumeSpec {
            dims: meta.dims,
            voxel_size: meta.voxel_size,
        },
        semantics: meta.semantics,
        data,
    })
}

/// Parker short-scan weight of the ray at source angle `beta` (radians from
/// the first view) and fan angle `gamma`, for overscan `delta` (half the
/// span beyond π). The complementary ray of `(β, γ)` is `(β + π + 2γ, −γ)`.
pub fn parker_weight(beta: f64, gamma: f64, delta: f64) -> f64 {
    let s2 = |x: f64| x.sin().powi(2);
    if beta < 0.0 || beta > PI + 2.0 * delta {
        0.0
    } else if beta < 2.0 * (delta - gamma) {
        s2(0.25 * PI * beta / (delta - gamma))
    } else if beta <= PI - 2.0 * gamma {
        1.0
    } else {
        s2(0.25 * PI * (PI + 2.0 * delta - beta) / (delta + gamma))
    }
}

/// Fan angle, in the convention of [`parker_weight`], of detector column
/// coordinate `u`.
pub fn fan_angle(geom: &ScanGeometry, u: f64) -> f64 {
    -(u / geom.sdd()).atan()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdkOptions {
    /// Hann apodization of the ramp.
    pub hann: bool,
    /// Apply Parker weights; turn off only for full 360° scans.
    pub short_scan: bool,
}

impl Default for FdkOptions {
    fn default() -> Self {
        FdkOptions {
            hann: true,
            short_scan: true,
        }
    }
}

/// Span check: uniform spacing within 1e-6° and, for short scans, at least
/// π plus the full fan angle.
pub fn check_coverage(angles_deg: &[f64], geom: &ScanGeometry, short_scan: bool) -> Result<f64> {
    if angles_deg.len() < 2 {
        return Err(Error::Geometry("FDK needs at least two views".into()));
    }
    let step = angles_deg[1] - angles_deg[0];
    if !(step > 0.0) {
        return Err(Error::Geometry("view angles must increase".into()));
    }
    for (i, w) in angles_deg.windows(2).enumerate() {
        if ((w[1] - w[0]) - step).abs() > 1e-6 {
            return Err(Error::Geometry(format!(
                "non-uniform angle spacing at view {}: {} vs {} deg",
                i + 1,
                w[1] - w[0],
                step
            )));
        }
    }
    let span = (angles_deg.len() - 1) as f64 * step;
    let need = 180.0 + 2.0 * geom.half_fan_angle().to_degrees();
    if short_scan && span < need {
        return Err(Error::Geometry(format!(
            "insufficient angular coverage: {span:.3} deg spanned, {need:.3} deg needed"
        )));
    }
    Ok(step)
}

/// Frequency response of the band-limited ramp for padded length `n` and
/// virtual sample spacing `du`, including the `du` convolution factor.
fn ramp_response(n: usize, du: f64, hann: bool) -> Vec<Complex<f64>> {
    let mut h = vec![Complex::new(0.0, 0.0); n];
    for (i, v) in h.iter_mut().enumerate() {
        let k = if i <= n / 2 { i as i64 } else { i as i64 - n as i64 };
        let val = if k == 0 {
            1.0 / (4.0 * du * du)
        } else if k % 2 != 0 {
            -1.0 / (PI * PI * (k * k) as f64 * du * du)
        } else {
            0.0
        };
        *v = Complex::new(val * du, 0.0);
    }
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut h);
    if hann {
        for (i, v) in h.iter_mut().enumerate() {
            let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
            *v *= 0.5 * (1.0 + (2.0 * PI * k / n as f64).cos());
        }
    }
    h
}

/// Cosine-, Parker-weighted and ramp-filtered copies of line-integral
/// projections.
pub fn filter_projections(
    projections: &[Image],
    geom: &ScanGeometry,
    angles_deg: &[f64],
    opts: &FdkOptions,
) -> Result<Vec<Image>> {
    let step = check_coverage(angles_deg, geom, opts.short_scan)?;
    if projections.len() != angles_deg.len() {
        return Err(Error::Shape(format!(
            "{} projections for {} angles",
            projections.len(),
            angles_deg.len()
        )));
    }
    let (rows, cols) = (geom.det_rows(), geom.det_cols());
    for p in projections {
        if p.rows != rows || p.cols != cols {
            return Err(Error::Shape(format!(
                "projection {}x{} on a {}x{} detector",
                p.rows, p.cols, rows, cols
            )));
        }
    }
    let span = ((angles_deg.len() - 1) as f64 * step).to_radians();
    let delta = 0.5 * (span - PI);
    let scale = geom.sod() / geom.sdd();
    let du = geom.pixel_width() * scale;
    let n_pad = (2 * cols).next_power_of_two();
    let resp = ramp_response(n_pad, du, opts.hann);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n_pad);
    let inv = planner.plan_fft_inverse(n_pad);
    let weights: Vec<f64> = (0..rows * cols)
        .map(|i| {
            let (u, v) = (geom.u_of_col(i % cols), geom.v_of_row(i / cols));
            geom.sdd() / (geom.sdd().powi(2) + u * u + v * v).sqrt()
        })
        .collect();
    let filtered = projections
        .par_iter()
        .zip(angles_deg.par_iter())
        .map(|(p, &a)| {
            let beta = (a - angles_deg[0]).to_radians();
            let parker: Vec<f64> = (0..cols)
                .map(|c| {
                    if opts.short_scan {
                        parker_weight(beta, fan_angle(geom, geom.u_of_col(c)), delta)
                    } else {
                        0.5
                    }
                })
                .collect();
            let mut out = Image::zeros(rows, cols);
            let mut buf = vec![Complex::new(0.0, 0.0); n_pad];
            for r in 0..rows {
                buf.fill(Complex::new(0.0, 0.0));
                for c in 0..cols {
                    let i = r * cols + c;
                    buf[c] = Complex::new(p.data[i] as f64 * weights[i] * parker[c], 0.0);
                }
                fwd.process(&mut buf);
                for (b, h) in buf.iter_mut().zip(&resp) {
                    *b *= h;
                }
                inv.process(&mut buf);
                for c in 0..cols {
                    out.data[r * cols + c] = (buf[c].re / n_pad as f64) as f32;
                }
            }
            out
        })
        .collect();
    Ok(filtered)
}

/// Voxel-driven backprojection of filtered projections with bilinear
/// detector sampling.
pub fn backproject(
    filtered: &[Image],
    geom: &ScanGeometry,
    angles_deg: &[f64],
    spec: &VolumeSpec,
) -> Result<Volume> {
    spec.validate()?;
    let step = if angles_deg.len() > 1 {
        (angles_deg[1] - angles_deg[0]).to_radians()
    } else {
        0.0
    };
    let [nx, ny, _] = spec.dims;
    let sod = geom.sod();
    let trig: Vec<(f64, f64)> = angles_deg.iter().map(|a| (a.to_radians().cos(), a.to_radians().sin())).collect();
    let (rows, cols) = (geom.det_rows() as f64, geom.det_cols() as f64);
    let mut vol = Volume::zeros(*spec, VolumeSemantics::Attenuation);
    vol.data.par_chunks_mut(nx * ny).enumerate().for_each(|(z, plane)| {
        let pz = spec.coord(2, z);
        for y in 0..ny {
            let py = spec.coord(1, y);
            for x in 0..nx {
                let px = spec.coord(0, x);
                let mut acc = 0.0f64;
                for (q, &(cb, sb)) in filtered.iter().zip(&trig) {
                    // s = (cos β, sin β), e = (−sin β, cos β)
                    let dist = sod - (px * cb + py * sb);
                    if dist <= 0.0 {
                        continue;
                    }
                    let mag = geom.sdd() / dist;
                    let u = mag * (-px * sb + py * cb);
                    let v = mag * pz;
                    let fc = geom.col_of_u(u);
                    let fr = geom.row_of_v(v);
                    if fc < 0.0 || fr < 0.0 || fc > cols - 1.0 || fr > rows - 1.0 {
                        continue;
                    }
                    let (c0, r0) = (fc.floor() as usize, fr.floor() as usize);
                    let (c1, r1) = ((c0 + 1).min(q.cols - 1), (r0 + 1).min(q.rows - 1));
                    let (tc, tr) = (fc - c0 as f64, fr - r0 as f64);
                    let top = q.get(r0, c0) as f64 * (1.0 - tc) + q.get(r0, c1) as f64 * tc;
                    let bot = q.get(r1, c0) as f64 * (1.0 - tc) + q.get(r1, c1) as f64 * tc;
                    let w = sod / dist;
                    acc += w * w * (top * (1.0 - tr) + bot * tr);
                }
                plane[y * nx + x] = (acc * step) as f32;
            }
        }
    });
    Ok(vol)
}

/// FDK of line-integral projections `p = −ln(corrected)`.
pub fn fdk(
    projections: &[Image],
    geom: &ScanGeometry,
    angles_deg: &[f64],
    spec: &VolumeSpec,
    opts: &FdkOptions,
) -> Result<Volume> {
    let filtered = filter_projections(projections, geom, angles_deg, opts)?;
    backproject(&filtered, geom, angles_deg, spec)
}

/// `−ln(max(c, floor))` inside `mask`, 0 outside.
pub fn line_integrals(corrected: &Image, mask: &ShadowMask, floor: f64) -> Image {
    crate::dataset::linearize(corrected, mask, floor)
}

pub fn to_hu(vol: &Volume, mu_water: f64) -> Result<Volume> {
    if !(mu_water > 0.0) {
        return Err(Error::Config(format!("mu_water must be positive, got {mu_water}")));
    }
    if vol.semantics != VolumeSemantics::Attenuation {
        return Err(Error::Config("HU conversion needs an attenuation volume".into()));
    }
    Ok(Volume {
        spec: vol.spec,
        semantics: VolumeSemantics::Hu,
        data: vol
            .data
            .iter()
            .map(|&m| (1000.0 * (m as f64 - mu_water) / mu_water) as f32)
            .collect(),
    })
}

/// Rectangle on one axial slice; ranges are half-open voxel indices
/// (rows along `y`, columns along `x`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiRect {
    pub slice: usize,
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl RoiRect {
    pub fn validate(&self, vol: &Volume) -> Result<()> {
        let [nx, ny, nz] = vol.spec.dims;
        if self.slice >= nz || self.rows.0 >= self.rows.1 || self.rows.1 > ny || self.cols.0 >= self.cols.1 || self.cols.1 > nx
        {
            return Err(Error::Config(format!("ROI {self:?} outside a {nx}x{ny}x{nz} volume")));
        }
        Ok(())
    }
}

/// Column-wise mean over the ROI rows.
pub fn roi_mean_profile(vol: &Volume, roi: &RoiRect) -> Result<Vec<f64>> {
    roi.validate(vol)?;
    let n = (roi.rows.1 - roi.rows.0) as f64;
    Ok((roi.cols.0..roi.cols.1)
        .map(|x| (roi.rows.0..roi.rows.1).map(|y| vol.get(x, y, roi.slice) as f64).sum::<f64>() / n)
        .collect())
}

/// Edge-band mean minus center-band mean (HU) over the central axial
/// slices, excluding the insert and a 2-voxel margin around it.
/// Center band: `r < 0.3 R`; edge band: `0.6 R ≤ r < 0.85 R`.
pub fn cupping_index(vol: &Volume, cyl: &CylinderSpec) -> f64 {
    let [nx, ny, nz] = vol.spec.dims;
    let s = &vol.spec;
    let zc = (0..nz)
        .min_by(|&a, &b| s.coord(2, a).abs().total_cmp(&s.coord(2, b).abs()))
        .unwrap_or(0);
    let zs = zc.saturating_sub(1)..(zc + 2).min(nz);
    let r_cyl = cyl.radius;
    let margin = 2.0 * s.voxel_size;
    let (mut center, mut nc, mut edge, mut ne) = (0.0, 0usize, 0.0, 0usize);
    for z in zs {
        for y in 0..ny {
            for x in 0..nx {
                let (px, py) = (s.coord(0, x), s.coord(1, y));
                if let Some((ix, iy, ir)) = cyl.insert {
                    if ((px - ix).powi(2) + (py - iy).powi(2)).sqrt() < ir + margin {
                        continue;
                    }
                }
                let r = (px * px + py * py).sqrt() / r_cyl;
                let v = vol.get(x, y, z) as f64;
                if r < 0.3 {
                    center += v;
                    nc += 1;
                } else if (0.6..0.85).contains(&r) {
                    edge += v;
                    ne += 1;
                }
            }
        }
    }
    if nc == 0 || ne == 0 {
        return 0.0;
    }
    edge / ne as f64 - center / nc as f64
}

/// Default display window (HU).
pub const HU_WINDOW: (f32, f32) = (-1000.0, 2500.0);

/// Axial slice PNG windowed to `window`.
pub fn write_slice_png(vol: &Volume, z: usize, window: (f32, f32), path: &Path) -> Result<()> {
    if z >= vol.spec.dims[2] {
        return Err(Error::Config(format!("slice {z} outside {} slices", vol.spec.dims[2])));
    }
    gray_png(path, &vol.axial(z), window.0, window.1)
}

/// ROI profiles of several reconstructions in one plot (`<stem>.png/.svg`),
/// x in mm along the volume `x` axis.
pub fn plot_profiles(stem: &Path, vols: &[(&str, &Volume)], roi: &RoiRect) -> Result<()> {
    let mut curves = Vec::with_capacity(vols.len());
    for (name, v) in vols {
        let p = roi_mean_profile(v, roi)?;
        curves.push(Curve {
            name: name.to_string(),
            points: p
                .iter()
                .enumerate()
                .map(|(i, &m)| (v.spec.coord(0, roi.cols.0 + i), m))
                .collect(),
        });
    }
    line_plot(stem, "ROI mean profile", "x (mm)", "HU", &curves)
}
