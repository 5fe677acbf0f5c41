//! Monte Carlo scatter simulation.
//!
//! Photons leave a point source into the collimated pyramid, move through
//! the voxel grid with Woodcock (delta) tracking against an energy-dependent
//! majorant, and interact by photoelectric absorption (handled by implicit
//! capture), Compton scattering (Klein–Nishina, Kahn's rejection method) or
//! Rayleigh scattering (isotropic inside a small forward cone). Photons that
//! interacted at least once and reach the detector are tallied on a coarse
//! grid, which is interpolated back to the detector pixels.
//!
//! Each photon draws from its own ChaCha stream (`seed`, photon index), and
//! photons are grouped into fixed-size chunks whose tallies are merged in
//! chunk order, so the image does not depend on the worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::trace::{axpy, box_interval, dot, norm, sub};
use super::{obliquity, ProjKind, ProjMeta, Projection, Spectrum};
use crate::error::{Error, Result};
use crate::geometry::{shadow_mask, FovSpec, ScanGeometry};
use crate::image::{upsample_cells, Image};
use crate::phantom::{MaterialTable, VoxelPhantom};

const ELECTRON_REST_KEV: f64 = 510.998_95;
const MAX_MATERIALS: usize = 8;
/// Photons per deterministic tally chunk.
const CHUNK: u64 = 16_384;
/// Surviving weight below which a history is terminated (remainder deposited).
const WEIGHT_CUTOFF: f64 = 1e-3;
const MAX_INTERACTIONS: u32 = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub n_photons: u64,
    pub seed: u64,
    /// Detector pixels per coarse scoring cell along each axis.
    pub bin_down: usize,
    /// Hard upper bound on `n_photons`.
    pub max_photons: u64,
    /// Open-field photons per pixel on the central ray.
    pub fluence: f64,
    /// Rayleigh cone half-angle (radians) at 50 keV; scales as 1/E.
    pub rayleigh_cone_50kev: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            n_photons: 100_000,
            seed: 1,
            bin_down: 4,
            max_photons: 200_000_000,
            fluence: 1.0e5,
            rayleigh_cone_50kev: 0.5,
        }
    }
}

/// Per-history bookkeeping of statistical weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryOutcome {
    pub initial_weight: f64,
    pub initial_energy: f64,
    pub deposited: f64,
    /// Weight of scattered photons reaching the detector.
    pub scored: f64,
    /// Weight leaving the system otherwise, including unscattered photons
    /// that reach the detector.
    pub escaped: f64,
    pub interactions: u32,
    pub hit: Option<DetectorHit>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorHit {
    pub u: f64,
    pub v: f64,
    pub weight: f64,
    pub energy: f64,
    pub scattered: bool,
}

/// Cross sections of every material at one photon energy.
#[derive(Clone, Copy)]
struct CrossSections {
    mu: [f64; MAX_MATERIALS],
    branches: [[f64; 3]; MAX_MATERIALS],
    majorant: f64,
}

/// Transport of photons for one view (phantom, FOV, gantry angle).
pub struct McEngine<'a> {
    ph: &'a VoxelPhantom,
    table: &'a MaterialTable,
    geom: &'a ScanGeometry,
    spectrum: &'a Spectrum,
    lo: [f64; 3],
    hi: [f64; 3],
    max_density: Vec<f64>,
    src: [f64; 3],
    s_hat: [f64; 3],
    e_u: [f64; 3],
    /// Sampling rectangle on the detector (pixel-snapped collimation shadow).
    u_range: (f64, f64),
    v_range: (f64, f64),
    /// Σ cos³ over in-shadow pixel centers: open-field photons per unit fluence.
    shadow_weight: f64,
    rayleigh_cone_50kev: f64,
}

impl<'a> McEngine<'a> {
    pub fn new(
        ph: &'a VoxelPhantom,
        table: &'a MaterialTable,
        geom: &'a ScanGeometry,
        spectrum: &'a Spectrum,
        fov: &FovSpec,
        angle_deg: f64,
    ) -> Result<Self> {
        ph.validate(table)?;
        if table.len() > MAX_MATERIALS {
            return Err(Error::Config(format!(
                "at most {MAX_MATERIALS} materials supported"
            )));
        }
        let mask = shadow_mask(fov, geom)?;
        if mask.count() == 0 {
            return Err(Error::Geometry(format!(
                "FOV {} covers no detector pixel",
                fov.label()
            )));
        }
        let du = geom.pixel_width();
        let dv = geom.pixel_height();
        let u_range = (
            geom.u_of_col(mask.col_range.0) - 0.5 * du,
            geom.u_of_col(mask.col_range.1 - 1) + 0.5 * du,
        );
        let v_range = (
            geom.v_of_row(mask.row_range.1 - 1) - 0.5 * dv,
            geom.v_of_row(mask.row_range.0) + 0.5 * dv,
        );
        let mut shadow_weight = 0.0;
        for r in mask.row_range.0..mask.row_range.1 {
            for c in mask.col_range.0..mask.col_range.1 {
                shadow_weight += obliquity(geom, geom.u_of_col(c), geom.v_of_row(r));
            }
        }
        let (lo, hi) = ph.bounds();
        Ok(McEngine {
            ph,
            table,
            geom,
            spectrum,
            lo,
            hi,
            max_density: ph
                .max_density_per_material(table.len())
                .into_iter()
                .map(f64::from)
                .collect(),
            src: geom.source_position(angle_deg),
            s_hat: geom.source_dir(angle_deg),
            e_u: geom.u_axis(angle_deg),
            u_range,
            v_range,
            shadow_weight,
            rayleigh_cone_50kev: 0.5,
        })
    }

    pub fn with_rayleigh_cone(mut self, half_angle_at_50kev: f64) -> Self {
        self.rayleigh_cone_50kev = half_angle_at_50kev;
        self
    }

    fn cross_sections(&self, kev: f64) -> CrossSections {
        let mut xs = CrossSections {
            mu: [0.0; MAX_MATERIALS],
            branches: [[0.0; 3]; MAX_MATERIALS],
            majorant: 0.0,
        };
        for m in 0..self.table.len() {
            let mu = self.table.mu(m as u8, kev);
            xs.mu[m] = mu;
            xs.branches[m] = self.table.branches(m as u8, kev);
            xs.majorant = xs.majorant.max(mu * self.max_density[m]);
        }
        xs
    }

    #[inline]
    fn voxel_at(&self, p: [f64; 3]) -> usize {
        let vs = self.ph.voxel_size;
        let d = self.ph.dims;
        let ix = (((p[0] - self.lo[0]) / vs) as usize).min(d[0] - 1);
        let iy = (((p[1] - self.lo[1]) / vs) as usize).min(d[1] - 1);
        let iz = (((p[2] - self.lo[2]) / vs) as usize).min(d[2] - 1);
        ix + d[0] * (iy + d[1] * iz)
    }

    /// Woodcock tracking from `pos` along unit `dir`: distance to the next
    /// real collision inside the phantom, or `None` if the photon leaves it.
    pub fn sample_collision(
        &self,
        pos: [f64; 3],
        dir: [f64; 3],
        kev: f64,
        rng: &mut impl Rng,
    ) -> Option<(f64, usize)> {
        let xs = self.cross_sections(kev);
        self.track(pos, dir, &xs, rng)
    }

    fn track(
        &self,
        pos: [f64; 3],
        dir: [f64; 3],
        xs: &CrossSections,
        rng: &mut impl Rng,
    ) -> Option<(f64, usize)> {
        let (t0, t1) = box_interval(pos, dir, self.lo, self.hi)?;
        if t1 <= 0.0 || xs.majorant <= 0.0 {
            return None;
        }
        let inv_major = 1.0 / xs.majorant;
        let mut t = t0.max(0.0);
        loop {
            let xi: f64 = rng.random();
            t -= (1.0 - xi).ln() * inv_major;
            if t >= t1 {
                return None;
            }
            let voxel = self.voxel_at(axpy(pos, dir, t));
            let mu = xs.mu[self.ph.material[voxel] as usize] * self.ph.density[voxel] as f64;
            if rng.random::<f64>() * xs.majorant < mu {
                return Some((t, voxel));
            }
        }
    }

    /// Transport one photon history.
    pub fn run_history(&self, rng: &mut impl Rng) -> HistoryOutcome {
        let e0 = self.spectrum.sample(rng.random());
        // Emission direction: uniform on the sampling rectangle thinned by the
        // cos³ point-source fluence profile.
        let (u, v) = loop {
            let u = self.u_range.0 + (self.u_range.1 - self.u_range.0) * rng.random::<f64>();
            let v = self.v_range.0 + (self.v_range.1 - self.v_range.0) * rng.random::<f64>();
            if rng.random::<f64>() < obliquity(self.geom, u, v) {
                break (u, v);
            }
        };
        let target = self.geom_detector_point(u, v);
        let mut dir = sub(target, self.src);
        let l = norm(dir);
        dir = [dir[0] / l, dir[1] / l, dir[2] / l];
        let mut pos = self.src;
        let mut kev = e0;
        let mut w = 1.0f64;
        let mut out = HistoryOutcome {
            initial_weight: 1.0,
            initial_energy: e0,
            deposited: 0.0,
            scored: 0.0,
            escaped: 0.0,
            interactions: 0,
            hit: None,
        };
        let mut xs = self.cross_sections(kev);
        loop {
            let Some((t, voxel)) = self.track(pos, dir, &xs, rng) else {
                self.finish_at_detector(pos, dir, kev, w, &mut out);
                return out;
            };
            pos = axpy(pos, dir, t);
            out.interactions += 1;
            let br = xs.branches[self.ph.material[voxel] as usize];
            // implicit capture of the photoelectric branch
            out.deposited += w * br[0];
            w *= 1.0 - br[0];
            if !(w.is_finite() && w >= 0.0) {
                panic!(
                    "photon weight became {w} after {} interactions at {pos:?} ({kev} keV)",
                    out.interactions
                );
            }
            if w < WEIGHT_CUTOFF || out.interactions >= MAX_INTERACTIONS {
                out.deposited += w;
                return out;
            }
            let scatter = br[1] + br[2];
            let compton = scatter <= 0.0 || rng.random::<f64>() * scatter < br[1];
            let cos_theta = if compton {
                let (c, e1) = klein_nishina_sample(kev, rng);
                kev = e1;
                xs = self.cross_sections(kev);
                c
            } else {
                let cone = (self.rayleigh_cone_50kev * 50.0 / kev).min(std::f64::consts::PI);
                let cmin = cone.cos();
                cmin + (1.0 - cmin) * rng.random::<f64>()
            };
            let phi = std::f64::consts::TAU * rng.random::<f64>();
            dir = rotate(dir, cos_theta, phi);
        }
    }

    fn geom_detector_point(&self, u: f64, v: f64) -> [f64; 3] {
        let odd = self.geom.odd();
        [
            -odd * self.s_hat[0] + u * self.e_u[0],
            -odd * self.s_hat[1] + u * self.e_u[1],
            v,
        ]
    }

    fn finish_at_detector(
        &self,
        pos: [f64; 3],
        dir: [f64; 3],
        kev: f64,
        w: f64,
        out: &mut HistoryOutcome,
    ) {
        let toward = dot(dir, self.s_hat);
        if toward < 0.0 {
            let t = (-self.geom.odd() - dot(pos, self.s_hat)) / toward;
            if t > 0.0 {
                let hit = axpy(pos, dir, t);
                let u = dot(hit, self.e_u);
                let v = hit[2];
                if u.abs() <= 0.5 * self.geom.det_width() && v.abs() <= 0.5 * self.geom.det_height()
                {
                    let scattered = out.interactions > 0;
                    out.hit = Some(DetectorHit {
                        u,
                        v,
                        weight: w,
                        energy: kev,
                        scattered,
                    });
                    if scattered {
                        out.scored += w;
                    } else {
                        out.escaped += w;
                    }
                    return;
                }
            }
        }
        out.escaped += w;
    }

    fn coarse_dims(&self, bin: usize) -> (usize, usize) {
        (
            self.geom.det_rows().div_ceil(bin),
            self.geom.det_cols().div_ceil(bin),
        )
    }

    /// Tally scattered weight on the coarse grid. Returns the merged tally
    /// and the total scored weight of each chunk.
    pub fn run_tally(&self, n_photons: u64, seed: u64, bin: usize) -> (Vec<f64>, Vec<f64>) {
        let (cr, cc) = self.coarse_dims(bin);
        let n_chunks = n_photons.div_ceil(CHUNK);
        let du = self.geom.pixel_width();
        let dv = self.geom.pixel_height();
        let rows = self.geom.det_rows();
        let cols = self.geom.det_cols();
        let half_w = 0.5 * self.geom.det_width();
        let half_h = 0.5 * self.geom.det_height();
        let base = ChaCha8Rng::seed_from_u64(seed);
        let chunks: Vec<(Vec<f64>, f64)> = (0..n_chunks)
            .into_par_iter()
            .map(|ci| {
                let mut tally = vec![0.0f64; cr * cc];
                let mut total = 0.0;
                let start = ci * CHUNK;
                let end = (start + CHUNK).min(n_photons);
                for photon in start..end {
                    let mut rng = base.clone();
                    rng.set_stream(photon);
                    let h = self.run_history(&mut rng);
                    if let Some(hit) = h.hit.filter(|h| h.scattered) {
                        let c = (((hit.u + half_w) / du) as usize).min(cols - 1);
                        let r = (((half_h - hit.v) / dv) as usize).min(rows - 1);
                        tally[(r / bin) * cc + c / bin] += hit.weight;
                        total += hit.weight;
                    }
                }
                (tally, total)
            })
            .collect();
        let mut merged = vec![0.0f64; cr * cc];
        let mut totals = Vec::with_capacity(chunks.len());
        for (t, tot) in chunks {
            for (m, v) in merged.iter_mut().zip(&t) {
                *m += v;
            }
            totals.push(tot);
        }
        (merged, totals)
    }

    /// Real photons represented by one simulated photon.
    pub fn photon_scale(&self, fluence: f64, n_photons: u64) -> f64 {
        fluence * self.shadow_weight / n_photons as f64
    }

    /// Turn a coarse tally into an expected-intensity image on the detector.
    pub fn tally_to_image(&self, tally: &[f64], bin: usize, scale: f64) -> Image {
        let (cr, cc) = self.coarse_dims(bin);
        let rows = self.geom.det_rows();
        let cols = self.geom.det_cols();
        let mut coarse = Image::zeros(cr, cc);
        for r in 0..cr {
            let nr = (rows - r * bin).min(bin);
            for c in 0..cc {
                let nc = (cols - c * bin).min(bin);
                let per_pixel = tally[r * cc + c] * scale / (nr * nc) as f64;
                coarse.set(r, c, per_pixel as f32);
            }
        }
        if bin == 1 {
            coarse
        } else {
            upsample_cells(&coarse, bin, rows, cols)
        }
    }
}

/// Monte Carlo scatter image (expected scattered photons per pixel at the
/// configured fluence).
pub fn simulate_scatter_mc(
    ph: &VoxelPhantom,
    table: &MaterialTable,
    geom: &ScanGeometry,
    fov: &FovSpec,
    angle_deg: f64,
    spectrum: &Spectrum,
    cfg: &McConfig,
) -> Result<Projection> {
    if cfg.n_photons == 0 {
        return Err(Error::Config("n_photons must be >= 1".into()));
    }
    if cfg.n_photons > cfg.max_photons {
        return Err(Error::Budget(format!(
            "{} photons requested, budget is {}",
            cfg.n_photons, cfg.max_photons
        )));
    }
    if cfg.bin_down == 0 {
        return Err(Error::Config("bin_down must be >= 1".into()));
    }
    let engine = McEngine::new(ph, table, geom, spectrum, fov, angle_deg)?
        .with_rayleigh_cone(cfg.rayleigh_cone_50kev);
    let (tally, _) = engine.run_tally(cfg.n_photons, cfg.seed, cfg.bin_down);
    let image = engine.tally_to_image(
        &tally,
        cfg.bin_down,
        engine.photon_scale(cfg.fluence, cfg.n_photons),
    );
    let mut meta = ProjMeta::new(ProjKind::Scatter, *fov, angle_deg);
    meta.seed = cfg.seed;
    meta.n_photons = cfg.n_photons;
    Ok(Projection { image, meta })
}

/// Sample a Compton scattering angle and outgoing energy from the
/// Klein–Nishina cross section (Kahn's rejection method). Returns
/// `(cos θ, E')`.
pub fn klein_nishina_sample(kev: f64, rng: &mut impl Rng) -> (f64, f64) {
    let alpha = kev / ELECTRON_REST_KEV;
    let a2 = 1.0 + 2.0 * alpha;
    let threshold = a2 / (9.0 + 2.0 * alpha);
    loop {
        let r1: f64 = rng.random();
        let r2: f64 = rng.random();
        let r3: f64 = rng.random();
        // eta = E / E'
        if r1 <= threshold {
            let eta = 1.0 + 2.0 * alpha * r2;
            if r3 <= 4.0 * (1.0 / eta - 1.0 / (eta * eta)) {
                let cos_t = 1.0 - (eta - 1.0) / alpha;
                return (cos_t.clamp(-1.0, 1.0), kev / eta);
            }
        } else {
            let eta = a2 / (1.0 + 2.0 * alpha * r2);
            let cos_t = 1.0 - (eta - 1.0) / alpha;
            if r3 <= 0.5 * (cos_t * cos_t + 1.0 / eta) {
                return (cos_t.clamp(-1.0, 1.0), kev / eta);
            }
        }
    }
}

/// Rotate unit vector `d` by polar angle `acos(cos_t)` and azimuth `phi`.
fn rotate(d: [f64; 3], cos_t: f64, phi: f64) -> [f64; 3] {
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let (sp, cp) = phi.sin_cos();
    let out = if d[2].abs() > 0.999_99 {
        let s = d[2].signum();
        [sin_t * cp, sin_t * sp, s * cos_t]
    } else {
        let s = (1.0 - d[2] * d[2]).sqrt();
        [
            sin_t * (d[0] * d[2] * cp - d[1] * sp) / s + d[0] * cos_t,
            sin_t * (d[1] * d[2] * cp + d[0] * sp) / s + d[1] * cos_t,
            -sin_t * cp * s + d[2] * cos_t,
        ]
    };
    let n = norm(out);
    [out[0] / n, out[1] / n, out[2] / n]
}
