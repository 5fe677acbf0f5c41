//! Detector image simulation: open-field flats, deterministic primary
//! projections and Monte Carlo scatter.

mod mc;
pub mod store;
pub mod trace;

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{shadow_mask, FovSpec, ScanGeometry, ShadowMask};
use crate::image::Image;
use crate::phantom::{MaterialTable, VoxelPhantom};

pub use mc::{
    klein_nishina_sample, simulate_scatter_mc, DetectorHit, HistoryOutcome, McConfig, McEngine,
};
pub use store::{ProjectionStore, StoreKey, StoreWriter};

/// Discrete source spectrum of `(energy keV, relative fluence)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct Spectrum {
    bins: Vec<(f64, f64)>,
    cdf: Vec<f64>,
}

impl TryFrom<Vec<(f64, f64)>> for Spectrum {
    type Error = Error;
    fn try_from(v: Vec<(f64, f64)>) -> Result<Self> {
        Spectrum::new(v)
    }
}

impl From<Spectrum> for Vec<(f64, f64)> {
    fn from(s: Spectrum) -> Self {
        s.bins
    }
}

impl Spectrum {
    /// Weights are renormalized to sum to one.
    pub fn new(bins: Vec<(f64, f64)>) -> Result<Self> {
        if bins.is_empty() {
            return Err(Error::Config("spectrum needs at least one bin".into()));
        }
        if bins.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::Config("spectrum energies must be strictly ascending".into()));
        }
        if bins.iter().any(|&(e, w)| !(e > 0.0) || !(w >= 0.0)) {
            return Err(Error::Config("spectrum needs positive energies and weights >= 0".into()));
        }
        let total: f64 = bins.iter().map(|b| b.1).sum();
        if !(total > 0.0) {
            return Err(Error::Config("spectrum weights sum to zero".into()));
        }
        let bins: Vec<(f64, f64)> = bins.into_iter().map(|(e, w)| (e, w / total)).collect();
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = bins
            .iter()
            .map(|b| {
                acc += b.1;
                acc
            })
            .collect();
        *cdf.last_mut().unwrap() = 1.0;
        Ok(Spectrum { bins, cdf })
    }

    /// Five-bin approximation of a filtered 90 kVp tube spectrum.
    pub fn default_90kvp() -> Self {
        Self::new(vec![
            (30.0, 0.10),
            (40.0, 0.25),
            (50.0, 0.30),
            (60.0, 0.22),
            (75.0, 0.13),
        ])
        .expect("valid preset")
    }

    pub fn mono(kev: f64) -> Self {
        Self::new(vec![(kev, 1.0)]).expect("positive energy")
    }

    pub fn bins(&self) -> &[(f64, f64)] {
        &self.bins
    }

    pub fn mean_energy(&self) -> f64 {
        self.bins.iter().map(|(e, w)| e * w).sum()
    }

    /// Energy for a uniform deviate `u` in [0, 1).
    pub fn sample(&self, u: f64) -> f64 {
        let i = self.cdf.partition_point(|&c| c <= u).min(self.bins.len() - 1);
        self.bins[i].0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjKind {
    Flat,
    Primary,
    Scatter,
    /// Linearized network input (dataset sample).
    Input,
    /// Flat-normalized scatter target (dataset sample).
    Target,
}

impl ProjKind {
    fn code(self) -> u32 {
        match self {
            ProjKind::Flat => 0,
            ProjKind::Primary => 1,
            ProjKind::Scatter => 2,
            ProjKind::Input => 3,
            ProjKind::Target => 4,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        Some(match c {
            0 => ProjKind::Flat,
            1 => ProjKind::Primary,
            2 => ProjKind::Scatter,
            3 => ProjKind::Input,
            4 => ProjKind::Target,
            _ => return None,
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ProjKind::Flat => "flat",
            ProjKind::Primary => "primary",
            ProjKind::Scatter => "scatter",
            ProjKind::Input => "input",
            ProjKind::Target => "target",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjMeta {
    pub kind: ProjKind,
    pub fov: FovSpec,
    pub angle_deg: f64,
    pub seed: u64,
    /// Number of averaged realizations.
    pub k: u32,
    /// Photons per realization (scatter only).
    pub n_photons: u64,
    pub phantom: u32,
}

impl ProjMeta {
    pub fn new(kind: ProjKind, fov: FovSpec, angle_deg: f64) -> Self {
        ProjMeta {
            kind,
            fov,
            angle_deg,
            seed: 0,
            k: 1,
            n_photons: 0,
            phantom: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub image: Image,
    pub meta: ProjMeta,
}

pub const PROJ_MAGIC: &[u8; 8] = b"AUXSPRJ1";
pub const PROJ_HEADER_LEN: usize = 64;

impl Projection {
    pub fn rows(&self) -> usize {
        self.image.rows
    }

    pub fn cols(&self) -> usize {
        self.image.cols
    }

    pub fn byte_len(&self) -> usize {
        PROJ_HEADER_LEN + 4 * self.image.data.len()
    }

    /// Fixed 64-byte little-endian header followed by `rows·cols` f32 values.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let m = &self.meta;
        let mut h = [0u8; PROJ_HEADER_LEN];
        h[0..8].copy_from_slice(PROJ_MAGIC);
        h[8..12].copy_from_slice(&(self.image.rows as u32).to_le_bytes());
        h[12..16].copy_from_slice(&(self.image.cols as u32).to_le_bytes());
        h[16..20].copy_from_slice(&m.kind.code().to_le_bytes());
        h[20..24].copy_from_slice(&m.k.to_le_bytes());
        h[24..28].copy_from_slice(&m.phantom.to_le_bytes());
        h[28..32].copy_from_slice(&(m.fov.diameter as f32).to_le_bytes());
        h[32..36].copy_from_slice(&(m.fov.height as f32).to_le_bytes());
        h[40..48].copy_from_slice(&m.angle_deg.to_le_bytes());
        h[48..56].copy_from_slice(&m.seed.to_le_bytes());
        h[56..64].copy_from_slice(&m.n_photons.to_le_bytes());
        w.write_all(&h)?;
        let mut body = Vec::with_capacity(4 * self.image.data.len());
        for v in &self.image.data {
            body.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&body)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(r: &mut impl Read) -> std::io::Result<Self> {
        use std::io::{Error as IoError, ErrorKind};
        let bad = |msg: &str| IoError::new(ErrorKind::InvalidData, msg.to_string());
        let mut h = [0u8; PROJ_HEADER_LEN];
        r.read_exact(&mut h)?;
        if &h[0..8] != PROJ_MAGIC {
            return Err(bad("bad projection magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(h[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(h[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(h[o..o + 8].try_into().unwrap());
        let rows = u32_at(8) as usize;
        let cols = u32_at(12) as usize;
        let kind = ProjKind::from_code(u32_at(16)).ok_or_else(|| bad("unknown projection kind"))?;
        let fov = FovSpec::new(f32_at(28) as f64, f32_at(32) as f64)
            .map_err(|e| bad(&e.to_string()))?;
        let meta = ProjMeta {
            kind,
            fov,
            angle_deg: f64::from_le_bytes(h[40..48].try_into().unwrap()),
            seed: u64_at(48),
            k: u32_at(20),
            n_photons: u64_at(56),
            phantom: u32_at(24),
        };
        let mut body = vec![0u8; 4 * rows * cols];
        r.read_exact(&mut body)?;
        let data = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Projection {
            image: Image { rows, cols, data },
            meta,
        })
    }
}

/// cos³ of the angle between the central ray and detector point `(u, v)`:
/// inverse-square times obliquity for a point source.
#[inline]
pub fn obliquity(geom: &ScanGeometry, u: f64, v: f64) -> f64 {
    let sdd = geom.sdd();
    let c = sdd / (sdd * sdd + u * u + v * v).sqrt();
    c * c * c
}

/// Expected open-field photon count per pixel; zero outside the collimation
/// shadow. `fluence` is the count at the central ray.
pub fn simulate_flat(geom: &ScanGeometry, fov: &FovSpec, fluence: f64) -> Result<Projection> {
    let mask = shadow_mask(fov, geom)?;
    let mut img = Image::zeros(geom.det_rows(), geom.det_cols());
    for r in mask.row_range.0..mask.row_range.1 {
        let v = geom.v_of_row(r);
        for c in mask.col_range.0..mask.col_range.1 {
            let u = geom.u_of_col(c);
            img.set(r, c, (fluence * obliquity(geom, u, v)) as f32);
        }
    }
    Ok(Projection {
        image: img,
        meta: ProjMeta::new(ProjKind::Flat, *fov, 0.0),
    })
}

/// Density-weighted path length per material along one source→pixel ray.
fn material_lengths(
    ph: &VoxelPhantom,
    n_mat: usize,
    src: [f64; 3],
    dst: [f64; 3],
    acc: &mut [f64],
) {
    acc[..n_mat].iter_mut().for_each(|v| *v = 0.0);
    trace::traverse(ph, src, dst, |i, len| {
        acc[ph.material[i] as usize] += ph.density[i] as f64 * len;
    });
}

/// Noise-free primary (unscattered) projection by exact ray integration:
/// `flat · Σ_E w(E)·exp(-∫µ(E) dl)`.
pub fn simulate_primary(
    ph: &VoxelPhantom,
    table: &MaterialTable,
    geom: &ScanGeometry,
    fov: &FovSpec,
    angle_deg: f64,
    spectrum: &Spectrum,
    fluence: f64,
) -> Result<Projection> {
    ph.validate(table)?;
    let flat = simulate_flat(geom, fov, fluence)?;
    let mask = shadow_mask(fov, geom)?;
    let src = geom.source_position(angle_deg);
    let n_mat = table.len();
    // µ per (energy bin, material)
    let mus: Vec<Vec<f64>> = spectrum.bins().iter().map(|&(e, _)| table.mu_all(e)).collect();
    let cols = geom.det_cols();
    let mut img = Image::zeros(geom.det_rows(), cols);
    img.data
        .par_chunks_mut(cols)
        .enumerate()
        .filter(|(r, _)| *r >= mask.row_range.0 && *r < mask.row_range.1)
        .for_each(|(r, row)| {
            let v = geom.v_of_row(r);
            let mut acc = vec![0.0; n_mat];
            for (c, out) in row
                .iter_mut()
                .enumerate()
                .take(mask.col_range.1)
                .skip(mask.col_range.0)
            {
                let dst = geom.detector_point(angle_deg, geom.u_of_col(c), v);
                material_lengths(ph, n_mat, src, dst, &mut acc);
                let t: f64 = spectrum
                    .bins()
                    .iter()
                    .zip(&mus)
                    .map(|(&(_, w), mu)| {
                        let line: f64 = mu.iter().zip(&acc).map(|(m, l)| m * l).sum();
                        w * (-line).exp()
                    })
                    .sum();
                *out = (flat.image.get(r, c) as f64 * t) as f32;
            }
        });
    let mut meta = ProjMeta::new(ProjKind::Primary, *fov, angle_deg);
    meta.k = 1;
    Ok(Projection { image: img, meta })
}

/// Pixel-wise mean of the first `k` realizations.
pub fn average_realizations(projs: &[Projection], k: usize) -> Result<Projection> {
    if k == 0 || k > projs.len() {
        return Err(Error::Config(format!(
            "cannot average {k} of {} realizations",
            projs.len()
        )));
    }
    let first = &projs[0];
    for p in &projs[1..k] {
        let m = &p.meta;
        let f = &first.meta;
        if !p.image.same_shape(&first.image)
            || m.kind != f.kind
            || m.fov.key() != f.fov.key()
            || m.angle_deg != f.angle_deg
            || m.n_photons != f.n_photons
            || m.phantom != f.phantom
        {
            return Err(Error::Metadata(format!(
                "realization seed {} does not match seed {} ({:?} vs {:?})",
                m.seed, f.seed, m, f
            )));
        }
    }
    let n = first.image.data.len();
    let mut acc = vec![0.0f64; n];
    for p in &projs[..k] {
        for (a, &v) in acc.iter_mut().zip(&p.image.data) {
            *a += v as f64;
        }
    }
    let inv = 1.0 / k as f64;
    let mut out = first.clone();
    out.image.data = acc.iter().map(|&a| (a * inv) as f32).collect();
    out.meta.k = k as u32;
    Ok(out)
}

/// Boolean in-shadow mask for a projection's FOV on `geom`'s detector.
pub fn projection_mask(geom: &ScanGeometry, fov: &FovSpec) -> Result<ShadowMask> {
    shadow_mask(fov, geom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{VoxelPhantom, SOFT_TISSUE};

    fn odd_geom() -> ScanGeometry {
        ScanGeometry::new(700.0, 490.0, 250.0, 300.0, 51, 61).unwrap()
    }

    #[test]
    fn spectrum_invariants() {
        let s = Spectrum::default_90kvp();
        let total: f64 = s.bins().iter().map(|b| b.1).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert_eq!(s.sample(0.0), 30.0);
        assert_eq!(s.sample(0.999_999), 75.0);
        assert!(Spectrum::new(vec![(50.0, 1.0), (40.0, 1.0)]).is_err());
        assert!(Spectrum::new(vec![(50.0, -1.0)]).is_err());
    }

    #[test]
    fn flat_falloff_and_collimation() {
        let g = odd_geom();
        let fov = FovSpec::new(150.0, 100.0).unwrap();
        let f = simulate_flat(&g, &fov, 1000.0).unwrap();
        let m = shadow_mask(&fov, &g).unwrap();
        let (rc, cc) = (30, 25);
        let center = f.image.get(rc, cc);
        assert!((center - 1000.0).abs() < 1e-3);
        let corner = f.image.get(m.row_range.0, m.col_range.0);
        assert!(corner > 0.0 && corner < center);
        assert_eq!(f.image.get(0, 0), 0.0);
        let f2 = simulate_flat(&g, &fov, 2000.0).unwrap();
        for (a, b) in f.image.data.iter().zip(&f2.image.data) {
            assert!((2.0 * a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn empty_phantom_primary_is_flat() {
        let g = ScanGeometry::desk();
        let fov = FovSpec::new(150.0, 100.0).unwrap();
        let ph = VoxelPhantom::empty([20, 20, 20], 5.0);
        let t = MaterialTable::builtin();
        let p = simulate_primary(&ph, &t, &g, &fov, 33.0, &Spectrum::default_90kvp(), 500.0)
            .unwrap();
        let f = simulate_flat(&g, &fov, 500.0).unwrap();
        assert_eq!(p.image, f.image);
    }

    fn slab(thickness_vox: usize, vs: f64) -> VoxelPhantom {
        // slab perpendicular to x, centered, thickness along x
        let mut ph = VoxelPhantom::empty([thickness_vox, 20, 20], vs);
        ph.material.iter_mut().for_each(|m| *m = SOFT_TISSUE);
        ph
    }

    #[test]
    fn beer_lambert_on_water_block() {
        let g = odd_geom();
        let fov = FovSpec::new(150.0, 150.0).unwrap();
        let t = MaterialTable::builtin();
        let spec = Spectrum::mono(60.0);
        let ph = slab(10, 4.0); // 40 mm of water
        let p = simulate_primary(&ph, &t, &g, &fov, 0.0, &spec, 1000.0).unwrap();
        let expect = 1000.0 * (-t.mu(SOFT_TISSUE, 60.0) * 40.0).exp();
        let got = p.image.get(30, 25) as f64;
        assert!((got / expect - 1.0).abs() < 0.005, "{got} vs {expect}");
    }

    #[test]
    fn doubling_slab_squares_transmission() {
        let g = odd_geom();
        let fov = FovSpec::new(150.0, 150.0).unwrap();
        let t = MaterialTable::builtin();
        let spec = Spectrum::mono(60.0);
        let i1 = simulate_primary(&slab(10, 4.0), &t, &g, &fov, 0.0, &spec, 1000.0).unwrap();
        let i2 = simulate_primary(&slab(20, 4.0), &t, &g, &fov, 0.0, &spec, 1000.0).unwrap();
        let a = i1.image.get(30, 25) as f64;
        let b = i2.image.get(30, 25) as f64;
        assert!((b / (a * a / 1000.0) - 1.0).abs() < 0.005);
    }

    #[test]
    fn projection_round_trip() {
        let g = ScanGeometry::desk();
        let fov = FovSpec::new(130.0, 40.0).unwrap();
        let mut p = simulate_flat(&g, &fov, 10.0).unwrap();
        p.meta.seed = 0xdead_beef;
        p.meta.k = 3;
        p.meta.n_photons = 100_000;
        p.meta.angle_deg = 17.5;
        p.meta.phantom = 2;
        let bytes = p.to_bytes();
        assert_eq!(bytes.len(), 64 + 4 * 120 * 100);
        let q = Projection::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(p, q);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Projection::read_from(&mut bad.as_slice()).is_err());
    }

    #[test]
    fn averaging() {
        let g = ScanGeometry::desk();
        let fov = FovSpec::new(130.0, 40.0).unwrap();
        let mut a = simulate_flat(&g, &fov, 1.0).unwrap();
        a.meta.kind = ProjKind::Scatter;
        let mut b = a.clone();
        b.meta.seed = 9;
        b.image.scale(3.0);
        let one = average_realizations(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(one.image, a.image);
        let two = average_realizations(&[a.clone(), b.clone()], 2).unwrap();
        assert_eq!(two.meta.k, 2);
        assert!((two.image.get(60, 50) - 2.0 * a.image.get(60, 50)).abs() < 1e-6);
        let same: Vec<_> = (0..10).map(|_| a.clone()).collect();
        assert_eq!(average_realizations(&same, 10).unwrap().image, a.image);
        let mut c = b.clone();
        c.meta.angle_deg = 1.0;
        assert!(average_realizations(&[a.clone(), c], 2).is_err());
        assert!(average_realizations(&[a], 2).is_err());
    }
}
