//! Voxel phantoms and the coarse material attenuation table used by both the
//! deterministic projector and the Monte Carlo transport.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Energy nodes (keV) of the attenuation table.
pub const ENERGY_BINS_KEV: [f64; 5] = [30.0, 50.0, 70.0, 90.0, 110.0];

pub const AIR: u8 = 0;
pub const SOFT_TISSUE: u8 = 1;
pub const BONE: u8 = 2;
pub const METAL: u8 = 3;

/// Interaction branch order used throughout: photoelectric, Compton, Rayleigh.
pub type Branches = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub name: String,
    /// Nominal mass density, g/cm³.
    pub density: f64,
    /// Linear attenuation (1/mm) at each energy node.
    pub mu: [f64; 5],
    /// Branch probabilities at each energy node.
    pub branches: [Branches; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialTable {
    materials: Vec<Material>,
}

impl MaterialTable {
    /// Air (treated as vacuum), water-equivalent soft tissue, cortical bone
    /// and a titanium-like metal. Mass coefficients are rounded from standard
    /// photon cross-section tables.
    pub fn builtin() -> Self {
        // (photoelectric, Compton, Rayleigh) mass coefficients in cm²/g.
        let water = [
            [0.1620, 0.1800, 0.0336],
            [0.0307, 0.1820, 0.0142],
            [0.0105, 0.1765, 0.0078],
            [0.0050, 0.1690, 0.0050],
            [0.0028, 0.1620, 0.0035],
        ];
        let bone = [
            [1.0800, 0.1650, 0.0860],
            [0.2120, 0.1720, 0.0400],
            [0.0720, 0.1670, 0.0220],
            [0.0330, 0.1610, 0.0140],
            [0.0180, 0.1540, 0.0100],
        ];
        let titanium = [
            [4.5900, 0.1350, 0.2470],
            [0.9550, 0.1400, 0.1180],
            [0.3500, 0.1390, 0.0680],
            [0.1600, 0.1350, 0.0440],
            [0.0850, 0.1300, 0.0310],
        ];
        let air = Material {
            name: "air".into(),
            density: 0.0012,
            mu: [0.0; 5],
            branches: [[0.0, 1.0, 0.0]; 5],
        };
        MaterialTable {
            materials: vec![
                air,
                Self::from_mass("soft_tissue", 1.0, &water),
                Self::from_mass("bone", 1.92, &bone),
                Self::from_mass("metal", 4.5, &titanium),
            ],
        }
    }

    fn from_mass(name: &str, density: f64, coeffs: &[[f64; 3]; 5]) -> Material {
        let mut mu = [0.0; 5];
        let mut branches = [[0.0; 3]; 5];
        for (i, c) in coeffs.iter().enumerate() {
            let total: f64 = c.iter().sum();
            // cm²/g · g/cm³ = 1/cm; /10 for 1/mm
            mu[i] = total * density / 10.0;
            branches[i] = [c[0] / total, c[1] / total, c[2] / total];
        }
        Material {
            name: name.into(),
            density,
            mu,
            branches,
        }
    }

    pub fn len(&self) -> usize {
        self.materials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.materials.is_empty()
    }

    pub fn material(&self, id: u8) -> Option<&Material> {
        self.materials.get(id as usize)
    }

    pub fn materials(&self) -> &[Material] {
        &self.materials
    }

    /// Linear attenuation (1/mm) of material `id` at `kev`; linear in energy
    /// between nodes, clamped outside the tabulated range.
    pub fn mu(&self, id: u8, kev: f64) -> f64 {
        let m = &self.materials[id as usize];
        let (i, t) = energy_lerp(kev);
        m.mu[i] * (1.0 - t) + m.mu[(i + 1).min(4)] * t
    }

    pub fn branches(&self, id: u8, kev: f64) -> Branches {
        let m = &self.materials[id as usize];
        let (i, t) = energy_lerp(kev);
        let a = m.branches[i];
        let b = m.branches[(i + 1).min(4)];
        [
            a[0] * (1.0 - t) + b[0] * t,
            a[1] * (1.0 - t) + b[1] * t,
            a[2] * (1.0 - t) + b[2] * t,
        ]
    }

    /// µ of every material at one energy, indexed by material id.
    pub fn mu_all(&self, kev: f64) -> Vec<f64> {
        (0..self.materials.len() as u8).map(|id| self.mu(id, kev)).collect()
    }
}

fn energy_lerp(kev: f64) -> (usize, f64) {
    let e = kev.clamp(ENERGY_BINS_KEV[0], ENERGY_BINS_KEV[4]);
    let i = ENERGY_BINS_KEV
        .windows(2)
        .position(|w| e <= w[1])
        .unwrap_or(3);
    let t = (e - ENERGY_BINS_KEV[i]) / (ENERGY_BINS_KEV[i + 1] - ENERGY_BINS_KEV[i]);
    (i, t)
}

/// Material-id and density-scale grid, x fastest, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelPhantom {
    pub dims: [usize; 3],
    /// Isotropic voxel edge, mm.
    pub voxel_size: f64,
    /// World position of the outer corner of voxel (0, 0, 0), mm.
    pub origin: [f64; 3],
    pub material: Vec<u8>,
    pub density: Vec<f32>,
}

impl VoxelPhantom {
    /// All-air phantom centered on the isocenter.
    pub fn empty(dims: [usize; 3], voxel_size: f64) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        VoxelPhantom {
            dims,
            voxel_size,
            origin: centered_origin(dims, voxel_size),
            material: vec![AIR; n],
            density: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.material.len()
    }

    pub fn is_empty(&self) -> bool {
        self.material.is_empty()
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.dims[0] * (iy + self.dims[1] * iz)
    }

    /// World position of the center of voxel `(ix, iy, iz)`.
    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        [
            self.origin[0] + (ix as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (iy as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (iz as f64 + 0.5) * self.voxel_size,
        ]
    }

    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let hi = [
            self.origin[0] + self.dims[0] as f64 * self.voxel_size,
            self.origin[1] + self.dims[1] as f64 * self.voxel_size,
            self.origin[2] + self.dims[2] as f64 * self.voxel_size,
        ];
        (self.origin, hi)
    }

    /// Fill every voxel whose center satisfies `pred` with `(material, density)`.
    pub fn paint(&mut self, material: u8, density: f32, pred: impl Fn([f64; 3]) -> bool) {
        for iz in 0..self.dims[2] {
            for iy in 0..self.dims[1] {
                for ix in 0..self.dims[0] {
                    if pred(self.voxel_center(ix, iy, iz)) {
                        let i = self.index(ix, iy, iz);
                        self.material[i] = material;
                        self.density[i] = density;
                    }
                }
            }
        }
    }

    pub fn validate(&self, table: &MaterialTable) -> Result<()> {
        let n = self.dims[0] * self.dims[1] * self.dims[2];
        if self.material.len() != n || self.density.len() != n {
            return Err(Error::Shape(format!(
                "phantom dims {:?} but {} material / {} density entries",
                self.dims,
                self.material.len(),
                self.density.len()
            )));
        }
        if !(self.voxel_size > 0.0) {
            return Err(Error::Config("voxel size must be positive".into()));
        }
        if let Some(&bad) = self.material.iter().find(|&&m| m as usize >= table.len()) {
            return Err(Error::Config(format!("unknown material id {bad}")));
        }
        if self.density.iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
            return Err(Error::Config("density scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Largest density scale present for each material id.
    pub fn max_density_per_material(&self, n_materials: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; n_materials];
        for (&m, &d) in self.material.iter().zip(&self.density) {
            let slot = &mut out[m as usize];
            if d > *slot {
                *slot = d;
            }
        }
        out
    }

    pub fn material_fraction(&self, id: u8) -> f64 {
        self.material.iter().filter(|&&m| m == id).count() as f64 / self.len() as f64
    }
}

fn centered_origin(dims: [usize; 3], voxel: f64) -> [f64; 3] {
    [
        -0.5 * dims[0] as f64 * voxel,
        -0.5 * dims[1] as f64 * voxel,
        -0.5 * dims[2] as f64 * voxel,
    ]
}

/// Size and complexity knobs of the procedural head phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadParams {
    pub voxel_size: f64,
    /// Grid extent (mm) along x, y, z; rounded up to whole voxels.
    pub extent: [f64; 3],
    /// Nominal body semi-axes (mm) before per-seed jitter.
    pub semi_axes: [f64; 3],
    /// Relative jitter applied to each semi-axis, in [0, 0.2].
    pub jitter: f64,
    pub skull_thickness: f64,
    /// Number of air cavities, at most 8.
    pub cavities: usize,
    pub metal_insert: bool,
    pub insert_radius: f64,
    pub max_voxels: usize,
}

impl Default for HeadParams {
    fn default() -> Self {
        HeadParams {
            voxel_size: 4.0,
            extent: [200.0, 220.0, 240.0],
            semi_axes: [75.0, 90.0, 110.0],
            jitter: 0.08,
            skull_thickness: 7.0,
            cavities: 3,
            metal_insert: false,
            insert_radius: 4.0,
            max_voxels: 64 << 20,
        }
    }
}

impl HeadParams {
    fn validate(&self) -> Result<[usize; 3]> {
        if !(self.voxel_size > 0.0) {
            return Err(Error::Config("voxel_size must be positive".into()));
        }
        if !(0.0..=0.2).contains(&self.jitter) {
            return Err(Error::Config(format!("jitter {} outside [0, 0.2]", self.jitter)));
        }
        if self.cavities > 8 {
            return Err(Error::Config(format!("at most 8 cavities, got {}", self.cavities)));
        }
        if self.semi_axes.iter().any(|&a| !(a > 0.0)) || self.extent.iter().any(|&a| !(a > 0.0))
        {
            return Err(Error::Config("semi-axes and extent must be positive".into()));
        }
        let dims = [
            (self.extent[0] / self.voxel_size).ceil() as usize,
            (self.extent[1] / self.voxel_size).ceil() as usize,
            (self.extent[2] / self.voxel_size).ceil() as usize,
        ];
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .unwrap_or(usize::MAX);
        if n > self.max_voxels {
            return Err(Error::Budget(format!(
                "phantom of {dims:?} = {n} voxels exceeds budget {}",
                self.max_voxels
            )));
        }
        Ok(dims)
    }
}

fn quantize_density(d: f64) -> f32 {
    // Densities live on a 1e-4 grid so the 16-bit export is lossless.
    let k = (d * 1e4).round().clamp(0.0, i16::MAX as f64) as i16;
    k as f32 / 1e4
}

fn in_ellipsoid(p: [f64; 3], c: [f64; 3], a: [f64; 3]) -> bool {
    let dx = (p[0] - c[0]) / a[0];
    let dy = (p[1] - c[1]) / a[1];
    let dz = (p[2] - c[2]) / a[2];
    dx * dx + dy * dy + dz * dz <= 1.0
}

/// Procedural head: soft-tissue body, skull shell, mandible arch, cervical
/// spine, air cavities and an optional metal rod. Pure function of
/// `(seed, params)`.
pub fn synth_head_phantom(seed: u64, params: &HeadParams) -> Result<VoxelPhantom> {
    let dims = params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jit = |a: f64| a * (1.0 + params.jitter * (2.0 * rng.random::<f64>() - 1.0));
    let body = [
        jit(params.semi_axes[0]),
        jit(params.semi_axes[1]),
        jit(params.semi_axes[2]),
    ];
    let mut ph = VoxelPhantom::empty(dims, params.voxel_size);
    let o = [0.0, 0.0, 0.0];

    let tissue = quantize_density(1.0 + 0.04 * (rng.random::<f64>() - 0.5));
    ph.paint(SOFT_TISSUE, tissue, |p| in_ellipsoid(p, o, body));

    // Cranium: upper part of the body gets a bone shell with a brain inside.
    let t = params.skull_thickness;
    let outer = [body[0] - 3.0, body[1] - 3.0, body[2] - 3.0];
    let inner = [outer[0] - t, outer[1] - t, outer[2] - t];
    let cranium_floor = -0.15 * body[2];
    let bone_d = quantize_density(1.0 + 0.06 * (rng.random::<f64>() - 0.5));
    ph.paint(BONE, bone_d, |p| {
        p[2] > cranium_floor && in_ellipsoid(p, o, outer) && !in_ellipsoid(p, o, inner)
    });
    let brain = quantize_density(1.04);
    ph.paint(SOFT_TISSUE, brain, |p| p[2] > cranium_floor && in_ellipsoid(p, o, inner));

    // Mandible: a bony arch in the anterior lower head.
    let z_lo = -0.62 * body[2];
    let z_hi = -0.35 * body[2];
    let r_out = 0.78;
    let r_in = 0.66;
    ph.paint(BONE, bone_d, move |p| {
        if p[2] < z_lo || p[2] > z_hi || p[1] < -0.1 * body[1] {
            return false;
        }
        let q = (p[0] / body[0]).powi(2) + (p[1] / body[1]).powi(2);
        q <= r_out * r_out && q >= r_in * r_in
    });

    // Cervical spine: posterior bony column.
    let spine_c = [0.0, -0.55 * body[1]];
    let spine_r = 0.14 * body[0];
    ph.paint(BONE, bone_d, move |p| {
        p[2] < cranium_floor
            && (p[0] - spine_c[0]).powi(2) + (p[1] - spine_c[1]).powi(2) <= spine_r * spine_r
    });

    // Air cavities (sinuses, oral cavity) in the anterior half.
    for _ in 0..params.cavities {
        let c = [
            (rng.random::<f64>() - 0.5) * 0.6 * body[0],
            (0.2 + 0.4 * rng.random::<f64>()) * body[1],
            (-0.5 + 0.6 * rng.random::<f64>()) * body[2],
        ];
        let a = [
            8.0 + 10.0 * rng.random::<f64>(),
            8.0 + 10.0 * rng.random::<f64>(),
            6.0 + 10.0 * rng.random::<f64>(),
        ];
        ph.paint(AIR, 1.0, |p| in_ellipsoid(p, c, a));
    }

    if params.metal_insert {
        let ang = rng.random::<f64>() * std::f64::consts::TAU;
        let rr = 0.45 * body[0];
        let c = [rr * ang.cos(), rr * ang.sin()];
        let r = params.insert_radius;
        let zr = 0.3 * body[2];
        ph.paint(METAL, 1.0, move |p| {
            (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) <= r * r && p[2].abs() <= zr
        });
    }
    Ok(ph)
}

/// Homogeneous cylinder along `z`, optionally with a metal rod parallel to
/// the axis. Used by reconstruction checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CylinderSpec {
    pub radius: f64,
    pub height: f64,
    pub material: u8,
    /// `(x, y, radius)` of an optional metal rod, mm.
    pub insert: Option<(f64, f64, f64)>,
}

impl CylinderSpec {
    pub fn water(radius: f64, height: f64) -> Self {
        CylinderSpec {
            radius,
            height,
            material: SOFT_TISSUE,
            insert: None,
        }
    }
}

pub fn cylinder_phantom(spec: &CylinderSpec, voxel_size: f64) -> VoxelPhantom {
    let margin = 2.0 * voxel_size;
    let nxy = ((2.0 * spec.radius + margin) / voxel_size).ceil() as usize;
    let nz = ((spec.height + margin) / voxel_size).ceil() as usize;
    let mut ph = VoxelPhantom::empty([nxy, nxy, nz], voxel_size);
    let (r, h) = (spec.radius, spec.height);
    ph.paint(spec.material, 1.0, |p| {
        p[0] * p[0] + p[1] * p[1] <= r * r && p[2].abs() <= 0.5 * h
    });
    if let Some((x, y, rr)) = spec.insert {
        ph.paint(METAL, 1.0, |p| {
            (p[0] - x).powi(2) + (p[1] - y).powi(2) <= rr * rr && p[2].abs() <= 0.5 * h
        });
    }
    ph
}

/// How the 16-bit values of a raw volume are interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSemantics {
    /// One plane of Hounsfield units, segmented by fixed thresholds.
    Hu,
    /// One plane of material ids, density scale 1.
    Material,
    /// Two planes: material ids, then density scale in units of 1e-4.
    MaterialDensity,
}

impl ValueSemantics {
    fn planes(&self) -> usize {
        match self {
            ValueSemantics::MaterialDensity => 2,
            _ => 1,
        }
    }
}

/// Sidecar metadata for a raw little-endian `i16` volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    #[serde(default)]
    pub origin: Option<[f64; 3]>,
    pub semantics: ValueSemantics,
}

pub fn sidecar_path(raw: &Path) -> PathBuf {
    let mut s = raw.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// HU segmentation: air < -800 <= soft tissue < 300 <= bone < 2000 <= metal.
pub fn hu_to_material(hu: f64) -> u8 {
    if hu < -800.0 {
        AIR
    } else if hu < 300.0 {
        SOFT_TISSUE
    } else if hu < 2000.0 {
        BONE
    } else {
        METAL
    }
}

/// Density scale reproducing the HU value's attenuation at 70 keV relative to
/// the nominal material.
fn hu_density(hu: f64, id: u8, table: &MaterialTable) -> f32 {
    if id == AIR {
        return 1.0;
    }
    let ref_kev = 70.0;
    let mu_w = table.mu(SOFT_TISSUE, ref_kev);
    let mu_m = table.mu(id, ref_kev);
    quantize_density(((1.0 + hu / 1000.0) * mu_w / mu_m).max(0.0))
}

pub fn export_volume(ph: &VoxelPhantom, raw: &Path) -> Result<()> {
    let n = ph.len();
    let mut bytes = Vec::with_capacity(4 * n);
    for &m in &ph.material {
        bytes.extend_from_slice(&(m as i16).to_le_bytes());
    }
    for &d in &ph.density {
        let k = (d as f64 * 1e4).round().clamp(0.0, i16::MAX as f64) as i16;
        bytes.extend_from_slice(&k.to_le_bytes());
    }
    fs::write(raw, bytes).map_err(|e| Error::io(raw, e))?;
    let meta = VolumeMeta {
        dims: ph.dims,
        voxel_size: ph.voxel_size,
        origin: Some(ph.origin),
        semantics: ValueSemantics::MaterialDensity,
    };
    let side = sidecar_path(raw);
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn read_sidecar(raw: &Path) -> Result<VolumeMeta> {
    let side = sidecar_path(raw);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))
}

pub fn import_volume(raw: &Path, meta: &VolumeMeta, table: &MaterialTable) -> Result<VoxelPhantom> {
    let bytes = fs::read(raw).map_err(|e| Error::io(raw, e))?;
    let n = meta.dims[0] * meta.dims[1] * meta.dims[2];
    let expected = n * 2 * meta.semantics.planes();
    if bytes.len() != expected {
        return Err(Error::format(
            raw,
            format!("size mismatch: {} bytes, expected {expected}", bytes.len()),
        ));
    }
    let values: Vec<i16> = bytes
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]))
        .collect();
    let (material, density) = match meta.semantics {
        ValueSemantics::Hu => {
            let mat: Vec<u8> = values.iter().map(|&v| hu_to_material(v as f64)).collect();
            let den = values
                .iter()
                .zip(&mat)
                .map(|(&v, &m)| hu_density(v as f64, m, table))
                .collect();
            (mat, den)
        }
        ValueSemantics::Material | ValueSemantics::MaterialDensity => {
            let mut mat = Vec::with_capacity(n);
            for &v in &values[..n] {
                if v < 0 || v as usize >= table.len() {
                    return Err(Error::format(raw, format!("unknown material id {v}")));
                }
                mat.push(v as u8);
            }
            let den = if meta.semantics == ValueSemantics::MaterialDensity {
                values[n..].iter().map(|&k| k.max(0) as f32 / 1e4).collect()
            } else {
                vec![1.0; n]
            };
            (mat, den)
        }
    };
    let ph = VoxelPhantom {
        dims: meta.dims,
        voxel_size: meta.voxel_size,
        origin: meta
            .origin
            .unwrap_or_else(|| centered_origin(meta.dims, meta.voxel_size)),
        material,
        density,
    };
    ph.validate(table)?;
    Ok(ph)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_invariants() {
        let t = MaterialTable::builtin();
        for m in t.materials() {
            for b in &m.branches {
                assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(b.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
            assert!(m.mu.iter().all(|&v| v >= 0.0));
            assert!(m.mu.windows(2).all(|w| w[1] <= w[0]), "{} not decreasing", m.name);
        }
        // interpolated energies keep the ordering too
        for id in 0..t.len() as u8 {
            let mut prev = f64::INFINITY;
            for e in 20..=120 {
                let mu = t.mu(id, e as f64);
                assert!(mu <= prev);
                prev = mu;
            }
        }
        assert!((t.mu(SOFT_TISSUE, 50.0) - 0.02269).abs() < 1e-6);
    }

    #[test]
    fn interpolation_between_nodes() {
        let t = MaterialTable::builtin();
        let mid = t.mu(BONE, 40.0);
        let expect = 0.5 * (t.mu(BONE, 30.0) + t.mu(BONE, 50.0));
        assert!((mid - expect).abs() < 1e-12);
        let b = t.branches(METAL, 60.0);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn head_is_deterministic() {
        let p = HeadParams::default();
        let a = synth_head_phantom(7, &p).unwrap();
        let b = synth_head_phantom(7, &p).unwrap();
        assert_eq!(a, b);
        let c = synth_head_phantom(8, &p).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn no_metal_without_insert() {
        let ph = synth_head_phantom(3, &HeadParams::default()).unwrap();
        assert!(!ph.material.contains(&METAL));
        let with = HeadParams {
            metal_insert: true,
            ..HeadParams::default()
        };
        let ph = synth_head_phantom(3, &with).unwrap();
        assert!(ph.material.contains(&METAL));
    }

    #[test]
    fn head_rejects_memory_budget() {
        let p = HeadParams {
            voxel_size: 0.5,
            max_voxels: 1 << 20,
            ..HeadParams::default()
        };
        assert!(matches!(synth_head_phantom(1, &p), Err(Error::Budget(_))));
    }

    #[test]
    fn head_contains_all_tissues() {
        let ph = synth_head_phantom(1, &HeadParams::default()).unwrap();
        ph.validate(&MaterialTable::builtin()).unwrap();
        for id in [AIR, SOFT_TISSUE, BONE] {
            assert!(ph.material_fraction(id) > 0.0);
        }
    }

    #[test]
    fn hu_thresholds() {
        assert_eq!(hu_to_material(-1000.0), AIR);
        assert_eq!(hu_to_material(-800.0), SOFT_TISSUE);
        assert_eq!(hu_to_material(299.0), SOFT_TISSUE);
        assert_eq!(hu_to_material(300.0), BONE);
        assert_eq!(hu_to_material(1999.0), BONE);
        assert_eq!(hu_to_material(2000.0), METAL);
    }

    #[test]
    fn cylinder_has_insert() {
        let spec = CylinderSpec {
            insert: Some((30.0, 0.0, 5.0)),
            ..CylinderSpec::water(60.0, 80.0)
        };
        let ph = cylinder_phantom(&spec, 2.0);
        assert!(ph.material.contains(&METAL));
        assert!(ph.material_fraction(SOFT_TISSUE) > 0.5);
    }
}
