//! Circular cone-beam scan geometry, cylindrical FOV specifications and the
//! train/test FOV grid.
//!
//! World frame: `z` is the rotation axis, the source orbits in the `z = 0`
//! plane at distance `sod` from the isocenter. At gantry angle `β` the source
//! sits at `sod·(cos β, sin β, 0)` and the flat detector is centered at
//! `-(sdd - sod)·(cos β, sin β, 0)`. Detector `u` runs along
//! `(-sin β, cos β, 0)` (width), `v` along `+z` (height). Image row 0 is the
//! top of the detector (largest `v`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative overshoot of a detector shadow that is silently clamped.
pub const SHADOW_CLAMP_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScanGeometryRaw", into = "ScanGeometryRaw")]
pub struct ScanGeometry {
    sdd: f64,
    sod: f64,
    det_width: f64,
    det_height: f64,
    det_cols: usize,
    det_rows: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct ScanGeometryRaw {
    sdd: f64,
    sod: f64,
    det_width: f64,
    det_height: f64,
    det_cols: usize,
    det_rows: usize,
}

impl TryFrom<ScanGeometryRaw> for ScanGeometry {
    type Error = Error;
    fn try_from(r: ScanGeometryRaw) -> Result<Self> {
        ScanGeometry::new(r.sdd, r.sod, r.det_width, r.det_height, r.det_cols, r.det_rows)
    }
}

impl From<ScanGeometry> for ScanGeometryRaw {
    fn from(g: ScanGeometry) -> Self {
        ScanGeometryRaw {
            sdd: g.sdd,
            sod: g.sod,
            det_width: g.det_width,
            det_height: g.det_height,
            det_cols: g.det_cols,
            det_rows: g.det_rows,
        }
    }
}

impl ScanGeometry {
    pub fn new(
        sdd: f64,
        sod: f64,
        det_width: f64,
        det_height: f64,
        det_cols: usize,
        det_rows: usize,
    ) -> Result<Self> {
        let finite = [sdd, sod, det_width, det_height].iter().all(|v| v.is_finite());
        if !finite || !(sod > 0.0 && sod < sdd) {
            return Err(Error::Geometry(format!(
                "need 0 < sod < sdd, got sod={sod}, sdd={sdd}"
            )));
        }
        if !(det_width > 0.0 && det_height > 0.0) {
            return Err(Error::Geometry(format!(
                "detector extent must be positive, got {det_width}x{det_height} mm"
            )));
        }
        if det_cols < 2 || det_rows < 2 {
            return Err(Error::Geometry(format!(
                "detector needs at least 2x2 pixels, got {det_rows}x{det_cols}"
            )));
        }
        Ok(ScanGeometry {
            sdd,
            sod,
            det_width,
            det_height,
            det_cols,
            det_rows,
        })
    }

    /// Dental jaw-protocol geometry: SDD 700 mm, SOD 490 mm, 250 x 300 mm
    /// detector sampled at 0.5 mm.
    pub fn paper() -> Self {
        Self::new(700.0, 490.0, 250.0, 300.0, 500, 600).expect("valid preset")
    }

    /// Same optics as [`ScanGeometry::paper`] on a coarse 2.5 mm detector grid.
    pub fn desk() -> Self {
        Self::new(700.0, 490.0, 250.0, 300.0, 100, 120).expect("valid preset")
    }

    /// Copy with a different detector sampling (same physical extent).
    pub fn with_detector_pixels(&self, cols: usize, rows: usize) -> Result<Self> {
        Self::new(self.sdd, self.sod, self.det_width, self.det_height, cols, rows)
    }

    pub fn sdd(&self) -> f64 {
        self.sdd
    }
    pub fn sod(&self) -> f64 {
        self.sod
    }
    pub fn det_width(&self) -> f64 {
        self.det_width
    }
    pub fn det_height(&self) -> f64 {
        self.det_height
    }
    pub fn det_cols(&self) -> usize {
        self.det_cols
    }
    pub fn det_rows(&self) -> usize {
        self.det_rows
    }

    pub fn magnification(&self) -> f64 {
        self.sdd / self.sod
    }

    /// Distance from the isocenter to the detector plane.
    pub fn odd(&self) -> f64 {
        self.sdd - self.sod
    }

    pub fn pixel_width(&self) -> f64 {
        self.det_width / self.det_cols as f64
    }

    pub fn pixel_height(&self) -> f64 {
        self.det_height / self.det_rows as f64
    }

    /// Detector `u` coordinate (mm) of the center of column `col`.
    pub fn u_of_col(&self, col: usize) -> f64 {
        (col as f64 + 0.5 - self.det_cols as f64 / 2.0) * self.pixel_width()
    }

    /// Detector `v` coordinate (mm) of the center of row `row`; row 0 is the top.
    pub fn v_of_row(&self, row: usize) -> f64 {
        (self.det_rows as f64 / 2.0 - row as f64 - 0.5) * self.pixel_height()
    }

    /// Fractional column index for a detector `u` coordinate.
    pub fn col_of_u(&self, u: f64) -> f64 {
        u / self.pixel_width() + self.det_cols as f64 / 2.0 - 0.5
    }

    /// Fractional row index for a detector `v` coordinate.
    pub fn row_of_v(&self, v: f64) -> f64 {
        self.det_rows as f64 / 2.0 - 0.5 - v / self.pixel_height()
    }

    /// Half fan angle (radians) subtended by the detector width.
    pub fn half_fan_angle(&self) -> f64 {
        (0.5 * self.det_width / self.sdd).atan()
    }

    /// Unit vector from the isocenter toward the source at gantry angle `deg`.
    pub fn source_dir(&self, deg: f64) -> [f64; 3] {
        let b = deg.to_radians();
        [b.cos(), b.sin(), 0.0]
    }

    /// Detector `u` axis at gantry angle `deg`.
    pub fn u_axis(&self, deg: f64) -> [f64; 3] {
        let b = deg.to_radians();
        [-b.sin(), b.cos(), 0.0]
    }

    pub fn source_position(&self, deg: f64) -> [f64; 3] {
        let s = self.source_dir(deg);
        [self.sod * s[0], self.sod * s[1], 0.0]
    }

    /// World position of detector point `(u, v)` at gantry angle `deg`.
    pub fn detector_point(&self, deg: f64, u: f64, v: f64) -> [f64; 3] {
        let s = self.source_dir(deg);
        let e = self.u_axis(deg);
        let odd = self.odd();
        [
            -odd * s[0] + u * e[0],
            -odd * s[1] + u * e[1],
            v,
        ]
    }
}

/// Cylindrical field of view, diameter x height in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FovSpec {
    pub diameter: f64,
    pub height: f64,
}

impl FovSpec {
    pub fn new(diameter: f64, height: f64) -> Result<Self> {
        if !(diameter > 0.0 && height > 0.0 && diameter.is_finite() && height.is_finite()) {
            return Err(Error::Geometry(format!(
                "FOV dimensions must be positive, got {diameter}x{height} mm"
            )));
        }
        Ok(FovSpec { diameter, height })
    }

    /// Integer-millimetre key used to match FOVs across files.
    pub fn key(&self) -> (i64, i64) {
        (
            (self.diameter * 1000.0).round() as i64,
            (self.height * 1000.0).round() as i64,
        )
    }

    pub fn label(&self) -> String {
        format!("{}x{}", fmt_mm(self.diameter), fmt_mm(self.height))
    }
}

fn fmt_mm(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v}")
    }
}

/// Detector-plane size (mm) of the collimated FOV, clamped to the detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shadow {
    pub width: f64,
    pub height: f64,
}

pub fn detector_shadow(fov: &FovSpec, geom: &ScanGeometry) -> Result<Shadow> {
    let mag = geom.magnification();
    let w = fov.diameter * mag;
    let h = fov.height * mag;
    let limit = 1.0 + SHADOW_CLAMP_TOLERANCE;
    if w > geom.det_width * limit || h > geom.det_height * limit {
        return Err(Error::Geometry(format!(
            "FOV {} casts a {w:.3}x{h:.3} mm shadow on a {}x{} mm detector",
            fov.label(),
            geom.det_width,
            geom.det_height
        )));
    }
    Ok(Shadow {
        width: w.min(geom.det_width),
        height: h.min(geom.det_height),
    })
}

/// Normalized FOV size fed to the auxiliary channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxPair {
    /// Shadow width over detector width.
    pub x: f64,
    /// Shadow height over detector height.
    pub y: f64,
}

pub fn aux_values(fov: &FovSpec, geom: &ScanGeometry) -> Result<AuxPair> {
    let s = detector_shadow(fov, geom)?;
    Ok(AuxPair {
        x: s.width / geom.det_width,
        y: s.height / geom.det_height,
    })
}

/// Pixels of the detector whose centers lie inside the collimation shadow.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowMask {
    pub rows: usize,
    pub cols: usize,
    pub row_range: (usize, usize),
    pub col_range: (usize, usize),
}

impl ShadowMask {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row_range.0
            && row < self.row_range.1
            && col >= self.col_range.0
            && col < self.col_range.1
    }

    pub fn count(&self) -> usize {
        (self.row_range.1 - self.row_range.0) * (self.col_range.1 - self.col_range.0)
    }

    pub fn to_bools(&self) -> Vec<bool> {
        let mut out = vec![false; self.rows * self.cols];
        for r in self.row_range.0..self.row_range.1 {
            for c in self.col_range.0..self.col_range.1 {
                out[r * self.cols + c] = true;
            }
        }
        out
    }
}

pub fn shadow_mask(fov: &FovSpec, geom: &ScanGeometry) -> Result<ShadowMask> {
    let s = detector_shadow(fov, geom)?;
    // Small slack so that shadows landing exactly on a pixel center include it.
    let eps = 1e-9;
    let cols: Vec<usize> = (0..geom.det_cols)
        .filter(|&c| geom.u_of_col(c).abs() <= 0.5 * s.width + eps)
        .collect();
    let rows: Vec<usize> = (0..geom.det_rows)
        .filter(|&r| geom.v_of_row(r).abs() <= 0.5 * s.height + eps)
        .collect();
    let range = |v: &[usize]| match (v.first(), v.last()) {
        (Some(&a), Some(&b)) => (a, b + 1),
        _ => (0, 0),
    };
    Ok(ShadowMask {
        rows: geom.det_rows,
        cols: geom.det_cols,
        row_range: range(&rows),
        col_range: range(&cols),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// Train and test FOV sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FovGrid {
    pub train: Vec<FovSpec>,
    pub test: Vec<FovSpec>,
}

pub const TRAIN_DIAMETERS: [f64; 3] = [120.0, 140.0, 160.0];
pub const TRAIN_HEIGHTS: [f64; 6] = [30.0, 60.0, 90.0, 120.0, 150.0, 180.0];
pub const TEST_DIAMETERS: [f64; 3] = [130.0, 150.0, 170.0];
pub const TEST_HEIGHTS: [f64; 10] = [
    40.0, 50.0, 70.0, 80.0, 100.0, 110.0, 130.0, 140.0, 160.0, 170.0,
];

impl FovGrid {
    /// The "paper-table1" preset: 18 training and 30 test FOVs.
    pub fn paper_table1() -> Self {
        FovGrid::from_axes(&TRAIN_DIAMETERS, &TRAIN_HEIGHTS, &TEST_DIAMETERS, &TEST_HEIGHTS)
            .expect("preset grid is valid")
    }

    pub fn from_axes(
        train_d: &[f64],
        train_h: &[f64],
        test_d: &[f64],
        test_h: &[f64],
    ) -> Result<Self> {
        let cross = |ds: &[f64], hs: &[f64]| -> Result<Vec<FovSpec>> {
            ds.iter()
                .flat_map(|&d| hs.iter().map(move |&h| FovSpec::new(d, h)))
                .collect()
        };
        let grid = FovGrid {
            train: cross(train_d, train_h)?,
            test: cross(test_d, test_h)?,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::Config("FOV grid needs train and test entries".into()));
        }
        for f in &self.train {
            if self.test.iter().any(|g| g.key() == f.key()) {
                return Err(Error::Config(format!(
                    "FOV {} appears in both train and test splits",
                    f.label()
                )));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> &[FovSpec] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, fov: &FovSpec) -> Option<Split> {
        if self.train.iter().any(|f| f.key() == fov.key()) {
            Some(Split::Train)
        } else if self.test.iter().any(|f| f.key() == fov.key()) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

pub fn fov_grid(split: Split) -> Vec<FovSpec> {
    FovGrid::paper_table1().split(split).to_vec()
}

/// Uniform half-open angular schedule `start + i·(end - start)/n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleSchedule {
    pub start_deg: f64,
    pub end_deg: f64,
    pub n_views: usize,
}

impl AngleSchedule {
    pub fn new(start_deg: f64, end_deg: f64, n_views: usize) -> Result<Self> {
        if n_views == 0 || !(end_deg > start_deg) {
            return Err(Error::Config(format!(
                "angle schedule needs n_views >= 1 and end > start, got [{start_deg}, {end_deg}) x {n_views}"
            )));
        }
        Ok(AngleSchedule {
            start_deg,
            end_deg,
            n_views,
        })
    }

    /// 100 views, 2.1 degree spacing over [0, 210).
    pub fn train() -> Self {
        Self::new(0.0, 210.0, 100).expect("valid preset")
    }

    /// 500 views, 0.42 degree spacing over [0, 210).
    pub fn test() -> Self {
        Self::new(0.0, 210.0, 500).expect("valid preset")
    }

    pub fn spacing(&self) -> f64 {
        (self.end_deg - self.start_deg) / self.n_views as f64
    }

    pub fn angles(&self) -> Vec<f64> {
        let step = self.spacing();
        (0..self.n_views)
            .map(|i| self.start_deg + i as f64 * step)
            .collect()
    }
}

pub fn angle_schedule(split: Split) -> AngleSchedule {
    match split {
        Split::Train => AngleSchedule::train(),
        Split::Test => AngleSchedule::test(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn magnification_examples() {
        let g = ScanGeometry::paper();
        assert!((g.magnification() - 1.428571).abs() < 1e-6);
        let g2 = ScanGeometry::new(2.0, 1.0, 10.0, 10.0, 2, 2).unwrap();
        assert_eq!(g2.magnification(), 2.0);
        assert!(ScanGeometry::new(1.0, 1.0, 10.0, 10.0, 2, 2).is_err());
        assert!(ScanGeometry::new(700.0, 490.0, 250.0, 300.0, 1, 10).is_err());
    }

    #[test]
    fn shadow_examples() {
        let g = ScanGeometry::paper();
        let s = detector_shadow(&FovSpec::new(170.0, 180.0).unwrap(), &g).unwrap();
        assert!((s.width - 242.857).abs() < 1e-3);
        assert!((s.height - 257.143).abs() < 1e-3);
        let s = detector_shadow(&FovSpec::new(120.0, 30.0).unwrap(), &g).unwrap();
        assert!((s.width - 171.429).abs() < 1e-3);
        assert!((s.height - 42.857).abs() < 1e-3);
        // exactly the detector width
        let d = 250.0 / g.magnification();
        let s = detector_shadow(&FovSpec::new(d, 30.0).unwrap(), &g).unwrap();
        assert!((s.width - 250.0).abs() < 1e-9);
        // within the clamp tolerance
        let s = detector_shadow(&FovSpec::new(d * 1.004, 30.0).unwrap(), &g).unwrap();
        assert_eq!(s.width, 250.0);
        // beyond it
        assert!(detector_shadow(&FovSpec::new(d * 1.01, 30.0).unwrap(), &g).is_err());
    }

    #[test]
    fn aux_examples() {
        let g = ScanGeometry::paper();
        let a = aux_values(&FovSpec::new(170.0, 180.0).unwrap(), &g).unwrap();
        assert!((a.x - 0.97143).abs() < 1e-5);
        assert!((a.y - 0.85714).abs() < 1e-5);
        let full = FovSpec::new(250.0 / g.magnification(), 300.0 / g.magnification()).unwrap();
        let a = aux_values(&full, &g).unwrap();
        assert!((a.x - 1.0).abs() < 1e-12 && (a.y - 1.0).abs() < 1e-12);
    }

    #[test]
    fn table1_grid() {
        let grid = FovGrid::paper_table1();
        assert_eq!(grid.train.len(), 18);
        assert_eq!(grid.test.len(), 30);
        let probe = FovSpec::new(130.0, 40.0).unwrap();
        assert_eq!(grid.split_of(&probe), Some(Split::Test));
        assert!(!grid.train.iter().any(|f| f.key() == probe.key()));
        let g = ScanGeometry::paper();
        for f in grid.train.iter().chain(&grid.test) {
            let a = aux_values(f, &g).unwrap();
            assert!(a.x > 0.0 && a.x <= 1.0 && a.y > 0.0 && a.y <= 1.0);
        }
    }

    #[test]
    fn overlapping_grid_rejected() {
        assert!(FovGrid::from_axes(&[120.0], &[30.0], &[120.0], &[30.0, 40.0]).is_err());
    }

    #[test]
    fn schedules() {
        let tr = AngleSchedule::train().angles();
        assert_eq!(tr.len(), 100);
        assert_eq!(tr[0], 0.0);
        assert!((tr[99] - 207.9).abs() < 1e-9);
        for w in tr.windows(2) {
            assert!((w[1] - w[0] - 2.1).abs() < 1e-9);
        }
        let te = AngleSchedule::test();
        assert_eq!(te.angles().len(), 500);
        assert!((te.spacing() - 0.42).abs() < 1e-12);
        assert!(AngleSchedule::new(0.0, 210.0, 0).is_err());
    }

    #[test]
    fn detector_coordinates_round_trip() {
        let g = ScanGeometry::desk();
        for c in [0, 17, 99] {
            assert!((g.col_of_u(g.u_of_col(c)) - c as f64).abs() < 1e-9);
        }
        for r in [0, 60, 119] {
            assert!((g.row_of_v(g.v_of_row(r)) - r as f64).abs() < 1e-9);
        }
        assert!(g.v_of_row(0) > 0.0);
    }

    #[test]
    fn shadow_mask_is_centered() {
        let g = ScanGeometry::desk();
        let m = shadow_mask(&FovSpec::new(130.0, 40.0).unwrap(), &g).unwrap();
        assert_eq!(m.col_range.0, g.det_cols() - m.col_range.1);
        assert_eq!(m.row_range.0, g.det_rows() - m.row_range.1);
        assert!(m.count() > 0);
    }

    proptest::proptest! {
        #[test]
        fn aux_strictly_monotone(d in 20.0f64..170.0, h in 20.0f64..200.0, dd in 0.5f64..5.0) {
            let g = ScanGeometry::paper();
            let a = aux_values(&FovSpec::new(d, h).unwrap(), &g).unwrap();
            let b = aux_values(&FovSpec::new(d + dd, h + dd).unwrap(), &g).unwrap();
            proptest::prop_assert!(b.x > a.x);
            proptest::prop_assert!(b.y > a.y);
        }
    }
}
