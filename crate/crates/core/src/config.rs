//! Run configuration: a TOML file layered over a named preset, with
//! dotted-path `key=value` overrides. Every run directory receives the
//! resolved configuration as `config.toml` plus `run_info.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AngleSchedule, FovGrid, ScanGeometry};
use crate::model::ModelConfig;
use crate::phantom::HeadParams;
use crate::training::TrainConfig;
use crate::transport::Spectrum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(Error::Config(format!("unknown scale '{other}' (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub sdd: f64,
    pub sod: f64,
    pub det_width: f64,
    pub det_height: f64,
    pub det_cols: usize,
    pub det_rows: usize,
}

impl GeometryConfig {
    pub fn build(&self) -> Result<ScanGeometry> {
        ScanGeometry::new(self.sdd, self.sod, self.det_width, self.det_height, self.det_cols, self.det_rows)
    }
}

/// FOV grid: `preset = "paper-table1"`, or `preset = "none"` with explicit
/// axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub preset: Option<String>,
    #[serde(default)]
    pub train_diameters: Vec<f64>,
    #[serde(default)]
    pub train_heights: Vec<f64>,
    #[serde(default)]
    pub test_diameters: Vec<f64>,
    #[serde(default)]
    pub test_heights: Vec<f64>,
}

impl GridConfig {
    pub fn build(&self) -> Result<FovGrid> {
        match self.preset.as_deref() {
            Some("paper-table1") => Ok(FovGrid::paper_table1()),
            None | Some("none") => FovGrid::from_axes(&self.train_diameters, &self.train_heights, &self.test_diameters, &self.test_heights),
            Some(other) => Err(Error::Config(format!("unknown grid preset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub train_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
    pub head: HeadParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub train_views: usize,
    pub test_views: usize,
    pub arc_deg: f64,
    pub n_photons: u64,
    /// Scatter realizations per training view.
    pub train_realizations: u32,
    /// Scatter realizations per test view.
    pub test_realizations: u32,
    pub fluence: f64,
    pub bin_down: usize,
    /// `"90kvp"` or a monoenergetic `"mono:<keV>"`.
    pub spectrum: String,
}

impl SimulateConfig {
    pub fn spectrum(&self) -> Result<Spectrum> {
        if self.spectrum == "90kvp" {
            return Ok(Spectrum::default_90kvp());
        }
        if let Some(kev) = self.spectrum.strip_prefix("mono:") {
            let e: f64 = kev
                .parse()
                .map_err(|_| Error::Config(format!("bad monoenergetic spectrum '{}'", self.spectrum)))?;
            return Ok(Spectrum::mono(e));
        }
        Err(Error::Config(format!(
            "unknown spectrum '{}' (expected 90kvp or mono:<keV>)",
            self.spectrum
        )))
    }

    pub fn angles(&self, views: usize) -> Result<Vec<f64>> {
        Ok(AngleSchedule::new(0.0, self.arc_deg, views)?.angles())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub canonical_rows: usize,
    pub canonical_cols: usize,
    /// Training noise levels (realizations averaged per sample).
    pub train_noise_levels: Vec<u32>,
    /// Fixed noise level of the test targets.
    pub test_k: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub delta_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    pub cylinder_radius: f64,
    pub cylinder_height: f64,
    /// `[x, y, radius]` of the metal rod, mm; empty for none.
    pub insert: Vec<f64>,
    pub phantom_voxel: f64,
    pub fov_diameter: f64,
    pub fov_height: f64,
    pub views: usize,
    pub n_photons: u64,
    pub volume_dims: [usize; 3],
    pub volume_voxel: f64,
    pub hann: bool,
    pub window: [f32; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scale: Scale,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub geometry: GeometryConfig,
    pub grid: GridConfig,
    pub phantom: PhantomConfig,
    pub simulate: SimulateConfig,
    pub dataset: DatasetConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub recon: ReconConfig,
}

impl RunConfig {
    /// Scaled-down preset: 100×120 detector, 96×80 canonical shape.
    pub fn desk() -> Self {
        let g = ScanGeometry::desk();
        RunConfig {
            scale: Scale::Desk,
            seed: 1,
            out_dir: PathBuf::from("runs/desk"),
            geometry: GeometryConfig {
                sdd: g.sdd(),
                sod: g.sod(),
                det_width: g.det_width(),
                det_height: g.det_height(),
                det_cols: g.det_cols(),
                det_rows: g.det_rows(),
            },
            grid: GridConfig {
                preset: Some("paper-table1".into()),
                train_diameters: Vec::new(),
                train_heights: Vec::new(),
                test_diameters: Vec::new(),
                test_heights: Vec::new(),
            },
            phantom: PhantomConfig {
                train_ids: vec![0, 1],
                test_ids: vec![2],
                head: HeadParams::default(),
            },
            simulate: SimulateConfig {
                train_views: 6,
                test_views: 4,
                arc_deg: 210.0,
                n_photons: 100_000,
                train_realizations: 2,
                test_realizations: 2,
                fluence: 1.0e5,
                bin_down: 4,
                spectrum: "90kvp".into(),
            },
            dataset: DatasetConfig {
                canonical_rows: 96,
                canonical_cols: 80,
                train_noise_levels: vec![1, 2],
                test_k: 2,
            },
            model: ModelSection {
                widths: ModelConfig::desk(false).widths,
            },
            train: TrainConfig::default(),
            eval: EvalConfig {
                delta_floor: crate::metrics::DELTA_FLOOR,
            },
            recon: ReconConfig {
                cylinder_radius: 70.0,
                cylinder_height: 140.0,
                insert: vec![30.0, 0.0, 5.0],
                phantom_voxel: 2.0,
                fov_diameter: 170.0,
                fov_height: 100.0,
                views: 100,
                n_photons: 100_000,
                volume_dims: [80, 80, 9],
                volume_voxel: 2.0,
                hann: true,
                window: [-1000.0, 2500.0],
            },
        }
    }

    /// Full-size geometry and network; far beyond a laptop budget.
    pub fn paper() -> Self {
        let mut c = RunConfig::desk();
        let g = ScanGeometry::paper();
        c.scale = Scale::Paper;
        c.out_dir = PathBuf::from("runs/paper");
        c.geometry.det_cols = g.det_cols();
        c.geometry.det_rows = g.det_rows();
        c.simulate.train_views = AngleSchedule::train().n_views;
        c.simulate.test_views = AngleSchedule::test().n_views;
        c.simulate.n_photons = 10_000_000;
        c.dataset.canonical_rows = 320;
        c.dataset.canonical_cols = 256;
        c.model.widths = ModelConfig::full_scale(false).widths;
        c.phantom.head.voxel_size = 1.0;
        c.recon.volume_dims = [256, 256, 64];
        c.recon.volume_voxel = 0.6;
        c.recon.views = 500;
        c
    }

    pub fn preset(scale: Scale) -> Self {
        match scale {
            Scale::Desk => RunConfig::desk(),
            Scale::Paper => RunConfig::paper(),
        }
    }

    /// Preset `scale`, then the TOML file (if any), then `overrides`
    /// (`section.key=value`; values parse as TOML, falling back to strings).
    pub fn load(scale: Scale, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(RunConfig::preset(scale))
            .map_err(|e| Error::Config(format!("preset does not serialize: {e}")))?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let user: toml::Value = text
                .parse::<toml::Table>()
                .map(toml::Value::Table)
                .map_err(|e| Error::format(path, e.to_string()))?;
            merge(&mut value, user);
        }
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{ov}' is not key=value")))?;
            set_path(&mut value, key.trim(), parse_scalar(raw.trim()))?;
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid configuration: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let geom = self.geometry.build()?;
        self.grid.build()?;
        self.simulate.spectrum()?;
        self.train.validate()?;
        let s = &self.simulate;
        if s.train_views == 0 || s.test_views == 0 || s.n_photons == 0 || s.bin_down == 0 {
            return Err(Error::Config("simulate: views, n_photons and bin_down must be positive".into()));
        }
        if !(s.fluence > 0.0) || !(s.arc_deg > 0.0) {
            return Err(Error::Config("simulate: fluence and arc_deg must be positive".into()));
        }
        let d = &self.dataset;
        if d.train_noise_levels.iter().any(|&k| k == 0 || k > s.train_realizations) {
            return Err(Error::Config(format!(
                "dataset.train_noise_levels must lie in 1..={}",
                s.train_realizations
            )));
        }
        if d.test_k == 0 || d.test_k > s.test_realizations {
            return Err(Error::Config(format!("dataset.test_k must lie in 1..={}", s.test_realizations)));
        }
        if self.phantom.train_ids.is_empty() || self.phantom.test_ids.is_empty() {
            return Err(Error::Config("phantom: train_ids and test_ids must be non-empty".into()));
        }
        if self.phantom.train_ids.iter().any(|i| self.phantom.test_ids.contains(i)) {
            return Err(Error::Config("phantom: train and test ids overlap".into()));
        }
        let unet = ModelConfig::new(self.model.widths.clone(), false);
        unet.validate()?;
        let div = unet.input_divisor();
        if !d.canonical_rows.is_multiple_of(div) || !d.canonical_cols.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "canonical shape {}x{} is not divisible by {div} for {} pooling stages",
                d.canonical_rows,
                d.canonical_cols,
                unet.downsamplings()
            )));
        }
        let r = &self.recon;
        if !(r.insert.is_empty() || r.insert.len() == 3) {
            return Err(Error::Config("recon.insert must be empty or [x, y, radius]".into()));
        }
        if r.cylinder_radius * 2.0 > r.fov_diameter {
            return Err(Error::Config(format!(
                "recon cylinder ({} mm) wider than its FOV ({} mm) would truncate projections",
                2.0 * r.cylinder_radius,
                r.fov_diameter
            )));
        }
        crate::recon::check_coverage(&self.simulate.angles(r.views)?, &geom, true)?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(root: &mut toml::Value, key: &str, v: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, p) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{}' is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            table.insert(p.to_string(), v);
            return Ok(());
        }
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Config("empty override key".into()))
}

/// Size the global worker pool. `None` keeps rayon's default of one worker
/// per available core. Must run before any parallel work.
pub fn configure_threads(threads: Option<usize>) -> Result<usize> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("thread count must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot configure {n} worker threads: {e}")))?;
    }
    Ok(rayon::current_num_threads())
}

/// Provenance written next to every frozen configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub tool: String,
    pub version: String,
    pub stage: String,
    pub seed: u64,
    pub threads: usize,
}

/// Write `config.toml` and `run_info.json` into `dir`.
pub fn freeze(cfg: &RunConfig, dir: &Path, stage: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("config.toml");
    fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))?;
    let info = RunInfo {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        stage: stage.into(),
        seed: cfg.seed,
        threads: rayon::current_num_threads(),
    };
    let p = dir.join("run_info.json");
    fs::write(&p, serde_json::to_string_pretty(&info).expect("json")).map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for s in [Scale::Desk, Scale::Paper] {
            let c = RunConfig::preset(s);
            c.validate().unwrap();
            let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn file_and_overrides_layer_on_the_preset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "seed = 9\n[train]\nsteps = 10\n").unwrap();
        let c = RunConfig::load(
            Scale::Desk,
            Some(&p),
            &["train.batch_size=4".into(), "simulate.spectrum=mono:70".into(), "model.widths=[4, 8, 16]".into()],
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.simulate.spectrum, "mono:70");
        assert_eq!(c.model.widths, vec![4, 8, 16]);
        assert_eq!(c.simulate.n_photons, 100_000);
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let bad = |ov: &str| RunConfig::load(Scale::Desk, None, &[ov.to_string()]).is_err();
        assert!(bad("train.steps=0"));
        assert!(bad("dataset.test_k=5"));
        assert!(bad("dataset.canonical_rows=90"));
        assert!(bad("grid.preset=other"));
        assert!(bad("recon.views=10"));
        assert!(bad("no_such_key=1"));
        assert!(bad("phantom.test_ids=[0]"));
    }
}
