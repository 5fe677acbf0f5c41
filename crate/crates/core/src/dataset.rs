//! Conversion of simulated projections into network samples.
//!
//! Input domain: linearized measurement `-ln((P + S) / F)`. Target domain:
//! flat-normalized scatter `S / F`. Both are zero outside the collimation
//! shadow and resampled to the canonical network shape with a support-masked
//! bilinear resize, so out-of-shadow zeros never bleed into the edge pixels.
//!
//! A dataset directory holds `samples.bin` (projection records of kind
//! `input`/`target`) and `manifest.tsv`, whose leading `# key<TAB>value` lines
//! carry the preprocessing constants and geometry, followed by one record per
//! sample. Test datasets additionally keep the native-resolution target of
//! every sample for evaluation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{aux_values, shadow_mask, AuxPair, FovGrid, FovSpec, ScanGeometry, ShadowMask, Split};
pub use crate::image::resize;
use crate::image::{resize_masked, Image};
use crate::transport::{average_realizations, ProjKind, ProjMeta, Projection, ProjectionStore, StoreKey};

pub const EPS_FLOOR: f64 = 1e-6;
/// Minimum resampled support for a canonical pixel to count as in-shadow.
pub const MASK_KEEP: f32 = 0.5;
pub const SAMPLES_BIN: &str = "samples.bin";
pub const MANIFEST_TSV: &str = "manifest.tsv";
const MANIFEST_MAGIC: &str = "# auxscatter-dataset\t1";
const RECORD_COLUMNS: &str = "index\tsplit\tphantom\tdiameter\theight\tangle_deg\tk\taux_x\taux_y\tinput_offset\ttarget_offset\tnative_offset";

fn check_image(p: &Projection, geom: &ScanGeometry, what: &str) -> Result<()> {
    if p.rows() != geom.det_rows() || p.cols() != geom.det_cols() {
        return Err(Error::Shape(format!(
            "{what} is {}x{}, detector is {}x{}",
            p.rows(),
            p.cols(),
            geom.det_rows(),
            geom.det_cols()
        )));
    }
    Ok(())
}

fn check_flat(flat: &Projection, mask: &ShadowMask) -> Result<()> {
    for r in mask.row_range.0..mask.row_range.1 {
        for c in mask.col_range.0..mask.col_range.1 {
            let v = flat.image.get(r, c);
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "flat for FOV {} is {v} at in-shadow pixel ({r}, {c})",
                    flat.meta.fov.label()
                )));
            }
        }
    }
    Ok(())
}

fn same_view(a: &Projection, b: &Projection) -> Result<()> {
    if a.meta.fov.key() != b.meta.fov.key() || a.meta.angle_deg != b.meta.angle_deg {
        return Err(Error::Metadata(format!(
            "{} at {} deg / {} does not match {} at {} deg / {}",
            a.meta.kind.as_str(),
            a.meta.angle_deg,
            a.meta.fov.label(),
            b.meta.kind.as_str(),
            b.meta.angle_deg,
            b.meta.fov.label()
        )));
    }
    Ok(())
}

/// Pixel-wise `num(r, c) / flat` inside the flat's shadow, 0 outside.
fn flat_divide(
    flat: &Projection,
    geom: &ScanGeometry,
    num: impl Fn(usize) -> f64,
) -> Result<Image> {
    check_image(flat, geom, "flat")?;
    let mask = shadow_mask(&flat.meta.fov, geom)?;
    check_flat(flat, &mask)?;
    let mut out = Image::zeros(geom.det_rows(), geom.det_cols());
    for r in mask.row_range.0..mask.row_range.1 {
        for c in mask.col_range.0..mask.col_range.1 {
            let i = r * out.cols + c;
            out.data[i] = (num(i) / flat.image.data[i] as f64) as f32;
        }
    }
    Ok(out)
}

/// Flat-normalized measurement `t = (P + S) / F` inside the shadow.
pub fn compose_measurement(
    primary: &Projection,
    scatter: &Projection,
    flat: &Projection,
    geom: &ScanGeometry,
) -> Result<Image> {
    check_image(primary, geom, "primary")?;
    check_image(scatter, geom, "scatter")?;
    same_view(primary, scatter)?;
    if primary.meta.fov.key() != flat.meta.fov.key() {
        return Err(Error::Metadata(format!(
            "flat FOV {} vs projection FOV {}",
            flat.meta.fov.label(),
            primary.meta.fov.label()
        )));
    }
    let (p, s) = (&primary.image.data, &scatter.image.data);
    flat_divide(flat, geom, |i| p[i] as f64 + s[i] as f64)
}

/// Scatter target `S / F` inside the shadow.
pub fn normalize_target(scatter: &Projection, flat: &Projection, geom: &ScanGeometry) -> Result<Image> {
    check_image(scatter, geom, "scatter")?;
    if scatter.meta.fov.key() != flat.meta.fov.key() {
        return Err(Error::Metadata(format!(
            "flat FOV {} vs scatter FOV {}",
            flat.meta.fov.label(),
            scatter.meta.fov.label()
        )));
    }
    let s = &scatter.image.data;
    flat_divide(flat, geom, |i| s[i] as f64)
}

/// `-ln(max(t, eps_floor))` inside `mask`, 0 outside.
pub fn linearize(t: &Image, mask: &ShadowMask, eps_floor: f64) -> Image {
    let mut out = Image::zeros(t.rows, t.cols);
    for r in mask.row_range.0..mask.row_range.1 {
        for c in mask.col_range.0..mask.col_range.1 {
            let v = (t.get(r, c) as f64).max(eps_floor);
            out.set(r, c, (-v.ln()) as f32);
        }
    }
    out
}

/// Resample a native in-shadow image to the canonical shape. Returns the
/// image and its canonical support mask.
pub fn canonicalize(
    img: &Image,
    mask: &ShadowMask,
    rows: usize,
    cols: usize,
) -> Result<(Image, Vec<bool>)> {
    resize_masked(img, &mask.to_bools(), rows, cols, MASK_KEEP)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMeta {
    pub split: Split,
    pub phantom: u32,
    pub fov: FovSpec,
    pub angle_deg: f64,
    /// Number of averaged scatter realizations (noise level).
    pub k: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Image,
    pub target: Image,
    pub aux: AuxPair,
    pub meta: SampleMeta,
}

/// What to extract from a projection store.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub split: Split,
    pub grid: FovGrid,
    pub phantoms: Vec<u32>,
    pub angles: Vec<f64>,
    /// Noise levels: number of averaged scatter realizations per sample.
    pub noise_levels: Vec<u32>,
    pub canonical: (usize, usize),
    pub eps_floor: f64,
    /// Keep native-resolution targets (needed for evaluation).
    pub keep_native: bool,
}

impl DatasetSpec {
    pub fn fovs(&self) -> &[FovSpec] {
        self.grid.split(self.split)
    }

    pub fn record_count(&self) -> usize {
        self.phantoms.len() * self.fovs().len() * self.angles.len() * self.noise_levels.len()
    }

    fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.phantoms.is_empty() || self.angles.is_empty() || self.noise_levels.is_empty() {
            return Err(Error::Config(
                "dataset needs at least one phantom, angle and noise level".into(),
            ));
        }
        if self.noise_levels.contains(&0) {
            return Err(Error::Config("noise levels must be >= 1".into()));
        }
        if self.canonical.0 < 2 || self.canonical.1 < 2 {
            return Err(Error::Config(format!(
                "canonical shape {:?} must be at least 2x2",
                self.canonical
            )));
        }
        if !(self.eps_floor > 0.0) {
            return Err(Error::Config("eps_floor must be positive".into()));
        }
        Ok(())
    }

    /// Every store member the build reads, in a fixed order.
    pub fn required_keys(&self) -> Vec<StoreKey> {
        let kmax = self.noise_levels.iter().copied().max().unwrap_or(0);
        let mut keys = Vec::new();
        for fov in self.fovs() {
            keys.push(StoreKey::flat(fov));
        }
        for &ph in &self.phantoms {
            for fov in self.fovs() {
                for &a in &self.angles {
                    keys.push(StoreKey::new(ProjKind::Primary, ph, fov, a, 0));
                    for r in 0..kmax {
                        keys.push(StoreKey::new(ProjKind::Scatter, ph, fov, a, r));
                    }
                }
            }
        }
        keys
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub index: usize,
    pub meta: SampleMeta,
    pub aux: AuxPair,
    pub input_offset: u64,
    pub target_offset: u64,
    pub native_offset: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub canonical: (usize, usize),
    pub eps_floor: f64,
    pub noise_levels: Vec<u32>,
    pub geometry: ScanGeometry,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// Distinct FOVs in first-appearance order.
    pub fn fovs(&self) -> Vec<FovSpec> {
        let mut out: Vec<FovSpec> = Vec::new();
        for r in &self.records {
            if !out.iter().any(|f| f.key() == r.meta.fov.key()) {
                out.push(r.meta.fov);
            }
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let g = &self.geometry;
        let levels: Vec<String> = self.noise_levels.iter().map(|k| k.to_string()).collect();
        let mut s = String::new();
        s.push_str(MANIFEST_MAGIC);
        s.push('\n');
        let mut kv = |k: &str, v: String| {
            s.push_str(&format!("# {k}\t{v}\n"));
        };
        kv("split", self.split.as_str().to_string());
        kv("canonical_rows", self.canonical.0.to_string());
        kv("canonical_cols", self.canonical.1.to_string());
        kv("eps_floor", self.eps_floor.to_string());
        kv("noise_levels", levels.join(","));
        kv("sdd_mm", g.sdd().to_string());
        kv("sod_mm", g.sod().to_string());
        kv("det_width_mm", g.det_width().to_string());
        kv("det_height_mm", g.det_height().to_string());
        kv("det_cols", g.det_cols().to_string());
        kv("det_rows", g.det_rows().to_string());
        kv("records", self.records.len().to_string());
        s.push_str(RECORD_COLUMNS);
        s.push('\n');
        for r in &self.records {
            let m = &r.meta;
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.index,
                m.split.as_str(),
                m.phantom,
                m.fov.diameter,
                m.fov.height,
                m.angle_deg,
                m.k,
                r.aux.x,
                r.aux.y,
                r.input_offset,
                r.target_offset,
                r.native_offset.map_or("-".to_string(), |o| o.to_string())
            ));
        }
        s
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == MANIFEST_MAGIC => {}
            _ => return Err(bad("missing dataset manifest marker".into())),
        }
        let mut consts = std::collections::HashMap::new();
        let mut records = Vec::new();
        let mut header_seen = false;
        for (i, line) in lines {
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest
                    .split_once('\t')
                    .ok_or_else(|| bad(format!("line {}: malformed constant", i + 1)))?;
                consts.insert(k.to_string(), v.to_string());
                continue;
            }
            if !header_seen {
                if line != RECORD_COLUMNS {
                    return Err(bad(format!("line {}: unexpected column header", i + 1)));
                }
                header_seen = true;
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let rec_err = || bad(format!("line {}: {line:?}", i + 1));
            if f.len() != 12 {
                return Err(rec_err());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| rec_err());
            let int = |s: &str| s.parse::<u64>().map_err(|_| rec_err());
            records.push(ManifestRecord {
                index: int(f[0])? as usize,
                meta: SampleMeta {
                    split: f[1].parse().map_err(|_| rec_err())?,
                    phantom: int(f[2])? as u32,
                    fov: FovSpec::new(num(f[3])?, num(f[4])?).map_err(|_| rec_err())?,
                    angle_deg: num(f[5])?,
                    k: int(f[6])? as u32,
                },
                aux: AuxPair {
                    x: num(f[7])?,
                    y: num(f[8])?,
                },
                input_offset: int(f[9])?,
                target_offset: int(f[10])?,
                native_offset: if f[11] == "-" { None } else { Some(int(f[11])?) },
            });
        }
        let get = |k: &str| {
            consts
                .get(k)
                .ok_or_else(|| bad(format!("missing constant {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| bad(format!("bad constant {k}")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| bad(format!("bad constant {k}")))
        };
        let geometry = ScanGeometry::new(
            num("sdd_mm")?,
            num("sod_mm")?,
            num("det_width_mm")?,
            num("det_height_mm")?,
            int("det_cols")?,
            int("det_rows")?,
        )?;
        let noise_levels = get("noise_levels")?
            .split(',')
            .map(|v| v.parse().map_err(|_| bad("bad noise_levels".into())))
            .collect::<Result<Vec<u32>>>()?;
        if int("records")? != records.len() {
            return Err(bad(format!(
                "header announces {} records, found {}",
                int("records")?,
                records.len()
            )));
        }
        Ok(DatasetManifest {
            split: get("split")?.parse()?,
            canonical: (int("canonical_rows")?, int("canonical_cols")?),
            eps_floor: num("eps_floor")?,
            noise_levels,
            geometry,
            records,
        })
    }
}

struct Built {
    meta: SampleMeta,
    aux: AuxPair,
    input: Image,
    target: Image,
    native: Option<Image>,
}

/// All samples of one (phantom, FOV, angle) view, one per noise level.
fn build_view(
    store: &ProjectionStore,
    spec: &DatasetSpec,
    geom: &ScanGeometry,
    flat: &Projection,
    phantom: u32,
    fov: &FovSpec,
    angle: f64,
) -> Result<Vec<Built>> {
    let kmax = *spec.noise_levels.iter().max().expect("validated") as usize;
    let primary = store.get(&StoreKey::new(ProjKind::Primary, phantom, fov, angle, 0))?;
    let scatters = (0..kmax as u32)
        .map(|r| store.get(&StoreKey::new(ProjKind::Scatter, phantom, fov, angle, r)))
        .collect::<Result<Vec<_>>>()?;
    let mask = shadow_mask(fov, geom)?;
    let aux = aux_values(fov, geom)?;
    let (rows, cols) = spec.canonical;
    spec.noise_levels
        .iter()
        .map(|&k| {
            let s = average_realizations(&scatters, k as usize)?;
            let t = compose_measurement(&primary, &s, flat, geom)?;
            let p = linearize(&t, &mask, spec.eps_floor);
            let y = normalize_target(&s, flat, geom)?;
            let (input, _) = canonicalize(&p, &mask, rows, cols)?;
            let (target, _) = canonicalize(&y, &mask, rows, cols)?;
            Ok(Built {
                meta: SampleMeta {
                    split: spec.split,
                    phantom,
                    fov: *fov,
                    angle_deg: angle,
                    k,
                },
                aux,
                input,
                target,
                native: spec.keep_native.then_some(y),
            })
        })
        .collect()
}

fn sample_projection(img: Image, kind: ProjKind, m: &SampleMeta) -> Projection {
    let mut meta = ProjMeta::new(kind, m.fov, m.angle_deg);
    meta.k = m.k;
    meta.phantom = m.phantom;
    Projection { image: img, meta }
}

/// Build one split of the dataset from a projection store into `out_dir`.
/// All missing store members are reported together before any work.
pub fn build_dataset(
    store: &ProjectionStore,
    spec: &DatasetSpec,
    geom: &ScanGeometry,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let missing = store.missing(&spec.required_keys());
    if !missing.is_empty() {
        return Err(Error::Missing(missing.iter().map(StoreKey::describe).collect()));
    }
    let flats = spec
        .fovs()
        .iter()
        .map(|f| store.get(&StoreKey::flat(f)))
        .collect::<Result<Vec<_>>>()?;
    let mut views = Vec::new();
    for &ph in &spec.phantoms {
        for (fi, fov) in spec.fovs().iter().enumerate() {
            for &a in &spec.angles {
                views.push((ph, fi, *fov, a));
            }
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let bin_path = out_dir.join(SAMPLES_BIN);
    let file = File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut bin = BufWriter::new(file);
    let mut offset = 0u64;
    let mut records = Vec::with_capacity(spec.record_count());
    // Bounded batches keep memory flat while views are built in parallel.
    for batch in views.chunks(64) {
        let built: Vec<Vec<Built>> = batch
            .par_iter()
            .map(|&(ph, fi, fov, a)| build_view(store, spec, geom, &flats[fi], ph, &fov, a))
            .collect::<Result<_>>()?;
        for b in built.into_iter().flatten() {
            let mut write = |img: Image, kind: ProjKind| -> Result<u64> {
                let p = sample_projection(img, kind, &b.meta);
                let at = offset;
                p.write_to(&mut bin).map_err(|e| Error::io(&bin_path, e))?;
                offset += p.byte_len() as u64;
                Ok(at)
            };
            let input_offset = write(b.input, ProjKind::Input)?;
            let target_offset = write(b.target, ProjKind::Target)?;
            let native_offset = match b.native {
                Some(img) => Some(write(img, ProjKind::Target)?),
                None => None,
            };
            records.push(ManifestRecord {
                index: records.len(),
                meta: b.meta,
                aux: b.aux,
                input_offset,
                target_offset,
                native_offset,
            });
        }
    }
    bin.flush().map_err(|e| Error::io(&bin_path, e))?;
    let manifest = DatasetManifest {
        split: spec.split,
        canonical: spec.canonical,
        eps_floor: spec.eps_floor,
        noise_levels: spec.noise_levels.clone(),
        geometry: *geom,
        records,
    };
    let path = out_dir.join(MANIFEST_TSV);
    fs::write(&path, manifest.to_tsv()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A dataset directory opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    bytes: std::sync::Arc<Vec<u8>>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_TSV);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = DatasetManifest::from_tsv(&text, &path)?;
        let bin = dir.join(SAMPLES_BIN);
        let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            bytes: std::sync::Arc::new(bytes),
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    fn image_at(&self, offset: u64) -> Result<Image> {
        let path = self.dir.join(SAMPLES_BIN);
        let start = offset as usize;
        if start >= self.bytes.len() {
            return Err(Error::format(&path, format!("offset {offset} past end of file")));
        }
        let p = Projection::read_from(&mut &self.bytes[start..]).map_err(|e| Error::io(&path, e))?;
        Ok(p.image)
    }

    pub fn sample(&self, i: usize) -> Result<Sample> {
        let r = &self.manifest.records[i];
        Ok(Sample {
            input: self.image_at(r.input_offset)?,
            target: self.image_at(r.target_offset)?,
            aux: r.aux,
            meta: r.meta,
        })
    }

    pub fn samples(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.sample(i)).collect()
    }

    /// Native-resolution target of record `i`, if the dataset kept one.
    pub fn native_target(&self, i: usize) -> Result<Option<Image>> {
        match self.manifest.records[i].native_offset {
            Some(o) => self.image_at(o).map(Some),
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::simulate_flat;

    fn geom() -> ScanGeometry {
        ScanGeometry::new(700.0, 490.0, 250.0, 300.0, 20, 24).unwrap()
    }

    fn fov() -> FovSpec {
        FovSpec::new(130.0, 100.0).unwrap()
    }

    fn view(kind: ProjKind, img: Image) -> Projection {
        Projection {
            image: img,
            meta: ProjMeta::new(kind, fov(), 0.0),
        }
    }

    fn inside(g: &ScanGeometry) -> Vec<usize> {
        let m = shadow_mask(&fov(), g).unwrap().to_bools();
        (0..m.len()).filter(|&i| m[i]).collect()
    }

    #[test]
    fn compose_open_field_is_one() {
        let g = geom();
        let f = simulate_flat(&g, &fov(), 1e4).unwrap();
        let p = view(ProjKind::Primary, f.image.clone());
        let s = view(ProjKind::Scatter, Image::zeros(24, 20));
        let t = compose_measurement(&p, &s, &f, &g).unwrap();
        let m = shadow_mask(&fov(), &g).unwrap();
        for r in 0..24 {
            for c in 0..20 {
                let want = if m.contains(r, c) { 1.0 } else { 0.0 };
                assert_eq!(t.get(r, c), want);
            }
        }
        let lin = linearize(&t, &m, EPS_FLOOR);
        assert!(lin.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compose_examples() {
        let g = geom();
        let f = simulate_flat(&g, &fov(), 1e4).unwrap();
        let half = view(ProjKind::Scatter, f.image.map(|v| v / 2.0));
        let zero_p = view(ProjKind::Primary, Image::zeros(24, 20));
        let t = compose_measurement(&zero_p, &half, &f, &g).unwrap();
        for i in inside(&g) {
            assert!((t.data[i] - 0.5).abs() < 1e-6);
        }
        let e2 = (-2.0f64).exp();
        let p = view(ProjKind::Primary, f.image.map(|v| (v as f64 * e2) as f32));
        let zero_s = view(ProjKind::Scatter, Image::zeros(24, 20));
        let t = compose_measurement(&p, &zero_s, &f, &g).unwrap();
        let m = shadow_mask(&fov(), &g).unwrap();
        let lin = linearize(&t, &m, EPS_FLOOR);
        for i in inside(&g) {
            assert!((t.data[i] as f64 - 0.135_335).abs() < 1e-5);
            assert!((lin.data[i] - 2.0).abs() < 1e-5);
        }
    }

    #[test]
    fn linearize_floor() {
        let g = geom();
        let m = shadow_mask(&fov(), &g).unwrap();
        let lin = linearize(&Image::zeros(24, 20), &m, 1e-6);
        for i in inside(&g) {
            assert!((lin.data[i] - 13.815_51).abs() < 1e-4);
        }
    }

    #[test]
    fn bad_flat_is_rejected() {
        let g = geom();
        let mut f = simulate_flat(&g, &fov(), 1e4).unwrap();
        let i = inside(&g)[3];
        f.image.data[i] = 0.0;
        let s = view(ProjKind::Scatter, Image::zeros(24, 20));
        assert!(matches!(normalize_target(&s, &f, &g), Err(Error::Numerical(_))));
    }

    #[test]
    fn target_examples_and_subtraction_identity() {
        let g = geom();
        let f = simulate_flat(&g, &fov(), 1e4).unwrap();
        let zero = view(ProjKind::Scatter, Image::zeros(24, 20));
        assert!(normalize_target(&zero, &f, &g).unwrap().data.iter().all(|&v| v == 0.0));
        let full = view(ProjKind::Scatter, f.image.clone());
        let y = normalize_target(&full, &f, &g).unwrap();
        for i in inside(&g) {
            assert_eq!(y.data[i], 1.0);
        }
        let s = view(
            ProjKind::Scatter,
            Image::from_fn(24, 20, |r, c| 300.0 + (r * 20 + c) as f32),
        );
        let s_half = view(ProjKind::Scatter, s.image.map(|v| v / 2.0));
        let y1 = normalize_target(&s, &f, &g).unwrap();
        let y2 = normalize_target(&s_half, &f, &g).unwrap();
        for i in 0..y1.data.len() {
            assert!((y1.data[i] / 2.0 - y2.data[i]).abs() <= 1e-7 * y1.data[i].abs());
        }
        let p = view(ProjKind::Primary, f.image.map(|v| 0.3 * v + 2.0));
        let t = compose_measurement(&p, &s, &f, &g).unwrap();
        for i in inside(&g) {
            let pf = p.image.data[i] as f64 / f.image.data[i] as f64;
            assert!((t.data[i] as f64 - y1.data[i] as f64 - pf).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_views_are_rejected() {
        let g = geom();
        let f = simulate_flat(&g, &fov(), 1e4).unwrap();
        let p = view(ProjKind::Primary, f.image.clone());
        let mut s = view(ProjKind::Scatter, Image::zeros(24, 20));
        s.meta.angle_deg = 2.1;
        assert!(compose_measurement(&p, &s, &f, &g).is_err());
        let small = view(ProjKind::Scatter, Image::zeros(4, 4));
        assert!(matches!(normalize_target(&small, &f, &g), Err(Error::Shape(_))));
    }

    #[test]
    fn manifest_tsv_round_trip() {
        let g = geom();
        let rec = |i: usize, split: Split, native: Option<u64>| ManifestRecord {
            index: i,
            meta: SampleMeta {
                split,
                phantom: 1,
                fov: fov(),
                angle_deg: 0.42 * i as f64,
                k: 3,
            },
            aux: aux_values(&fov(), &g).unwrap(),
            input_offset: 100 * i as u64,
            target_offset: 100 * i as u64 + 50,
            native_offset: native,
        };
        let m = DatasetManifest {
            split: Split::Test,
            canonical: (12, 10),
            eps_floor: EPS_FLOOR,
            noise_levels: vec![3],
            geometry: g,
            records: vec![rec(0, Split::Test, Some(7)), rec(1, Split::Test, None)],
        };
        let text = m.to_tsv();
        let back = DatasetManifest::from_tsv(&text, Path::new("m.tsv")).unwrap();
        assert_eq!(back, m);
        let truncated: String = text.lines().take(text.lines().count() - 1).collect::<Vec<_>>().join("\n");
        assert!(DatasetManifest::from_tsv(&truncated, Path::new("m.tsv")).is_err());
    }
}
