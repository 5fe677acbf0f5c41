//! Per-FOV evaluation of scatter estimates against Monte Carlo ground truth.
//!
//! Errors are computed on the native detector grid and only inside the FOV
//! shadow; pixels outside it are zero by construction in both images.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{canonicalize, linearize, resize, Dataset, EPS_FLOOR};
use crate::error::{Error, Result};
use crate::geometry::{aux_values, shadow_mask, FovSpec, ScanGeometry, ShadowMask, Split};
use crate::image::{resize_masked, Image};
use crate::model::{aux_vector, Tensor, UNet};
use crate::plot::{grouped_bars, BarSeries};

/// Floor on the ground truth in the MAPE denominator.
pub const DELTA_FLOOR: f64 = 1e-6;

/// Bilinear upsampling of a canonical-shape prediction to the detector grid.
pub fn upsample_prediction(pred: &Image, rows: usize, cols: usize) -> Result<Image> {
    resize(pred, rows, cols)
}

/// Upsample using only taps inside the canonical support `canon_mask`, then
/// clear everything outside the native shadow. Shadow pixels with no
/// supported tap fall back to plain bilinear upsampling.
pub fn upsample_in_shadow(pred: &Image, canon_mask: &[bool], native: &ShadowMask) -> Result<Image> {
    let (masked, support) = resize_masked(pred, canon_mask, native.rows, native.cols, f32::MIN_POSITIVE)?;
    let plain = upsample_prediction(pred, native.rows, native.cols)?;
    let mut out = Image::zeros(native.rows, native.cols);
    for r in native.row_range.0..native.row_range.1 {
        for c in native.col_range.0..native.col_range.1 {
            let i = r * native.cols + c;
            out.data[i] = if support[i] { masked.data[i] } else { plain.data[i] };
        }
    }
    Ok(out)
}

fn check_pair(pred: &Image, gt: &Image, region: &ShadowMask) -> Result<()> {
    pred.ensure_same_shape(gt, "prediction vs ground truth")?;
    if region.rows != gt.rows || region.cols != gt.cols {
        return Err(Error::Shape(format!(
            "region mask {}x{} for {}x{} images",
            region.rows, region.cols, gt.rows, gt.cols
        )));
    }
    Ok(())
}

/// `(100/N') Σ |pred − gt| / max(gt, δ)` over the `N'` pixels of `region`.
pub fn mape(pred: &Image, gt: &Image, region: &ShadowMask, delta: f64) -> Result<f64> {
    check_pair(pred, gt, region)?;
    let n = region.count();
    if n == 0 {
        return Ok(0.0);
    }
    let mut s = 0.0f64;
    for r in region.row_range.0..region.row_range.1 {
        let base = r * gt.cols;
        for c in region.col_range.0..region.col_range.1 {
            let g = gt.data[base + c] as f64;
            s += (pred.data[base + c] as f64 - g).abs() / g.max(delta);
        }
    }
    Ok(100.0 * s / n as f64)
}

/// `(1/N') Σ (pred − gt)²` over the `N'` pixels of `region`.
pub fn mse(pred: &Image, gt: &Image, region: &ShadowMask) -> Result<f64> {
    check_pair(pred, gt, region)?;
    let n = region.count();
    if n == 0 {
        return Ok(0.0);
    }
    let mut s = 0.0f64;
    for r in region.row_range.0..region.row_range.1 {
        let base = r * gt.cols;
        for c in region.col_range.0..region.col_range.1 {
            let d = pred.data[base + c] as f64 - gt.data[base + c] as f64;
            s += d * d;
        }
    }
    Ok(s / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub fov: FovSpec,
    pub model: String,
    /// Percent.
    pub mape: f64,
    /// Squared flat-normalized intensity.
    pub mse: f64,
    pub n_views: usize,
    pub delta_floor: f64,
}

/// Source of native-resolution scatter estimates for dataset records.
pub trait Predictor: Sync {
    fn name(&self) -> &str;
    fn predict(&self, data: &Dataset, records: &[usize]) -> Result<Vec<Image>>;
}

/// Returns the stored ground truth.
pub struct OraclePredictor;

/// Predicts zero scatter.
pub struct ZeroPredictor;

/// A trained network; canonical outputs are upsampled inside the shadow.
pub struct NetworkPredictor {
    pub model: UNet,
    pub label: String,
}

fn native_target(data: &Dataset, i: usize) -> Result<Image> {
    data.native_target(i)?.ok_or_else(|| {
        Error::Config(format!(
            "dataset {} has no native-resolution targets; rebuild it with keep_native",
            data.dir.display()
        ))
    })
}

impl Predictor for OraclePredictor {
    fn name(&self) -> &str {
        "oracle"
    }

    fn predict(&self, data: &Dataset, records: &[usize]) -> Result<Vec<Image>> {
        records.iter().map(|&i| native_target(data, i)).collect()
    }
}

impl Predictor for ZeroPredictor {
    fn name(&self) -> &str {
        "zero"
    }

    fn predict(&self, data: &Dataset, records: &[usize]) -> Result<Vec<Image>> {
        let g = &data.manifest.geometry;
        Ok(records.iter().map(|_| Image::zeros(g.det_rows(), g.det_cols())).collect())
    }
}

impl NetworkPredictor {
    /// Canonical-shape network outputs for a batch of canonical inputs.
    pub fn forward_canonical(&self, inputs: &[&Image], aux: &[Vec<f32>]) -> Result<Vec<Image>> {
        let Some(first) = inputs.first() else {
            return Ok(Vec::new());
        };
        let (h, w) = (first.rows, first.cols);
        let mut x = Vec::with_capacity(inputs.len() * h * w);
        for img in inputs {
            if img.rows != h || img.cols != w {
                return Err(Error::Shape("batch mixes image shapes".into()));
            }
            x.extend_from_slice(&img.data);
        }
        let x = Tensor::from_vec([inputs.len(), 1, h, w], x)?;
        let aux = self.model.config().aux_enabled.then_some(aux);
        let y = self.model.forward(&x, aux)?;
        let s = self.model.config().target_scale;
        Ok(y.data
            .chunks(h * w)
            .map(|c| Image { rows: h, cols: w, data: c.iter().map(|v| v / s).collect() })
            .collect())
    }

    /// Native-resolution scatter estimate for one flat-normalized measurement
    /// `t = (P + S) / F` of a view with the given FOV.
    pub fn estimate_view(
        &self,
        t: &Image,
        fov: &FovSpec,
        geom: &ScanGeometry,
        canonical: (usize, usize),
    ) -> Result<Image> {
        let mask = shadow_mask(fov, geom)?;
        let input = linearize(t, &mask, EPS_FLOOR);
        let (x, canon_mask) = canonicalize(&input, &mask, canonical.0, canonical.1)?;
        let aux = vec![aux_vector(&aux_values(fov, geom)?)];
        let y = self.forward_canonical(&[&x], &aux)?;
        upsample_in_shadow(&y[0], &canon_mask, &mask)
    }
}

impl Predictor for NetworkPredictor {
    fn name(&self) -> &str {
        &self.label
    }

    fn predict(&self, data: &Dataset, records: &[usize]) -> Result<Vec<Image>> {
        let geom = &data.manifest.geometry;
        let (cr, cc) = data.manifest.canonical;
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(8) {
            let samples = chunk.iter().map(|&i| data.sample(i)).collect::<Result<Vec<_>>>()?;
            let inputs: Vec<&Image> = samples.iter().map(|s| &s.input).collect();
            let aux: Vec<Vec<f32>> = samples.iter().map(|s| aux_vector(&s.aux)).collect();
            let preds = self.forward_canonical(&inputs, &aux)?;
            for (p, s) in preds.iter().zip(&samples) {
                let mask = shadow_mask(&s.meta.fov, geom)?;
                let canon_mask = canonicalize(&Image::zeros(mask.rows, mask.cols), &mask, cr, cc)?.1;
                out.push(upsample_in_shadow(p, &canon_mask, &mask)?);
            }
        }
        Ok(out)
    }
}

/// One record per FOV of `expected`, in that order: view-averaged MAPE and
/// MSE of `predictor` over every test view of the FOV.
pub fn evaluate(
    predictor: &dyn Predictor,
    data: &Dataset,
    expected: &[FovSpec],
    delta: f64,
) -> Result<Vec<EvalRecord>> {
    if data.manifest.split != Split::Test {
        return Err(Error::Config(format!(
            "evaluation needs a test split, {} holds {}",
            data.dir.display(),
            data.manifest.split.as_str()
        )));
    }
    let mut by_fov: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, r) in data.manifest.records.iter().enumerate() {
        by_fov.entry(r.meta.fov.key()).or_default().push(i);
    }
    let missing: Vec<String> = expected
        .iter()
        .filter(|f| !by_fov.contains_key(&f.key()))
        .map(|f| format!("test FOV {}", f.label()))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Missing(missing));
    }
    let geom = data.manifest.geometry;
    let mut records = Vec::with_capacity(expected.len());
    for fov in expected {
        let idx = &by_fov[&fov.key()];
        let preds = predictor.predict(data, idx)?;
        let mask = shadow_mask(fov, &geom)?;
        let scores: Vec<(f64, f64)> = idx
            .par_iter()
            .zip(preds.par_iter())
            .map(|(&i, p)| {
                let gt = native_target(data, i)?;
                Ok((mape(p, &gt, &mask, delta)?, mse(p, &gt, &mask)?))
            })
            .collect::<Result<_>>()?;
        let n = scores.len() as f64;
        records.push(EvalRecord {
            fov: *fov,
            model: predictor.name().to_string(),
            mape: scores.iter().map(|s| s.0).sum::<f64>() / n,
            mse: scores.iter().map(|s| s.1).sum::<f64>() / n,
            n_views: scores.len(),
            delta_floor: delta,
        });
    }
    Ok(records)
}

const TABLE_COLUMNS: &str = "model\tdiameter_mm\theight_mm\tmape_percent\tmse\tn_views\tdelta_floor";

pub fn eval_table(records: &[EvalRecord]) -> String {
    let mut s = String::from(TABLE_COLUMNS);
    s.push('\n');
    for r in records {
        s.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{:.6e}\t{}\t{:e}\n",
            r.model, r.fov.diameter, r.fov.height, r.mape, r.mse, r.n_views, r.delta_floor
        ));
    }
    s
}

pub fn write_eval_table(path: &Path, records: &[EvalRecord]) -> Result<()> {
    fs::write(path, eval_table(records)).map_err(|e| Error::io(path, e))
}

pub fn read_eval_table(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(TABLE_COLUMNS) {
        return Err(Error::format(path, "unexpected column header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let bad = || Error::format(path, format!("bad row {l:?}"));
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(EvalRecord {
                model: f[0].to_string(),
                fov: FovSpec::new(num(f[1])?, num(f[2])?).map_err(|_| bad())?,
                mape: num(f[3])?,
                mse: num(f[4])?,
                n_views: f[5].parse().map_err(|_| bad())?,
                delta_floor: num(f[6])?,
            })
        })
        .collect()
}

/// Mean MAPE of `model`, optionally restricted to one diameter.
pub fn mean_mape(records: &[EvalRecord], model: &str, diameter: Option<f64>) -> Option<f64> {
    let v: Vec<f64> = records
        .iter()
        .filter(|r| r.model == model && diameter.is_none_or(|d| (r.fov.diameter - d).abs() < 1e-9))
        .map(|r| r.mape)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One grouped bar chart per diameter: heights on the x axis, one bar per
/// model. Writes `mape_d<diameter>.{png,svg}` into `dir`.
pub fn plot_eval(dir: &Path, records: &[EvalRecord]) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut models: Vec<String> = Vec::new();
    for r in records {
        if !models.contains(&r.model) {
            models.push(r.model.clone());
        }
    }
    let mut diameters: BTreeMap<i64, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        diameters.entry(r.fov.key().0).or_default().push(r);
    }
    let mut written = Vec::new();
    for (dkey, rs) in diameters {
        let mut heights: Vec<i64> = rs.iter().map(|r| r.fov.key().1).collect();
        heights.sort_unstable();
        heights.dedup();
        let cats: Vec<String> = heights.iter().map(|h| format!("{}", *h as f64 / 1000.0)).collect();
        let series: Vec<BarSeries> = models
            .iter()
            .map(|m| BarSeries {
                name: m.clone(),
                values: heights
                    .iter()
                    .map(|h| {
                        rs.iter()
                            .find(|r| &r.model == m && r.fov.key().1 == *h)
                            .map_or(f64::NAN, |r| r.mape)
                    })
                    .collect(),
            })
            .collect();
        let d = dkey as f64 / 1000.0;
        let stem = dir.join(format!("mape_d{d}"));
        grouped_bars(&stem, &format!("FOV diameter {d} mm"), "FOV height (mm)", "MAPE (%)", &cats, &series)?;
        written.push(stem);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn full(rows: usize, cols: usize) -> ShadowMask {
        ShadowMask {
            rows,
            cols,
            row_range: (0, rows),
            col_range: (0, cols),
        }
    }

    fn naive_mape(p: &Image, g: &Image, m: &ShadowMask, delta: f64) -> f64 {
        let mut s = 0.0;
        let mut n = 0usize;
        for r in 0..g.rows {
            for c in 0..g.cols {
                if m.contains(r, c) {
                    let gv = g.get(r, c) as f64;
                    s += (p.get(r, c) as f64 - gv).abs() / if gv > delta { gv } else { delta };
                    n += 1;
                }
            }
        }
        100.0 * s / n as f64
    }

    fn naive_mse(p: &Image, g: &Image, m: &ShadowMask) -> f64 {
        let mut s = 0.0;
        let mut n = 0usize;
        for r in 0..g.rows {
            for c in 0..g.cols {
                if m.contains(r, c) {
                    s += (p.get(r, c) as f64 - g.get(r, c) as f64).powi(2);
                    n += 1;
                }
            }
        }
        s / n as f64
    }

    fn random_image(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Image {
        let data = (0..rows * cols).map(|_| rng.random_range(0.0f32..0.5)).collect();
        Image::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn mape_examples() {
        let g = Image::from_fn(6, 5, |r, c| 0.1 + 0.01 * (r + c) as f32);
        let m = full(6, 5);
        assert_eq!(mape(&g, &g, &m, DELTA_FLOOR).unwrap(), 0.0);
        let p = Image::from_fn(6, 5, |r, c| ((0.1 + 0.01 * (r + c) as f32) as f64 * 1.1) as f32);
        assert!((mape(&p, &g, &m, DELTA_FLOOR).unwrap() - 10.0).abs() < 1e-4);
        let z = Image::zeros(6, 5);
        assert!((mape(&z, &g, &m, DELTA_FLOOR).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn metrics_match_naive_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (rows, cols) = (rng.random_range(3..20), rng.random_range(3..20));
            let p = random_image(rows, cols, &mut rng);
            let mut g = random_image(rows, cols, &mut rng);
            g.data[0] = 0.0;
            let r0 = rng.random_range(0..rows - 1);
            let c0 = rng.random_range(0..cols - 1);
            let m = ShadowMask {
                rows,
                cols,
                row_range: (r0, rng.random_range(r0 + 1..=rows)),
                col_range: (c0, rng.random_range(c0 + 1..=cols)),
            };
            let a = mape(&p, &g, &m, DELTA_FLOOR).unwrap();
            let b = naive_mape(&p, &g, &m, DELTA_FLOOR);
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
            assert!((mse(&p, &g, &m).unwrap() - naive_mse(&p, &g, &m)).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_examples() {
        let img = Image::from_fn(4, 5, |r, c| (r * 3 + c) as f32);
        assert_eq!(upsample_prediction(&img, 4, 5).unwrap(), img);
        let k = upsample_prediction(&Image::filled(4, 5, 0.3), 9, 13).unwrap();
        assert!(k.data.iter().all(|&v| v == 0.3));
        let ramp = Image::from_fn(5, 4, |r, c| 0.5 * r as f32 + 0.25 * c as f32);
        let up = upsample_prediction(&ramp, 9, 7).unwrap();
        for r in 0..9 {
            for c in 0..7 {
                let want = 0.5 * (r as f64 * 4.0 / 8.0) + 0.25 * (c as f64 * 3.0 / 6.0);
                assert!((up.get(r, c) as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn downsize_then_upsample_of_constant_is_exact() {
        let c = Image::filled(30, 25, 0.42);
        let small = resize(&c, 12, 10).unwrap();
        assert_eq!(upsample_prediction(&small, 30, 25).unwrap(), c);
    }

    #[test]
    fn shadow_upsample_keeps_constant_inside_and_zero_outside() {
        let native = ShadowMask {
            rows: 30,
            cols: 25,
            row_range: (6, 24),
            col_range: (5, 20),
        };
        let img = Image::from_fn(30, 25, |r, c| if native.contains(r, c) { 0.2 } else { 0.0 });
        let (canon, cmask) = resize_masked(&img, &native.to_bools(), 12, 10, 0.5).unwrap();
        let up = upsample_in_shadow(&canon, &cmask, &native).unwrap();
        for r in 0..30 {
            for c in 0..25 {
                let want = if native.contains(r, c) { 0.2 } else { 0.0 };
                assert!((up.get(r, c) - want).abs() < 1e-6, "({r},{c}) = {}", up.get(r, c));
            }
        }
    }

    #[test]
    fn eval_table_round_trip() {
        let recs = vec![EvalRecord {
            fov: FovSpec::new(130.0, 40.0).unwrap(),
            model: "auxnet".into(),
            mape: 12.345678,
            mse: 1.5e-5,
            n_views: 4,
            delta_floor: DELTA_FLOOR,
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tsv");
        write_eval_table(&p, &recs).unwrap();
        let back = read_eval_table(&p).unwrap();
        assert_eq!(back[0].fov, recs[0].fov);
        assert!((back[0].mape - recs[0].mape).abs() < 1e-6);
        assert_eq!(mean_mape(&back, "auxnet", Some(130.0)), Some(back[0].mape));
        assert_eq!(mean_mape(&back, "unet", None), None);
    }

    proptest! {
        #[test]
        fn mape_and_mse_are_permutation_invariant(seed in 0u64..1000, shift in 1usize..29) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_image(5, 6, &mut rng);
            let g = random_image(5, 6, &mut rng);
            let m = full(5, 6);
            let rot = |img: &Image| {
                let mut d = img.data.clone();
                d.rotate_left(shift);
                Image::from_vec(5, 6, d).unwrap()
            };
            let (a, b) = (mape(&p, &g, &m, DELTA_FLOOR).unwrap(), mape(&rot(&p), &rot(&g), &m, DELTA_FLOOR).unwrap());
            prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
            let (a, b) = (mse(&p, &g, &m).unwrap(), mse(&rot(&p), &rot(&g), &m).unwrap());
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn larger_single_pixel_error_increases_metrics(seed in 0u64..1000, idx in 0usize..30, bump in 0.01f32..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_image(5, 6, &mut rng);
            let g = random_image(5, 6, &mut rng);
            let m = full(5, 6);
            let mut worse = p.clone();
            let e = p.data[idx] - g.data[idx];
            worse.data[idx] = g.data[idx] + if e >= 0.0 { e + bump } else { e - bump };
            prop_assert!(mape(&worse, &g, &m, DELTA_FLOOR).unwrap() > mape(&p, &g, &m, DELTA_FLOOR).unwrap());
            prop_assert!(mse(&worse, &g, &m).unwrap() > mse(&p, &g, &m).unwrap());
        }
    }
}
