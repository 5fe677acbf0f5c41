//! Losses, optimizer and the training loop.
//!
//! Loss per batch: `mse + λ_hf · hf`, both averaged over every pixel of the
//! batch. The sample order depends only on the seed and the number of
//! training samples, so both model kinds see the same sequence; its SHA-256
//! is logged for checking.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{aux_vector, save_checkpoint, Graph, ModelConfig, ModelKind, Tensor, UNet};

/// `(1/N) Σ (Y − Ŷ)²`.
pub fn mse_loss(pred: &[f32], target: &[f32]) -> f64 {
    assert_eq!(pred.len(), target.len(), "mse of mismatched buffers");
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    s / pred.len() as f64
}

/// Adds `scale · d mse / d pred` into `grad`.
fn mse_grad(pred: &[f32], target: &[f32], scale: f64, grad: &mut [f64]) {
    let k = 2.0 * scale / pred.len() as f64;
    for ((g, &p), &t) in grad.iter_mut().zip(pred).zip(target) {
        *g += k * (p as f64 - t as f64);
    }
}

/// `(1/N) Σ sqrt(∇x² + ∇y² + ε)` over `count` images of `rows × cols`, with
/// forward differences that are zero on the last column (∇x) and last row
/// (∇y).
pub fn hf_loss(pred: &[f32], rows: usize, cols: usize, eps: f64) -> f64 {
    hf_terms(pred, rows, cols, eps, None)
}

fn hf_terms(pred: &[f32], rows: usize, cols: usize, eps: f64, mut grad: Option<(&mut [f64], f64)>) -> f64 {
    let plane = rows * cols;
    assert!(plane > 0 && pred.len().is_multiple_of(plane), "hf loss on a ragged buffer");
    let n = pred.len() as f64;
    let mut total = 0.0;
    for (img_idx, img) in pred.chunks(plane).enumerate() {
        let base = img_idx * plane;
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                let v = img[i] as f64;
                let dx = if c + 1 < cols { img[i + 1] as f64 - v } else { 0.0 };
                let dy = if r + 1 < rows { img[i + cols] as f64 - v } else { 0.0 };
                let s = (dx * dx + dy * dy + eps).sqrt();
                total += s;
                if let Some((g, scale)) = grad.as_mut() {
                    let k = *scale / (n * s);
                    if c + 1 < cols {
                        g[base + i + 1] += k * dx;
                        g[base + i] -= k * dx;
                    }
                    if r + 1 < rows {
                        g[base + i + cols] += k * dy;
                        g[base + i] -= k * dy;
                    }
                }
            }
        }
    }
    total / n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub mse: f64,
    pub hf: f64,
}

/// Loss of a `(N, 1, H, W)` prediction and its gradient with respect to the
/// prediction.
pub fn combined_loss(pred: &Tensor, target: &[f32], lambda_hf: f64, eps: f64) -> (LossTerms, Vec<f32>) {
    let [_, _, h, w] = pred.shape;
    let mse = mse_loss(&pred.data, target);
    let mut g = vec![0.0f64; pred.len()];
    mse_grad(&pred.data, target, 1.0, &mut g);
    let hf = if lambda_hf > 0.0 {
        hf_terms(&pred.data, h, w, eps, Some((&mut g, lambda_hf)))
    } else {
        hf_loss(&pred.data, h, w, eps)
    };
    let terms = LossTerms {
        total: mse + lambda_hf * hf,
        mse,
        hf,
    };
    (terms, g.into_iter().map(|v| v as f32).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub lambda_hf: f64,
    pub hf_eps: f64,
    /// Factor between flat-normalized scatter and network units. Scatter
    /// fractions are around 1e-2; unscaled, the edge term outweighs the MSE
    /// and training collapses to a flat output.
    pub target_scale: f32,
    /// Intermediate checkpoint period in steps; 0 disables.
    pub checkpoint_every: u64,
    /// Validation period in steps; 0 disables.
    pub validate_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            steps: 2000,
            seed: 1,
            lambda_hf: 1.0,
            hf_eps: 1e-6,
            target_scale: 100.0,
            checkpoint_every: 500,
            validate_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch_size and steps must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.adam_eps > 0.0) || !(self.hf_eps > 0.0) {
            return Err(Error::Config("lr, adam_eps and hf_eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.target_scale > 0.0 && self.target_scale.is_finite()) {
            return Err(Error::Config("target_scale must be positive and finite".into()));
        }
        if !(self.lambda_hf >= 0.0) {
            return Err(Error::Config("lambda_hf must be >= 0".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &[Tensor], cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.lr,
            b1: cfg.beta1,
            b2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Vec<f32>]) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        let (b1, b2) = (self.b1 as f32, self.b2 as f32);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.data.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p.data[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// Deterministic epoch-wise shuffling of `0..n`, shared by every model kind.
#[derive(Debug, Clone)]
pub struct SampleOrder {
    n: usize,
    seed: u64,
    epoch: u64,
    perm: Vec<usize>,
    pos: usize,
    hasher: Sha256,
}

impl SampleOrder {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut o = SampleOrder {
            n,
            seed,
            epoch: 0,
            perm: Vec::new(),
            pos: 0,
            hasher: Sha256::new(),
        };
        o.shuffle();
        o
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch + 1);
        self.perm = (0..self.n).collect();
        for i in (1..self.n).rev() {
            self.perm.swap(i, rng.random_range(0..=i));
        }
        self.pos = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.n {
                self.epoch += 1;
                self.shuffle();
            }
            let i = self.perm[self.pos];
            self.pos += 1;
            self.hasher.update((i as u64).to_le_bytes());
            out.push(i);
        }
        out
    }

    /// Hex SHA-256 of every index handed out so far.
    pub fn digest(&self) -> String {
        let d = self.hasher.clone().finalize();
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Stack samples into `(N, 1, H, W)` input and target tensors plus aux values.
pub fn stack_batch(samples: &[&Sample]) -> Result<(Tensor, Vec<f32>, Vec<Vec<f32>>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("empty batch".into()))?;
    let (h, w) = (first.input.rows, first.input.cols);
    let mut x = Vec::with_capacity(samples.len() * h * w);
    let mut y = Vec::with_capacity(samples.len() * h * w);
    let mut aux = Vec::with_capacity(samples.len());
    for s in samples {
        if !s.input.same_shape(&first.input) || !s.target.same_shape(&first.input) {
            return Err(Error::Shape("batch mixes image shapes".into()));
        }
        x.extend_from_slice(&s.input.data);
        y.extend_from_slice(&s.target.data);
        aux.push(aux_vector(&s.aux));
    }
    Ok((Tensor::from_vec([samples.len(), 1, h, w], x)?, y, aux))
}

/// Targets in the units the network is trained in.
pub fn scale_targets(model: &UNet, y: &mut [f32]) {
    let s = model.config().target_scale;
    if s != 1.0 {
        y.iter_mut().for_each(|v| *v *= s);
    }
}

/// Loss and parameter gradients of `model` on one batch.
pub fn loss_and_grads(
    model: &UNet,
    batch: &[&Sample],
    lambda_hf: f64,
    eps: f64,
) -> Result<(LossTerms, Vec<Vec<f32>>)> {
    let (x, mut y, aux) = stack_batch(batch)?;
    scale_targets(model, &mut y);
    let aux = model.config().aux_enabled.then_some(&aux[..]);
    let mut g = Graph::new(model.params());
    let (_, out) = model.forward_graph(&mut g, x, aux)?;
    let (terms, seed) = combined_loss(g.value(out), &y, lambda_hf, eps);
    let grads = g.backward(out, &seed)?;
    Ok((terms, grads.params))
}

/// Loss of `model` over `samples`, evaluated in batches without gradients.
pub fn evaluate_loss(model: &UNet, samples: &[Sample], cfg: &TrainConfig) -> Result<LossTerms> {
    let mut acc = LossTerms {
        total: 0.0,
        mse: 0.0,
        hf: 0.0,
    };
    if samples.is_empty() {
        return Ok(acc);
    }
    for chunk in samples.chunks(cfg.batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, mut y, aux) = stack_batch(&refs)?;
        scale_targets(model, &mut y);
        let aux = model.config().aux_enabled.then_some(&aux[..]);
        let pred = model.forward(&x, aux)?;
        let (t, _) = combined_loss(&pred, &y, cfg.lambda_hf, cfg.hf_eps);
        let wgt = chunk.len() as f64 / samples.len() as f64;
        acc.total += wgt * t.total;
        acc.mse += wgt * t.mse;
        acc.hf += wgt * t.hf;
    }
    Ok(acc)
}

/// Stepwise optimizer state over an in-memory sample set.
pub struct Trainer<'a> {
    model: UNet,
    adam: Adam,
    cfg: TrainConfig,
    samples: &'a [Sample],
    order: SampleOrder,
    step: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(model: UNet, samples: &'a [Sample], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::Config("no training samples".into()));
        }
        Ok(Trainer {
            adam: Adam::new(model.params(), cfg),
            model,
            cfg: cfg.clone(),
            samples,
            order: SampleOrder::new(samples.len(), cfg.seed),
            step: 0,
        })
    }

    pub fn model(&self) -> &UNet {
        &self.model
    }

    pub fn into_model(self) -> UNet {
        self.model
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn order_digest(&self) -> String {
        self.order.digest()
    }

    /// One optimizer step. A non-finite loss aborts with the batch listed.
    pub fn step(&mut self) -> Result<LossTerms> {
        let idx = self.order.next_batch(self.cfg.batch_size);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &self.samples[i]).collect();
        let (terms, grads) = loss_and_grads(&self.model, &batch, self.cfg.lambda_hf, self.cfg.hf_eps)?;
        let grads_finite = grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
        if !terms.total.is_finite() || !grads_finite {
            let listing: Vec<String> = idx
                .iter()
                .map(|&i| {
                    let m = &self.samples[i].meta;
                    format!(
                        "sample {i}: phantom {} fov {} angle {} k {}",
                        m.phantom,
                        m.fov.label(),
                        m.angle_deg,
                        m.k
                    )
                })
                .collect();
            return Err(Error::Numerical(format!(
                "non-finite loss {} at step {}; batch:\n  {}",
                terms.total,
                self.step + 1,
                listing.join("\n  ")
            )));
        }
        self.adam.update(self.model.params_mut(), &grads);
        self.step += 1;
        Ok(terms)
    }
}

/// Split off the validation holdout: views of the first phantom at the
/// largest training FOV (by diameter, then height).
pub fn split_validation(samples: Vec<Sample>) -> (Vec<Sample>, Vec<Sample>) {
    let Some(phantom) = samples.iter().map(|s| s.meta.phantom).min() else {
        return (samples, Vec::new());
    };
    let largest = samples
        .iter()
        .map(|s| s.meta.fov.key())
        .max()
        .expect("non-empty");
    let (val, train): (Vec<Sample>, Vec<Sample>) = samples
        .into_iter()
        .partition(|s| s.meta.phantom == phantom && s.meta.fov.key() == largest);
    (train, val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub kind: ModelKind,
    pub steps: u64,
    pub seed: u64,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_validation_step: Option<u64>,
    pub best_validation_loss: Option<f64>,
    pub sample_order_sha256: String,
    pub final_checkpoint: PathBuf,
    /// Wall time from model initialization to the final checkpoint. The only
    /// field that differs between identical runs.
    #[serde(default)]
    pub wall_secs: f64,
}

pub const LOSS_LOG: &str = "loss.tsv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const TRAIN_SUMMARY: &str = "train_summary.json";

/// Train a fresh model of `kind` on `samples`, writing the loss log,
/// periodic checkpoints and the final checkpoint into `out_dir`.
pub fn train_samples(
    kind: ModelKind,
    widths: &[usize],
    samples: Vec<Sample>,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<(UNet, TrainSummary)> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_path = out_dir.join("train_config.json");
    let echo = serde_json::json!({ "kind": kind, "widths": widths, "train": cfg });
    fs::write(&cfg_path, serde_json::to_string_pretty(&echo).expect("json"))
        .map_err(|e| Error::io(&cfg_path, e))?;

    let started = Instant::now();
    let (train, val) = split_validation(samples);
    let arch = ModelConfig {
        target_scale: cfg.target_scale,
        ..ModelConfig::for_kind(kind, widths.to_vec())
    };
    let model = UNet::new(arch, cfg.seed)?;
    let mut trainer = Trainer::new(model, &train, cfg)?;
    let log_path = out_dir.join(LOSS_LOG);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut lines = String::from("step\tloss\tmse\thf\tval_loss\n");
    let mut initial = f64::NAN;
    let mut last = f64::NAN;
    let mut best: Option<(u64, f64)> = None;
    let result = (|| -> Result<()> {
        for _ in 0..cfg.steps {
            let t = trainer.step()?;
            let step = trainer.steps_done();
            if step == 1 {
                initial = t.total;
            }
            last = t.total;
            let mut val_cell = "-".to_string();
            let validate_now = cfg.validate_every > 0
                && !val.is_empty()
                && (step % cfg.validate_every == 0 || step == cfg.steps);
            if validate_now {
                let v = evaluate_loss(trainer.model(), &val, cfg)?.total;
                if best.is_none_or(|(_, b)| v < b) {
                    best = Some((step, v));
                }
                val_cell = format!("{v:.9e}");
            }
            lines.push_str(&format!(
                "{step}\t{:.9e}\t{:.9e}\t{:.9e}\t{val_cell}\n",
                t.total, t.mse, t.hf
            ));
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
                let p = out_dir.join(format!("step_{step:06}.ckpt"));
                save_checkpoint(trainer.model(), cfg.seed, step, false, &p)?;
            }
        }
        Ok(())
    })();
    log.write_all(lines.as_bytes()).map_err(|e| Error::io(&log_path, e))?;
    result?;

    let final_path = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(trainer.model(), cfg.seed, trainer.steps_done(), true, &final_path)?;
    let summary = TrainSummary {
        kind,
        steps: trainer.steps_done(),
        seed: cfg.seed,
        train_samples: train.len(),
        validation_samples: val.len(),
        initial_loss: initial,
        final_loss: last,
        best_validation_step: best.map(|b| b.0),
        best_validation_loss: best.map(|b| b.1),
        sample_order_sha256: trainer.order_digest(),
        final_checkpoint: PathBuf::from(FINAL_CHECKPOINT),
        wall_secs: started.elapsed().as_secs_f64(),
    };
    let sp = out_dir.join(TRAIN_SUMMARY);
    fs::write(&sp, serde_json::to_string_pretty(&summary).expect("json"))
        .map_err(|e| Error::io(&sp, e))?;
    Ok((trainer.into_model(), summary))
}

/// Train on the train split of a dataset directory.
pub fn train(
    kind: ModelKind,
    widths: &[usize],
    data: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<(UNet, TrainSummary)> {
    if data.manifest.split != crate::geometry::Split::Train {
        return Err(Error::Config(format!(
            "training needs a train split, {} holds {}",
            data.dir.display(),
            data.manifest.split.as_str()
        )));
    }
    train_samples(kind, widths, data.samples()?, cfg, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SampleMeta;
    use crate::geometry::{AuxPair, FovSpec, Split};
    use crate::image::Image;

    fn naive_mse(a: &[f32], b: &[f32]) -> f64 {
        let mut s = 0.0f64;
        for i in 0..a.len() {
            s += (a[i] as f64 - b[i] as f64).powi(2);
        }
        s / a.len() as f64
    }

    fn naive_hf(img: &[f32], rows: usize, cols: usize, eps: f64) -> f64 {
        let at = |r: usize, c: usize| img[r * cols + c] as f64;
        let mut s = 0.0;
        for r in 0..rows {
            for c in 0..cols {
                let dx = if c == cols - 1 { 0.0 } else { at(r, c + 1) - at(r, c) };
                let dy = if r == rows - 1 { 0.0 } else { at(r + 1, c) - at(r, c) };
                s += (dx * dx + dy * dy + eps).sqrt();
            }
        }
        s / (rows * cols) as f64
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn mse_examples() {
        let y = rand_vec(30, 1);
        assert_eq!(mse_loss(&y, &y), 0.0);
        assert_eq!(mse_loss(&[2.0; 9], &[0.0; 9]), 4.0);
        let p = rand_vec(30, 2);
        assert!((mse_loss(&p, &y) - naive_mse(&p, &y)).abs() < 1e-7);
    }

    #[test]
    fn hf_examples() {
        let eps = 1e-6;
        assert!((hf_loss(&[0.4; 20], 4, 5, eps) - eps.sqrt()).abs() < 1e-12);
        // vertical step edge of height 1 on an 8x8 image: one column of
        // pixels sees ∇x = 1 on every row
        let m = 8;
        let step: Vec<f32> = (0..m * m).map(|i| if i % m >= 4 { 1.0 } else { 0.0 }).collect();
        let want = (m as f64 * (1.0 + eps).sqrt() + (m * m - m) as f64 * eps.sqrt()) / (m * m) as f64;
        assert!((hf_loss(&step, m, m, eps) - want).abs() < 1e-12);
        assert!((hf_loss(&step, m, m, eps) - naive_hf(&step, m, m, eps)).abs() < 1e-12);
        let r = rand_vec(35, 3);
        assert!((hf_loss(&r, 5, 7, eps) - naive_hf(&r, 5, 7, eps)).abs() < 1e-9);
        let doubled: Vec<f32> = r.iter().map(|v| 2.0 * v).collect();
        assert!(hf_loss(&doubled, 5, 7, eps) >= hf_loss(&r, 5, 7, eps));
    }

    #[test]
    fn combined_loss_gradient_matches_finite_differences() {
        let (h, w) = (5, 6);
        let pred = Tensor::from_vec([2, 1, h, w], rand_vec(2 * h * w, 4)).unwrap();
        let target = rand_vec(2 * h * w, 5);
        let (_, g) = combined_loss(&pred, &target, 1.0, 1e-3);
        for i in 0..pred.len() {
            let mut p = pred.clone();
            let mut m = pred.clone();
            p.data[i] += 1e-2;
            m.data[i] -= 1e-2;
            let lp = combined_loss(&p, &target, 1.0, 1e-3).0.total;
            let lm = combined_loss(&m, &target, 1.0, 1e-3).0.total;
            let num = (lp - lm) / (p.data[i] as f64 - m.data[i] as f64);
            let err = (g[i] as f64 - num).abs() / (g[i] as f64).abs().max(num.abs()).max(1e-3);
            assert!(err < 1e-2, "pixel {i}: {} vs {num}", g[i]);
        }
    }

    #[test]
    fn sample_order_is_a_shared_deterministic_permutation() {
        let mut a = SampleOrder::new(10, 7);
        let mut b = SampleOrder::new(10, 7);
        let first: Vec<usize> = a.next_batch(10);
        let mut sorted = first.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(b.next_batch(4), first[..4].to_vec());
        b.next_batch(6);
        a.next_batch(3);
        b.next_batch(3);
        assert_eq!(a.digest(), b.digest());
        assert_ne!(SampleOrder::new(10, 8).next_batch(10), first);
    }

    fn synthetic(n: usize, rows: usize, cols: usize, target: impl Fn(usize, usize, usize) -> f32) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                let noise: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(0.0..2.0)).collect();
                Sample {
                    input: Image::from_vec(rows, cols, noise).unwrap(),
                    target: Image::from_fn(rows, cols, |r, c| target(i, r, c)),
                    aux: AuxPair {
                        x: 0.5 + 0.01 * i as f64,
                        y: 0.7,
                    },
                    meta: SampleMeta {
                        split: Split::Train,
                        phantom: (i % 2) as u32,
                        fov: FovSpec::new(120.0 + 20.0 * (i % 3) as f64, 30.0).unwrap(),
                        angle_deg: i as f64,
                        k: 1,
                    },
                }
            })
            .collect()
    }

    #[test]
    fn training_is_deterministic_and_descends() {
        let samples = synthetic(12, 8, 8, |i, r, c| 0.1 * (i % 3) as f32 + 0.01 * (r + c) as f32);
        let cfg = TrainConfig {
            steps: 60,
            batch_size: 4,
            checkpoint_every: 25,
            validate_every: 20,
            ..Default::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let (m1, s1) = train_samples(ModelKind::Auxnet, &[4, 8], samples.clone(), &cfg, d1.path()).unwrap();
        let (m2, s2) = train_samples(ModelKind::Auxnet, &[4, 8], samples.clone(), &cfg, d2.path()).unwrap();
        assert_eq!(m1, m2);
        let c1 = fs::read(d1.path().join(FINAL_CHECKPOINT)).unwrap();
        let c2 = fs::read(d2.path().join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(c1, c2);
        assert!(s1.final_loss < s1.initial_loss);
        assert_eq!(s1.validation_samples, 2);
        assert!(d1.path().join("step_000025.ckpt").exists());
        let d3 = tempfile::tempdir().unwrap();
        let (_, s3) = train_samples(ModelKind::Unet, &[4, 8], samples, &cfg, d3.path()).unwrap();
        assert_eq!(s3.sample_order_sha256, s2.sample_order_sha256);
        let log = fs::read_to_string(d1.path().join(LOSS_LOG)).unwrap();
        assert_eq!(log.lines().count(), 61);
    }

    #[test]
    fn nan_loss_aborts_with_batch_listing() {
        let mut samples = synthetic(4, 8, 8, |_, _, _| 0.5);
        samples[2].target.data[5] = f32::NAN;
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 4,
            ..Default::default()
        };
        let model = UNet::new(ModelConfig::new(vec![4, 8], false), 1).unwrap();
        let mut t = Trainer::new(model, &samples, &cfg).unwrap();
        match t.step() {
            Err(Error::Numerical(msg)) => assert!(msg.contains("sample 2")),
            other => panic!("expected numerical fault, got {other:?}"),
        }
    }

    #[test]
    fn validation_holdout_is_first_phantom_largest_fov() {
        let s = synthetic(12, 4, 4, |_, _, _| 0.0);
        let (train, val) = split_validation(s);
        assert_eq!(train.len() + val.len(), 12);
        assert!(val.iter().all(|v| v.meta.phantom == 0 && v.meta.fov.diameter == 160.0));
        assert!(!val.is_empty());
    }
}
