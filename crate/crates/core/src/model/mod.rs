//! U-Net scatter estimator and its FOV-conditioned variant (Aux-Net).
//!
//! Both networks share one layer plan. With `aux_enabled`, constant planes
//! holding the normalized FOV size are concatenated after the features at the
//! input of every encoder stage, including the deepest; nothing else changes.

mod tensor;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::AuxPair;

pub use tensor::{Gradients, Graph, Padding, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Unet,
    Auxnet,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Unet => "unet",
            ModelKind::Auxnet => "auxnet",
        }
    }

    pub fn aux_enabled(&self) -> bool {
        matches!(self, ModelKind::Auxnet)
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(ModelKind::Unet),
            "auxnet" => Ok(ModelKind::Auxnet),
            other => Err(Error::Config(format!(
                "unknown model kind '{other}' (expected unet or auxnet)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Encoder stage widths; each is double the previous.
    pub widths: Vec<usize>,
    pub convs_per_stage: usize,
    pub kernel: usize,
    pub aux_enabled: bool,
    pub aux_channels: usize,
    /// The network is trained on targets multiplied by this factor; predictions
    /// are divided by it.
    #[serde(default = "unit_scale")]
    pub target_scale: f32,
}

fn unit_scale() -> f32 {
    1.0
}

impl ModelConfig {
    pub fn new(widths: Vec<usize>, aux_enabled: bool) -> Self {
        ModelConfig {
            in_channels: 1,
            out_channels: 1,
            widths,
            convs_per_stage: 2,
            kernel: 3,
            aux_enabled,
            aux_channels: 2,
            target_scale: 1.0,
        }
    }

    /// Six stages, 16 to 512 channels.
    pub fn full_scale(aux_enabled: bool) -> Self {
        ModelConfig::new(vec![16, 32, 64, 128, 256, 512], aux_enabled)
    }

    /// Three stages, 8 to 32 channels.
    pub fn desk(aux_enabled: bool) -> Self {
        ModelConfig::new(vec![8, 16, 32], aux_enabled)
    }

    pub fn for_kind(kind: ModelKind, widths: Vec<usize>) -> Self {
        ModelConfig::new(widths, kind.aux_enabled())
    }

    pub fn kind(&self) -> ModelKind {
        if self.aux_enabled {
            ModelKind::Auxnet
        } else {
            ModelKind::Unet
        }
    }

    pub fn downsamplings(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    /// Input H and W must be multiples of this.
    pub fn input_divisor(&self) -> usize {
        1 << self.downsamplings()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("model needs at least one stage".into()));
        }
        if self.widths[0] == 0 {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        if self.widths.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::Config(format!(
                "stage widths {:?} must double from stage to stage",
                self.widths
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.convs_per_stage == 0 {
            return Err(Error::Config(
                "channel counts and convs_per_stage must be positive".into(),
            ));
        }
        if !(self.target_scale > 0.0 && self.target_scale.is_finite()) {
            return Err(Error::Config(format!("target_scale {} must be positive and finite", self.target_scale)));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.aux_enabled && self.aux_channels == 0 {
            return Err(Error::Config("aux-enabled model needs aux channels".into()));
        }
        Ok(())
    }

    fn aux_width(&self) -> usize {
        if self.aux_enabled {
            self.aux_channels
        } else {
            0
        }
    }

    /// Convolutions in parameter order.
    pub fn layer_plan(&self) -> Vec<ConvSpec> {
        let k = self.kernel;
        let n = self.widths.len();
        let mut plan = Vec::new();
        for (s, &w) in self.widths.iter().enumerate() {
            let feat_in = if s == 0 { self.in_channels } else { self.widths[s - 1] };
            for c in 0..self.convs_per_stage {
                let (cin, aux_in) = if c == 0 {
                    (feat_in + self.aux_width(), self.aux_width())
                } else {
                    (w, 0)
                };
                plan.push(ConvSpec {
                    name: format!("enc{s}.conv{c}"),
                    cin,
                    cout: w,
                    k,
                    aux_in,
                });
            }
        }
        for s in (0..n - 1).rev() {
            let w = self.widths[s];
            plan.push(ConvSpec {
                name: format!("dec{s}.up"),
                cin: self.widths[s + 1],
                cout: w,
                k: 2,
                aux_in: 0,
            });
            for c in 0..self.convs_per_stage {
                plan.push(ConvSpec {
                    name: format!("dec{s}.conv{c}"),
                    cin: if c == 0 { 2 * w } else { w },
                    cout: w,
                    k,
                    aux_in: 0,
                });
            }
        }
        plan.push(ConvSpec {
            name: "head".into(),
            cin: self.widths[0],
            cout: self.out_channels,
            k: 1,
            aux_in: 0,
        });
        plan
    }
}

/// One convolution of the layer plan. Aux inputs, if any, are the last
/// `aux_in` of its `cin` input channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub aux_in: usize,
}

impl ConvSpec {
    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.k * self.k + self.cout
    }
}

/// Trainable parameters (weights and biases).
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    Ok(config.layer_plan().iter().map(ConvSpec::param_count).sum())
}

/// `(N, 2, H, W)` constant planes: channel 0 holds `x`, channel 1 holds `y`.
pub fn make_aux_channels(aux: AuxPair, like_shape: [usize; 4]) -> Tensor {
    let [n, _, h, w] = like_shape;
    aux_planes(&vec![vec![aux.x as f32, aux.y as f32]; n], h, w)
}

/// One constant plane per aux value, per batch item.
pub fn aux_planes(values: &[Vec<f32>], h: usize, w: usize) -> Tensor {
    let a = values.first().map_or(0, Vec::len);
    let mut t = Tensor::zeros([values.len(), a, h, w]);
    for (i, v) in values.iter().enumerate() {
        for (c, &x) in v.iter().enumerate() {
            let start = (i * a + c) * h * w;
            t.data[start..start + h * w].fill(x);
        }
    }
    t
}

/// Aux values fed to the network for one sample.
pub fn aux_vector(aux: &AuxPair) -> Vec<f32> {
    vec![aux.x as f32, aux.y as f32]
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    config: ModelConfig,
    /// Weight and bias of each planned convolution, interleaved.
    params: Vec<Tensor>,
}

impl UNet {
    /// He-uniform weights and zero biases from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for spec in config.layer_plan() {
            let fan_in = (spec.cin * spec.k * spec.k) as f64;
            let bound = (6.0 / fan_in).sqrt() as f32;
            let n = spec.cout * spec.cin * spec.k * spec.k;
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            params.push(Tensor {
                shape: [spec.cout, spec.cin, spec.k, spec.k],
                data,
            });
            params.push(Tensor::zeros([1, spec.cout, 1, 1]));
        }
        Ok(UNet { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let plan = config.layer_plan();
        if params.len() != 2 * plan.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors for {} convolutions",
                params.len(),
                plan.len()
            )));
        }
        for (spec, pair) in plan.iter().zip(params.chunks(2)) {
            if pair[0].shape != [spec.cout, spec.cin, spec.k, spec.k]
                || pair[1].shape != [1, spec.cout, 1, 1]
            {
                return Err(Error::Shape(format!(
                    "parameters of {} have shapes {:?}, {:?}",
                    spec.name, pair[0].shape, pair[1].shape
                )));
            }
        }
        Ok(UNet { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_input(&self, input: &Tensor, aux: Option<&[Vec<f32>]>) -> Result<()> {
        let c = &self.config;
        let [n, ch, h, w] = input.shape;
        if ch != c.in_channels {
            return Err(Error::Shape(format!(
                "input has {ch} channels, model expects {}",
                c.in_channels
            )));
        }
        let div = c.input_divisor();
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} not divisible by {div}"
            )));
        }
        match (c.aux_enabled, aux) {
            (true, None) => Err(Error::Config("Aux-Net forward needs aux values".into())),
            (true, Some(a)) if a.len() != n || a.iter().any(|v| v.len() != c.aux_channels) => {
                Err(Error::Shape(format!(
                    "need {} aux values for each of {n} samples",
                    c.aux_channels
                )))
            }
            (false, Some(_)) => Err(Error::Config("baseline U-Net takes no aux values".into())),
            _ => Ok(()),
        }
    }

    /// Record the forward pass on `g` (which must borrow `self.params()`).
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        input: Tensor,
        aux: Option<&[Vec<f32>]>,
    ) -> Result<(Var, Var)> {
        self.check_input(&input, aux)?;
        let c = &self.config;
        let pad = Padding::same(c.kernel);
        let mut layer = 0usize;
        let mut conv = |g: &mut Graph, x: Var, pad: Padding| -> Result<Var> {
            let v = g.conv2d(x, 2 * layer, 2 * layer + 1, pad)?;
            layer += 1;
            Ok(v)
        };
        let x_in = g.input(input);
        let mut x = x_in;
        let mut skips = Vec::new();
        let n = c.widths.len();
        for s in 0..n {
            if let Some(a) = aux {
                let [_, _, h, w] = g.value(x).shape;
                let planes = g.input(aux_planes(a, h, w));
                x = g.concat(x, planes)?;
            }
            for _ in 0..c.convs_per_stage {
                let y = conv(g, x, pad)?;
                x = g.relu(y);
            }
            if s + 1 < n {
                skips.push(x);
                x = g.maxpool2x2(x)?;
            }
        }
        for _ in (0..n - 1).rev() {
            let skip = skips.pop().expect("one skip per downsampling");
            let up = g.upsample2x(x);
            let y = conv(g, up, Padding::same(2))?;
            let y = g.relu(y);
            x = g.concat(skip, y)?;
            for _ in 0..c.convs_per_stage {
                let y = conv(g, x, pad)?;
                x = g.relu(y);
            }
        }
        let out = conv(g, x, Padding::same(1))?;
        Ok((x_in, out))
    }

    /// Inference: `(N, in, H, W)` to `(N, out, H, W)`.
    pub fn forward(&self, input: &Tensor, aux: Option<&[Vec<f32>]>) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let (_, out) = self.forward_graph(&mut g, input.clone(), aux)?;
        Ok(g.value(out).clone())
    }

    /// Human-readable layer table.
    pub fn summary(&self) -> String {
        let c = &self.config;
        let mut s = format!(
            "model: {}\nwidths: {:?}\nconvs_per_stage: {}\nkernel: {}\naux_channels: {}\n\n",
            c.kind().as_str(),
            c.widths,
            c.convs_per_stage,
            c.kernel,
            c.aux_width()
        );
        s.push_str("layer\tcin\tcout\tk\taux_in\tparams\n");
        for l in c.layer_plan() {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                l.name,
                l.cin,
                l.cout,
                l.k,
                l.aux_in,
                l.param_count()
            ));
        }
        s.push_str(&format!("\ntotal trainable parameters: {}\n", self.param_count()));
        s
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AUXSCKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
    #[serde(rename = "final")]
    pub is_final: bool,
    pub n_params: usize,
}

/// Path of the human-readable summary written next to a checkpoint.
pub fn summary_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

/// Binary checkpoint: magic, u32 header length, JSON header, then every
/// parameter as little-endian f32 in layer-plan order. A summary sidecar is
/// written alongside.
pub fn save_checkpoint(model: &UNet, seed: u64, step: u64, is_final: bool, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        seed,
        step,
        is_final,
        n_params: model.param_count(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(12 + json.len() + 4 * header.n_params);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in &model.params {
        for v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    let mut summary = model.summary();
    summary.push_str(&format!("seed: {seed}\nstep: {step}\nfinal: {is_final}\n"));
    let sp = summary_path(path);
    fs::write(&sp, summary).map_err(|e| Error::io(&sp, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(UNet, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m.to_string());
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| bad(&format!("header: {e}")))?;
    let body = &bytes[12 + hlen..];
    if body.len() != 4 * header.n_params {
        return Err(bad(&format!(
            "{} parameter bytes, header announces {} parameters",
            body.len(),
            header.n_params
        )));
    }
    let mut values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    let mut params = Vec::new();
    for spec in header.config.layer_plan() {
        let w_shape = [spec.cout, spec.cin, spec.k, spec.k];
        let w: Vec<f32> = values.by_ref().take(w_shape.iter().product()).collect();
        let b: Vec<f32> = values.by_ref().take(spec.cout).collect();
        params.push(Tensor::from_vec(w_shape, w).map_err(|_| bad("parameter count"))?);
        params.push(Tensor::from_vec([1, spec.cout, 1, 1], b).map_err(|_| bad("parameter count"))?);
    }
    if values.next().is_some() {
        return Err(bad("trailing parameters"));
    }
    let model = UNet::from_params(header.config.clone(), params)?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_input(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(|_| rng.random_range(0.0f32..3.0)).collect(),
        }
    }

    /// Layer-by-layer count written out independently of `layer_plan`.
    fn hand_count(widths: &[usize], aux: usize) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let mut total = 0;
        let mut prev = 1;
        for &w in widths {
            total += conv(prev + aux, w, 3) + conv(w, w, 3);
            prev = w;
        }
        for pair in widths.windows(2).rev() {
            let (lo, hi) = (pair[0], pair[1]);
            total += conv(hi, lo, 2) + conv(2 * lo, lo, 3) + conv(lo, lo, 3);
        }
        total + conv(widths[0], 1, 1)
    }

    #[test]
    fn desk_param_count_matches_hand_count() {
        let base = param_count(&ModelConfig::desk(false)).unwrap();
        assert_eq!(base, hand_count(&[8, 16, 32], 0));
        assert_eq!(base, 29_321);
        let aux = param_count(&ModelConfig::desk(true)).unwrap();
        assert_eq!(aux - base, 2 * 9 * (8 + 16 + 32));
    }

    #[test]
    fn full_scale_aux_delta() {
        let base = param_count(&ModelConfig::full_scale(false)).unwrap();
        let aux = param_count(&ModelConfig::full_scale(true)).unwrap();
        assert_eq!(base, hand_count(&[16, 32, 64, 128, 256, 512], 0));
        assert_eq!(aux - base, 18_144);
        assert_eq!(aux - base, 18 * 1008);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(param_count(&ModelConfig::new(vec![], false)).is_err());
        assert!(param_count(&ModelConfig::new(vec![8, 12], false)).is_err());
        let mut c = ModelConfig::desk(false);
        c.kernel = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn aux_channels_are_constant_planes() {
        let t = make_aux_channels(AuxPair { x: 0.9714, y: 0.8571 }, [2, 5, 4, 4]);
        assert_eq!(t.shape, [2, 2, 4, 4]);
        for n in 0..2 {
            for c in 0..2 {
                let plane = &t.data[(n * 2 + c) * 16..(n * 2 + c + 1) * 16];
                let want = if c == 0 { 0.9714f32 } else { 0.8571 };
                assert!(plane.iter().all(|&v| v == want));
            }
        }
        let ones = make_aux_channels(AuxPair { x: 1.0, y: 1.0 }, [1, 1, 3, 3]);
        assert!(ones.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn output_shape_and_input_checks() {
        for aux in [false, true] {
            let m = UNet::new(ModelConfig::new(vec![4, 8, 16], aux), 7).unwrap();
            let x = rand_input([2, 1, 12, 8], 1);
            let a = vec![vec![0.5, 0.7]; 2];
            let out = m.forward(&x, aux.then_some(&a[..])).unwrap();
            assert_eq!(out.shape, [2, 1, 12, 8]);
            assert!(m.forward(&rand_input([1, 1, 10, 8], 2), aux.then_some(&a[..1])).is_err());
            assert!(m.forward(&x, (!aux).then_some(&a[..])).is_err());
        }
    }

    #[test]
    fn zeroed_aux_weights_reproduce_baseline() {
        let widths = vec![4, 8, 16];
        let base = UNet::new(ModelConfig::new(widths.clone(), false), 11).unwrap();
        let mut auxnet = UNet::new(ModelConfig::new(widths, true), 12).unwrap();
        let plan = auxnet.config().layer_plan();
        for (li, spec) in plan.iter().enumerate() {
            let src = &base.params()[2 * li];
            let dst = &mut auxnet.params_mut()[2 * li];
            let feat = spec.cin - spec.aux_in;
            for co in 0..spec.cout {
                for ci in 0..spec.cin {
                    for kk in 0..spec.k * spec.k {
                        let d = (co * spec.cin + ci) * spec.k * spec.k + kk;
                        dst.data[d] = if ci < feat {
                            src.data[(co * feat + ci) * spec.k * spec.k + kk]
                        } else {
                            0.0
                        };
                    }
                }
            }
            auxnet.params_mut()[2 * li + 1] = base.params()[2 * li + 1].clone();
        }
        for i in 0..10 {
            let x = rand_input([1, 1, 16, 12], 100 + i);
            let y0 = base.forward(&x, None).unwrap();
            let y1 = auxnet.forward(&x, Some(&[vec![0.3 + 0.05 * i as f32, 0.9]])).unwrap();
            let diff = y0.data.iter().zip(&y1.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(diff <= 1e-6, "sample {i}: {diff}");
        }
    }

    #[test]
    fn aux_values_change_output() {
        let m = UNet::new(ModelConfig::new(vec![4, 8], true), 3).unwrap();
        let x = rand_input([1, 1, 8, 8], 4);
        let a = m.forward(&x, Some(&[vec![0.5, 0.5]])).unwrap();
        let b = m.forward(&x, Some(&[vec![1.0, 1.0]])).unwrap();
        let diff = a.data.iter().zip(&b.data).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn init_is_deterministic() {
        let a = UNet::new(ModelConfig::desk(true), 5).unwrap();
        let b = UNet::new(ModelConfig::desk(true), 5).unwrap();
        let c = UNet::new(ModelConfig::desk(true), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.params().iter().skip(1).step_by(2).all(|b| b.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = UNet::new(ModelConfig::new(vec![4, 8], true), 9).unwrap();
        save_checkpoint(&m, 9, 42, true, &path).unwrap();
        let (back, h) = load_checkpoint(&path).unwrap();
        assert_eq!((h.seed, h.step, h.is_final), (9, 42, true));
        assert_eq!(back, m);
        let x = rand_input([1, 1, 8, 8], 1);
        let a = [vec![0.2, 0.4]];
        assert_eq!(m.forward(&x, Some(&a)).unwrap(), back.forward(&x, Some(&a)).unwrap());
        assert!(summary_path(&path).exists());
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
