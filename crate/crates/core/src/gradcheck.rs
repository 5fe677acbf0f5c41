//! Central finite-difference checks of reverse-mode gradients, per layer and
//! through a whole network and its training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Sample, SampleMeta};
use crate::geometry::{AuxPair, FovSpec, Split};
use crate::image::Image;
use crate::model::{Graph, ModelConfig, Padding, Tensor, UNet, Var};
use crate::training::{combined_loss, loss_and_grads, scale_targets, stack_batch};

/// Uniform values in [-1, 1).
pub fn random_tensor(shape: [usize; 4], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

/// Values bounded away from 0 and pairwise separated, so small finite
/// perturbations never cross a ReLU kink or change a pooling winner.
pub fn separated_tensor(shape: [usize; 4], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    let data = idx
        .iter()
        .map(|&k| {
            let v = 0.1 * (k as f32 - n as f32 / 2.0 + 0.5);
            v + rng.random_range(-0.02f32..0.02)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

/// Scalar probe loss `Σ r·y` in f64.
fn probe(y: &Tensor, r: &[f32]) -> f64 {
    y.data.iter().zip(r).map(|(&a, &b)| a as f64 * b as f64).sum()
}

fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest relative error of one layer builder's gradients against central
/// differences, over every input element and every parameter element.
///
/// Convolutions are linear in any single coordinate, so they can take a large
/// exactly representable step `h` that keeps f32 rounding out of the quotient.
pub fn layer_gradcheck(params: Vec<Tensor>, x: Tensor, build: impl Fn(&mut Graph, Var) -> Var, h: f32, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |params: &[Tensor], x: &Tensor| -> Tensor {
        let mut g = Graph::new(params);
        let v = g.input(x.clone());
        let o = build(&mut g, v);
        g.value(o).clone()
    };
    let y0 = eval(&params, &x);
    let r: Vec<f32> = (0..y0.len()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let mut g = Graph::new(&params);
    let v = g.input(x.clone());
    let o = build(&mut g, v);
    let grads = g.backward(o, &r).expect("backward of a built graph");
    let dx = grads.of(v).expect("input gradient").to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.data[i] += h;
        xm.data[i] -= h;
        let num = (probe(&eval(&params, &xp), &r) - probe(&eval(&params, &xm), &r)) / (xp.data[i] as f64 - xm.data[i] as f64);
        worst = worst.max(rel_err(dx[i] as f64, num, 1e-2));
    }
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let mut pp = params.clone();
            let mut pm = params.clone();
            pp[p].data[i] += h;
            pm[p].data[i] -= h;
            let num = (probe(&eval(&pp, &x), &r) - probe(&eval(&pm, &x), &r)) / (pp[p].data[i] as f64 - pm[p].data[i] as f64);
            worst = worst.max(rel_err(grads.params[p][i] as f64, num, 1e-2));
        }
    }
    worst
}

/// Worst relative gradient error of each layer type on random 5x6 (or 6x6
/// for pooling) inputs.
pub fn check_layers(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, k) in [("conv3x3", 3), ("conv2x2", 2), ("conv1x1", 1)] {
        let params = vec![random_tensor([3, 2, k, k], &mut rng), random_tensor([1, 3, 1, 1], &mut rng)];
        let x = random_tensor([2, 2, 5, 6], &mut rng);
        let e = layer_gradcheck(params, x, |g, v| g.conv2d(v, 0, 1, Padding::same(k)).expect("conv"), 0.25, seed);
        out.push((name, e));
    }
    let x = separated_tensor([2, 2, 6, 6], &mut rng);
    out.push(("relu", layer_gradcheck(Vec::new(), x.clone(), |g, v| g.relu(v), 1e-3, seed)));
    out.push((
        "maxpool2x2",
        layer_gradcheck(Vec::new(), x, |g, v| g.maxpool2x2(v).expect("even dims"), 1e-3, seed),
    ));
    let x = separated_tensor([2, 2, 5, 6], &mut rng);
    out.push(("upsample2x", layer_gradcheck(Vec::new(), x.clone(), |g, v| g.upsample2x(v), 1e-2, seed)));
    out.push((
        "concat",
        layer_gradcheck(
            Vec::new(),
            x,
            |g, v| {
                let r = g.relu(v);
                g.concat(v, r).expect("same spatial shape")
            },
            1e-3,
            seed,
        ),
    ));
    out
}

/// Outcome of [`check_network`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkCheck {
    /// Largest relative error over the checked coordinates.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose stencil crossed a ReLU kink or changed a pooling
    /// winner; central differences are undefined there.
    pub skipped: usize,
}

/// Loss of `model` on `batch` and the switching pattern of its forward pass.
fn loss_and_pattern(model: &UNet, batch: &[&Sample], lambda_hf: f64, hf_eps: f64) -> (f64, Vec<u32>) {
    let (x, mut y, aux) = stack_batch(batch).expect("uniform batch");
    scale_targets(model, &mut y);
    let aux = model.config().aux_enabled.then_some(&aux[..]);
    let mut g = Graph::new(model.params());
    let (_, out) = model.forward_graph(&mut g, x, aux).expect("forward");
    let pred = g.value(out);
    let (terms, _) = combined_loss(pred, &y, lambda_hf, hf_eps);
    let mut pattern = g.switch_pattern();
    if lambda_hf > 0.0 {
        // With a tiny epsilon the edge term is |∇pred| up to smoothing, so a
        // difference changing sign is a kink as well.
        let [_, _, h, w] = pred.shape;
        for img in pred.data.chunks(h * w) {
            for r in 0..h {
                for c in 0..w {
                    let v = img[r * w + c];
                    if c + 1 < w {
                        pattern.push((img[r * w + c + 1] > v) as u32);
                    }
                    if r + 1 < h {
                        pattern.push((img[(r + 1) * w + c] > v) as u32);
                    }
                }
            }
        }
    }
    (terms.total, pattern)
}

/// Parameter gradients of `mse + lambda_hf·hf` through a whole network
/// (widths [4, 8], 8x8 inputs, batch 2) against central differences with step
/// `h` and `h/2`, extrapolated, at `coords` random parameter coordinates.
///
/// The network is piecewise smooth. A coordinate is only scored when the
/// forward passes at both stencil points switch exactly like the unperturbed
/// pass (pooling winners, ReLU sides and, with an edge term, the sign of every
/// neighbour difference of the prediction); others are redrawn, at most
/// `20·coords` draws.
pub fn check_network(aux_enabled: bool, lambda_hf: f64, hf_eps: f64, coords: usize, h: f32, seed: u64) -> NetworkCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = UNet::new(ModelConfig::new(vec![4, 8], aux_enabled), seed).expect("valid config");
    let samples: Vec<Sample> = (0..2)
        .map(|i| {
            let input: Vec<f32> = (0..64).map(|_| rng.random_range(0.0f32..2.0)).collect();
            let target: Vec<f32> = (0..64).map(|_| rng.random_range(0.0f32..0.5)).collect();
            Sample {
                input: Image::from_vec(8, 8, input).expect("8x8"),
                target: Image::from_vec(8, 8, target).expect("8x8"),
                aux: AuxPair { x: 0.4 + 0.3 * i as f64, y: 0.8 - 0.2 * i as f64 },
                meta: SampleMeta {
                    split: Split::Train,
                    phantom: 0,
                    fov: FovSpec::new(120.0, 60.0).expect("legal FOV"),
                    angle_deg: 0.0,
                    k: 1,
                },
            }
        })
        .collect();
    let batch: Vec<&Sample> = samples.iter().collect();
    let (_, grads) = loss_and_grads(&model, &batch, lambda_hf, hf_eps).expect("forward");
    let (_, pattern) = loss_and_pattern(&model, &batch, lambda_hf, hf_eps);
    let sizes: Vec<usize> = model.params().iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    let mut res = NetworkCheck { max_rel_err: 0.0, checked: 0, skipped: 0 };
    for _ in 0..20 * coords {
        if res.checked == coords {
            break;
        }
        let mut flat = rng.random_range(0..total);
        let mut p = 0;
        while flat >= sizes[p] {
            flat -= sizes[p];
            p += 1;
        }
        let orig = model.params()[p].data[flat];
        let mut quotients = [0.0f64; 2];
        let mut smooth = true;
        for (q, step) in quotients.iter_mut().zip([h, h / 2.0]) {
            model.params_mut()[p].data[flat] = orig + step;
            let (lp, pp) = loss_and_pattern(&model, &batch, lambda_hf, hf_eps);
            model.params_mut()[p].data[flat] = orig - step;
            let (lm, pm) = loss_and_pattern(&model, &batch, lambda_hf, hf_eps);
            smooth &= pp == pattern && pm == pattern;
            *q = (lp - lm) / ((orig + step) as f64 - (orig - step) as f64);
        }
        model.params_mut()[p].data[flat] = orig;
        if !smooth {
            res.skipped += 1;
            continue;
        }
        // Richardson extrapolation cancels the O(h^2) curvature term; a step
        // large enough for f32 rounding to vanish can then be used.
        let num = (4.0 * quotients[1] - quotients[0]) / 3.0;
        res.max_rel_err = res.max_rel_err.max(rel_err(grads[p][flat] as f64, num, 1e-3));
        res.checked += 1;
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_passes() {
        for (name, e) in check_layers(3) {
            assert!(e < 1e-3, "{name}: {e}");
        }
    }

    #[test]
    fn whole_network_passes() {
        for (aux, seed) in [(false, 7), (true, 7), (true, 8)] {
            let r = check_network(aux, 1.0, 1e-6, 100, 6e-2, seed);
            assert_eq!(r.checked, 100, "{r:?}");
            assert!(r.max_rel_err < 1e-2, "aux {aux}: {r:?}");
        }
    }
}
