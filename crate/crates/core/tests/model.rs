//! Parameter counts against a hand-counted golden table, plus checkpoint
//! files written through the public API.

use std::fs;
use std::path::PathBuf;

use auxscatter::model::{load_checkpoint, param_count, save_checkpoint, ModelConfig, Tensor, UNet};

struct GoldenLayer {
    name: String,
    cin: usize,
    cout: usize,
    k: usize,
    params: usize,
}

fn golden() -> (Vec<GoldenLayer>, usize) {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/desk_param_count.tsv");
    let text = fs::read_to_string(p).unwrap();
    let mut layers = Vec::new();
    let mut total = 0;
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if f[0] == "total" {
            total = f[4].parse().unwrap();
            continue;
        }
        layers.push(GoldenLayer {
            name: f[0].into(),
            cin: f[1].parse().unwrap(),
            cout: f[2].parse().unwrap(),
            k: f[3].parse().unwrap(),
            params: f[4].parse().unwrap(),
        });
    }
    (layers, total)
}

#[test]
fn desk_baseline_matches_hand_count() {
    let (layers, total) = golden();
    assert_eq!(layers.iter().map(|l| l.params).sum::<usize>(), total);
    let cfg = ModelConfig::desk(false);
    let plan = cfg.layer_plan();
    assert_eq!(plan.len(), layers.len());
    for (c, g) in plan.iter().zip(&layers) {
        assert_eq!((c.name.as_str(), c.cin, c.cout, c.k), (g.name.as_str(), g.cin, g.cout, g.k));
        assert_eq!(c.param_count(), g.params, "{}", g.name);
    }
    assert_eq!(param_count(&cfg).unwrap(), total);
    assert_eq!(UNet::new(cfg, 3).unwrap().param_count(), total);
}

#[test]
fn aux_adds_two_input_channels_to_each_first_encoder_conv() {
    let (_, total) = golden();
    let aux = param_count(&ModelConfig::desk(true)).unwrap();
    assert_eq!(aux - total, 2 * 9 * (8 + 16 + 32));
    let full = param_count(&ModelConfig::full_scale(true)).unwrap() - param_count(&ModelConfig::full_scale(false)).unwrap();
    assert_eq!(full, 18_144);
}

#[test]
fn checkpoint_file_reloads_to_identical_outputs() {
    let cfg = ModelConfig { target_scale: 100.0, ..ModelConfig::new(vec![4, 8], true) };
    let net = UNet::new(cfg.clone(), 9).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("m.ckpt");
    save_checkpoint(&net, 9, 12, true, &p).unwrap();
    let (back, header) = load_checkpoint(&p).unwrap();
    assert_eq!((header.seed, header.step, header.is_final), (9, 12, true));
    assert_eq!(back.config(), &cfg);
    let x = Tensor::from_vec([2, 1, 8, 6], (0..96).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
    let aux = vec![vec![0.5, 0.7], vec![0.9, 0.3]];
    let a = net.forward(&x, Some(&aux)).unwrap();
    let b = back.forward(&x, Some(&aux)).unwrap();
    assert_eq!(a.data, b.data);
    let mut bytes = fs::read(&p).unwrap();
    bytes.truncate(bytes.len() - 3);
    fs::write(&p, bytes).unwrap();
    assert!(load_checkpoint(&p).is_err());
}
