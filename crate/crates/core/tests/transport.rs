//! Statistical checks of the Monte Carlo scatter engine.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use auxscatter::geometry::{FovSpec, ScanGeometry};
use auxscatter::phantom::{cylinder_phantom, synth_head_phantom, CylinderSpec, HeadParams, MaterialTable, VoxelPhantom, SOFT_TISSUE};
use auxscatter::transport::{average_realizations, simulate_scatter_mc, McConfig, McEngine, Spectrum};

#[test]
fn woodcock_free_paths_follow_the_exponential_law() {
    let table = MaterialTable::builtin();
    let mut ph = VoxelPhantom::empty([20, 20, 20], 10.0);
    ph.paint(SOFT_TISSUE, 1.0, |_| true);
    let geom = ScanGeometry::desk();
    let spec = Spectrum::mono(60.0);
    let fov = FovSpec::new(150.0, 100.0).unwrap();
    let engine = McEngine::new(&ph, &table, &geom, &spec, &fov, 0.0).unwrap();
    let mu = table.mu(SOFT_TISSUE, 60.0);
    let (lo, hi) = ph.bounds();
    let start = [lo[0] - 500.0, 1.0, 1.0];
    let len = hi[0] - lo[0];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let mut paths: Vec<f64> = (0..n)
        .filter_map(|_| engine.sample_collision(start, [1.0, 0.0, 0.0], 60.0, &mut rng))
        .map(|(t, _)| t - 500.0)
        .collect();
    // Collision depths follow the exponential law truncated at the slab exit.
    let norm = 1.0 - (-mu * len).exp();
    paths.sort_by(f64::total_cmp);
    let m = paths.len() as f64;
    let ks = paths
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = (1.0 - (-mu * x).exp()) / norm;
            (f - i as f64 / m).abs().max(((i + 1) as f64 / m - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(paths.len() > 90_000);
    assert!(ks < 0.01, "KS statistic {ks}");
    // Fraction reaching the exit matches exp(-mu L).
    let escaped = (n - paths.len()) as f64 / n as f64;
    assert!((escaped - (-mu * len).exp()).abs() < 0.005, "{escaped}");
}

#[test]
fn scatter_total_grows_with_fov_height() {
    let table = MaterialTable::builtin();
    let ph = synth_head_phantom(1, &HeadParams::default()).unwrap();
    let geom = ScanGeometry::desk();
    let spec = Spectrum::default_90kvp();
    let votes = (0..3u64)
        .filter(|&seed| {
            let totals: Vec<f64> = [40.0, 100.0, 170.0]
                .iter()
                .map(|&h| {
                    let fov = FovSpec::new(150.0, h).unwrap();
                    let cfg = McConfig { n_photons: 1_000_000, seed: 100 + seed, ..McConfig::default() };
                    simulate_scatter_mc(&ph, &table, &geom, &fov, 0.0, &spec, &cfg).unwrap().image.sum()
                })
                .collect();
            totals.windows(2).all(|w| w[0] <= w[1])
        })
        .count();
    assert!(votes >= 2, "monotone in {votes} of 3 seeds");
}

#[test]
fn more_realizations_reduce_pixel_variance() {
    let table = MaterialTable::builtin();
    let ph = cylinder_phantom(&CylinderSpec::water(60.0, 80.0), 5.0);
    let geom = ScanGeometry::desk().with_detector_pixels(10, 12).unwrap();
    let spec = Spectrum::default_90kvp();
    let fov = FovSpec::new(130.0, 100.0).unwrap();
    let runs = 100;
    let mut avg2 = Vec::with_capacity(runs);
    let mut avg10 = Vec::with_capacity(runs);
    for rep in 0..runs as u64 {
        let reals: Vec<_> = (0..10)
            .map(|r| {
                let cfg = McConfig { n_photons: 2_000, seed: rep * 10 + r, bin_down: 1, ..McConfig::default() };
                simulate_scatter_mc(&ph, &table, &geom, &fov, 0.0, &spec, &cfg).unwrap()
            })
            .collect();
        assert_eq!(average_realizations(&reals, 1).unwrap().image, reals[0].image);
        avg2.push(average_realizations(&reals, 2).unwrap().image);
        avg10.push(average_realizations(&reals, 10).unwrap().image);
    }
    let mean_pixel_variance = |imgs: &[auxscatter::image::Image]| {
        let n = imgs[0].data.len();
        (0..n)
            .map(|p| {
                let m = imgs.iter().map(|i| i.data[p] as f64).sum::<f64>() / imgs.len() as f64;
                imgs.iter().map(|i| (i.data[p] as f64 - m).powi(2)).sum::<f64>() / (imgs.len() - 1) as f64
            })
            .sum::<f64>()
            / n as f64
    };
    let (v2, v10) = (mean_pixel_variance(&avg2), mean_pixel_variance(&avg10));
    assert!(v2 > 0.0);
    // Independent realizations: the ratio is 2/10 in expectation.
    assert!(v10 < 0.5 * v2, "var k=10 {v10} vs k=2 {v2}");
}

#[test]
fn doubling_photons_keeps_the_expected_total() {
    let table = MaterialTable::builtin();
    let ph = cylinder_phantom(&CylinderSpec::water(60.0, 80.0), 4.0);
    let geom = ScanGeometry::desk();
    let spec = Spectrum::default_90kvp();
    let fov = FovSpec::new(140.0, 90.0).unwrap();
    let engine = McEngine::new(&ph, &table, &geom, &spec, &fov, 30.0).unwrap();
    // Total and its standard error from the per-chunk totals.
    let estimate = |n: u64, seed: u64| {
        let (_, chunks) = engine.run_tally(n, seed, 4);
        let scale = engine.photon_scale(1e5, n);
        let k = chunks.len() as f64;
        let mean = chunks.iter().sum::<f64>() / k;
        let var = chunks.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (k - 1.0);
        (chunks.iter().sum::<f64>() * scale, (k * var).sqrt() * scale)
    };
    let (t1, s1) = estimate(16_384 * 8, 5);
    let (t2, s2) = estimate(16_384 * 16, 6);
    assert!(t1 > 0.0);
    assert!((t1 - t2).abs() <= 2.0 * (s1 * s1 + s2 * s2).sqrt(), "{t1} vs {t2} (sigma {s1}, {s2})");
}
