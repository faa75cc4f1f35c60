mod common;

use flashar_core::data::{default_specs, generate_dataset};
use flashar_core::decode::{sample_tokens, SamplerConfig};
use flashar_core::eval::pattern_validity;
use flashar_core::rng;

fn within_3_sigma(count: usize, n: usize, p: f64) -> bool {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (count as f64 - mean).abs() <= 3.0 * sd
}

#[test]
fn corruption_rate_matches_noise_setting() {
    for noise in [0.05, 0.2] {
        let specs = default_specs(4, 8, 8, 16, noise, 3).unwrap();
        let data = generate_dataset(&specs, &[150; 4], 3).unwrap();
        let mut flipped = 0;
        let mut total = 0;
        for s in &data.samples {
            let clean = specs[s.class].clean_grid().unwrap();
            flipped += s.grid.tokens().iter().zip(clean.tokens()).filter(|(a, b)| a != b).count();
            total += clean.tokens().len();
        }
        assert!(within_3_sigma(flipped, total, noise), "{flipped} of {total} at {noise}");
    }
}

#[test]
fn flat_logits_sample_uniformly() {
    let v = 8;
    let draws = 100_000;
    let logits = vec![0.25f32; v * draws];
    let mut r = rng::stream(11, "sample");
    let toks = sample_tokens(&logits, v, &SamplerConfig::default(), &mut r).unwrap();
    let mut counts = vec![0usize; v];
    for t in toks {
        counts[t as usize] += 1;
    }
    for (k, &c) in counts.iter().enumerate() {
        assert!(within_3_sigma(c, draws, 1.0 / v as f64), "token {k}: {c}");
    }
}

#[test]
fn softmax_frequencies_follow_logits() {
    let probs = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
    let row: Vec<f64> = probs.iter().map(|p: &f64| p.ln()).collect();
    let draws = 100_000;
    let logits: Vec<f64> = row.iter().copied().cycle().take(3 * draws).collect();
    let mut r = rng::stream(5, "sample");
    let toks = sample_tokens(&logits, 3, &SamplerConfig::default(), &mut r).unwrap();
    for (k, p) in probs.iter().enumerate() {
        let c = toks.iter().filter(|&&t| t as usize == k).count();
        assert!(within_3_sigma(c, draws, *p), "token {k}: {c}");
    }
}

#[test]
fn top_k_only_draws_the_k_largest() {
    let row = [0.3f32, 2.0, -1.0, 1.5, 0.0, 1.9];
    let draws = 20_000;
    let logits: Vec<f32> = row.iter().copied().cycle().take(row.len() * draws).collect();
    let sampler = SamplerConfig { top_k: 3, ..Default::default() };
    let mut r = rng::stream(2, "sample");
    let toks = sample_tokens(&logits, row.len(), &sampler, &mut r).unwrap();
    let mut counts = [0usize; 6];
    for t in toks {
        counts[t as usize] += 1;
    }
    assert_eq!(counts[0] + counts[2] + counts[4], 0);
    let z: f64 = [2.0f64, 1.5, 1.9].iter().map(|x| x.exp()).sum();
    for k in [1usize, 3, 5] {
        assert!(within_3_sigma(counts[k], draws, (row[k] as f64).exp() / z), "token {k}: {}", counts[k]);
    }
}

#[test]
fn random_grids_score_chance_validity() {
    let (h, w, v) = (8, 8, 16);
    let specs = default_specs(4, h, w, v, 0.0, 9).unwrap();
    let mut r = common::rng(9);
    let grids: Vec<_> = (0..1000).map(|_| common::random_grid(&mut r, h, w, v)).collect();
    let classes: Vec<usize> = (0..1000).map(|i| i % 4).collect();
    let rep = pattern_validity(&grids, &classes, &specs).unwrap();
    let n = 1000 * h * w;
    let hits = (rep.mean_validity * n as f64).round() as usize;
    assert!(within_3_sigma(hits, n, 1.0 / v as f64), "mean validity {}", rep.mean_validity);
    assert_eq!(rep.valid_fraction, 0.0);
}
