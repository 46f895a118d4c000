use std::collections::BTreeMap;
use std::f64::consts::PI;

use eduloop_core::sigcore::Montage;
use eduloop_core::synthgen::{
    generate_block, GeneratorConfig, MentalLabel, MentalState, RhythmSource, Timeline,
};
use proptest::prelude::*;

const FS: f64 = 250.0;

/// Rectangular-window periodogram power in `[lo, hi]` by a direct DFT.
fn dft_band_power(x: &[f64], lo: f64, hi: f64) -> f64 {
    let n = x.len();
    let df = FS / n as f64;
    let k_lo = (lo / df).ceil() as usize;
    let k_hi = ((hi / df).floor() as usize).min(n / 2);
    (k_lo.max(1)..=k_hi)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in x.iter().enumerate() {
                let ph = -2.0 * PI * (k * t % n) as f64 / n as f64;
                re += v * ph.cos();
                im += v * ph.sin();
            }
            let one_sided = if 2 * k == n { 1.0 } else { 2.0 };
            one_sided * (re * re + im * im) / (n * n) as f64
        })
        .sum()
}

fn alpha_only(amp: f64) -> GeneratorConfig {
    let mut cfg = GeneratorConfig::silent(Montage::default_10_20(), FS);
    cfg.sources[0] = vec![RhythmSource::new("alpha", 10.0, amp)];
    cfg
}

fn with_alpha_gain(label: MentalLabel, gain: f64) -> MentalState {
    MentalState {
        label,
        rhythm_gains: BTreeMap::from([("alpha".to_string(), gain)]),
    }
}

#[test]
fn alpha_power_is_half_amplitude_squared() {
    let cfg = alpha_only(2.0);
    let block = generate_block(&cfg, &Timeline::constant(MentalState::clear()), 0, 1000).unwrap();
    let p = dft_band_power(block.channel(0), 8.0, 13.0);
    assert!((p - 2.0).abs() <= 0.2, "alpha power {p}");
    assert!(block.channel(1).iter().all(|v| *v == 0.0));
}

#[test]
fn confused_alpha_gain_scales_power_by_its_square() {
    let cfg = alpha_only(2.0);
    let tl = Timeline::new(vec![
        (0.0, with_alpha_gain(MentalLabel::Clear, 1.0)),
        (4.0, with_alpha_gain(MentalLabel::Confused, 0.5)),
    ])
    .unwrap();
    let block = generate_block(&cfg, &tl, 0, 2000).unwrap();
    let clear = dft_band_power(&block.channel(0)[..1000], 8.0, 13.0);
    let confused = dft_band_power(&block.channel(0)[1000..], 8.0, 13.0);
    let ratio = confused / clear;
    assert!((ratio - 0.25).abs() <= 0.15 * 0.25, "ratio {ratio}");
}

#[test]
fn default_signature_lowers_alpha_and_raises_theta() {
    let cfg = GeneratorConfig {
        artifact_rate_per_min: 0.0,
        ..GeneratorConfig::default()
    };
    let clear = generate_block(&cfg, &Timeline::constant(MentalState::clear()), 0, 2500).unwrap();
    let conf = generate_block(&cfg, &Timeline::constant(MentalState::confused()), 0, 2500).unwrap();
    let a = |b: &eduloop_core::sigcore::SampleBlock, lo, hi| dft_band_power(&b.channel(6)[..2500], lo, hi);
    assert!(a(&conf, 8.0, 13.0) < a(&clear, 8.0, 13.0));
    assert!(a(&conf, 4.0, 8.0) > a(&clear, 4.0, 8.0));
}

#[test]
fn artifact_free_amplitude_stays_in_bound() {
    let cfg = GeneratorConfig {
        artifact_rate_per_min: 0.0,
        ..GeneratorConfig::default()
    };
    let n_channels = cfg.n_channels();
    let per_channel = 1_000_000 / n_channels + 1;
    let block = generate_block(&cfg, &Timeline::constant(MentalState::confused()), 0, per_channel).unwrap();
    let mut violations = 0usize;
    for c in 0..n_channels {
        let bands: f64 = cfg.sources[c]
            .iter()
            .map(|s| s.amplitude_uv * MentalState::confused().gain(&s.band).max(1.0))
            .sum();
        let bound = bands + cfg.line_amplitude_uv + 6.0 * cfg.pink_amplitude_uv;
        violations += block.channel(c).iter().filter(|v| v.abs() > bound).count();
    }
    let rate = violations as f64 / (per_channel * n_channels) as f64;
    assert!(rate < 1e-4, "violation rate {rate}");
}

#[test]
fn timeline_round_trips_through_json() {
    let tl = Timeline::from_labels(&[(0.0, MentalLabel::Clear), (30.0, MentalLabel::Confused)]).unwrap();
    let back = Timeline::from_json(&tl.to_json()).unwrap();
    assert_eq!(back, tl);
    assert_eq!(tl.intervals(MentalLabel::Confused), vec![(30.0, f64::INFINITY)]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn same_seed_same_samples(seed in any::<u64>(), from in 0u64..100_000, n in 1usize..300) {
        let cfg = GeneratorConfig { seed, ..GeneratorConfig::default() };
        let tl = Timeline::from_labels(&[(0.0, MentalLabel::Clear), (100.0, MentalLabel::Confused)]).unwrap();
        let a = generate_block(&cfg, &tl, from, n).unwrap();
        let b = generate_block(&cfg, &tl, from, n).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn blocks_concatenate_seamlessly(seed in any::<u64>(), from in 0u64..50_000, sizes in prop::collection::vec(1usize..200, 1..6)) {
        let cfg = GeneratorConfig { seed, artifact_rate_per_min: 30.0, ..GeneratorConfig::default() };
        let tl = Timeline::from_labels(&[(0.0, MentalLabel::Clear), (120.0, MentalLabel::Confused)]).unwrap();
        let total: usize = sizes.iter().sum();
        let whole = generate_block(&cfg, &tl, from, total).unwrap();
        let mut at = from;
        let mut parts = Vec::new();
        for n in sizes {
            parts.push(generate_block(&cfg, &tl, at, n).unwrap());
            at += n as u64;
        }
        prop_assert_eq!(eduloop_core::sigcore::SampleBlock::concat(&parts).unwrap(), whole);
    }
}
