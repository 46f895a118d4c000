use std::f64::consts::PI;

use eduloop_core::preprocess::{
    design_bandpass, design_notch, filter_block, spatial_filter, FilterCoefficients, FilterState, SpatialMethod,
};
use eduloop_core::sigcore::{epochize, Montage, SampleBlock};
use proptest::prelude::*;

const FS: f64 = 250.0;

fn sine_block(f: f64, seconds: f64) -> SampleBlock {
    let n = (seconds * FS) as usize;
    let x: Vec<f64> = (0..n).map(|i| (2.0 * PI * f * i as f64 / FS).sin()).collect();
    SampleBlock::from_channels(0, FS, &[x]).unwrap()
}

/// Gain measured by driving the filter with a long sinusoid and comparing
/// RMS out/in after the transient has died away.
fn rms_gain(coeffs: &FilterCoefficients, f: f64) -> f64 {
    let input = sine_block(f, 40.0);
    let mut state = FilterState::new(coeffs, 1);
    let out = filter_block(coeffs, &mut state, &input).unwrap();
    let skip = (20.0 * FS) as usize;
    let rms = |x: &[f64]| (x[skip..].iter().map(|v| v * v).sum::<f64>() / (x.len() - skip) as f64).sqrt();
    rms(out.channel(0)) / rms(input.channel(0))
}

#[test]
fn bandpass_gain_mid_band_and_edges() {
    let bp = design_bandpass(4, 8.0, 13.0, FS).unwrap();
    let mid = rms_gain(&bp, (8.0f64 * 13.0).sqrt());
    assert!((0.95..=1.05).contains(&mid), "mid-band gain {mid}");
    for edge in [8.0, 13.0] {
        let g = rms_gain(&bp, edge);
        assert!((g - 0.708).abs() <= 0.05, "gain at {edge} Hz = {g}");
    }
}

#[test]
fn bandpass_edges_for_every_order() {
    for order in [2, 4, 6, 8] {
        let bp = design_bandpass(order, 8.0, 13.0, FS).unwrap();
        assert_eq!(bp.n_sections(), order / 2);
        assert!(bp.is_stable());
        for edge in [8.0, 13.0] {
            let g = rms_gain(&bp, edge);
            assert!((g - 0.708).abs() <= 0.05, "order {order}, gain at {edge} Hz = {g}");
        }
    }
}

#[test]
fn notch_gain() {
    let n = design_notch(50.0, 30.0, FS).unwrap();
    let stop = rms_gain(&n, 50.0);
    let pass = rms_gain(&n, 10.0);
    assert!(stop <= 0.01, "gain at 50 Hz = {stop}");
    assert!(pass >= 0.95, "gain at 10 Hz = {pass}");
}

#[test]
fn design_errors_name_the_edge() {
    let err = design_bandpass(4, 8.0, 130.0, FS).unwrap_err().to_string();
    assert!(err.contains("f_hi"), "{err}");
    let err = design_bandpass(4, 0.0, 13.0, FS).unwrap_err().to_string();
    assert!(err.contains("f_lo"), "{err}");
    assert!(design_bandpass(3, 8.0, 13.0, FS).is_err());
    assert!(design_notch(125.0, 30.0, FS).is_err());
    assert!(design_notch(50.0, 0.0, FS).is_err());
}

#[test]
fn dc_is_rejected_by_bandpass() {
    let bp = design_bandpass(4, 8.0, 13.0, FS).unwrap();
    let input = SampleBlock::from_channels(0, FS, &[vec![10.0; 2500]]).unwrap();
    let mut st = FilterState::new(&bp, 1);
    let out = filter_block(&bp, &mut st, &input).unwrap();
    let tail = &out.channel(0)[(2.0 * FS) as usize..];
    assert!(tail.iter().all(|v| v.abs() < 1e-3), "max {}", tail.iter().fold(0.0f64, |a, v| a.max(v.abs())));
}

#[test]
fn impulse_response_decays() {
    let coeffs = design_bandpass(8, 1.0, 45.0, FS)
        .unwrap()
        .then(design_notch(50.0, 30.0, FS).unwrap())
        .unwrap();
    let mut x = vec![0.0; (12.0 * FS) as usize];
    x[0] = 1.0;
    let input = SampleBlock::from_channels(0, FS, &[x]).unwrap();
    let mut st = FilterState::new(&coeffs, 1);
    let out = filter_block(&coeffs, &mut st, &input).unwrap();
    let after = &out.channel(0)[(10.0 * FS) as usize..];
    assert!(after.iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn filter_state_shape_mismatch() {
    let bp = design_bandpass(4, 8.0, 13.0, FS).unwrap();
    let mut st = FilterState::new(&bp, 2);
    assert!(filter_block(&bp, &mut st, &sine_block(10.0, 1.0)).is_err());
}

fn block_from(first: u64, channels: &[Vec<f64>]) -> SampleBlock {
    SampleBlock::from_channels(first, FS, channels).unwrap()
}

fn split_channels(channels: &[Vec<f64>], at: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    channels.iter().map(|c| (c[..at].to_vec(), c[at..].to_vec())).unzip()
}

fn signal(n_channels: usize, len: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-200.0f64..200.0, len), n_channels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn streaming_filter_matches_one_shot(x in signal(2, 300), split in 0usize..=300) {
        let coeffs = design_bandpass(4, 1.0, 45.0, FS).unwrap().then(design_notch(50.0, 30.0, FS).unwrap()).unwrap();
        let mut st = FilterState::new(&coeffs, 2);
        let whole = filter_block(&coeffs, &mut st, &block_from(0, &x)).unwrap();

        let (a, b) = split_channels(&x, split);
        let mut st = FilterState::new(&coeffs, 2);
        let fa = filter_block(&coeffs, &mut st, &block_from(0, &a)).unwrap();
        let fb = filter_block(&coeffs, &mut st, &block_from(split as u64, &b)).unwrap();
        let joined = SampleBlock::concat(&[fa, fb]).unwrap();
        prop_assert_eq!(joined.first_sample_index, whole.first_sample_index);
        for (u, v) in joined.samples().iter().zip(whole.samples()) {
            prop_assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
    }

    #[test]
    fn filtering_is_linear(x in signal(1, 200), y in signal(1, 200), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let coeffs = design_bandpass(4, 8.0, 13.0, FS).unwrap();
        let run = |s: &[Vec<f64>]| {
            let mut st = FilterState::new(&coeffs, 1);
            filter_block(&coeffs, &mut st, &block_from(0, s)).unwrap().into_samples()
        };
        let mix: Vec<f64> = x[0].iter().zip(&y[0]).map(|(p, q)| a * p + b * q).collect();
        let fx = run(&x);
        let fy = run(&y);
        for (i, v) in run(&[mix]).iter().enumerate() {
            let expect = a * fx[i] + b * fy[i];
            prop_assert!((v - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn car_output_sums_to_zero(x in signal(8, 40)) {
        let out = spatial_filter(&block_from(0, &x), &Montage::default_10_20(), SpatialMethod::Car).unwrap();
        for t in 0..40 {
            let s: f64 = (0..8).map(|c| out.get(c, t)).sum();
            prop_assert!(s.abs() <= 1e-9);
        }
    }

    #[test]
    fn bipolar_yields_one_channel_per_pair(x in signal(8, 10)) {
        let m = Montage::default_10_20();
        let out = spatial_filter(&block_from(0, &x), &m, SpatialMethod::Bipolar).unwrap();
        prop_assert_eq!(out.n_channels, m.bipolar_pairs.len());
        for (k, (a, c)) in m.bipolar_pairs.iter().enumerate() {
            for t in 0..10 {
                prop_assert_eq!(out.get(k, t), x[*a][t] - x[*c][t]);
            }
        }
    }

    #[test]
    fn epochize_is_independent_of_block_boundaries(
        len in 0usize..900,
        cuts in prop::collection::vec(0usize..900, 0..6),
        window in 1usize..300,
        step_frac in 1usize..=4,
    ) {
        let step = (window * step_frac / 4).max(1);
        let x: Vec<f64> = (0..len).map(|i| i as f64).collect();
        let whole = epochize(&[block_from(0, &[x.clone()])], window, step).unwrap();

        let mut cuts: Vec<usize> = cuts.into_iter().filter(|c| *c < len).collect();
        cuts.push(0);
        cuts.push(len);
        cuts.sort_unstable();
        cuts.dedup();
        let blocks: Vec<SampleBlock> = cuts.windows(2).map(|w| block_from(w[0] as u64, &[x[w[0]..w[1]].to_vec()])).collect();
        let pieces = epochize(&blocks, window, step).unwrap();
        prop_assert_eq!(&pieces, &whole);

        let expected = if len >= window { (len - window) / step + 1 } else { 0 };
        prop_assert_eq!(whole.len(), expected);
        for (k, e) in whole.iter().enumerate() {
            prop_assert_eq!(e.start_sample_index, (k * step) as u64);
            prop_assert_eq!(e.channel(0)[0], (k * step) as f64);
            prop_assert_eq!(e.channel(0)[window - 1], (k * step + window - 1) as f64);
        }
    }
}
