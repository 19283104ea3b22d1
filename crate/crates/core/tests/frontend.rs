mod common;

use std::f64::consts::PI;

use kws_core::frontend::{
    augment_noise, augment_noise_detailed, compute_fbank, compute_mfcc, dct_matrix, hann_window, load_wav,
    load_wav_full, snr_gain, time_shift, write_wav_pcm16, AudioClip, FeatureKind, Frontend, FrontendConfig,
    CLIP_SAMPLES,
};
use kws_core::Error;
use proptest::prelude::*;
use rand::Rng;

fn sine(freq: f64, amp: f64) -> AudioClip {
    let s = (0..CLIP_SAMPLES)
        .map(|n| (amp * (2.0 * PI * freq * n as f64 / 16000.0).sin()) as f32)
        .collect();
    AudioClip::one_second(s).unwrap()
}

fn noise_clip(seed: u64, len: usize, amp: f32) -> AudioClip {
    let mut r = common::rng(seed);
    AudioClip::new((0..len).map(|_| amp * r.gen_range(-1.0f32..1.0)).collect(), 16000).unwrap()
}

fn power(s: &[f32]) -> f64 {
    s.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>() / s.len() as f64
}

#[test]
fn one_second_gives_101_by_40_for_both_kinds() {
    let clip = noise_clip(1, CLIP_SAMPLES, 0.3);
    for kind in [FeatureKind::Mfcc, FeatureKind::Fbank] {
        let cfg = FrontendConfig::default().with_kind(kind);
        let f = Frontend::new(cfg).unwrap().compute(&clip).unwrap();
        assert_eq!((f.frames(), f.dims(), f.kind()), (101, 40, kind));
        assert!(f.values().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn silence_hits_the_log_floor() {
    let cfg = FrontendConfig::default();
    let fb = compute_fbank(&AudioClip::silence(), &cfg).unwrap();
    let floor = 1e-10f64.ln();
    assert!(fb.values().iter().all(|v| *v == floor));
}

/// HTK mel centres computed here rather than taken from the library.
fn centres(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mel = |f: f64| 1127.0 * (1.0 + f / 700.0).ln();
    let hz = |m: f64| 700.0 * ((m / 1127.0).exp() - 1.0);
    (1..=n)
        .map(|i| hz(mel(lo) + (mel(hi) - mel(lo)) * i as f64 / (n + 1) as f64))
        .collect()
}

#[test]
fn sine_energy_peaks_at_nearest_mel_bin() {
    let cfg = FrontendConfig::default();
    let c = centres(40, 20.0, 4000.0);
    for freq in [300.0, 1000.0, 2500.0] {
        let fb = compute_fbank(&sine(freq, 0.5), &cfg).unwrap();
        let mean: Vec<f64> = (0..40)
            .map(|m| (0..fb.frames()).map(|t| fb.get(t, m)).sum::<f64>() / fb.frames() as f64)
            .collect();
        let argmax = (0..40).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
        let nearest = (0..40)
            .min_by(|&a, &b| (c[a] - freq).abs().total_cmp(&(c[b] - freq).abs()))
            .unwrap();
        assert_eq!(argmax, nearest, "{freq} Hz");
    }
    // direct DFT of one windowed frame puts the 1 kHz peak at bin 1000 * 512 / 16000
    let clip = sine(1000.0, 0.5);
    let win = hann_window(480);
    let frame: Vec<f64> = (0..480).map(|n| f64::from(clip.samples()[4000 + n]) * win[n]).collect();
    let mag = |k: usize| {
        let (mut re, mut im) = (0.0, 0.0);
        for (n, v) in frame.iter().enumerate() {
            let a = -2.0 * PI * (k * n) as f64 / 512.0;
            re += v * a.cos();
            im += v * a.sin();
        }
        (re * re + im * im).sqrt()
    };
    let peak = (0..257).max_by(|&a, &b| mag(a).total_cmp(&mag(b))).unwrap();
    assert_eq!(peak, 32);
}

#[test]
fn mfcc_inverse_dct_recovers_log_mel() {
    let cfg = FrontendConfig::default();
    let clip = noise_clip(9, CLIP_SAMPLES, 0.4);
    let fb = compute_fbank(&clip, &cfg).unwrap();
    let mf = compute_mfcc(&clip, &cfg).unwrap();
    let n = 40;
    for t in [0, 17, 50, 100] {
        for i in 0..n {
            // DCT-III with orthonormal scaling, written out directly
            let mut v = mf.get(t, 0) / (n as f64).sqrt();
            for k in 1..n {
                v += mf.get(t, k)
                    * (2.0 / n as f64).sqrt()
                    * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos();
            }
            assert!((v - fb.get(t, i)).abs() < 1e-5, "frame {t} bin {i}");
        }
    }
}

#[test]
fn dct_of_constant_row() {
    let f = Frontend::new(FrontendConfig::default()).unwrap();
    let out = f.dct_row(&[2.5; 40]);
    assert!((out[0] - 2.5 * 40f64.sqrt()).abs() < 1e-12);
    assert!(out[1..].iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn dct_matrix_is_orthonormal() {
    let d = dct_matrix(40);
    for i in 0..40 {
        for j in 0..40 {
            let dot: f64 = (0..40).map(|k| d[i][k] * d[j][k]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((dot - want).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_db_balances_powers() {
    let clip = sine(440.0, 0.1);
    let noise = noise_clip(3, 40_000, 0.05);
    let (mixed, mix) = augment_noise_detailed(&clip, &noise, 0.0, 11).unwrap();
    let crop = &noise.samples()[mix.offset..mix.offset + CLIP_SAMPLES];
    let scaled = power(crop) * mix.gain * mix.gain;
    assert!((scaled / power(clip.samples()) - 1.0).abs() < 1e-6);
    for i in [0, 777, 15_999] {
        let want = f64::from(clip.samples()[i]) + mix.gain * f64::from(crop[i]);
        assert!((f64::from(mixed.samples()[i]) - want).abs() < 1e-6);
    }
}

#[test]
fn snr_algebra() {
    let (ps, pn) = (0.02, 0.5);
    let g = snr_gain(ps, pn, 10.0);
    assert!((g - (ps / (pn * 10.0)).sqrt()).abs() < 1e-15);
    assert!((10.0 * (ps / (g * g * pn)).log10() - 10.0).abs() < 1e-9);

    let clip = sine(700.0, 0.2);
    let noise = noise_clip(5, 20_000, 0.3);
    for snr in [5.0, 10.0, 15.0] {
        let (_, mix) = augment_noise_detailed(&clip, &noise, snr, 2).unwrap();
        let crop = &noise.samples()[mix.offset..mix.offset + CLIP_SAMPLES];
        let measured = 10.0 * (power(clip.samples()) / (power(crop) * mix.gain * mix.gain)).log10();
        assert!((measured - snr).abs() < 1e-9);
    }
}

#[test]
fn noise_errors_and_determinism() {
    let clip = sine(500.0, 0.2);
    let quiet = AudioClip::new(vec![0.0; 20_000], 16000).unwrap();
    assert!(matches!(
        augment_noise(&clip, &quiet, 10.0, 0),
        Err(Error::InvalidArgument(_))
    ));
    let noise = noise_clip(4, 20_000, 0.3);
    assert!(augment_noise(&AudioClip::silence(), &noise, 10.0, 0).is_err());
    assert!(augment_noise(&clip, &noise_clip(4, 100, 0.3), 10.0, 0).is_err());
    assert_eq!(
        augment_noise(&clip, &noise, 7.0, 99).unwrap(),
        augment_noise(&clip, &noise, 7.0, 99).unwrap()
    );
}

#[test]
fn time_shift_boundaries() {
    let clip = noise_clip(8, CLIP_SAMPLES, 0.5);
    assert_eq!(time_shift(&clip, 0.0).unwrap(), clip);
    let s = time_shift(&clip, 100.0).unwrap();
    assert!(s.samples()[..1600].iter().all(|v| *v == 0.0));
    assert_eq!(&s.samples()[1600..], &clip.samples()[..14_400]);
    let back = time_shift(&s, -100.0).unwrap();
    assert_eq!(&back.samples()[..14_400], &clip.samples()[..14_400]);
    assert!(back.samples()[14_400..].iter().all(|v| *v == 0.0));
    let neg = time_shift(&clip, -37.5).unwrap();
    assert_eq!(&neg.samples()[..CLIP_SAMPLES - 600], &clip.samples()[600..]);
    assert!(time_shift(&clip, 100.5).is_err());
    assert!(time_shift(&clip, f64::NAN).is_err());
}

#[test]
fn wav_loading() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full.wav");
    let clip = noise_clip(2, CLIP_SAMPLES, 0.5);
    write_wav_pcm16(&full, &clip).unwrap();
    let back = load_wav(&full).unwrap();
    assert_eq!(back.len(), CLIP_SAMPLES);
    assert!(back
        .samples()
        .iter()
        .zip(clip.samples())
        .all(|(a, b)| (a - b).abs() < 1e-4));

    let half = dir.path().join("half.wav");
    write_wav_pcm16(&half, &AudioClip::new(clip.samples()[..8000].to_vec(), 16000).unwrap()).unwrap();
    let padded = load_wav(&half).unwrap();
    assert_eq!(padded.len(), CLIP_SAMPLES);
    assert!(padded.samples()[8000..].iter().all(|v| *v == 0.0));
    assert_eq!(load_wav_full(&half).unwrap().len(), 8000);

    let cd = dir.path().join("cd.wav");
    write_wav_pcm16(&cd, &AudioClip::new(vec![0.1; 44_100], 44_100).unwrap()).unwrap();
    let err = load_wav(&cd).unwrap_err();
    assert!(err.to_string().contains("unsupported sample rate"), "{err}");

    let stereo = dir.path().join("stereo.wav");
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: 16000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
    for _ in 0..200 {
        w.write_sample(0i16).unwrap();
    }
    w.finalize().unwrap();
    assert!(load_wav(&stereo).is_err());
    assert!(load_wav(dir.path().join("missing.wav")).is_err());
}

#[test]
fn features_are_deterministic() {
    let clip = noise_clip(12, CLIP_SAMPLES, 0.2);
    let cfg = FrontendConfig::default();
    assert_eq!(compute_mfcc(&clip, &cfg).unwrap(), compute_mfcc(&clip, &cfg).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn louder_never_lowers_log_mel(seed in 0u64..1000, k in 1.0f32..4.0) {
        let cfg = FrontendConfig::default().with_kind(FeatureKind::Fbank);
        let fe = Frontend::new(cfg).unwrap();
        let clip = noise_clip(seed, CLIP_SAMPLES, 0.2);
        let a = fe.fbank(&clip).unwrap();
        let b = fe.fbank(&clip.scaled(k)).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!(y >= x);
        }
    }

    #[test]
    fn any_length_maps_to_101_frames(len in 1usize..40_000) {
        let clip = AudioClip::one_second(vec![0.01; len]).unwrap();
        prop_assert_eq!(clip.len(), CLIP_SAMPLES);
        let f = compute_mfcc(&clip, &FrontendConfig::default()).unwrap();
        prop_assert_eq!((f.frames(), f.dims()), (101, 40));
    }
}
