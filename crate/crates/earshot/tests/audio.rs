use earshot::audio::{hann, log_mel, log_mel_with, LogMelConfig};
use earshot_core::dsp::mel_center_frequencies;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SR: f64 = 16000.0;

#[test]
fn silence_sits_on_the_floor() {
    let lm = log_mel(&vec![0.0; 4000], SR).unwrap();
    let floor = 1e-10f64.ln();
    assert!(lm.frames.data().iter().all(|&v| v == floor));
}

#[test]
fn frame_count_formula() {
    for (len, sr) in [(400, SR), (401, SR), (16000, SR), (12345, SR), (48000, 48000.0), (22050, 22050.0)] {
        let cfg = LogMelConfig::default();
        let (win, hop) = (cfg.window_len(sr), cfg.hop_len(sr));
        let lm = log_mel(&vec![0.1; len], sr).unwrap();
        assert_eq!(lm.frames.shape(), &[(len - win) / hop + 1, 128]);
        assert!((lm.frame_rate - sr / hop as f64).abs() < 1e-9);
    }
}

#[test]
fn tone_peaks_at_the_nearest_band() {
    for hz in [440.0, 1000.0, 2500.0] {
        let x: Vec<f64> = (0..8000).map(|n| (2.0 * std::f64::consts::PI * hz * n as f64 / SR).sin()).collect();
        let lm = log_mel(&x, SR).unwrap();
        let centers = mel_center_frequencies(128, SR);
        let nearest = (0..128)
            .min_by(|&a, &b| (centers[a] - hz).abs().total_cmp(&(centers[b] - hz).abs()))
            .unwrap();
        let row = lm.frames.row(10);
        let argmax = (0..128).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(argmax, nearest, "{hz} Hz");
    }
}

#[test]
fn doubling_amplitude_adds_log_four() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..3200).map(|_| rng.random_range(-0.5..0.5)).collect();
    let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
    let (a, b) = (log_mel(&x, SR).unwrap(), log_mel(&x2, SR).unwrap());
    let floor = 1e-10f64.ln();
    let mut checked = 0;
    for (u, v) in a.frames.data().iter().zip(b.frames.data()) {
        if *u > floor {
            assert!((v - u - 4f64.ln()).abs() < 1e-12);
            checked += 1;
        }
    }
    assert!(checked > 1000);
}

#[test]
fn bad_inputs_are_rejected() {
    assert!(log_mel(&[], SR).is_err());
    assert!(log_mel(&vec![0.0; 399], SR).is_err());
    assert!(log_mel(&vec![0.0; 8000], 8000.0).is_err());
    let mut x = vec![0.0; 1000];
    x[7] = f64::NAN;
    assert!(log_mel(&x, SR).is_err());
    let cfg = LogMelConfig {
        n_mels: 40,
        ..LogMelConfig::default()
    };
    // the model format requires 128 bands
    assert!(log_mel_with(&vec![0.0; 1000], SR, &cfg).is_err());
}

#[test]
fn periodic_hann() {
    let w = hann(8);
    assert_eq!(w[0], 0.0);
    assert!((w[4] - 1.0).abs() < 1e-15);
    assert!((w[2] - 0.5).abs() < 1e-15 && (w[6] - 0.5).abs() < 1e-15);
}
