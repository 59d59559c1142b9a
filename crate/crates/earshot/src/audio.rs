//! Log-Mel front end: Hann-windowed STFT power spectra through the HTK mel
//! filterbank, natural log with a floor.

use earshot_core::dsp::{mel_filterbank, LogMel, N_MELS};
use earshot_core::Tensor;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LogMelConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub floor: f64,
    pub min_sample_rate: f64,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        LogMelConfig {
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: N_MELS,
            floor: 1e-10,
            min_sample_rate: 16_000.0,
        }
    }
}

impl LogMelConfig {
    pub fn window_len(&self, sample_rate: f64) -> usize {
        (sample_rate * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self, sample_rate: f64) -> usize {
        (sample_rate * self.hop_ms / 1000.0).round() as usize
    }

    /// FFT size: next power of two at or above the window length.
    pub fn n_fft(&self, sample_rate: f64) -> usize {
        self.window_len(sample_rate).next_power_of_two()
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// `[T, n_mels]` log-Mel energies with `T = (len − window) / hop + 1`.
pub fn log_mel_with(samples: &[f64], sample_rate: f64, cfg: &LogMelConfig) -> Result<LogMel> {
    if !(sample_rate >= cfg.min_sample_rate) {
        return Err(Error::Data(format!(
            "sample rate {sample_rate} Hz below the {} Hz minimum",
            cfg.min_sample_rate
        )));
    }
    let (win, hop, n_fft) = (cfg.window_len(sample_rate), cfg.hop_len(sample_rate), cfg.n_fft(sample_rate));
    if samples.len() < win || win == 0 || hop == 0 {
        return Err(Error::Data(format!("{} samples is shorter than one {win}-sample window", samples.len())));
    }
    if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
        return Err(Error::Data(format!("non-finite sample at index {i}")));
    }
    let bins = n_fft / 2 + 1;
    let fb = mel_filterbank(bins, cfg.n_mels, sample_rate)?;
    let window = hann(win);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let n_frames = (samples.len() - win) / hop + 1;
    let mut out = Vec::with_capacity(n_frames * cfg.n_mels);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; bins];
    for f in 0..n_frames {
        let frame = &samples[f * hop..f * hop + win];
        for (b, (s, w)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            *b = Complex::new(s * w, 0.0);
        }
        buf[win..].iter_mut().for_each(|b| *b = Complex::new(0.0, 0.0));
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for m in 0..cfg.n_mels {
            let e: f64 = fb.row(m).iter().zip(&power).map(|(a, b)| a * b).sum();
            out.push(e.max(cfg.floor).ln());
        }
    }
    let frame_rate = sample_rate / hop as f64;
    Ok(LogMel::new(Tensor::new([n_frames, cfg.n_mels], out)?, frame_rate)?)
}

pub fn log_mel(samples: &[f64], sample_rate: f64) -> Result<LogMel> {
    log_mel_with(samples, sample_rate, &LogMelConfig::default())
}
