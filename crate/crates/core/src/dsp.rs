//! Acoustic feature containers and the pure parts of the front end: ×8
//! temporal pooling of SFM layer stacks, layer-window selection and the mel
//! filterbank. STFT-based log-Mel extraction lives in the `earshot` crate.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hidden size shared by every supported SFM backbone.
pub const SFM_DIM: usize = 1024;
/// Number of mel bands in every log-Mel matrix.
pub const N_MELS: usize = 128;
/// Temporal pooling factor applied to SFM layer stacks.
pub const POOL_FACTOR: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Backbone {
    CanaryLike,
    ParakeetLike,
    Synthetic,
}

impl Backbone {
    pub fn id(self) -> u8 {
        match self {
            Backbone::CanaryLike => 0,
            Backbone::ParakeetLike => 1,
            Backbone::Synthetic => 2,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Backbone::CanaryLike),
            1 => Some(Backbone::ParakeetLike),
            2 => Some(Backbone::Synthetic),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Backbone::CanaryLike => "canaryLike",
            Backbone::ParakeetLike => "parakeetLike",
            Backbone::Synthetic => "synthetic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Backbone::CanaryLike, Backbone::ParakeetLike, Backbone::Synthetic]
            .into_iter()
            .find(|b| b.name() == s)
    }
}

/// Inclusive range of encoder layer indices, stored 0-based as in feature
/// files. Reports and config files show layers 1-based; the conversion
/// happens only in [`LayerWindow::from_display`] and [`LayerWindow::display`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerWindow {
    pub lo: usize,
    pub hi: usize,
}

impl LayerWindow {
    pub fn new(lo: usize, hi: usize) -> Result<Self> {
        if lo > hi {
            return Err(Error::Config(format!("layer window {lo}-{hi} is empty")));
        }
        Ok(LayerWindow { lo, hi })
    }

    /// Window from 1-based layer numbers as shown on figure axes.
    pub fn from_display(lo: usize, hi: usize) -> Result<Self> {
        if lo == 0 || hi == 0 {
            return Err(Error::Config("displayed layer numbers start at 1".into()));
        }
        Self::new(lo - 1, hi - 1)
    }

    /// `(lo, hi)` as 1-based layer numbers.
    pub fn display(self) -> (usize, usize) {
        (self.lo + 1, self.hi + 1)
    }

    /// Parses `"12-15"` or `"20"` (1-based).
    pub fn parse_display(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad layer window `{s}`"));
        let (lo, hi) = match s.trim().split_once('-') {
            Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => {
                let v = s.trim().parse().map_err(|_| bad())?;
                (v, v)
            }
        };
        Self::from_display(lo, hi)
    }

    pub fn display_label(self) -> String {
        let (lo, hi) = self.display();
        if lo == hi {
            format!("{lo}")
        } else {
            format!("{lo}-{hi}")
        }
    }

    pub fn len(self) -> usize {
        self.hi - self.lo + 1
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn contains(self, idx: usize) -> bool {
        (self.lo..=self.hi).contains(&idx)
    }

    pub fn intersect(self, other: LayerWindow) -> Option<LayerWindow> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        (lo <= hi).then_some(LayerWindow { lo, hi })
    }
}

/// Log-Mel matrix `[T, 128]` (natural log, floor-clamped).
#[derive(Clone, Debug, PartialEq)]
pub struct LogMel {
    pub frames: Tensor,
    pub frame_rate: f64,
}

impl LogMel {
    pub fn new(frames: Tensor, frame_rate: f64) -> Result<Self> {
        if frames.rank() != 2 || frames.shape()[1] != N_MELS {
            return Err(Error::dim("LogMel", frames.shape(), &[0, N_MELS]));
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite("log-Mel frames".into()));
        }
        Ok(LogMel { frames, frame_rate })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

/// Hidden states of selected encoder layers: `layers[l]` is `[T, 1024]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SfmStack {
    pub backbone: Backbone,
    pub layer_indices: Vec<usize>,
    pub layers: Vec<Tensor>,
}

impl SfmStack {
    pub fn new(backbone: Backbone, layer_indices: Vec<usize>, layers: Vec<Tensor>) -> Result<Self> {
        if layers.is_empty() || layers.len() != layer_indices.len() {
            return Err(Error::Input(format!(
                "{} layer tensors for {} indices",
                layers.len(),
                layer_indices.len()
            )));
        }
        if layer_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input("layer indices must be strictly increasing".into()));
        }
        let t = layers[0].shape().first().copied().unwrap_or(0);
        for l in &layers {
            if l.shape() != [t, SFM_DIM] {
                return Err(Error::dim("SfmStack", l.shape(), &[t, SFM_DIM]));
            }
        }
        Ok(SfmStack {
            backbone,
            layer_indices,
            layers,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.layers[0].shape()[0]
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Everything the model reads for one stream (left ear, right ear or
/// reference).
#[derive(Clone, Debug, PartialEq)]
pub struct StreamBundle {
    pub sfm: Vec<SfmStack>,
    pub logmel: LogMel,
    /// Frames that carry signal; the rest is padding.
    pub valid_frames: usize,
}

impl StreamBundle {
    pub fn stack(&self, backbone: Backbone) -> Option<&SfmStack> {
        self.sfm.iter().find(|s| s.backbone == backbone)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.logmel.n_frames();
        if self.valid_frames == 0 || self.valid_frames > t {
            return Err(Error::Input(format!("valid_frames {} outside 1..={t}", self.valid_frames)));
        }
        for s in &self.sfm {
            if s.n_frames() != t {
                return Err(Error::Input(format!(
                    "{} stack has {} frames, log-Mel has {t}",
                    s.backbone.name(),
                    s.n_frames()
                )));
            }
        }
        Ok(())
    }
}

/// Acoustic input for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub utterance_id: String,
    pub left: StreamBundle,
    pub right: StreamBundle,
    pub reference: Option<StreamBundle>,
}

/// Averages non-overlapping windows of 8 frames. A trailing partial window is
/// averaged over its actual length, so `T' = ceil(T / 8)`.
pub fn temporal_pool_x8(stack: &SfmStack) -> SfmStack {
    let layers = stack.layers.iter().map(|l| pool_frames(l, l.shape()[0]).0).collect();
    SfmStack {
        backbone: stack.backbone,
        layer_indices: stack.layer_indices.clone(),
        layers,
    }
}

/// Pools `[T, D]` by 8 using only the first `valid` frames. Returns the
/// `[ceil(T/8), D]` tokens and a validity mask; tokens past the valid region
/// are zero.
pub fn pool_frames(x: &Tensor, valid: usize) -> (Tensor, Vec<bool>) {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let n_tok = t.div_ceil(POOL_FACTOR);
    let mut out = vec![0.0; n_tok * d];
    let mut mask = vec![false; n_tok];
    let src = x.data();
    for (j, m) in mask.iter_mut().enumerate() {
        let start = j * POOL_FACTOR;
        let end = (start + POOL_FACTOR).min(valid.min(t));
        if start >= end {
            continue;
        }
        *m = true;
        let row = &mut out[j * d..(j + 1) * d];
        for f in start..end {
            for (o, v) in row.iter_mut().zip(&src[f * d..(f + 1) * d]) {
                *o += v;
            }
        }
        let inv = 1.0 / (end - start) as f64;
        row.iter_mut().for_each(|o| *o *= inv);
    }
    (Tensor::new([n_tok, d], out).expect("pooled shape"), mask)
}

/// Keeps the layers whose original index lies in `window`, in order.
pub fn select_layers(stack: &SfmStack, window: LayerWindow) -> Result<SfmStack> {
    let first = stack.layer_indices[0];
    let last = *stack.layer_indices.last().unwrap();
    if window.lo < first || window.hi > last {
        let (lo, hi) = window.display();
        return Err(Error::Config(format!(
            "layer window {lo}-{hi} outside available layers {}-{}",
            first + 1,
            last + 1
        )));
    }
    let (mut idx, mut layers) = (Vec::new(), Vec::new());
    for (i, l) in stack.layer_indices.iter().zip(&stack.layers) {
        if window.contains(*i) {
            idx.push(*i);
            layers.push(l.clone());
        }
    }
    if idx.is_empty() {
        return Err(Error::Config(format!("no layers of the stack fall in window {}", window.display_label())));
    }
    SfmStack::new(stack.backbone, idx, layers)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * libm::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (libm::pow(10.0, mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of `n_mels` HTK-mel triangles spanning 0 to
/// Nyquist.
pub fn mel_center_frequencies(n_mels: usize, sample_rate: f64) -> Vec<f64> {
    let top = hz_to_mel(sample_rate / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular HTK-mel filterbank `[n_mels, n_fft_bins]`.
///
/// Triangles have unit peak and their feet sit on the neighbouring centers,
/// so every FFT bin between the first and last center is covered by weights
/// summing to one.
pub fn mel_filterbank(n_fft_bins: usize, n_mels: usize, sample_rate: f64) -> Result<Tensor> {
    if n_mels == 0 || n_mels >= n_fft_bins {
        return Err(Error::Config(format!(
            "need 0 < n_mels < n_fft_bins, got {n_mels} and {n_fft_bins}"
        )));
    }
    let top = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = (sample_rate / 2.0) / (n_fft_bins - 1) as f64;
    let mut fb = vec![0.0; n_mels * n_fft_bins];
    for m in 0..n_mels {
        let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_fft_bins {
            let f = k as f64 * bin_hz;
            let w = if f > lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f < hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
            fb[m * n_fft_bins + k] = w;
        }
    }
    Tensor::new([n_mels, n_fft_bins], fb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack_with(indices: &[usize], t: usize, f: impl Fn(usize, usize) -> f64) -> SfmStack {
        let layers = indices
            .iter()
            .map(|&l| Tensor::from_fn([t, SFM_DIM], |i| f(l, i / SFM_DIM)))
            .collect();
        SfmStack::new(Backbone::Synthetic, indices.to_vec(), layers).unwrap()
    }

    #[test]
    fn pool_examples() {
        let s = stack_with(&[0], 16, |_, _| 3.25);
        let p = temporal_pool_x8(&s);
        assert_eq!(p.layers[0].shape(), &[2, SFM_DIM]);
        assert!(p.layers[0].data().iter().all(|&v| v == 3.25));

        let s = stack_with(&[0], 10, |_, t| (t + 1) as f64);
        let p = temporal_pool_x8(&s);
        assert_eq!(p.layers[0].row(0)[0], 4.5);
        assert_eq!(p.layers[0].row(1)[5], 9.5);

        let s = stack_with(&[0], 8, |_, t| t as f64);
        let p = temporal_pool_x8(&s);
        assert_eq!(p.layers[0].shape(), &[1, SFM_DIM]);
        assert_eq!(p.layers[0].row(0)[0], 3.5);
    }

    #[test]
    fn pool_respects_valid_frames() {
        let x = Tensor::from_fn([20, 2], |i| (i / 2) as f64);
        let (p, mask) = pool_frames(&x, 10);
        assert_eq!(mask, [true, true, false]);
        assert_eq!(p.row(1), &[8.5, 8.5]);
        assert_eq!(p.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn select_examples() {
        let all: Vec<usize> = (0..32).collect();
        let s = stack_with(&all, 1, |l, _| l as f64);
        let w = LayerWindow::new(10, 16).unwrap();
        assert_eq!(select_layers(&s, w).unwrap().n_layers(), 7);
        let w = LayerWindow::from_display(12, 15).unwrap();
        let sel = select_layers(&s, w).unwrap();
        assert_eq!(sel.n_layers(), 4);
        assert_eq!(sel.layer_indices, [11, 12, 13, 14]);
        assert_eq!(sel.layers[0].data()[0], 11.0);
        let w = LayerWindow::from_display(20, 20).unwrap();
        assert_eq!(select_layers(&s, w).unwrap().n_layers(), 1);
        let w = LayerWindow::new(30, 40).unwrap();
        assert!(matches!(select_layers(&s, w), Err(Error::Config(_))));
        assert!(LayerWindow::new(5, 4).is_err());
    }

    #[test]
    fn display_round_trip() {
        let w = LayerWindow::parse_display("12-15").unwrap();
        assert_eq!((w.lo, w.hi), (11, 14));
        assert_eq!(w.display_label(), "12-15");
        assert_eq!(LayerWindow::parse_display("20").unwrap().display_label(), "20");
        assert!(LayerWindow::parse_display("0-3").is_err());
    }

    #[test]
    fn filterbank_partition_of_unity() {
        let sr = 16000.0;
        let bins = 257;
        let fb = mel_filterbank(bins, N_MELS, sr).unwrap();
        let centers = mel_center_frequencies(N_MELS, sr);
        let bin_hz = 8000.0 / 256.0;
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            if f >= centers[0] && f <= centers[N_MELS - 1] {
                let s: f64 = (0..N_MELS).map(|m| fb.at2(m, k)).sum();
                assert!((0.999..=1.001).contains(&s), "bin {k}: {s}");
            }
        }
        assert!(centers.windows(2).all(|w| w[0] < w[1]));
        for m in 0..N_MELS {
            let row: Vec<f64> = (0..bins).map(|k| fb.at2(m, k)).collect();
            let peak = row.iter().cloned().enumerate().fold((0, -1.0), |a, (i, v)| if v > a.1 { (i, v) } else { a }).0;
            assert!(row[..=peak].windows(2).all(|w| w[0] <= w[1]));
            assert!(row[peak..].windows(2).all(|w| w[0] >= w[1]));
        }
        assert!(mel_filterbank(100, 128, sr).is_err());
    }

    #[test]
    fn stack_invariants() {
        let t = Tensor::zeros([2, SFM_DIM]);
        assert!(SfmStack::new(Backbone::Synthetic, vec![3, 2], vec![t.clone(), t.clone()]).is_err());
        assert!(SfmStack::new(Backbone::Synthetic, vec![1], vec![Tensor::zeros([2, 10])]).is_err());
        assert!(SfmStack::new(Backbone::Synthetic, vec![1, 2], vec![t.clone(), t]).is_ok());
    }
}
