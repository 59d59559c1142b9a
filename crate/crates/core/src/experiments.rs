//! Layer-window sweeps, stratified evaluation, scene histograms and the
//! synthetic planted-signal corpus.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::conditioning::{Audiogram, ListenerProfile, Severity};
use crate::dsp::{Backbone, FeatureBundle, LayerWindow, LogMel, SfmStack, StreamBundle, N_MELS, SFM_DIM};
use crate::error::{Error, Result};
use crate::model::{parse_kv, prepare_input, ModelConfig, Readout};
use crate::tensor::Tensor;
use crate::training::{derive_seed, make_folds, train_fold, Dataset, Example, PredictionRecord, TrainConfig};

/// `sqrt(Σ n·rmse² / Σ n)`.
pub fn pooled_rmse(groups: &[(f64, usize)]) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::pre("pooled_rmse", "no groups"));
    }
    if groups.iter().any(|&(_, n)| n == 0) {
        return Err(Error::pre("pooled_rmse", "every group needs n > 0"));
    }
    let n: usize = groups.iter().map(|g| g.1).sum();
    let ss: f64 = groups.iter().map(|&(r, k)| k as f64 * r * r).sum();
    Ok(libm::sqrt(ss / n as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupStat {
    pub label: String,
    pub rmse: f64,
    pub n: usize,
}

/// One stratum: per-identity RMSE bars and their pooled RMSE (0 when empty).
#[derive(Clone, Debug, PartialEq)]
pub struct StratifiedReport {
    pub name: String,
    pub groups: Vec<GroupStat>,
    pub pooled_rmse: f64,
    pub n: usize,
}

/// System and listener ids present in the training manifest.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeenIds {
    pub systems: BTreeSet<String>,
    pub listeners: BTreeSet<String>,
}

fn labelled_error(r: &PredictionRecord) -> Result<f64> {
    r.label
        .map(|l| r.pooled - l)
        .ok_or_else(|| Error::Input(format!("record {} has no label", r.utterance_id)))
}

fn report(name: &str, records: &[&PredictionRecord], key: fn(&PredictionRecord) -> &str) -> Result<StratifiedReport> {
    let mut by: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = labelled_error(r)?;
        let s = by.entry(key(r)).or_default();
        s.0 += e * e;
        s.1 += 1;
    }
    let groups: Vec<GroupStat> = by
        .into_iter()
        .map(|(label, (ss, n))| GroupStat {
            label: label.to_string(),
            rmse: libm::sqrt(ss / n as f64),
            n,
        })
        .collect();
    let pairs: Vec<(f64, usize)> = groups.iter().map(|g| (g.rmse, g.n)).collect();
    Ok(StratifiedReport {
        name: name.to_string(),
        pooled_rmse: if pairs.is_empty() { 0.0 } else { pooled_rmse(&pairs)? },
        n: records.len(),
        groups,
    })
}

/// Four strata: (A) seen systems, (B) unseen systems, (C) seen listeners,
/// (D) unseen listeners. A/B bars are per system, C/D bars per listener.
pub fn stratify(records: &[PredictionRecord], seen: &SeenIds) -> Result<[StratifiedReport; 4]> {
    let (sa, sb): (Vec<_>, Vec<_>) = records.iter().partition(|r| seen.systems.contains(&r.system_id));
    let (lc, ld): (Vec<_>, Vec<_>) = records.iter().partition(|r| seen.listeners.contains(&r.listener_id));
    Ok([
        report("A_seen_systems", &sa, system_of)?,
        report("B_unseen_systems", &sb, system_of)?,
        report("C_seen_listeners", &lc, listener_of)?,
        report("D_unseen_listeners", &ld, listener_of)?,
    ])
}

fn system_of(r: &PredictionRecord) -> &str {
    &r.system_id
}

fn listener_of(r: &PredictionRecord) -> &str {
    &r.listener_id
}

fn scene_of(r: &PredictionRecord) -> &str {
    &r.scene_id
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneHistogram {
    /// `(scene, rmse, n)` sorted by scene id.
    pub scenes: Vec<(String, f64, usize)>,
    pub bin_width: f64,
    /// Count of scenes whose RMSE falls in `[i·w, (i+1)·w)`.
    pub counts: Vec<usize>,
    pub tail_threshold: f64,
    /// Fraction of scenes with RMSE above the threshold.
    pub tail_share: f64,
}

pub const DEFAULT_BIN_WIDTH: f64 = 5.0;
pub const DEFAULT_TAIL_THRESHOLD: f64 = 40.0;

/// Per-scene RMSE binned at `bin_width`.
pub fn scene_histogram(records: &[PredictionRecord], bin_width: f64, tail_threshold: f64) -> Result<SceneHistogram> {
    if !(bin_width > 0.0) {
        return Err(Error::Config(format!("bin width must be positive, got {bin_width}")));
    }
    let all: Vec<&PredictionRecord> = records.iter().collect();
    let per = report("scenes", &all, scene_of)?;
    let scenes: Vec<(String, f64, usize)> = per.groups.into_iter().map(|g| (g.label, g.rmse, g.n)).collect();
    let mut counts = Vec::new();
    for (_, r, _) in &scenes {
        let b = libm::floor(r / bin_width) as usize;
        if counts.len() <= b {
            counts.resize(b + 1, 0);
        }
        counts[b] += 1;
    }
    let tail = scenes.iter().filter(|s| s.1 > tail_threshold).count();
    Ok(SceneHistogram {
        tail_share: if scenes.is_empty() { 0.0 } else { tail as f64 / scenes.len() as f64 },
        scenes,
        bin_width,
        counts,
        tail_threshold,
    })
}

/// Anything that can turn a model configuration into a prepared dataset.
pub trait FeatureSource {
    fn dataset(&self, cfg: &ModelConfig) -> Result<Dataset>;
}

/// Mean best-validation RMSE of the first `folds` folds of a 5-fold plan.
pub fn cv_score(source: &dyn FeatureSource, mcfg: &ModelConfig, tcfg: &TrainConfig, folds: usize) -> Result<f64> {
    mcfg.validate()?;
    let data = source.dataset(mcfg)?;
    let plan = make_folds(&data.listener_list(), 5, tcfg.seed)?;
    let mut sum = 0.0;
    let n = folds.clamp(1, plan.folds.len());
    for (i, f) in plan.folds.iter().take(n).enumerate() {
        sum += train_fold(&data, f, i, mcfg, tcfg)?.val_rmse;
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub window_size: usize,
    pub windows: Vec<LayerWindow>,
    pub setups: Vec<Readout>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Folds trained per cell; the cell score is their mean best-val RMSE.
    pub folds: usize,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.window_size, 1 | 4) {
            return Err(Error::Config(format!("window_size must be 1 or 4, got {}", self.window_size)));
        }
        if self.windows.is_empty() || self.setups.is_empty() {
            return Err(Error::Config("sweep needs at least one window and one setup".into()));
        }
        if let Some(w) = self.windows.iter().find(|w| w.len() != self.window_size) {
            return Err(Error::Config(format!(
                "window {} does not have size {}",
                w.display_label(),
                self.window_size
            )));
        }
        if self.window_size == 1 && self.setups.contains(&Readout::SeverityToken) {
            return Err(Error::Config("setup A is not swept with window_size 1".into()));
        }
        self.train.validate()
    }

    /// Keys `window_size`, `windows` (`4-7,8-11`), `setups` (`A,B,C`),
    /// `folds`, and `model.*` / `train.*` overrides.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut model_lines = String::new();
        let mut train_lines = String::new();
        let mut window_size = None;
        let mut windows = Vec::new();
        let mut setups = vec![Readout::SeverityToken, Readout::MeanPool, Readout::ClsPool];
        let mut folds = 1;
        for (k, v) in parse_kv(text)? {
            let bad = || Error::Config(format!("bad value `{v}` for `{k}`"));
            if let Some(m) = k.strip_prefix("model.") {
                model_lines.push_str(&format!("{m} = {v}\n"));
            } else if let Some(t) = k.strip_prefix("train.") {
                train_lines.push_str(&format!("{t} = {v}\n"));
            } else {
                match k.as_str() {
                    "window_size" => window_size = Some(v.parse().map_err(|_| bad())?),
                    "windows" => {
                        windows = v
                            .split(',')
                            .map(LayerWindow::parse_display)
                            .collect::<Result<_>>()?
                    }
                    "setups" => {
                        setups = v
                            .split(',')
                            .map(|s| Readout::parse(s.trim()).ok_or_else(bad))
                            .collect::<Result<_>>()?
                    }
                    "folds" => folds = v.parse().map_err(|_| bad())?,
                    _ => return Err(Error::Config(format!("unknown sweep key `{k}`"))),
                }
            }
        }
        // cells are validated individually; the base may fail the single-layer rule
        let model = ModelConfig::from_kv_unchecked(&model_lines)?;
        let spec = SweepSpec {
            window_size: window_size.ok_or_else(|| Error::Config("missing window_size".into()))?,
            windows,
            setups,
            model,
            train: TrainConfig::from_kv(&train_lines)?,
            folds,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Model configuration of one grid cell.
    pub fn cell_config(&self, window: LayerWindow, setup: Readout) -> ModelConfig {
        let mut cfg = self.model.clone();
        cfg.layer_window = vec![window; cfg.backbones.len()];
        cfg.readout = setup;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub window: LayerWindow,
    pub setup: Readout,
    pub val_rmse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    /// Sorted by RMSE, failed cells last in grid order.
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn argmin(&self) -> Option<&SweepRow> {
        self.rows.first().filter(|r| r.val_rmse.is_some())
    }
}

/// Trains every (window, setup) cell with the spec's seed. Failing cells are
/// recorded rather than aborting the sweep.
pub fn run_sweep(spec: &SweepSpec, source: &dyn FeatureSource) -> Result<SweepTable> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.windows.len() * spec.setups.len());
    for &window in &spec.windows {
        for &setup in &spec.setups {
            let cfg = spec.cell_config(window, setup);
            let (val_rmse, error) = match cv_score(source, &cfg, &spec.train, spec.folds) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            rows.push(SweepRow {
                window,
                setup,
                val_rmse,
                error,
            });
        }
    }
    rows.sort_by(|a, b| match (a.val_rmse, b.val_rmse) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => core::cmp::Ordering::Less,
        (None, Some(_)) => core::cmp::Ordering::Greater,
        (None, None) => core::cmp::Ordering::Equal,
    });
    Ok(SweepTable { rows })
}

/// Parameters of the planted-signal corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_utterances: usize,
    /// Listeners per severity: mild, moderate, moderately severe.
    pub listeners: [usize; 3],
    pub n_systems: usize,
    pub n_scenes: usize,
    pub seed: u64,
    /// Stack holds layers `0..n_layers`.
    pub n_layers: usize,
    /// Inclusive range of stored frame counts; valid lengths vary inside it.
    pub min_frames: usize,
    pub max_frames: usize,
    /// Only these ear layers correlate with the reference.
    pub planted: LayerWindow,
    pub label_noise_sd: f64,
    pub latent_dim: usize,
    /// Per-utterance reference level is uniform in this range.
    pub ref_level: (f64, f64),
    /// Std of the i.i.d. noise on every SFM element.
    pub element_noise: f64,
    pub audiograms: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_utterances: 640,
            listeners: [9, 13, 4],
            n_systems: 6,
            n_scenes: 64,
            seed: 0,
            n_layers: 16,
            min_frames: 12,
            max_frames: 24,
            planted: LayerWindow { lo: 11, hi: 14 },
            label_noise_sd: 5.0,
            latent_dim: 8,
            ref_level: (0.5, 1.5),
            element_noise: 0.5,
            audiograms: true,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_utterances == 0 || self.n_systems == 0 || self.n_scenes == 0 || self.latent_dim == 0 {
            return bad("counts must be positive".into());
        }
        if self.listeners.iter().any(|&n| n < 2) {
            return bad(format!("need at least 2 listeners per severity, got {:?}", self.listeners));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad(format!("bad frame range {}..={}", self.min_frames, self.max_frames));
        }
        if self.planted.hi >= self.n_layers {
            return bad(format!(
                "planted window {} outside the {} stored layers",
                self.planted.display_label(),
                self.n_layers
            ));
        }
        if !(self.label_noise_sd >= 0.0 && self.element_noise >= 0.0 && self.ref_level.0 <= self.ref_level.1) {
            return bad("noise levels must be >= 0 and ref_level ordered".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "n_utterances = {}\nlisteners = {},{},{}\nn_systems = {}\nn_scenes = {}\nseed = {}\nn_layers = {}\nmin_frames = {}\nmax_frames = {}\nplanted = {}\nlabel_noise_sd = {}\nlatent_dim = {}\nref_level = {},{}\nelement_noise = {}\naudiograms = {}\n",
            self.n_utterances,
            self.listeners[0],
            self.listeners[1],
            self.listeners[2],
            self.n_systems,
            self.n_scenes,
            self.seed,
            self.n_layers,
            self.min_frames,
            self.max_frames,
            self.planted.display_label(),
            self.label_noise_sd,
            self.latent_dim,
            self.ref_level.0,
            self.ref_level.1,
            self.element_noise,
            self.audiograms
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut s = SynthSpec::default();
        for (k, v) in parse_kv(text)? {
            let bad = || Error::Config(format!("bad value `{v}` for `{k}`"));
            let list = || -> Result<Vec<f64>> { v.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect() };
            match k.as_str() {
                "n_utterances" => s.n_utterances = v.parse().map_err(|_| bad())?,
                "listeners" => {
                    let l = list()?;
                    if l.len() != 3 || l.iter().any(|x| *x < 0.0 || libm::trunc(*x) != *x) {
                        return Err(bad());
                    }
                    s.listeners = [l[0] as usize, l[1] as usize, l[2] as usize];
                }
                "n_systems" => s.n_systems = v.parse().map_err(|_| bad())?,
                "n_scenes" => s.n_scenes = v.parse().map_err(|_| bad())?,
                "seed" => s.seed = v.parse().map_err(|_| bad())?,
                "n_layers" => s.n_layers = v.parse().map_err(|_| bad())?,
                "min_frames" => s.min_frames = v.parse().map_err(|_| bad())?,
                "max_frames" => s.max_frames = v.parse().map_err(|_| bad())?,
                "planted" => s.planted = LayerWindow::parse_display(&v)?,
                "label_noise_sd" => s.label_noise_sd = v.parse().map_err(|_| bad())?,
                "latent_dim" => s.latent_dim = v.parse().map_err(|_| bad())?,
                "ref_level" => {
                    let l = list()?;
                    if l.len() != 2 {
                        return Err(bad());
                    }
                    s.ref_level = (l[0], l[1]);
                }
                "element_noise" => s.element_noise = v.parse().map_err(|_| bad())?,
                "audiograms" => s.audiograms = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("unknown synth key `{k}`"))),
            }
        }
        s.validate()?;
        Ok(s)
    }
}

pub fn severity_penalty(s: Severity) -> f64 {
    match s {
        Severity::Mild => 0.0,
        Severity::Moderate => 10.0,
        Severity::ModeratelySevere => 20.0,
    }
}

/// `clamp(clamp(100·c_max − penalty) + noise)` into `[0, 100]`.
pub fn synth_label(c_max: f64, severity: Severity, noise: f64) -> f64 {
    let clean = (100.0 * c_max - severity_penalty(severity)).clamp(0.0, 100.0);
    (clean + noise).clamp(0.0, 100.0)
}

/// Bookkeeping and latents of one synthetic utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceMeta {
    pub utterance_id: String,
    pub scene_id: String,
    pub system_id: String,
    pub listener_id: String,
    pub label: f64,
    /// Left, right clarity.
    pub clarity: [f64; 2],
    pub ref_level: f64,
    pub n_frames: usize,
    pub valid_frames: usize,
}

/// The planted-signal corpus. Utterance metadata is drawn up front; feature
/// tensors are regenerated on demand from per-(utterance, layer, stream)
/// seeds so only the layers a configuration needs are ever materialized.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub listeners: Vec<ListenerProfile>,
    pub utterances: Vec<UtteranceMeta>,
}

const AUDIOGRAM_SHAPE: [f64; 8] = [-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0];

fn audiogram_for(rng: &mut ChaCha8Rng, severity: Severity) -> (Audiogram, Audiogram) {
    let (lo, hi) = match severity {
        Severity::Mild => (20.0, 35.0),
        Severity::Moderate => (35.0, 50.0),
        Severity::ModeratelySevere => (50.0, 65.0),
    };
    let target = rng.random_range(lo + 0.5..hi - 0.5);
    // shape has PTA4 3.75; the ear offset cancels in the two-ear mean
    let offset = rng.random_range(0.0..3.0);
    let ear = |sign: f64| Audiogram(core::array::from_fn(|i| target - 3.75 + AUDIOGRAM_SHAPE[i] + sign * offset));
    (ear(1.0), ear(-1.0))
}

/// Smooth AR(1) latent trajectories `[t, k]` with unit stationary variance.
fn ar_latents(rng: &mut ChaCha8Rng, t: usize, k: usize) -> Vec<f64> {
    let rho: f64 = 0.9;
    let innov = libm::sqrt(1.0 - rho * rho);
    let mut z = vec![0.0; t * k];
    for j in 0..k {
        let mut prev: f64 = rng.sample(StandardNormal);
        for i in 0..t {
            if i > 0 {
                let e: f64 = rng.sample(StandardNormal);
                prev = rho * prev + innov * e;
            }
            z[i * k + j] = prev;
        }
    }
    z
}

const STREAM_REF: u64 = 0;
const STREAM_LEFT: u64 = 1;
const STREAM_RIGHT: u64 = 2;

impl SynthDataset {
    pub fn generate(spec: SynthSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0x5EED]));
        let mut listeners = Vec::new();
        for (s, &n) in Severity::ALL.iter().zip(&spec.listeners) {
            for _ in 0..n {
                let id = format!("L{:03}", listeners.len());
                let mut p = ListenerProfile::new(id, *s);
                if spec.audiograms {
                    let (l, r) = audiogram_for(&mut rng, *s);
                    p = p.with_audiograms(l, r);
                }
                listeners.push(p);
            }
        }
        let noise = Normal::new(0.0, spec.label_noise_sd.max(f64::MIN_POSITIVE)).expect("valid sd");
        let utterances = (0..spec.n_utterances)
            .map(|i| {
                let listener = &listeners[rng.random_range(0..listeners.len())];
                let clarity = [rng.random::<f64>(), rng.random::<f64>()];
                let eps = if spec.label_noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                let valid = rng.random_range(spec.min_frames..=spec.max_frames);
                UtteranceMeta {
                    utterance_id: format!("U{i:05}"),
                    scene_id: format!("S{:03}", rng.random_range(0..spec.n_scenes)),
                    system_id: format!("E{:02}", rng.random_range(0..spec.n_systems)),
                    listener_id: listener.listener_id.clone(),
                    label: synth_label(clarity[0].max(clarity[1]), listener.severity, eps),
                    clarity,
                    ref_level: rng.random_range(spec.ref_level.0..=spec.ref_level.1),
                    n_frames: spec.max_frames,
                    valid_frames: valid,
                }
            })
            .collect();
        Ok(SynthDataset {
            spec,
            listeners,
            utterances,
        })
    }

    pub fn listener(&self, id: &str) -> Option<&ListenerProfile> {
        self.listeners.iter().find(|l| l.listener_id == id)
    }

    /// Per-layer level direction and latent projection `[k, 1024]`; fixed for
    /// the corpus.
    fn layer_basis(&self, layer: usize) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.spec.seed, &[0xBA5E, layer as u64]));
        let k = self.spec.latent_dim;
        let scale = 1.0 / libm::sqrt(k as f64);
        let u: Vec<f64> = (0..SFM_DIM).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let p: Vec<f64> = (0..k * SFM_DIM)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        (u, p)
    }

    fn latents(&self, utt: usize, stream: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.spec.seed, &[0x1A7E, utt as u64, stream]));
        ar_latents(&mut rng, self.utterances[utt].n_frames, self.spec.latent_dim)
    }

    /// `level·u + z·P + σ·ε` over `[T, 1024]`.
    fn field(&self, utt: usize, layer: usize, stream: u64, level: f64, z: &[f64], basis: &(Vec<f64>, Vec<f64>)) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.spec.seed, &[0xF1E1D, utt as u64, layer as u64, stream]));
        let (u, p) = basis;
        let (t, k) = (self.utterances[utt].n_frames, self.spec.latent_dim);
        let mut out = vec![0.0; t * SFM_DIM];
        for i in 0..t {
            let row = &mut out[i * SFM_DIM..(i + 1) * SFM_DIM];
            for (d, v) in row.iter_mut().enumerate() {
                *v = level * u[d];
            }
            for j in 0..k {
                let zj = z[i * k + j];
                for (v, pv) in row.iter_mut().zip(&p[j * SFM_DIM..(j + 1) * SFM_DIM]) {
                    *v += zj * pv;
                }
            }
            for v in row.iter_mut() {
                *v += self.spec.element_noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        out
    }

    fn logmel(&self, utt: usize, z: &[f64]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.spec.seed, &[0x3E1, 0]));
        let k = self.spec.latent_dim;
        let mix: Vec<f64> = (0..k * N_MELS).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let t = self.utterances[utt].n_frames;
        Tensor::from_fn([t, N_MELS], |i| {
            let (f, m) = (i / N_MELS, i % N_MELS);
            let e: f64 = (0..k).map(|j| z[f * k + j] * mix[j * N_MELS + m]).sum();
            // a log-energy-like profile falling with mel band
            -2.0 - 0.02 * m as f64 + 0.5 * e
        })
    }

    /// Full feature bundle of utterance `utt`, restricted to `layers` when
    /// given.
    pub fn bundle(&self, utt: usize, layers: Option<LayerWindow>) -> Result<FeatureBundle> {
        let meta = self
            .utterances
            .get(utt)
            .ok_or_else(|| Error::Input(format!("utterance index {utt} out of range")))?;
        let all = LayerWindow {
            lo: 0,
            hi: self.spec.n_layers - 1,
        };
        let window = match layers {
            Some(w) => w.intersect(all).filter(|x| *x == w).ok_or_else(|| {
                Error::Input(format!(
                    "window {} outside the {} synthetic layers",
                    w.display_label(),
                    self.spec.n_layers
                ))
            })?,
            None => all,
        };
        let t = meta.n_frames;
        let z_ref = self.latents(utt, STREAM_REF);
        let z_ears = [self.latents(utt, STREAM_LEFT), self.latents(utt, STREAM_RIGHT)];
        let mut ref_layers = Vec::new();
        let mut ear_layers: [Vec<Tensor>; 2] = Default::default();
        for layer in window.lo..=window.hi {
            let basis = self.layer_basis(layer);
            let r = self.field(utt, layer, STREAM_REF, meta.ref_level, &z_ref, &basis);
            for (e, stream) in [STREAM_LEFT, STREAM_RIGHT].into_iter().enumerate() {
                let noise = self.field(utt, layer, stream, 0.0, &z_ears[e], &basis);
                let data = if self.spec.planted.contains(layer) {
                    let c = meta.clarity[e];
                    r.iter().zip(&noise).map(|(a, b)| c * a + (1.0 - c) * b).collect()
                } else {
                    noise
                };
                ear_layers[e].push(Tensor::new([t, SFM_DIM], data)?);
            }
            ref_layers.push(Tensor::new([t, SFM_DIM], r)?);
        }
        let indices: Vec<usize> = (window.lo..=window.hi).collect();
        let stream = |layers: Vec<Tensor>, z: &[f64], c: f64, z_ref: &[f64]| -> Result<StreamBundle> {
            let zmix: Vec<f64> = z.iter().zip(z_ref).map(|(a, b)| c * b + (1.0 - c) * a).collect();
            Ok(StreamBundle {
                sfm: vec![SfmStack::new(Backbone::Synthetic, indices.clone(), layers)?],
                logmel: LogMel::new(self.logmel(utt, &zmix), 100.0)?,
                valid_frames: meta.valid_frames,
            })
        };
        let [left, right] = ear_layers;
        Ok(FeatureBundle {
            utterance_id: meta.utterance_id.clone(),
            left: stream(left, &z_ears[0], meta.clarity[0], &z_ref)?,
            right: stream(right, &z_ears[1], meta.clarity[1], &z_ref)?,
            reference: Some(stream(ref_layers, &z_ref, 1.0, &z_ref)?),
        })
    }

    /// Window spanning every configured layer, or an error if the config
    /// asks for a non-synthetic backbone.
    fn needed_window(cfg: &ModelConfig) -> Result<LayerWindow> {
        let mut w: Option<LayerWindow> = None;
        for (b, lw) in cfg.backbones.iter().zip(&cfg.layer_window) {
            if *b != Backbone::Synthetic {
                return Err(Error::Input(format!("synthetic corpus has no {} features", b.name())));
            }
            w = Some(match w {
                None => *lw,
                Some(x) => LayerWindow {
                    lo: x.lo.min(lw.lo),
                    hi: x.hi.max(lw.hi),
                },
            });
        }
        w.ok_or_else(|| Error::Config("no backbones configured".into()))
    }
}

impl FeatureSource for SynthDataset {
    fn dataset(&self, cfg: &ModelConfig) -> Result<Dataset> {
        let window = Self::needed_window(cfg)?;
        let mut examples = Vec::with_capacity(self.utterances.len());
        for (i, m) in self.utterances.iter().enumerate() {
            let bundle = self.bundle(i, Some(window))?;
            examples.push(Example {
                utterance_id: m.utterance_id.clone(),
                scene_id: m.scene_id.clone(),
                system_id: m.system_id.clone(),
                listener_id: m.listener_id.clone(),
                label: Some(m.label),
                input: prepare_input(&bundle, cfg)?,
            });
        }
        Ok(Dataset {
            examples,
            listeners: self.listeners.iter().map(|l| (l.listener_id.clone(), l.clone())).collect(),
        })
    }
}
