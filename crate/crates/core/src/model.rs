//! The predictor graph.
//!
//! Per stream (left ear, right ear, reference):
//!
//! 1. log-Mel frames go through a three-branch dilated CNN (MSCNN) at full
//!    frame rate;
//! 2. each selected SFM layer, pooled ×8 in time, is projected to `d_model`
//!    and used as queries against the MSCNN frames (SFM and MSCNN fusion);
//! 3. temporal stage: a depth-1 self-attention encoder over time per layer,
//!    ear streams then cross-attend to the reference tokens of the same
//!    layer, and a masked mean (or a CLS token) summarises each layer;
//! 4. layer stage: the per-layer summaries plus the conditioning token form a
//!    sequence encoded by a depth-1 layer encoder, ears attend to the
//!    reference sequence, and finally the two ears attend to each other;
//! 5. a shared MLP head scores each ear and log-mean-exp pooling combines
//!    them into a best-ear utterance score.
//!
//! Every block is shared across streams and layers, so the parameter count
//! does not depend on how many layers are selected.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{banded_mask, key_mask_matrix, uniform_weight, AttentionConfig, CrossAttentionBlock};
use crate::conditioning::{ConditioningMode, ConditioningParams, ConditioningStats, ListenerProfile};
use crate::dsp::{pool_frames, select_layers, Backbone, FeatureBundle, LayerWindow, StreamBundle, N_MELS, POOL_FACTOR, SFM_DIM};
use crate::error::{Error, Result, StageExt};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::Tensor;

/// `(kernel, dilation)` of the three MSCNN branches.
pub const MSCNN_BRANCHES: [(usize, usize); 3] = [(3, 1), (5, 2), (9, 4)];

/// How each ear's representation is read out of the layer sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Readout {
    /// Setup A: the conditioning-token position.
    SeverityToken,
    /// Setup B: mean over the layer positions.
    MeanPool,
    /// Setup C: a learned CLS token at both stages.
    ClsPool,
}

impl Readout {
    pub fn name(self) -> &'static str {
        match self {
            Readout::SeverityToken => "severityToken",
            Readout::MeanPool => "meanPool",
            Readout::ClsPool => "clsPool",
        }
    }

    pub fn letter(self) -> char {
        match self {
            Readout::SeverityToken => 'A',
            Readout::MeanPool => 'B',
            Readout::ClsPool => 'C',
        }
    }

    /// Accepts the long names or the setup letters A/B/C.
    pub fn parse(s: &str) -> Option<Self> {
        [Readout::SeverityToken, Readout::MeanPool, Readout::ClsPool]
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s) || s.len() == 1 && s.eq_ignore_ascii_case(&r.letter().to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EarPooling {
    BestEarLse,
    AverageEarFeature,
}

impl EarPooling {
    pub fn name(self) -> &'static str {
        match self {
            EarPooling::BestEarLse => "bestEarLSE",
            EarPooling::AverageEarFeature => "averageEarFeature",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [EarPooling::BestEarLse, EarPooling::AverageEarFeature]
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
    }
}

/// Architectural hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub dropout_p: f64,
    pub mscnn_channels: usize,
    pub backbones: Vec<Backbone>,
    /// One window per entry of `backbones`.
    pub layer_window: Vec<LayerWindow>,
    pub readout: Readout,
    pub conditioning: ConditioningMode,
    pub ear_pooling: EarPooling,
    pub beta: f64,
    pub use_reference: bool,
    pub positional_encoding: bool,
    /// Radius (in pooled tokens) of banded ear→reference attention at the
    /// temporal stage; `None` attends over the full reference sequence.
    pub ref_time_window: Option<usize>,
    /// Per-utterance, per-band standardization of log-Mel inputs.
    pub logmel_normalize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let w = LayerWindow::from_display(10, 16).expect("static window");
        ModelConfig {
            d_model: 256,
            n_heads: 4,
            ffn_mult: 2,
            dropout_p: 0.1,
            mscnn_channels: 192,
            backbones: vec![Backbone::CanaryLike, Backbone::ParakeetLike],
            layer_window: vec![w, w],
            readout: Readout::SeverityToken,
            conditioning: ConditioningMode::Categorical,
            ear_pooling: EarPooling::BestEarLse,
            beta: 6.0,
            use_reference: true,
            positional_encoding: false,
            ref_time_window: None,
            logmel_normalize: false,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration on a single synthetic backbone.
    pub fn tiny(window: LayerWindow) -> Self {
        ModelConfig {
            d_model: 32,
            n_heads: 2,
            dropout_p: 0.0,
            mscnn_channels: 24,
            backbones: vec![Backbone::Synthetic],
            layer_window: vec![window],
            ..Self::default()
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            dropout_p: self.dropout_p,
            ffn_mult: self.ffn_mult,
        }
    }

    /// Total selected layers across backbones.
    pub fn total_layers(&self) -> usize {
        self.layer_window.iter().map(|w| w.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        if self.mscnn_channels == 0 || self.mscnn_channels % 3 != 0 {
            return Err(Error::Config(format!(
                "mscnn_channels {} must be a positive multiple of 3",
                self.mscnn_channels
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.backbones.is_empty() || self.backbones.len() != self.layer_window.len() {
            return Err(Error::Config(format!(
                "{} backbones but {} layer windows",
                self.backbones.len(),
                self.layer_window.len()
            )));
        }
        for (i, b) in self.backbones.iter().enumerate() {
            if self.backbones[..i].contains(b) {
                return Err(Error::Config(format!("backbone {} listed twice", b.name())));
            }
        }
        if self.readout == Readout::SeverityToken && self.conditioning == ConditioningMode::None {
            return Err(Error::Config(
                "readout severityToken needs a conditioning token (conditioning != none)".into(),
            ));
        }
        if self.readout == Readout::SeverityToken && self.total_layers() == 1 {
            return Err(Error::Config(
                "readout severityToken is not allowed with a single selected layer".into(),
            ));
        }
        Ok(())
    }

    /// Flat `key = value` text, one field per line, in a fixed order.
    pub fn to_kv(&self) -> String {
        let windows: Vec<String> = self.layer_window.iter().map(|w| w.display_label()).collect();
        let backbones: Vec<&str> = self.backbones.iter().map(|b| b.name()).collect();
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        line("d_model", self.d_model.to_string());
        line("n_heads", self.n_heads.to_string());
        line("ffn_mult", self.ffn_mult.to_string());
        line("dropout_p", format!("{}", self.dropout_p));
        line("mscnn_channels", self.mscnn_channels.to_string());
        line("backbones", backbones.join(","));
        line("layer_window", windows.join(","));
        line("readout", self.readout.name().into());
        line("conditioning", self.conditioning.name().into());
        line("ear_pooling", self.ear_pooling.name().into());
        line("beta", format!("{}", self.beta));
        line("use_reference", self.use_reference.to_string());
        line("positional_encoding", self.positional_encoding.to_string());
        line(
            "ref_time_window",
            self.ref_time_window.map_or("none".into(), |r| r.to_string()),
        );
        line("logmel_normalize", self.logmel_normalize.to_string());
        s
    }

    /// Parses the text produced by [`ModelConfig::to_kv`]. Missing keys keep
    /// their defaults; unknown keys are errors. The result is validated.
    pub fn from_kv(text: &str) -> Result<Self> {
        let cfg = Self::from_kv_unchecked(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`ModelConfig::from_kv`] without the final validation.
    pub fn from_kv_unchecked(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in parse_kv(text)? {
            let bad = || Error::Config(format!("bad value `{v}` for `{k}`"));
            match k.as_str() {
                "d_model" => cfg.d_model = v.parse().map_err(|_| bad())?,
                "n_heads" => cfg.n_heads = v.parse().map_err(|_| bad())?,
                "ffn_mult" => cfg.ffn_mult = v.parse().map_err(|_| bad())?,
                "dropout_p" => cfg.dropout_p = v.parse().map_err(|_| bad())?,
                "mscnn_channels" => cfg.mscnn_channels = v.parse().map_err(|_| bad())?,
                "backbones" => {
                    cfg.backbones = v
                        .split(',')
                        .map(|b| Backbone::parse(b.trim()).ok_or_else(bad))
                        .collect::<Result<_>>()?
                }
                "layer_window" => {
                    cfg.layer_window = v
                        .split(',')
                        .map(LayerWindow::parse_display)
                        .collect::<Result<_>>()?
                }
                "readout" => cfg.readout = Readout::parse(&v).ok_or_else(bad)?,
                "conditioning" => cfg.conditioning = ConditioningMode::parse(&v).ok_or_else(bad)?,
                "ear_pooling" => cfg.ear_pooling = EarPooling::parse(&v).ok_or_else(bad)?,
                "beta" => cfg.beta = v.parse().map_err(|_| bad())?,
                "use_reference" => cfg.use_reference = v.parse().map_err(|_| bad())?,
                "positional_encoding" => cfg.positional_encoding = v.parse().map_err(|_| bad())?,
                "ref_time_window" => {
                    cfg.ref_time_window = match v.as_str() {
                        "none" => None,
                        r => Some(r.parse().map_err(|_| bad())?),
                    }
                }
                "logmel_normalize" => cfg.logmel_normalize = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("unknown model config key `{k}`"))),
            }
        }
        // a single window applies to every backbone
        if cfg.layer_window.len() == 1 && cfg.backbones.len() > 1 {
            cfg.layer_window = vec![cfg.layer_window[0]; cfg.backbones.len()];
        }
        Ok(cfg)
    }
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let k = k.trim().to_string();
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

/// Model-ready features of one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamInput {
    /// `[T, 128]`, rows past the valid region zeroed.
    pub logmel: Tensor,
    /// Pooled tokens `[ceil(T/8), 1024]`, one per selected layer.
    pub layers: Vec<Tensor>,
    pub frame_mask: Vec<bool>,
    pub token_mask: Vec<bool>,
}

impl StreamInput {
    pub fn n_frames(&self) -> usize {
        self.logmel.shape()[0]
    }

    pub fn n_tokens(&self) -> usize {
        self.token_mask.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub left: StreamInput,
    pub right: StreamInput,
    pub reference: Option<StreamInput>,
}

impl ModelInput {
    /// Same utterance with the two ears exchanged.
    pub fn swapped(&self) -> Self {
        ModelInput {
            left: self.right.clone(),
            right: self.left.clone(),
            reference: self.reference.clone(),
        }
    }
}

fn prepare_stream(s: &StreamBundle, cfg: &ModelConfig) -> Result<StreamInput> {
    s.validate()?;
    let t = s.logmel.n_frames();
    let valid = s.valid_frames;
    let mut logmel = s.logmel.frames.clone();
    logmel.data_mut()[valid * N_MELS..].iter_mut().for_each(|v| *v = 0.0);
    if cfg.logmel_normalize {
        for band in 0..N_MELS {
            let vals: Vec<f64> = (0..valid).map(|f| logmel.at2(f, band)).collect();
            let mean = vals.iter().sum::<f64>() / valid as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / valid as f64;
            let inv = 1.0 / libm::sqrt(var + 1e-8);
            for f in 0..valid {
                let v = &mut logmel.data_mut()[f * N_MELS + band];
                *v = (*v - mean) * inv;
            }
        }
    }
    let mut layers = Vec::with_capacity(cfg.total_layers());
    let mut token_mask = vec![true; t.div_ceil(POOL_FACTOR)];
    for (b, w) in cfg.backbones.iter().zip(&cfg.layer_window) {
        let stack = s
            .stack(*b)
            .ok_or_else(|| Error::Input(format!("no {} features in bundle", b.name())))?;
        let sel = select_layers(stack, *w)?;
        if sel.n_layers() != w.len() {
            return Err(Error::Input(format!(
                "{} stack covers {} of the {} layers in window {}",
                b.name(),
                sel.n_layers(),
                w.len(),
                w.display_label()
            )));
        }
        for l in &sel.layers {
            let (tok, mask) = pool_frames(l, valid);
            token_mask = mask;
            layers.push(tok);
        }
    }
    Ok(StreamInput {
        logmel,
        layers,
        frame_mask: (0..t).map(|f| f < valid).collect(),
        token_mask,
    })
}

/// Selects, pools and masks the streams of `bundle` according to `cfg`.
pub fn prepare_input(bundle: &FeatureBundle, cfg: &ModelConfig) -> Result<ModelInput> {
    let reference = if cfg.use_reference {
        let r = bundle
            .reference
            .as_ref()
            .ok_or_else(|| Error::Input(format!("utterance {} has no reference stream", bundle.utterance_id)))?;
        Some(prepare_stream(r, cfg)?)
    } else {
        None
    };
    Ok(ModelInput {
        left: prepare_stream(&bundle.left, cfg)?,
        right: prepare_stream(&bundle.right, cfg)?,
        reference,
    })
}

/// Sinusoidal position table `[t, d]`.
pub fn sinusoidal_positions(t: usize, d: usize) -> Tensor {
    Tensor::from_fn([t, d], |i| {
        let (pos, k) = ((i / d) as f64, i % d);
        let rate = libm::pow(10000.0, -((k / 2 * 2) as f64) / d as f64);
        if k % 2 == 0 {
            libm::sin(pos * rate)
        } else {
            libm::cos(pos * rate)
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MscnnParams {
    pub branches: [(ParamId, ParamId); 3],
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Handles of every learnable tensor in the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub mscnn: MscnnParams,
    pub sfm_proj_w: ParamId,
    pub sfm_proj_b: ParamId,
    pub fusion: CrossAttentionBlock,
    pub temporal_self: CrossAttentionBlock,
    pub temporal_cross: Option<CrossAttentionBlock>,
    pub layer_self: CrossAttentionBlock,
    pub layer_cross: Option<CrossAttentionBlock>,
    pub cross_ear: CrossAttentionBlock,
    pub temporal_cls: Option<ParamId>,
    pub layer_cls: Option<ParamId>,
    pub head: HeadParams,
    pub cond: ConditioningParams,
}

/// Per-ear and pooled scores as graph variables, each of shape `[1]`.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub left: Var,
    pub right: Var,
    pub pooled: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub left: f64,
    pub right: f64,
    pub pooled: f64,
}

/// One stream after the temporal stage.
pub struct StreamState {
    /// Encoded tokens per layer (with the CLS row in Setup C).
    pub tokens: Vec<Var>,
    /// Validity of the rows of each entry of `tokens`.
    pub mask: Vec<bool>,
    /// One `[d_model]` summary per layer.
    pub summaries: Vec<Var>,
}

/// Configuration, parameters and conditioning statistics of one predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParameterStore,
    pub params: ModelParams,
    pub stats: ConditioningStats,
}

impl Model {
    /// Freshly initialized model. Weights are `Uniform(±1/sqrt(fan_in))`,
    /// embeddings and CLS vectors `Normal(0, 0.02)`, norms identity, biases
    /// zero.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let d = cfg.d_model;
        let c3 = cfg.mscnn_channels / 3;
        let mut branches = Vec::with_capacity(3);
        for (k, dil) in MSCNN_BRANCHES {
            let fan_in = k * N_MELS;
            let w = uniform_weight(&mut rng, fan_in, c3).reshape([k, N_MELS, c3])?;
            let w = store.register(format!("mscnn.k{k}d{dil}.w"), w)?;
            let b = store.register(format!("mscnn.k{k}d{dil}.b"), Tensor::zeros([c3]))?;
            branches.push((w, b));
        }
        let mscnn = MscnnParams {
            branches: [branches[0], branches[1], branches[2]],
            proj_w: store.register("mscnn.proj.w", uniform_weight(&mut rng, cfg.mscnn_channels, d))?,
            proj_b: store.register("mscnn.proj.b", Tensor::zeros([d]))?,
        };
        let sfm_proj_w = store.register("sfm_proj.w", uniform_weight(&mut rng, SFM_DIM, d))?;
        let sfm_proj_b = store.register("sfm_proj.b", Tensor::zeros([d]))?;
        let att = cfg.attention();
        let fusion = CrossAttentionBlock::register(&mut store, "fusion", att, &mut rng)?;
        let temporal_self = CrossAttentionBlock::register(&mut store, "temporal.self", att, &mut rng)?;
        let temporal_cross = if cfg.use_reference {
            Some(CrossAttentionBlock::register(&mut store, "temporal.cross_ref", att, &mut rng)?)
        } else {
            None
        };
        let layer_self = CrossAttentionBlock::register(&mut store, "layer.self", att, &mut rng)?;
        let layer_cross = if cfg.use_reference {
            Some(CrossAttentionBlock::register(&mut store, "layer.cross_ref", att, &mut rng)?)
        } else {
            None
        };
        let cross_ear = CrossAttentionBlock::register(&mut store, "layer.cross_ear", att, &mut rng)?;
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let mut cls = |store: &mut ParameterStore, name: &str| {
            store.register(name, Tensor::from_fn([d], |_| normal.sample(&mut rng)))
        };
        let (temporal_cls, layer_cls) = if cfg.readout == Readout::ClsPool {
            let t = cls(&mut store, "readout.temporal_cls")?;
            // without conditioning the generic CLS token doubles as the layer CLS
            let l = if cfg.conditioning != ConditioningMode::None {
                Some(cls(&mut store, "readout.layer_cls")?)
            } else {
                None
            };
            (Some(t), l)
        } else {
            (None, None)
        };
        let head = HeadParams {
            w1: store.register("head.w1", uniform_weight(&mut rng, d, d))?,
            b1: store.register("head.b1", Tensor::zeros([d]))?,
            w2: store.register("head.w2", uniform_weight(&mut rng, d, 1))?,
            b2: store.register("head.b2", Tensor::zeros([1]))?,
        };
        let cond = ConditioningParams::register(&mut store, cfg.conditioning, d, &mut rng)?;
        Ok(Model {
            cfg,
            store,
            params: ModelParams {
                mscnn,
                sfm_proj_w,
                sfm_proj_b,
                fusion,
                temporal_self,
                temporal_cross,
                layer_self,
                layer_cross,
                cross_ear,
                temporal_cls,
                layer_cls,
                head,
                cond,
            },
            stats: ConditioningStats::default(),
        })
    }

    /// Multi-scale CNN: `[T, 128] -> [T, d_model]`, length preserving.
    pub fn mscnn(&self, g: &mut Graph, logmel: Var) -> Result<Var> {
        let s = g.shape(logmel).to_vec();
        if s.len() != 2 || s[1] != N_MELS || s[0] == 0 {
            return Err(Error::dim("mscnn", &s, &[0, N_MELS]));
        }
        let mut outs = Vec::with_capacity(3);
        for ((_, dil), (w, b)) in MSCNN_BRANCHES.iter().zip(self.params.mscnn.branches) {
            let (w, b) = (g.param(&self.store, w), g.param(&self.store, b));
            let y = g.conv1d_dilated(logmel, w, Some(b), *dil)?;
            outs.push(g.silu(y)?);
        }
        let cat = g.concat(&outs, 1)?;
        let (w, b) = (
            g.param(&self.store, self.params.mscnn.proj_w),
            g.param(&self.store, self.params.mscnn.proj_b),
        );
        g.linear(cat, w, Some(b))
    }

    /// Projected SFM tokens query the full-rate MSCNN frames.
    pub fn fuse_sfm_mscnn(&self, g: &mut Graph, sfm_tokens: Var, mscnn_feats: Var, frame_mask: &[bool]) -> Result<Var> {
        let (st, sm) = (g.shape(sfm_tokens).to_vec(), g.shape(mscnn_feats).to_vec());
        if st.len() != 2 || st[1] != SFM_DIM || sm.len() != 2 || st[0] != sm[0].div_ceil(POOL_FACTOR) {
            return Err(Error::dim("fuse_sfm_mscnn", &st, &sm));
        }
        if frame_mask.len() != sm[0] {
            return Err(Error::dim("fuse_sfm_mscnn mask", &[frame_mask.len()], &sm));
        }
        let (w, b) = (
            g.param(&self.store, self.params.sfm_proj_w),
            g.param(&self.store, self.params.sfm_proj_b),
        );
        let q = g.linear(sfm_tokens, w, Some(b))?;
        let mask = key_mask_matrix(st[0], frame_mask);
        self.params
            .fusion
            .forward(g, &self.store, q, mscnn_feats, mscnn_feats, Some(&mask))
    }

    fn with_positions(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if !self.cfg.positional_encoding {
            return Ok(x);
        }
        let s = g.shape(x).to_vec();
        let pe = g.input(sinusoidal_positions(s[0], s[1]));
        g.add(x, pe)
    }

    /// Fused tokens for every selected layer of one stream.
    pub fn fuse_stream(&self, g: &mut Graph, s: &StreamInput) -> Result<Vec<Var>> {
        let lm = g.input(s.logmel.clone());
        let feats = self.mscnn(g, lm).stage("mscnn")?;
        s.layers
            .iter()
            .map(|l| {
                let tok = g.input(l.clone());
                self.fuse_sfm_mscnn(g, tok, feats, &s.frame_mask).stage("fusion")
            })
            .collect()
    }

    /// Self-encodes each layer over time, cross-attends ear tokens to the
    /// reference tokens of the same layer when `reference` is given, and
    /// summarises each layer into one vector.
    pub fn temporal_stage(
        &self,
        g: &mut Graph,
        fused: &[Var],
        token_mask: &[bool],
        reference: Option<&StreamState>,
    ) -> Result<StreamState> {
        let cls = self.params.temporal_cls;
        let mut mask = token_mask.to_vec();
        if cls.is_some() {
            mask.push(true);
        }
        let mut tokens = Vec::with_capacity(fused.len());
        let mut summaries = Vec::with_capacity(fused.len());
        for (l, &x) in fused.iter().enumerate() {
            let mut x = self.with_positions(g, x)?;
            if let Some(c) = cls {
                let c = g.param(&self.store, c);
                let c = g.reshape(c, [1, self.cfg.d_model])?;
                x = g.concat(&[x, c], 0)?;
            }
            x = self.params.temporal_self.self_encode(g, &self.store, x, Some(&mask))?;
            if let (Some(r), Some(block)) = (reference, &self.params.temporal_cross) {
                let m = match self.cfg.ref_time_window {
                    Some(radius) => banded_mask(mask.len(), &r.mask, radius),
                    None => key_mask_matrix(mask.len(), &r.mask),
                };
                x = block.forward(g, &self.store, x, r.tokens[l], r.tokens[l], Some(&m))?;
            }
            let summary = if cls.is_some() {
                g.row(x, mask.len() - 1)?
            } else {
                g.masked_mean(x, &mask)?
            };
            tokens.push(x);
            summaries.push(summary);
        }
        Ok(StreamState {
            tokens,
            mask,
            summaries,
        })
    }

    fn layer_sequence(&self, g: &mut Graph, summaries: &[Var], cond: Var) -> Result<Var> {
        let mut rows = summaries.to_vec();
        rows.push(cond);
        if let Some(c) = self.params.layer_cls {
            rows.push(g.param(&self.store, c));
        }
        let seq = g.stack_rows(&rows)?;
        let seq = self.with_positions(g, seq)?;
        self.params.layer_self.self_encode(g, &self.store, seq, None)
    }

    fn readout(&self, g: &mut Graph, x: Var, n_layers: usize) -> Result<Var> {
        match self.cfg.readout {
            Readout::SeverityToken => g.row(x, n_layers),
            Readout::MeanPool => {
                let layers = g.slice(x, 0, 0, n_layers)?;
                g.mean_axis(layers, 0)
            }
            Readout::ClsPool => {
                let last = g.shape(x)[0] - 1;
                g.row(x, last)
            }
        }
    }

    /// Layer encoder, ear→reference attention and symmetric cross-ear
    /// attention; returns the `[d_model]` readout of each ear.
    pub fn layer_stage(
        &self,
        g: &mut Graph,
        left: &[Var],
        right: &[Var],
        reference: Option<&[Var]>,
        cond: Var,
    ) -> Result<(Var, Var)> {
        if left.is_empty() || left.len() != right.len() {
            return Err(Error::pre("layer_stage", "ears need the same positive number of layers"));
        }
        let mut l = self.layer_sequence(g, left, cond)?;
        let mut r = self.layer_sequence(g, right, cond)?;
        if let (Some(rs), Some(block)) = (reference, &self.params.layer_cross) {
            let rseq = self.layer_sequence(g, rs, cond)?;
            l = block.forward(g, &self.store, l, rseq, rseq, None)?;
            r = block.forward(g, &self.store, r, rseq, rseq, None)?;
        }
        let ear = &self.params.cross_ear;
        let l2 = ear.forward(g, &self.store, l, r, r, None)?;
        let r2 = ear.forward(g, &self.store, r, l, l, None)?;
        let n = left.len();
        Ok((self.readout(g, l2, n)?, self.readout(g, r2, n)?))
    }

    /// Shared MLP head: `[d_model] -> [1]` score in (0, 100).
    pub fn score_head(&self, g: &mut Graph, readout: Var) -> Result<Var> {
        let h = &self.params.head;
        let d = g.value(readout).numel();
        let x = g.reshape(readout, [1, d])?;
        let (w1, b1) = (g.param(&self.store, h.w1), g.param(&self.store, h.b1));
        let z = g.linear(x, w1, Some(b1))?;
        let z = g.silu(z)?;
        let (w2, b2) = (g.param(&self.store, h.w2), g.param(&self.store, h.b2));
        let y = g.linear(z, w2, Some(b2))?;
        let y = g.sigmoid(y)?;
        let y = g.scale(y, 100.0)?;
        g.reshape(y, [1])
    }

    /// Feature-level ear average followed by the shared head.
    pub fn average_ear_pool(&self, g: &mut Graph, left: Var, right: Var) -> Result<Var> {
        let s = g.add(left, right)?;
        let m = g.scale(s, 0.5)?;
        self.score_head(g, m)
    }

    /// Full forward pass. Dropout is active when `g` is a training graph.
    pub fn forward(&self, g: &mut Graph, input: &ModelInput, listener: &ListenerProfile) -> Result<ForwardOutput> {
        let reference = match (&input.reference, self.cfg.use_reference) {
            (Some(r), true) => {
                let fused = self.fuse_stream(g, r)?;
                Some(self.temporal_stage(g, &fused, &r.token_mask, None).stage("temporal")?)
            }
            (None, true) => return Err(Error::Input("reference stream missing".into()).in_stage("input")),
            (_, false) => None,
        };
        let mut ears = Vec::with_capacity(2);
        for s in [&input.left, &input.right] {
            if s.layers.len() != self.cfg.total_layers() {
                return Err(Error::Input(format!(
                    "stream has {} layers, config selects {}",
                    s.layers.len(),
                    self.cfg.total_layers()
                ))
                .in_stage("input"));
            }
            let fused = self.fuse_stream(g, s)?;
            ears.push(self.temporal_stage(g, &fused, &s.token_mask, reference.as_ref()).stage("temporal")?);
        }
        let cond = self
            .params
            .cond
            .token(g, &self.store, listener, &self.stats)
            .stage("conditioning")?;
        let (rl, rr) = self
            .layer_stage(
                g,
                &ears[0].summaries,
                &ears[1].summaries,
                reference.as_ref().map(|r| r.summaries.as_slice()),
                cond,
            )
            .stage("layer")?;
        let left = self.score_head(g, rl).stage("head")?;
        let right = self.score_head(g, rr).stage("head")?;
        let pooled = match self.cfg.ear_pooling {
            EarPooling::BestEarLse => best_ear_pool(g, left, right, self.cfg.beta),
            EarPooling::AverageEarFeature => self.average_ear_pool(g, rl, rr),
        }
        .stage("pooling")?;
        Ok(ForwardOutput { left, right, pooled })
    }

    /// Evaluation-mode prediction for one utterance.
    pub fn predict(&self, input: &ModelInput, listener: &ListenerProfile) -> Result<Prediction> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, input, listener)?;
        Ok(Prediction {
            left: g.value(out.left).item(),
            right: g.value(out.right).item(),
            pooled: g.value(out.pooled).item(),
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }
}

/// Differentiable best-ear pooling of two `[1]` scores:
/// `(1/β)·ln((e^{β·sL} + e^{β·sR}) / 2)`.
pub fn best_ear_pool(g: &mut Graph, left: Var, right: Var, beta: f64) -> Result<Var> {
    let both = g.concat(&[left, right], 0)?;
    g.logmeanexp(both, 0, beta)
}

/// Scalar form of [`best_ear_pool`].
pub fn best_ear_pool_value(left: f64, right: f64, beta: f64) -> f64 {
    let m = left.max(right);
    let z = libm::exp(beta * (left - m)) + libm::exp(beta * (right - m));
    m + libm::log(z / 2.0) / beta
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn readout_parse() {
        assert_eq!(Readout::parse("A"), Some(Readout::SeverityToken));
        assert_eq!(Readout::parse("clsPool"), Some(Readout::ClsPool));
        assert_eq!(Readout::parse("x"), None);
    }

    #[test]
    fn config_round_trip_and_rules() {
        let cfg = ModelConfig::default();
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        let mut c = ModelConfig::tiny(LayerWindow::from_display(20, 20).unwrap());
        assert!(c.validate().is_err());
        c.readout = Readout::ClsPool;
        assert!(c.validate().is_ok());
        c.readout = Readout::SeverityToken;
        c.conditioning = ConditioningMode::None;
        c.layer_window = vec![LayerWindow::from_display(12, 15).unwrap()];
        assert!(c.validate().is_err());
        assert!(ModelConfig::from_kv("bogus = 1").is_err());
        assert!(ModelConfig::from_kv("mscnn_channels = 10").is_err());
        let single = ModelConfig::from_kv("layer_window = 12-15").unwrap();
        assert_eq!(single.layer_window.len(), 2);
    }

    #[test]
    fn pool_value_examples() {
        assert_eq!(best_ear_pool_value(37.5, 37.5, 6.0), 37.5);
        assert!((best_ear_pool_value(30.0, 20.0, 6.0) - 29.88448).abs() < 1e-5);
    }

    #[test]
    fn sinusoid_table() {
        let pe = sinusoidal_positions(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at2(1, 0) - libm::sin(1.0)).abs() < 1e-15);
    }
}
