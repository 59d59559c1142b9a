//! Listener profiles and the conditioning token fed to the layer stage.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::uniform_weight;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::Tensor;

/// Audiogram test frequencies in Hz, in storage order.
pub const AUDIOGRAM_FREQS_HZ: [f64; 8] = [250.0, 500.0, 1000.0, 2000.0, 3000.0, 4000.0, 6000.0, 8000.0];
/// Positions of 0.5/1/2/4 kHz in [`AUDIOGRAM_FREQS_HZ`].
const PTA4_BANDS: [usize; 4] = [1, 2, 3, 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Severity {
    Mild,
    Moderate,
    ModeratelySevere,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Mild, Severity::Moderate, Severity::ModeratelySevere];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::ModeratelySevere => "moderatelySevere",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }
}

/// WHO (2021) hearing-loss grade from the better-ear style four-band PTA.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WhoGrade {
    Normal,
    Mild,
    Moderate,
    ModeratelySevere,
    Severe,
    Profound,
    Complete,
}

impl WhoGrade {
    /// Grade for a pure-tone average in dB HL.
    pub fn from_pta(pta: f64) -> Self {
        match pta {
            p if p < 20.0 => WhoGrade::Normal,
            p if p < 35.0 => WhoGrade::Mild,
            p if p < 50.0 => WhoGrade::Moderate,
            p if p < 65.0 => WhoGrade::ModeratelySevere,
            p if p < 80.0 => WhoGrade::Severe,
            p if p < 95.0 => WhoGrade::Profound,
            _ => WhoGrade::Complete,
        }
    }

    pub fn severity(self) -> Option<Severity> {
        match self {
            WhoGrade::Mild => Some(Severity::Mild),
            WhoGrade::Moderate => Some(Severity::Moderate),
            WhoGrade::ModeratelySevere => Some(Severity::ModeratelySevere),
            _ => None,
        }
    }
}

/// Thresholds in dB HL at [`AUDIOGRAM_FREQS_HZ`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Audiogram(pub [f64; 8]);

impl Audiogram {
    pub fn flat(db: f64) -> Self {
        Audiogram([db; 8])
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.0.iter().find(|v| !(-10.0..=120.0).contains(*v)) {
            return Err(Error::Input(format!("threshold {v} dB HL outside [-10, 120]")));
        }
        Ok(())
    }

    fn pta4(&self) -> f64 {
        PTA4_BANDS.iter().map(|&i| self.0[i]).sum::<f64>() / 4.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ListenerProfile {
    pub listener_id: String,
    pub severity: Severity,
    pub audiogram_left: Option<Audiogram>,
    pub audiogram_right: Option<Audiogram>,
}

impl ListenerProfile {
    pub fn new(listener_id: impl Into<String>, severity: Severity) -> Self {
        ListenerProfile {
            listener_id: listener_id.into(),
            severity,
            audiogram_left: None,
            audiogram_right: None,
        }
    }

    pub fn with_audiograms(mut self, left: Audiogram, right: Audiogram) -> Self {
        self.audiogram_left = Some(left);
        self.audiogram_right = Some(right);
        self
    }

    fn audiograms(&self) -> Result<(&Audiogram, &Audiogram)> {
        match (&self.audiogram_left, &self.audiogram_right) {
            (Some(l), Some(r)) => Ok((l, r)),
            _ => Err(Error::Input(format!("listener {} has no audiogram", self.listener_id))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.listener_id.is_empty() {
            return Err(Error::Input("empty listener id".into()));
        }
        for a in [&self.audiogram_left, &self.audiogram_right].into_iter().flatten() {
            a.validate()?;
        }
        Ok(())
    }

    /// `Some(false)` when the audiogram grades to a different WHO class than
    /// the stored severity label. Callers treat this as a warning.
    pub fn severity_consistent(&self) -> Option<bool> {
        let p = pta4(self).ok()?;
        Some(WhoGrade::from_pta(p).severity() == Some(self.severity))
    }
}

/// Mean of the two ears' four-band (0.5/1/2/4 kHz) averages.
pub fn pta4(profile: &ListenerProfile) -> Result<f64> {
    let (l, r) = profile.audiograms()?;
    Ok((l.pta4() + r.pta4()) / 2.0)
}

/// Per-band mean of the two ears over all eight bands.
pub fn pta8(profile: &ListenerProfile) -> Result<[f64; 8]> {
    let (l, r) = profile.audiograms()?;
    let mut out = [0.0; 8];
    for (i, o) in out.iter_mut().enumerate() {
        *o = (l.0[i] + r.0[i]) / 2.0;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConditioningMode {
    Categorical,
    Pta4,
    Pta8,
    None,
}

impl ConditioningMode {
    pub fn name(self) -> &'static str {
        match self {
            ConditioningMode::Categorical => "categorical",
            ConditioningMode::Pta4 => "pta4",
            ConditioningMode::Pta8 => "pta8",
            ConditioningMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            ConditioningMode::Categorical,
            ConditioningMode::Pta4,
            ConditioningMode::Pta8,
            ConditioningMode::None,
        ]
        .into_iter()
        .find(|m| m.name().eq_ignore_ascii_case(s))
    }
}

/// Standardization statistics for audiogram inputs, fitted on training
/// listeners only.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningStats {
    pub pta4_mean: f64,
    pub pta4_std: f64,
    pub pta8_mean: [f64; 8],
    pub pta8_std: [f64; 8],
}

impl Default for ConditioningStats {
    fn default() -> Self {
        ConditioningStats {
            pta4_mean: 0.0,
            pta4_std: 1.0,
            pta8_mean: [0.0; 8],
            pta8_std: [1.0; 8],
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    (mean, if std > 1e-8 { std } else { 1.0 })
}

impl ConditioningStats {
    /// Fits statistics on the listeners that have audiograms. Listeners
    /// without one are skipped; with none at all the identity transform is
    /// returned.
    pub fn fit<'a>(listeners: impl IntoIterator<Item = &'a ListenerProfile>) -> Self {
        let mut p4 = Vec::new();
        let mut p8: [Vec<f64>; 8] = Default::default();
        for l in listeners {
            if let (Ok(a), Ok(b)) = (pta4(l), pta8(l)) {
                p4.push(a);
                for (i, v) in b.iter().enumerate() {
                    p8[i].push(*v);
                }
            }
        }
        if p4.is_empty() {
            return Self::default();
        }
        let (pta4_mean, pta4_std) = mean_std(&p4);
        let mut s = ConditioningStats {
            pta4_mean,
            pta4_std,
            ..Self::default()
        };
        for i in 0..8 {
            (s.pta8_mean[i], s.pta8_std[i]) = mean_std(&p8[i]);
        }
        s
    }
}

/// Parameters of the active conditioning pathway. Only the pathway chosen by
/// the mode is registered.
#[derive(Clone, Debug, PartialEq)]
pub enum ConditioningParams {
    Categorical { table: ParamId },
    Pta4 { proj: ParamId, bias: ParamId },
    Pta8 { proj: ParamId, bias: ParamId },
    None { cls: ParamId },
}

/// Name prefix of every conditioning parameter.
pub const COND_PREFIX: &str = "cond.";

impl ConditioningParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        mode: ConditioningMode,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let mut emb = |shape: [usize; 2]| Tensor::from_fn(shape, |_| normal.sample(rng));
        Ok(match mode {
            ConditioningMode::Categorical => ConditioningParams::Categorical {
                table: store.register("cond.severity_table", emb([3, d_model]))?,
            },
            ConditioningMode::None => {
                let cls = emb([1, d_model]).reshape([d_model])?;
                ConditioningParams::None {
                    cls: store.register("cond.cls", cls)?,
                }
            }
            ConditioningMode::Pta4 | ConditioningMode::Pta8 => {
                let n_in = if mode == ConditioningMode::Pta4 { 1 } else { 8 };
                let proj = store.register(format!("cond.{}.proj", mode.name()), uniform_weight(rng, n_in, d_model))?;
                let bias = store.register(format!("cond.{}.bias", mode.name()), Tensor::zeros([d_model]))?;
                if mode == ConditioningMode::Pta4 {
                    ConditioningParams::Pta4 { proj, bias }
                } else {
                    ConditioningParams::Pta8 { proj, bias }
                }
            }
        })
    }

    pub fn mode(&self) -> ConditioningMode {
        match self {
            ConditioningParams::Categorical { .. } => ConditioningMode::Categorical,
            ConditioningParams::Pta4 { .. } => ConditioningMode::Pta4,
            ConditioningParams::Pta8 { .. } => ConditioningMode::Pta8,
            ConditioningParams::None { .. } => ConditioningMode::None,
        }
    }

    /// The `[d_model]` conditioning vector for `profile`.
    pub fn token(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        profile: &ListenerProfile,
        stats: &ConditioningStats,
    ) -> Result<Var> {
        match *self {
            ConditioningParams::Categorical { table } => {
                let t = g.param(store, table);
                g.row(t, profile.severity.index())
            }
            ConditioningParams::None { cls } => Ok(g.param(store, cls)),
            ConditioningParams::Pta4 { proj, bias } => {
                let z = (pta4(profile)? - stats.pta4_mean) / stats.pta4_std;
                project(g, store, &[z], proj, bias)
            }
            ConditioningParams::Pta8 { proj, bias } => {
                let bands = pta8(profile)?;
                let z: Vec<f64> = (0..8).map(|i| (bands[i] - stats.pta8_mean[i]) / stats.pta8_std[i]).collect();
                project(g, store, &z, proj, bias)
            }
        }
    }
}

fn project(g: &mut Graph, store: &ParameterStore, z: &[f64], proj: ParamId, bias: ParamId) -> Result<Var> {
    let x = g.input(Tensor::new([1, z.len()], z.to_vec())?);
    let (w, b) = (g.param(store, proj), g.param(store, bias));
    let y = g.linear(x, w, Some(b))?;
    let d = g.value(y).numel();
    g.reshape(y, [d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn listener(l: f64, r: f64) -> ListenerProfile {
        ListenerProfile::new("L0001", Severity::Moderate).with_audiograms(Audiogram::flat(l), Audiogram::flat(r))
    }

    #[test]
    fn pta4_examples() {
        assert_eq!(pta4(&listener(40.0, 40.0)).unwrap(), 40.0);
        let mut left = Audiogram::flat(90.0);
        let mut right = Audiogram::flat(0.0);
        for &i in &PTA4_BANDS {
            left.0[i] = 20.0;
            right.0[i] = 40.0;
        }
        let p = ListenerProfile::new("x", Severity::Mild).with_audiograms(left, right);
        assert_eq!(pta4(&p).unwrap(), 30.0);
        assert!(pta4(&ListenerProfile::new("y", Severity::Mild)).is_err());
    }

    #[test]
    fn who_grades() {
        assert_eq!(WhoGrade::from_pta(20.0).severity(), Some(Severity::Mild));
        assert_eq!(WhoGrade::from_pta(34.9).severity(), Some(Severity::Mild));
        assert_eq!(WhoGrade::from_pta(35.0).severity(), Some(Severity::Moderate));
        assert_eq!(WhoGrade::from_pta(49.0).severity(), Some(Severity::Moderate));
        assert_eq!(WhoGrade::from_pta(50.0).severity(), Some(Severity::ModeratelySevere));
        assert_eq!(WhoGrade::from_pta(64.0).severity(), Some(Severity::ModeratelySevere));
        assert_eq!(WhoGrade::from_pta(10.0), WhoGrade::Normal);
        assert_eq!(listener(40.0, 40.0).severity_consistent(), Some(true));
        assert_eq!(listener(60.0, 60.0).severity_consistent(), Some(false));
    }

    #[test]
    fn thresholds_are_range_checked() {
        assert!(listener(121.0, 0.0).validate().is_err());
        assert!(listener(-10.0, 120.0).validate().is_ok());
    }

    #[test]
    fn tokens_per_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stats = ConditioningStats::fit([&listener(30.0, 40.0), &listener(50.0, 60.0)]);
        assert_eq!(stats.pta4_mean, 45.0);

        let mut store = ParameterStore::new();
        let cat = ConditioningParams::register(&mut store, ConditioningMode::Categorical, 4, &mut rng).unwrap();
        assert_eq!(store.len(), 1);
        let mut g = Graph::new();
        let a = cat.token(&mut g, &store, &listener(0.0, 0.0), &stats).unwrap();
        let b = cat.token(&mut g, &store, &listener(90.0, 90.0), &stats).unwrap();
        assert_eq!(g.value(a), g.value(b));

        let mut store = ParameterStore::new();
        let p4 = ConditioningParams::register(&mut store, ConditioningMode::Pta4, 4, &mut rng).unwrap();
        let tok = |pta: f64| {
            let mut g = Graph::new();
            let v = p4.token(&mut g, &store, &listener(pta, pta), &stats).unwrap();
            g.value(v).clone()
        };
        let (ta, tc, tm) = (tok(20.0), tok(60.0), tok(40.0));
        for i in 0..4 {
            let lin = ta.data()[i] + tc.data()[i] - 2.0 * tm.data()[i];
            assert!(lin.abs() < 1e-12);
        }
        let mut g = Graph::new();
        assert!(p4.token(&mut g, &store, &ListenerProfile::new("n", Severity::Mild), &stats).is_err());

        let mut store = ParameterStore::new();
        let none = ConditioningParams::register(&mut store, ConditioningMode::None, 4, &mut rng).unwrap();
        let mut g = Graph::new();
        let a = none.token(&mut g, &store, &listener(0.0, 0.0), &stats).unwrap();
        let b = none.token(&mut g, &store, &ListenerProfile::new("z", Severity::ModeratelySevere), &stats).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }
}
