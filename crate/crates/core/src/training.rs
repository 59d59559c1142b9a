//! RMSE training with AdamW, listener-level folds, best-epoch selection and
//! checkpoint ensembling.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{ConditioningStats, ListenerProfile, Severity};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{parse_kv, Model, ModelConfig, ModelInput};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Global gradient-norm ceiling.
    pub grad_clip: Option<f64>,
    /// Cosine decay of the learning rate to zero over the run.
    pub cosine: bool,
    /// Keep only the first N training utterances (dataset order) of a fold.
    pub max_train_utterances: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-5,
            weight_decay: 1e-2,
            batch_size: 8,
            epochs: 9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            grad_clip: None,
            cosine: false,
            max_train_utterances: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("weight_decay must be >= 0 and betas in [0,1)");
        }
        if !(self.eps > 0.0) || self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("eps and grad_clip must be positive");
        }
        if self.max_train_utterances == Some(0) {
            return bad("max_train_utterances must be positive");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "lr = {}\nweight_decay = {}\nbatch_size = {}\nepochs = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\nseed = {}\ngrad_clip = {}\ncosine = {}\nmax_train_utterances = {}\n",
            self.lr,
            self.weight_decay,
            self.batch_size,
            self.epochs,
            self.beta1,
            self.beta2,
            self.eps,
            self.seed,
            self.grad_clip.map_or("none".to_string(), |c| format!("{c}")),
            self.cosine,
            self.max_train_utterances.map_or("none".to_string(), |n| n.to_string())
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (k, v) in parse_kv(text)? {
            let bad = || Error::Config(format!("bad value `{v}` for `{k}`"));
            match k.as_str() {
                "lr" => c.lr = v.parse().map_err(|_| bad())?,
                "weight_decay" => c.weight_decay = v.parse().map_err(|_| bad())?,
                "batch_size" => c.batch_size = v.parse().map_err(|_| bad())?,
                "epochs" => c.epochs = v.parse().map_err(|_| bad())?,
                "beta1" => c.beta1 = v.parse().map_err(|_| bad())?,
                "beta2" => c.beta2 = v.parse().map_err(|_| bad())?,
                "eps" => c.eps = v.parse().map_err(|_| bad())?,
                "seed" => c.seed = v.parse().map_err(|_| bad())?,
                "grad_clip" => {
                    c.grad_clip = match v.as_str() {
                        "none" => None,
                        x => Some(x.parse().map_err(|_| bad())?),
                    }
                }
                "cosine" => c.cosine = v.parse().map_err(|_| bad())?,
                "max_train_utterances" => {
                    c.max_train_utterances = match v.as_str() {
                        "none" => None,
                        x => Some(x.parse().map_err(|_| bad())?),
                    }
                }
                _ => return Err(Error::Config(format!("unknown train config key `{k}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Mixes a base seed with stream tags (fold, epoch, batch, ...) into an
/// independent seed (splitmix64 finalizer per tag).
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut z = seed;
    for &t in tags {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(t.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::pre(
            "rmse",
            format!("need equal nonzero lengths, got {} and {}", pred.len(), truth.len()),
        ));
    }
    let se: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(libm::sqrt(se / pred.len() as f64))
}

/// First and second moment estimates, aligned with the store's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| alloc::vec![0.0; p.value.numel()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW update from the gradients held in `store`. Weight decay is
/// applied to the parameter directly, separately from the adaptive step.
pub fn adamw_step(store: &mut ParameterStore, state: &mut AdamState, cfg: &TrainConfig, lr: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::pre("adamw_step", "optimizer state does not match the parameter store"));
    }
    let mut sq = 0.0;
    for (_, p) in store.iter() {
        if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {} at index {i}", p.name)));
        }
        sq += p.grad.data().iter().map(|g| g * g).sum::<f64>();
    }
    let clip = match cfg.grad_clip {
        Some(c) if libm::sqrt(sq) > c => c / libm::sqrt(sq),
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    for (i, p) in store.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let grad = p.grad.data();
        let val = p.value.data_mut();
        for j in 0..val.len() {
            let g = grad[j] * clip;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            val[j] -= lr * cfg.weight_decay * val[j];
            val[j] -= lr * (m[j] / bc1) / (libm::sqrt(v[j] / bc2) + cfg.eps);
        }
    }
    Ok(())
}

/// Train/validation listener split of one fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// Listener-disjointness and 2/2/2 validation severity counts.
    pub fn validate(&self, listeners: &[ListenerProfile]) -> Result<()> {
        let sev: BTreeMap<&str, Severity> = listeners.iter().map(|l| (l.listener_id.as_str(), l.severity)).collect();
        for (f, fold) in self.folds.iter().enumerate() {
            let val: BTreeSet<&str> = fold.val.iter().map(|s| s.as_str()).collect();
            if val.len() != fold.val.len() {
                return Err(Error::Config(format!("fold {f}: duplicate validation listener")));
            }
            if let Some(x) = fold.train.iter().find(|t| val.contains(t.as_str())) {
                return Err(Error::Config(format!("fold {f}: listener {x} in both train and val")));
            }
            let mut counts = [0usize; 3];
            for v in &fold.val {
                let s = sev
                    .get(v.as_str())
                    .ok_or_else(|| Error::Config(format!("fold {f}: unknown listener {v}")))?;
                counts[s.index()] += 1;
            }
            if counts != [2, 2, 2] {
                return Err(Error::Config(format!("fold {f}: validation severity counts {counts:?}")));
            }
        }
        Ok(())
    }
}

/// Folds with two validation listeners per severity class. Each class is
/// shuffled once; fold `f` takes positions `2f` and `2f+1` modulo the class
/// size, so classes with fewer than `2k` members are reused across folds.
pub fn make_folds(listeners: &[ListenerProfile], k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xF01D]));
    let mut by_class: [Vec<&str>; 3] = Default::default();
    let mut sorted: Vec<&ListenerProfile> = listeners.iter().collect();
    sorted.sort_by(|a, b| a.listener_id.cmp(&b.listener_id));
    for (i, l) in sorted.iter().enumerate() {
        if i > 0 && sorted[i - 1].listener_id == l.listener_id {
            return Err(Error::Config(format!("listener {} listed twice", l.listener_id)));
        }
        by_class[l.severity.index()].push(&l.listener_id);
    }
    for (s, members) in Severity::ALL.iter().zip(&by_class) {
        if members.len() < 2 {
            return Err(Error::Config(format!(
                "severity {} has {} listeners, at least 2 are needed",
                s.name(),
                members.len()
            )));
        }
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }
    let folds = (0..k)
        .map(|f| {
            let val: Vec<String> = by_class
                .iter()
                .flat_map(|m| [m[(2 * f) % m.len()], m[(2 * f + 1) % m.len()]])
                .map(String::from)
                .collect();
            let train = sorted
                .iter()
                .map(|l| l.listener_id.clone())
                .filter(|id| !val.contains(id))
                .collect();
            Fold { train, val }
        })
        .collect();
    Ok(FoldPlan { folds })
}

/// One utterance with prepared model input.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub utterance_id: String,
    pub scene_id: String,
    pub system_id: String,
    pub listener_id: String,
    pub label: Option<f64>,
    pub input: ModelInput,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub listeners: BTreeMap<String, ListenerProfile>,
}

impl Dataset {
    pub fn listener(&self, id: &str) -> Result<&ListenerProfile> {
        self.listeners
            .get(id)
            .ok_or_else(|| Error::Input(format!("unknown listener {id}")))
    }

    pub fn listener_list(&self) -> Vec<ListenerProfile> {
        self.listeners.values().cloned().collect()
    }

    /// Indices of examples whose listener is in `ids`.
    pub fn indices_for(&self, ids: &[String]) -> Vec<usize> {
        let set: BTreeSet<&str> = ids.iter().map(|s| s.as_str()).collect();
        (0..self.examples.len())
            .filter(|&i| set.contains(self.examples[i].listener_id.as_str()))
            .collect()
    }

    /// Every example references a known listener.
    pub fn validate(&self) -> Result<()> {
        for e in &self.examples {
            self.listener(&e.listener_id)?;
            if let Some(l) = e.label {
                if !(0.0..=100.0).contains(&l) {
                    return Err(Error::Input(format!("label {l} of {} outside [0,100]", e.utterance_id)));
                }
            }
        }
        Ok(())
    }
}

fn label_of(e: &Example) -> Result<f64> {
    e.label
        .ok_or_else(|| Error::Input(format!("utterance {} has no label", e.utterance_id)))
}

/// RMSE of pooled predictions over a batch, as a graph scalar.
pub fn batch_loss(model: &Model, g: &mut Graph, data: &Dataset, batch: &[usize]) -> Result<Var> {
    let mut preds = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for &i in batch {
        let e = &data.examples[i];
        let out = model.forward(g, &e.input, data.listener(&e.listener_id)?)?;
        preds.push(out.pooled);
        targets.push(label_of(e)?);
    }
    let p = g.concat(&preds, 0)?;
    let t = g.input(Tensor::from_vec(targets));
    let d = g.sub(p, t)?;
    let sq = g.mul(d, d)?;
    let m = g.mean(sq)?;
    g.sqrt(m)
}

/// RMSE of pooled evaluation-mode predictions on `idx`.
pub fn evaluate(model: &Model, data: &Dataset, idx: &[usize]) -> Result<f64> {
    let mut pred = Vec::with_capacity(idx.len());
    let mut truth = Vec::with_capacity(idx.len());
    for &i in idx {
        let e = &data.examples[i];
        pred.push(model.predict(&e.input, data.listener(&e.listener_id)?)?.pooled);
        truth.push(label_of(e)?);
    }
    rmse(&pred, &truth)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    pub val_rmse: f64,
}

/// Parameters of the best validation epoch of one fold.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub fold: usize,
    /// 1-based.
    pub best_epoch: usize,
    pub val_rmse: f64,
    pub history: Vec<EpochStats>,
}

/// Trains one fold and keeps the epoch with the lowest validation RMSE
/// (earliest on ties).
pub fn train_fold(
    data: &Dataset,
    fold: &Fold,
    fold_index: usize,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<Checkpoint> {
    tcfg.validate()?;
    let seed = derive_seed(tcfg.seed, &[fold_index as u64]);
    let mut model = Model::new(mcfg.clone(), seed)?;
    let train_listeners: Vec<&ListenerProfile> = fold
        .train
        .iter()
        .map(|id| data.listener(id))
        .collect::<Result<_>>()?;
    model.stats = ConditioningStats::fit(train_listeners);
    let mut order = data.indices_for(&fold.train);
    if let Some(n) = tcfg.max_train_utterances {
        order.truncate(n);
    }
    let val = data.indices_for(&fold.val);
    if order.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "fold {fold_index}: {} training and {} validation utterances",
            order.len(),
            val.len()
        )));
    }
    let mut state = AdamState::new(&model.store);
    let batches_per_epoch = order.len().div_ceil(tcfg.batch_size);
    let total_steps = (batches_per_epoch * tcfg.epochs) as f64;
    let mut best: Option<(usize, f64, ParameterStore)> = None;
    let mut history = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(tcfg.batch_size).enumerate() {
            let at = |e: Error| {
                Error::NonFinite(format!("fold {fold_index} epoch {} batch {b}: {e}", epoch + 1))
            };
            let mut g = Graph::training(derive_seed(seed, &[2, epoch as u64, b as u64]));
            let loss = batch_loss(&model, &mut g, data, batch).map_err(|e| if e.is_numeric() { at(e) } else { e })?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(at(Error::NonFinite("loss".into())));
            }
            loss_sum += lv;
            g.backward(loss).map_err(at)?;
            model.store.zero_grad();
            g.accumulate_param_grads(&mut model.store);
            let step = (epoch * batches_per_epoch + b) as f64;
            let lr = if tcfg.cosine {
                tcfg.lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * step / total_steps))
            } else {
                tcfg.lr
            };
            adamw_step(&mut model.store, &mut state, tcfg, lr).map_err(at)?;
        }
        let val_rmse = evaluate(&model, data, &val)?;
        history.push(EpochStats {
            epoch: epoch + 1,
            train_loss: loss_sum / batches_per_epoch as f64,
            val_rmse,
        });
        if best.as_ref().is_none_or(|(_, r, _)| val_rmse < *r) {
            best = Some((epoch + 1, val_rmse, model.store.clone()));
        }
    }
    let (best_epoch, val_rmse, store) = best.expect("at least one epoch");
    model.store = store;
    Ok(Checkpoint {
        model,
        fold: fold_index,
        best_epoch,
        val_rmse,
        history,
    })
}

/// Trains every fold of `plan` in sequence.
pub fn cross_validate(data: &Dataset, plan: &FoldPlan, mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<Vec<Checkpoint>> {
    plan.folds
        .iter()
        .enumerate()
        .map(|(i, f)| train_fold(data, f, i, mcfg, tcfg))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub utterance_id: String,
    pub scene_id: String,
    pub system_id: String,
    pub listener_id: String,
    pub left: f64,
    pub right: f64,
    pub pooled: f64,
    pub label: Option<f64>,
    /// Pooled score of each checkpoint.
    pub per_model: Vec<f64>,
}

/// Running mean; exact when every value is equal.
fn running_mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut m = 0.0;
    for (k, x) in xs.into_iter().enumerate() {
        m += (x - m) / (k + 1) as f64;
    }
    m
}

/// Per-utterance mean of the checkpoints' scores.
pub fn ensemble_predict(models: &[&Model], data: &Dataset) -> Result<Vec<PredictionRecord>> {
    let first = models
        .first()
        .ok_or_else(|| Error::Config("ensemble needs at least one checkpoint".into()))?;
    if let Some(i) = models.iter().position(|m| m.cfg != first.cfg) {
        return Err(Error::Config(format!("checkpoint {i} has a different model config")));
    }
    data.examples
        .iter()
        .map(|e| {
            let listener = data.listener(&e.listener_id)?;
            let preds: Vec<_> = models
                .iter()
                .map(|m| m.predict(&e.input, listener))
                .collect::<Result<_>>()?;
            Ok(PredictionRecord {
                utterance_id: e.utterance_id.clone(),
                scene_id: e.scene_id.clone(),
                system_id: e.system_id.clone(),
                listener_id: e.listener_id.clone(),
                left: running_mean(preds.iter().map(|p| p.left)),
                right: running_mean(preds.iter().map(|p| p.right)),
                pooled: running_mean(preds.iter().map(|p| p.pooled)),
                label: e.label,
                per_model: preds.iter().map(|p| p.pooled).collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 3.53553).abs() < 1e-5);
        assert!(rmse(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn running_mean_of_constants() {
        assert_eq!(running_mean([10.0, 20.0, 30.0, 40.0, 50.0]), 30.0);
        let x = 37.123456789;
        assert_eq!(running_mean([x; 5]), x);
    }

    #[test]
    fn config_kv_round_trip() {
        let c = TrainConfig {
            grad_clip: Some(1.5),
            seed: 7,
            max_train_utterances: Some(160),
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
        assert!(TrainConfig::from_kv("lr = 0").is_err());
        assert!(TrainConfig::from_kv("batch_size = 0").is_err());
    }
}
