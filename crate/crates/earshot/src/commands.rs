//! The five CLI commands as library functions.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use earshot_core::experiments::{
    run_sweep, scene_histogram, stratify, SceneHistogram, StratifiedReport, SweepSpec, SweepTable, SynthDataset,
    SynthSpec, DEFAULT_BIN_WIDTH, DEFAULT_TAIL_THRESHOLD,
};
use earshot_core::model::{Model, ModelConfig};
use earshot_core::training::{
    ensemble_predict, make_folds, rmse, train_fold, Checkpoint, FoldPlan, PredictionRecord, TrainConfig,
};
use log::info;
use serde::Serialize;

use crate::checkpoint;
use crate::error::{Error, IoContext, Result};
use crate::manifest::{write_json, write_synthetic, LoadedManifest, Manifest, ManifestSource};
use crate::report;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).at(path)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    fs::write(path, text).at(path)
}

fn config_err(path: &Path, e: earshot_core::Error) -> Error {
    Error::Core(earshot_core::Error::Config(format!("{}: {e}", path.display())))
}

pub fn cmd_synth(spec_path: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<Manifest> {
    let mut spec = match spec_path {
        Some(p) => SynthSpec::from_kv(&read_text(p)?).map_err(|e| config_err(p, e))?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = SynthDataset::generate(spec)?;
    let manifest = write_synthetic(out, &data)?;
    write_text(&out.join("synth.kv"), &data.spec.to_kv())?;
    info!("wrote {} utterances to {}", manifest.records.len(), out.display());
    Ok(manifest)
}

pub struct TrainArgs {
    pub manifest: PathBuf,
    pub listeners: PathBuf,
    pub model_config: Option<PathBuf>,
    pub train_config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub jobs: usize,
    pub folds: usize,
}

#[derive(Serialize)]
struct FoldPlanFile<'a> {
    seed: u64,
    folds: Vec<FoldEntry<'a>>,
}

#[derive(Serialize)]
struct FoldEntry<'a> {
    fold: usize,
    train: &'a [String],
    val: &'a [String],
}

pub fn load_configs(model: Option<&Path>, train: Option<&Path>, seed: Option<u64>) -> Result<(ModelConfig, TrainConfig)> {
    let mcfg = match model {
        Some(p) => ModelConfig::from_kv(&read_text(p)?).map_err(|e| config_err(p, e))?,
        None => ModelConfig::default(),
    };
    let mut tcfg = match train {
        Some(p) => TrainConfig::from_kv(&read_text(p)?).map_err(|e| config_err(p, e))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        tcfg.seed = s;
    }
    Ok((mcfg, tcfg))
}

/// Runs `f` over `0..n` on up to `jobs` threads, returning results in index
/// order.
fn parallel_map<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    if jobs <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(jobs);
    std::thread::scope(|s| {
        for (c, slots) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (j, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(f(c * chunk + j));
                }
            });
        }
    });
    out.into_iter().map(|x| x.expect("every slot filled")).collect()
}

/// Trains one checkpoint per fold. Configs, data and the fold plan are all
/// checked before any training starts.
pub fn cmd_train(args: &TrainArgs) -> Result<Vec<Checkpoint>> {
    let (mcfg, tcfg) = load_configs(args.model_config.as_deref(), args.train_config.as_deref(), args.seed)?;
    let source = ManifestSource::load(&args.manifest, &args.listeners)?;
    if let Some(r) = source.manifest.manifest.records.iter().find(|r| r.label.is_none()) {
        return Err(Error::Data(format!("{}: record {} has no label", args.manifest.display(), r.utterance_id)));
    }
    let data = source.load_dataset(&mcfg)?;
    let present: BTreeSet<&str> = data.examples.iter().map(|e| e.listener_id.as_str()).collect();
    let listeners: Vec<_> = source
        .listeners
        .iter()
        .filter(|l| present.contains(l.listener_id.as_str()))
        .cloned()
        .collect();
    let plan = make_folds(&listeners, args.folds, tcfg.seed)?;
    plan.validate(&listeners)?;
    fs::create_dir_all(&args.out).at(&args.out)?;
    write_fold_plan(&args.out.join("fold_plan.json"), &plan, tcfg.seed)?;
    write_text(&args.out.join("model.kv"), &mcfg.to_kv())?;
    write_text(&args.out.join("train.kv"), &tcfg.to_kv())?;
    info!(
        "training {} folds on {} utterances ({} parameters)",
        plan.folds.len(),
        data.examples.len(),
        Model::new(mcfg.clone(), 0)?.num_parameters()
    );
    let results = parallel_map(plan.folds.len(), args.jobs, |k| {
        let r = train_fold(&data, &plan.folds[k], k, &mcfg, &tcfg);
        if let Ok(c) = &r {
            info!("fold {k}: best epoch {} val RMSE {:.6}", c.best_epoch, c.val_rmse);
        }
        r
    });
    let checkpoints = results.into_iter().collect::<earshot_core::Result<Vec<_>>>()?;
    for c in &checkpoints {
        checkpoint::save(&args.out, c)?;
    }
    report::write_fold_report(&args.out.join("fold_report.csv"), &checkpoints)?;
    report::write_training_history(&args.out.join("history.csv"), &checkpoints)?;
    Ok(checkpoints)
}

fn write_fold_plan(path: &Path, plan: &FoldPlan, seed: u64) -> Result<()> {
    write_json(
        path,
        &FoldPlanFile {
            seed,
            folds: plan
                .folds
                .iter()
                .enumerate()
                .map(|(fold, f)| FoldEntry {
                    fold,
                    train: &f.train,
                    val: &f.val,
                })
                .collect(),
        },
    )
}

pub struct PredictArgs {
    pub manifest: PathBuf,
    pub listeners: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub out: PathBuf,
    pub per_model: bool,
}

pub fn cmd_predict(args: &PredictArgs) -> Result<Vec<PredictionRecord>> {
    let paths = checkpoint::resolve(&args.checkpoints)?;
    let models: Vec<Model> = paths
        .iter()
        .map(|p| checkpoint::load(p).map(|(m, _)| m))
        .collect::<Result<_>>()?;
    if let Some(i) = models.iter().position(|m| m.cfg != models[0].cfg) {
        return Err(Error::Core(earshot_core::Error::Config(format!(
            "{} has a different model config from {}",
            paths[i].display(),
            paths[0].display()
        ))));
    }
    let source = ManifestSource::load(&args.manifest, &args.listeners)?;
    let data = source.load_dataset(&models[0].cfg)?;
    let refs: Vec<&Model> = models.iter().collect();
    let records = ensemble_predict(&refs, &data)?;
    report::write_predictions(&args.out, &records, args.per_model)?;
    info!("wrote {} predictions from {} checkpoints", records.len(), models.len());
    Ok(records)
}

pub struct EvaluateArgs {
    pub predictions: PathBuf,
    pub manifest: PathBuf,
    pub train_manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub bin_width: f64,
    pub tail_threshold: f64,
}

impl EvaluateArgs {
    pub fn new(predictions: PathBuf, manifest: PathBuf, out: PathBuf) -> Self {
        EvaluateArgs {
            predictions,
            manifest,
            train_manifest: None,
            out,
            bin_width: DEFAULT_BIN_WIDTH,
            tail_threshold: DEFAULT_TAIL_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub rmse: f64,
    pub n: usize,
    pub strata: Option<[StratifiedReport; 4]>,
    pub scenes: SceneHistogram,
}

/// Joins predictions with labelled manifest records. Every unmatched id on
/// either side is reported.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<Evaluation> {
    let preds = report::read_predictions(&args.predictions)?;
    let truth = LoadedManifest::load(&args.manifest)?;
    let by_id: std::collections::BTreeMap<&str, &report::PredictionRow> =
        preds.iter().map(|p| (p.utterance_id.as_str(), p)).collect();
    let labelled: Vec<_> = truth.manifest.records.iter().filter(|r| r.label.is_some()).collect();
    let known: BTreeSet<&str> = labelled.iter().map(|r| r.utterance_id.as_str()).collect();
    let missing: Vec<&str> = known.iter().copied().filter(|id| !by_id.contains_key(id)).collect();
    let extra: Vec<&str> = by_id.keys().copied().filter(|id| !known.contains(id)).collect();
    if !missing.is_empty() || !extra.is_empty() || by_id.len() != preds.len() {
        return Err(Error::Data(format!(
            "ids do not align: {} labelled records without predictions [{}]; {} predictions without labelled records [{}]; {} duplicate prediction rows",
            missing.len(),
            missing.join(", "),
            extra.len(),
            extra.join(", "),
            preds.len() - by_id.len()
        )));
    }
    let records: Vec<PredictionRecord> = labelled
        .iter()
        .map(|r| {
            let p = by_id[r.utterance_id.as_str()];
            PredictionRecord {
                utterance_id: r.utterance_id.clone(),
                scene_id: r.scene_id.clone(),
                system_id: r.system_id.clone(),
                listener_id: r.listener_id.clone(),
                left: p.left,
                right: p.right,
                pooled: p.pooled,
                label: r.label,
                per_model: Vec::new(),
            }
        })
        .collect();
    if records.is_empty() {
        return Err(Error::Data(format!("{}: no labelled records", args.manifest.display())));
    }
    let pred: Vec<f64> = records.iter().map(|r| r.pooled).collect();
    let lab: Vec<f64> = records.iter().filter_map(|r| r.label).collect();
    let overall = rmse(&pred, &lab)?;
    fs::create_dir_all(&args.out).at(&args.out)?;
    let scenes = scene_histogram(&records, args.bin_width, args.tail_threshold)?;
    report::write_scene_histogram(&args.out.join("scene_histogram.csv"), &args.out.join("scenes.csv"), &scenes)?;
    let strata = match &args.train_manifest {
        Some(p) => {
            let seen = LoadedManifest::load(p)?.seen_ids();
            let s = stratify(&records, &seen)?;
            report::write_stratified(&args.out.join("stratified.csv"), &s)?;
            Some(s)
        }
        None => None,
    };
    report::write_metrics(
        &args.out.join("metrics.csv"),
        &[
            ("rmse", overall, records.len()),
            ("scene_tail_share", scenes.tail_share, scenes.scenes.len()),
        ],
    )?;
    Ok(Evaluation {
        rmse: overall,
        n: records.len(),
        strata,
        scenes,
    })
}

pub struct SweepArgs {
    pub spec: PathBuf,
    pub manifest: PathBuf,
    pub listeners: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<SweepTable> {
    let mut spec = SweepSpec::from_kv(&read_text(&args.spec)?).map_err(|e| config_err(&args.spec, e))?;
    if let Some(s) = args.seed {
        spec.train.seed = s;
    }
    let source = ManifestSource::load(&args.manifest, &args.listeners)?;
    let table = run_sweep(&spec, &source)?;
    report::write_sweep(&args.out, &table)?;
    Ok(table)
}
