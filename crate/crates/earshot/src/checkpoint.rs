//! Checkpoint = parameter file + key-value sidecar (`<stem>.ears` and
//! `<stem>.meta`). The sidecar carries the fold metadata, the conditioning
//! statistics and the full model config, so a checkpoint is self-contained.

use std::fs;
use std::path::{Path, PathBuf};

use earshot_core::conditioning::ConditioningStats;
use earshot_core::model::{parse_kv, Model, ModelConfig};
use earshot_core::training::Checkpoint;

use crate::error::{Error, IoContext, Result};
use crate::formats::{read_checkpoint, write_checkpoint};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub fold: usize,
    pub best_epoch: usize,
    pub val_rmse: f64,
    pub stats: ConditioningStats,
    pub model: ModelConfig,
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",")
}

impl CheckpointMeta {
    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "fold = {}\nbest_epoch = {}\nval_rmse = {}\npta4_mean = {}\npta4_std = {}\npta8_mean = {}\npta8_std = {}\n",
            self.fold,
            self.best_epoch,
            self.val_rmse,
            self.stats.pta4_mean,
            self.stats.pta4_std,
            join(&self.stats.pta8_mean),
            join(&self.stats.pta8_std)
        );
        for line in self.model.to_kv().lines() {
            s.push_str("model.");
            s.push_str(line);
            s.push('\n');
        }
        s
    }

    pub fn from_kv(text: &str) -> earshot_core::Result<Self> {
        let mut model = String::new();
        let mut meta = CheckpointMeta {
            fold: 0,
            best_epoch: 0,
            val_rmse: f64::NAN,
            stats: ConditioningStats::default(),
            model: ModelConfig::default(),
        };
        let mut seen_fold = false;
        for (k, v) in parse_kv(text)? {
            let bad = || earshot_core::Error::Config(format!("checkpoint metadata: bad value `{v}` for `{k}`"));
            let arr = || -> earshot_core::Result<[f64; 8]> {
                let xs: Vec<f64> = v.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect::<earshot_core::Result<_>>()?;
                xs.try_into().map_err(|_| bad())
            };
            match k.as_str() {
                "fold" => {
                    meta.fold = v.parse().map_err(|_| bad())?;
                    seen_fold = true;
                }
                "best_epoch" => meta.best_epoch = v.parse().map_err(|_| bad())?,
                "val_rmse" => meta.val_rmse = v.parse().map_err(|_| bad())?,
                "pta4_mean" => meta.stats.pta4_mean = v.parse().map_err(|_| bad())?,
                "pta4_std" => meta.stats.pta4_std = v.parse().map_err(|_| bad())?,
                "pta8_mean" => meta.stats.pta8_mean = arr()?,
                "pta8_std" => meta.stats.pta8_std = arr()?,
                m if m.starts_with("model.") => {
                    model.push_str(&format!("{} = {v}\n", &m["model.".len()..]));
                }
                _ => return Err(earshot_core::Error::Config(format!("checkpoint metadata: unknown key `{k}`"))),
            }
        }
        if !seen_fold {
            return Err(earshot_core::Error::Config("checkpoint metadata: missing `fold`".into()));
        }
        meta.model = ModelConfig::from_kv(&model)?;
        Ok(meta)
    }
}

pub fn paths(dir: &Path, fold: usize) -> (PathBuf, PathBuf) {
    (dir.join(format!("fold{fold}.ears")), dir.join(format!("fold{fold}.meta")))
}

pub fn save(dir: &Path, ck: &Checkpoint) -> Result<()> {
    let (ears, meta) = paths(dir, ck.fold);
    write_checkpoint(&ears, &ck.model.store)?;
    let m = CheckpointMeta {
        fold: ck.fold,
        best_epoch: ck.best_epoch,
        val_rmse: ck.val_rmse,
        stats: ck.model.stats.clone(),
        model: ck.model.cfg.clone(),
    };
    fs::write(&meta, m.to_kv()).at(&meta)
}

/// Loads `<stem>.ears` with its `<stem>.meta` sidecar. The parameter file
/// must match the config's parameter names and shapes exactly.
pub fn load(ears: &Path) -> Result<(Model, CheckpointMeta)> {
    let meta_path = ears.with_extension("meta");
    let text = fs::read_to_string(&meta_path).at(&meta_path)?;
    let meta = CheckpointMeta::from_kv(&text).map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
    let stored = read_checkpoint(ears)?;
    let mut model = Model::new(meta.model.clone(), 0)?;
    if stored.names() != model.store.names() {
        return Err(Error::Data(format!(
            "{}: parameters do not match the model config in {}",
            ears.display(),
            meta_path.display()
        )));
    }
    model
        .store
        .load_from(&stored)
        .map_err(|e| Error::Data(format!("{}: {e}", ears.display())))?;
    model.stats = meta.stats.clone();
    Ok((model, meta))
}

/// Expands checkpoint arguments: directories contribute their `fold*.ears`
/// files in fold order.
pub fn resolve(args: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for a in args {
        if a.is_dir() {
            let mut found: Vec<(usize, PathBuf)> = fs::read_dir(a)
                .at(a)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter_map(|p| {
                    let stem = p.file_stem()?.to_str()?;
                    let k = stem.strip_prefix("fold")?.parse().ok()?;
                    (p.extension()? == "ears").then_some((k, p))
                })
                .collect();
            found.sort();
            if found.is_empty() {
                return Err(Error::Data(format!("{}: no fold*.ears checkpoints", a.display())));
            }
            out.extend(found.into_iter().map(|(_, p)| p));
        } else {
            out.push(a.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::Core(earshot_core::Error::Config("at least one checkpoint is required".into())));
    }
    Ok(out)
}
