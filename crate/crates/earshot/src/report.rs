//! CSV reports. Every file has a header row and floats use six decimals.

use std::fs;
use std::path::Path;

use earshot_core::experiments::{SceneHistogram, StratifiedReport, SweepTable};
use earshot_core::training::{Checkpoint, PredictionRecord};

use crate::error::{Error, IoContext, Result};

pub fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

fn write_rows(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().at(path)
}

fn owned(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

/// `utterance_id,sL,sR,pooled` plus one `ckpt_k` column per checkpoint when
/// `per_model` is set.
pub fn write_predictions(path: &Path, records: &[PredictionRecord], per_model: bool) -> Result<()> {
    let mut header = owned(&["utterance_id", "sL", "sR", "pooled"]);
    let k = records.first().map_or(0, |r| r.per_model.len());
    if per_model {
        header.extend((0..k).map(|i| format!("ckpt_{i}")));
    }
    write_rows(
        path,
        &header,
        records.iter().map(|r| {
            let mut row = vec![r.utterance_id.clone(), f6(r.left), f6(r.right), f6(r.pooled)];
            if per_model {
                row.extend(r.per_model.iter().map(|&x| f6(x)));
            }
            row
        }),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub utterance_id: String,
    pub left: f64,
    pub right: f64,
    pub pooled: f64,
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("{}: missing column `{name}`", path.display())))
    };
    let (iu, il, ir, ip) = (col("utterance_id")?, col("sL")?, col("sR")?, col("pooled")?);
    let mut out = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: row {}: bad number in column {i}", path.display(), n + 2)))
        };
        out.push(PredictionRow {
            utterance_id: rec.get(iu).unwrap_or_default().to_string(),
            left: num(il)?,
            right: num(ir)?,
            pooled: num(ip)?,
        });
    }
    Ok(out)
}

pub fn write_fold_report(path: &Path, checkpoints: &[Checkpoint]) -> Result<()> {
    write_rows(
        path,
        &owned(&["fold", "best_epoch", "val_rmse"]),
        checkpoints
            .iter()
            .map(|c| vec![c.fold.to_string(), c.best_epoch.to_string(), f6(c.val_rmse)]),
    )
}

pub fn write_training_history(path: &Path, checkpoints: &[Checkpoint]) -> Result<()> {
    write_rows(
        path,
        &owned(&["fold", "epoch", "train_loss", "val_rmse"]),
        checkpoints.iter().flat_map(|c| {
            c.history
                .iter()
                .map(|h| vec![c.fold.to_string(), h.epoch.to_string(), f6(h.train_loss), f6(h.val_rmse)])
        }),
    )
}

/// One row per grid cell; `is_argmin` marks the winner.
pub fn write_sweep(path: &Path, table: &SweepTable) -> Result<()> {
    let best = table.argmin().map(|r| (r.window, r.setup));
    write_rows(
        path,
        &owned(&["window", "setup", "val_rmse", "is_argmin", "error"]),
        table.rows.iter().map(|r| {
            vec![
                r.window.display_label(),
                r.setup.letter().to_string(),
                r.val_rmse.map_or(String::new(), f6),
                (best == Some((r.window, r.setup))).to_string(),
                r.error.clone().unwrap_or_default(),
            ]
        }),
    )
}

/// Per-identity bars of every stratum followed by a `__pooled__` row.
pub fn write_stratified(path: &Path, reports: &[StratifiedReport]) -> Result<()> {
    write_rows(
        path,
        &owned(&["stratum", "identity", "rmse", "n"]),
        reports.iter().flat_map(|s| {
            s.groups
                .iter()
                .map(|g| vec![s.name.clone(), g.label.clone(), f6(g.rmse), g.n.to_string()])
                .chain(std::iter::once(vec![
                    s.name.clone(),
                    "__pooled__".into(),
                    f6(s.pooled_rmse),
                    s.n.to_string(),
                ]))
        }),
    )
}

pub fn write_scene_histogram(bins_path: &Path, scenes_path: &Path, h: &SceneHistogram) -> Result<()> {
    write_rows(
        bins_path,
        &owned(&["bin_lo", "bin_hi", "count"]),
        h.counts.iter().enumerate().map(|(i, c)| {
            vec![f6(i as f64 * h.bin_width), f6((i + 1) as f64 * h.bin_width), c.to_string()]
        }),
    )?;
    write_rows(
        scenes_path,
        &owned(&["scene_id", "rmse", "n"]),
        h.scenes.iter().map(|(s, r, n)| vec![s.clone(), f6(*r), n.to_string()]),
    )
}

pub fn write_metrics(path: &Path, metrics: &[(&str, f64, usize)]) -> Result<()> {
    write_rows(
        path,
        &owned(&["metric", "value", "n"]),
        metrics.iter().map(|(m, v, n)| vec![m.to_string(), f6(*v), n.to_string()]),
    )
}
