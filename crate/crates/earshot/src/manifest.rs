//! `manifest.json` / `listeners.json` and on-disk feature ingestion.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use earshot_core::conditioning::{Audiogram, ListenerProfile, Severity};
use earshot_core::dsp::{Backbone, FeatureBundle, LayerWindow, LogMel, StreamBundle};
use earshot_core::experiments::{FeatureSource, SeenIds, SynthDataset};
use earshot_core::model::{prepare_input, ModelConfig};
use earshot_core::training::{Dataset, Example};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::formats::{read_logmel, read_sfm, write_logmel, write_sfm};

pub const MANIFEST_VERSION: u32 = 1;

/// Feature files of one stream; paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamFiles {
    /// Backbone name → SFMF file.
    pub sfm: BTreeMap<String, String>,
    pub logmel: String,
    /// Defaults to the log-Mel frame count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_frames: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub utterance_id: String,
    pub scene_id: String,
    pub system_id: String,
    pub listener_id: String,
    pub left: StreamFiles,
    pub right: StreamFiles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<StreamFiles>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub records: Vec<ManifestRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ListenerRecord {
    pub listener_id: String,
    pub severity: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audiogram_left: Option<[f64; 8]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audiogram_right: Option<[f64; 8]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ListenerFile {
    pub listeners: Vec<ListenerRecord>,
}

impl ListenerRecord {
    pub fn from_profile(p: &ListenerProfile) -> Self {
        ListenerRecord {
            listener_id: p.listener_id.clone(),
            severity: p.severity.name().to_string(),
            audiogram_left: p.audiogram_left.map(|a| a.0),
            audiogram_right: p.audiogram_right.map(|a| a.0),
        }
    }

    pub fn to_profile(&self) -> earshot_core::Result<ListenerProfile> {
        let severity = Severity::parse(&self.severity).ok_or_else(|| {
            earshot_core::Error::Input(format!("listener {}: unknown severity `{}`", self.listener_id, self.severity))
        })?;
        let mut p = ListenerProfile::new(self.listener_id.clone(), severity);
        match (self.audiogram_left, self.audiogram_right) {
            (Some(l), Some(r)) => p = p.with_audiograms(Audiogram(l), Audiogram(r)),
            (None, None) => {}
            _ => {
                return Err(earshot_core::Error::Input(format!(
                    "listener {}: audiograms must be given for both ears or neither",
                    self.listener_id
                )))
            }
        }
        p.validate()?;
        Ok(p)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    fs::write(path, text).at(path)
}

pub fn read_listeners(path: &Path) -> Result<Vec<ListenerProfile>> {
    let file: ListenerFile = read_json(path)?;
    let mut seen = BTreeSet::new();
    file.listeners
        .iter()
        .map(|r| {
            if !seen.insert(r.listener_id.clone()) || r.listener_id.is_empty() {
                return Err(Error::Data(format!(
                    "{}: empty or duplicate listener id `{}`",
                    path.display(),
                    r.listener_id
                )));
            }
            Ok(r.to_profile()?)
        })
        .collect()
}

pub fn write_listeners(path: &Path, listeners: &[ListenerProfile]) -> Result<()> {
    write_json(
        path,
        &ListenerFile {
            listeners: listeners.iter().map(ListenerRecord::from_profile).collect(),
        },
    )
}

/// A manifest together with the directory its paths are relative to.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedManifest {
    pub manifest: Manifest,
    pub base: PathBuf,
}

impl LoadedManifest {
    /// Reads and checks a manifest: version, nonempty unique ids, label
    /// range, and that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = LoadedManifest { manifest, base };
        loaded.check(path)?;
        Ok(loaded)
    }

    fn check(&self, path: &Path) -> Result<()> {
        let bad = |msg: String| Err(Error::Data(format!("{}: {msg}", path.display())));
        if self.manifest.manifest_version != MANIFEST_VERSION {
            return bad(format!(
                "manifest_version {} unsupported (expected {MANIFEST_VERSION})",
                self.manifest.manifest_version
            ));
        }
        let mut ids = BTreeSet::new();
        let mut missing = Vec::new();
        for r in &self.manifest.records {
            for (what, id) in [
                ("utterance_id", &r.utterance_id),
                ("scene_id", &r.scene_id),
                ("system_id", &r.system_id),
                ("listener_id", &r.listener_id),
            ] {
                if id.is_empty() {
                    return bad(format!("record {}: empty {what}", r.utterance_id));
                }
            }
            if !ids.insert(&r.utterance_id) {
                return bad(format!("duplicate utterance_id {}", r.utterance_id));
            }
            if let Some(l) = r.label {
                if !(0.0..=100.0).contains(&l) {
                    return bad(format!("record {}: label {l} outside [0,100]", r.utterance_id));
                }
            }
            for s in [Some(&r.left), Some(&r.right), r.reference.as_ref()].into_iter().flatten() {
                for f in s.sfm.values().chain(std::iter::once(&s.logmel)) {
                    if !self.base.join(f).is_file() {
                        missing.push(f.clone());
                    }
                }
            }
        }
        if !missing.is_empty() {
            return bad(format!("{} missing feature files: {}", missing.len(), missing.join(", ")));
        }
        Ok(())
    }

    pub fn seen_ids(&self) -> SeenIds {
        SeenIds {
            systems: self.manifest.records.iter().map(|r| r.system_id.clone()).collect(),
            listeners: self.manifest.records.iter().map(|r| r.listener_id.clone()).collect(),
        }
    }

    fn load_stream(&self, files: &StreamFiles, wanted: &[(Backbone, LayerWindow)]) -> Result<StreamBundle> {
        let lm_path = self.base.join(&files.logmel);
        let frames = read_logmel(&lm_path)?;
        let t = frames.shape()[0];
        let mut sfm = Vec::with_capacity(wanted.len());
        for (b, w) in wanted {
            let rel = files
                .sfm
                .get(b.name())
                .ok_or_else(|| Error::Data(format!("{}: no {} features listed", lm_path.display(), b.name())))?;
            let stack = read_sfm(&self.base.join(rel))?;
            if stack.backbone != *b {
                return Err(Error::Data(format!(
                    "{rel}: file holds {} features, manifest says {}",
                    stack.backbone.name(),
                    b.name()
                )));
            }
            // keep only what the model needs so large stacks are not held in memory
            sfm.push(earshot_core::dsp::select_layers(&stack, *w).unwrap_or(stack));
        }
        let bundle = StreamBundle {
            sfm,
            logmel: LogMel::new(frames, 100.0)?,
            valid_frames: files.valid_frames.unwrap_or(t),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Reads the feature files of record `i`, keeping only the layers in
    /// `wanted` (all layers when empty).
    pub fn bundle(&self, i: usize, wanted: &[(Backbone, LayerWindow)], with_reference: bool) -> Result<FeatureBundle> {
        let r = &self.manifest.records[i];
        let reference = match (&r.reference, with_reference) {
            (Some(f), true) => Some(self.load_stream(f, wanted)?),
            (None, true) => return Err(Error::Data(format!("record {} has no reference stream", r.utterance_id))),
            (_, false) => None,
        };
        Ok(FeatureBundle {
            utterance_id: r.utterance_id.clone(),
            left: self.load_stream(&r.left, wanted)?,
            right: self.load_stream(&r.right, wanted)?,
            reference,
        })
    }
}

/// A manifest plus its listeners, usable wherever prepared data is needed.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestSource {
    pub manifest: LoadedManifest,
    pub listeners: Vec<ListenerProfile>,
}

impl ManifestSource {
    pub fn load(manifest: &Path, listeners: &Path) -> Result<Self> {
        let src = ManifestSource {
            manifest: LoadedManifest::load(manifest)?,
            listeners: read_listeners(listeners)?,
        };
        let known: BTreeSet<&str> = src.listeners.iter().map(|l| l.listener_id.as_str()).collect();
        let unknown: BTreeSet<&str> = src
            .manifest
            .manifest
            .records
            .iter()
            .map(|r| r.listener_id.as_str())
            .filter(|id| !known.contains(id))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Data(format!(
                "{}: listeners not in {}: {}",
                manifest.display(),
                listeners.display(),
                unknown.into_iter().collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(src)
    }

    pub fn load_dataset(&self, cfg: &ModelConfig) -> Result<Dataset> {
        let wanted: Vec<(Backbone, LayerWindow)> = cfg.backbones.iter().copied().zip(cfg.layer_window.iter().copied()).collect();
        let mut examples = Vec::with_capacity(self.manifest.manifest.records.len());
        for (i, r) in self.manifest.manifest.records.iter().enumerate() {
            let bundle = self.manifest.bundle(i, &wanted, cfg.use_reference)?;
            let input = prepare_input(&bundle, cfg)
                .map_err(|e| Error::Data(format!("utterance {}: {e}", r.utterance_id)))?;
            examples.push(Example {
                utterance_id: r.utterance_id.clone(),
                scene_id: r.scene_id.clone(),
                system_id: r.system_id.clone(),
                listener_id: r.listener_id.clone(),
                label: r.label,
                input,
            });
        }
        Ok(Dataset {
            examples,
            listeners: self.listeners.iter().map(|l| (l.listener_id.clone(), l.clone())).collect(),
        })
    }
}

impl FeatureSource for ManifestSource {
    fn dataset(&self, cfg: &ModelConfig) -> earshot_core::Result<Dataset> {
        self.load_dataset(cfg).map_err(|e| match e {
            Error::Core(c) => c,
            other => earshot_core::Error::Input(other.to_string()),
        })
    }
}

fn stream_files(
    dir: &Path,
    rel_dir: &str,
    utt: &str,
    stream: &str,
    bundle: &StreamBundle,
) -> Result<StreamFiles> {
    let mut sfm = BTreeMap::new();
    for s in &bundle.sfm {
        let rel = format!("{rel_dir}/{utt}_{stream}_{}.sfmf", s.backbone.name());
        write_sfm(&dir.join(&rel), s)?;
        sfm.insert(s.backbone.name().to_string(), rel);
    }
    let logmel = format!("{rel_dir}/{utt}_{stream}.lmel");
    write_logmel(&dir.join(&logmel), &bundle.logmel.frames)?;
    Ok(StreamFiles {
        sfm,
        logmel,
        valid_frames: Some(bundle.valid_frames),
    })
}

/// Writes every utterance's feature files under `dir/features` plus
/// `manifest.json` and `listeners.json`.
pub fn write_synthetic(dir: &Path, data: &SynthDataset) -> Result<Manifest> {
    fs::create_dir_all(dir).at(dir)?;
    let mut records = Vec::with_capacity(data.utterances.len());
    for (i, m) in data.utterances.iter().enumerate() {
        let b = data.bundle(i, None)?;
        let reference = b.reference.as_ref().expect("synthetic bundles carry a reference");
        records.push(ManifestRecord {
            utterance_id: m.utterance_id.clone(),
            scene_id: m.scene_id.clone(),
            system_id: m.system_id.clone(),
            listener_id: m.listener_id.clone(),
            left: stream_files(dir, "features", &m.utterance_id, "left", &b.left)?,
            right: stream_files(dir, "features", &m.utterance_id, "right", &b.right)?,
            reference: Some(stream_files(dir, "features", &m.utterance_id, "ref", reference)?),
            label: Some(m.label),
        });
    }
    let manifest = Manifest {
        manifest_version: MANIFEST_VERSION,
        records,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_listeners(&dir.join("listeners.json"), &data.listeners)?;
    Ok(manifest)
}
