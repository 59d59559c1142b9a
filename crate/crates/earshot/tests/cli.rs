use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use earshot::commands::{cmd_evaluate, EvaluateArgs};
use earshot::error::Error;
use earshot::manifest::LoadedManifest;
use earshot::report::read_predictions;

const SYNTH: &str = "n_utterances = 40\nlisteners = 3,3,3\nn_systems = 3\nn_scenes = 10\nn_layers = 4\nmin_frames = 8\nmax_frames = 8\nplanted = 2-3\n";
const MODEL: &str = "backbones = synthetic\nlayer_window = 2-3\nd_model = 8\nn_heads = 2\nmscnn_channels = 6\ndropout_p = 0\n";
const TRAIN: &str = "epochs = 1\nlr = 0.001\nbatch_size = 4\n";

fn earshot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_earshot"))
        .args(args)
        .env("EARSHOT_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = earshot(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    earshot(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Work {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("synth.kv"), SYNTH).unwrap();
        fs::write(root.join("model.kv"), MODEL).unwrap();
        fs::write(root.join("train.kv"), TRAIN).unwrap();
        Work { _dir: dir, root }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn synth(&self, name: &str) -> PathBuf {
        let out = self.p(name);
        ok(&["synth", "--config", s(&self.p("synth.kv")), "--out", s(&out)]);
        out
    }

    fn train(&self, data: &Path, out: &str) -> PathBuf {
        let out = self.p(out);
        ok(&[
            "train",
            "--manifest",
            s(&data.join("manifest.json")),
            "--listeners",
            s(&data.join("listeners.json")),
            "--config",
            s(&self.p("model.kv")),
            "--train-config",
            s(&self.p("train.kv")),
            "--out",
            s(&out),
        ]);
        out
    }

    fn predict(&self, data: &Path, checkpoints: &[&Path], out: &str) -> PathBuf {
        let out = self.p(out);
        let m = data.join("manifest.json");
        let l = data.join("listeners.json");
        let mut args = vec!["predict", "--manifest", s(&m), "--listeners", s(&l), "--out", s(&out)];
        for c in checkpoints {
            args.push("--checkpoint");
            args.push(s(c));
        }
        ok(&args);
        out
    }
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_idempotent() {
    let w = Work::new();
    let a = w.synth("a");
    let b = w.synth("b");
    assert_eq!(tree(&a), tree(&b));
    w.synth("a");
    assert_eq!(tree(&a), tree(&b));
    assert_eq!(LoadedManifest::load(&a.join("manifest.json")).unwrap().manifest.records.len(), 40);

    fs::write(w.p("hundred.kv"), SYNTH.replace("n_utterances = 40", "n_utterances = 100")).unwrap();
    let h = w.p("h");
    let stdout = ok(&["synth", "--config", s(&w.p("hundred.kv")), "--out", s(&h)]);
    assert!(stdout.starts_with("100 utterances"));
    assert_eq!(LoadedManifest::load(&h.join("manifest.json")).unwrap().manifest.records.len(), 100);
}

#[test]
fn train_predict_evaluate_pipeline() {
    let w = Work::new();
    let data = w.synth("data");
    let run = w.train(&data, "run");
    for k in 0..5 {
        assert!(run.join(format!("fold{k}.ears")).is_file());
        assert!(run.join(format!("fold{k}.meta")).is_file());
    }
    assert!(!run.join("fold5.ears").exists());
    let plan: serde_json::Value = serde_json::from_slice(&fs::read(run.join("fold_plan.json")).unwrap()).unwrap();
    let folds = plan["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 5);
    for f in folds {
        let train: Vec<&str> = f["train"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
        let val: Vec<&str> = f["val"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
        assert_eq!(train.len() + val.len(), 9);
        assert!(val.iter().all(|v| !train.contains(v)));
    }

    let preds = w.predict(&data, &[&run], "preds.csv");
    let rows = read_predictions(&preds).unwrap();
    assert_eq!(rows.len(), 40);
    assert!(rows.iter().all(|r| [r.left, r.right, r.pooled].iter().all(|v| (0.0..=100.0).contains(v))));

    // five copies of one checkpoint ensemble to that checkpoint
    let ck = run.join("fold2.ears");
    let one = w.predict(&data, &[&ck], "one.csv");
    let five = w.predict(&data, &[ck.as_path(); 5], "five.csv");
    assert_eq!(fs::read(one).unwrap(), fs::read(five).unwrap());

    let out = w.p("eval");
    let stdout = ok(&[
        "evaluate",
        "--predictions",
        s(&preds),
        "--manifest",
        s(&data.join("manifest.json")),
        "--out",
        s(&out),
    ]);
    assert!(stdout.starts_with("rmse "));
    for f in ["metrics.csv", "scene_histogram.csv", "scenes.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

fn write_perfect(manifest: &Path, out: &Path, skip: usize) {
    let m = LoadedManifest::load(manifest).unwrap();
    let mut text = String::from("utterance_id,sL,sR,pooled\n");
    for r in m.manifest.records.iter().skip(skip) {
        let y = r.label.unwrap();
        text.push_str(&format!("{},{y},{y},{y}\n", r.utterance_id));
    }
    fs::write(out, text).unwrap();
}

#[test]
fn evaluation_of_perfect_predictions_and_strata() {
    let w = Work::new();
    let data = w.synth("data");
    let manifest = data.join("manifest.json");
    let preds = w.p("perfect.csv");
    write_perfect(&manifest, &preds, 0);

    fs::write(w.p("seen.kv"), SYNTH.replace("n_utterances = 40", "n_utterances = 8").replace("n_systems = 3", "n_systems = 2")).unwrap();
    let seen = w.p("seen");
    ok(&["synth", "--config", s(&w.p("seen.kv")), "--out", s(&seen), "--seed", "77"]);

    let e = cmd_evaluate(&EvaluateArgs {
        train_manifest: Some(seen.join("manifest.json")),
        ..EvaluateArgs::new(preds.clone(), manifest.clone(), w.p("eval"))
    })
    .unwrap();
    assert_eq!(e.rmse, 0.0);
    assert_eq!(e.n, 40);
    let strata = e.strata.unwrap();
    assert_eq!(strata[0].n + strata[1].n, 40);
    assert_eq!(strata[2].n + strata[3].n, 40);
    assert!(strata.iter().all(|s| s.groups.iter().map(|g| g.n).sum::<usize>() == s.n));
    let csv = fs::read_to_string(w.p("eval/stratified.csv")).unwrap();
    let pooled_n: usize = csv
        .lines()
        .filter(|l| l.contains("__pooled__"))
        .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(pooled_n, 80);

    // two labelled records without predictions are named in the error
    let partial = w.p("partial.csv");
    write_perfect(&manifest, &partial, 2);
    let m = LoadedManifest::load(&manifest).unwrap();
    let err = cmd_evaluate(&EvaluateArgs::new(partial, manifest.clone(), w.p("eval2"))).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Data(_)));
    for r in &m.manifest.records[..2] {
        assert!(msg.contains(&r.utterance_id), "{msg}");
    }
    assert!(msg.contains("2 labelled records without predictions"));
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let w = Work::new();
    let data = w.synth("data");
    fs::write(
        w.p("sweep.kv"),
        "window_size = 1\nwindows = 1-1, 2-2, 3-3\nsetups = B, C\nmodel.backbones = synthetic\nmodel.d_model = 8\nmodel.n_heads = 2\nmodel.mscnn_channels = 6\nmodel.dropout_p = 0\ntrain.epochs = 1\ntrain.lr = 0.001\n",
    )
    .unwrap();
    let out = w.p("sweep.csv");
    let stdout = ok(&[
        "sweep",
        "--config",
        s(&w.p("sweep.kv")),
        "--manifest",
        s(&data.join("manifest.json")),
        "--listeners",
        s(&data.join("listeners.json")),
        "--out",
        s(&out),
    ]);
    assert!(stdout.starts_with("argmin window "));
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows.iter().filter(|r| r.contains(",true,")).count(), 1);

    fs::write(w.p("bad_sweep.kv"), "window_size = 1\nwindows = 2-2\nsetups = A\n").unwrap();
    let (cfg, m, l, o) = (w.p("bad_sweep.kv"), data.join("manifest.json"), data.join("listeners.json"), w.p("bad.csv"));
    let bad = ["sweep", "--config", s(&cfg), "--manifest", s(&m), "--listeners", s(&l), "--out", s(&o)];
    assert_eq!(code(&bad), 2);
}

#[test]
fn exit_codes() {
    let w = Work::new();
    let data = w.synth("data");
    let m = data.join("manifest.json");
    let l = data.join("listeners.json");
    let train = |model: &Path, train: &Path| {
        code(&[
            "train",
            "--manifest",
            s(&m),
            "--listeners",
            s(&l),
            "--config",
            s(model),
            "--train-config",
            s(train),
            "--out",
            s(&w.p("x")),
        ])
    };

    // a single-layer window cannot carry a severity token
    fs::write(w.p("a1.kv"), MODEL.replace("layer_window = 2-3", "layer_window = 2\nreadout = A")).unwrap();
    assert_eq!(train(&w.p("a1.kv"), &w.p("train.kv")), 2);
    fs::write(w.p("typo.kv"), "epochz = 3\n").unwrap();
    assert_eq!(train(&w.p("model.kv"), &w.p("typo.kv")), 2);
    assert_eq!(code(&["synth", "--config", s(&w.p("typo.kv")), "--out", s(&w.p("y"))]), 2);

    assert_eq!(train(&w.p("model.kv"), &w.p("missing.kv")), 3);
    fs::write(w.p("wide.kv"), MODEL.replace("layer_window = 2-3", "layer_window = 3-9")).unwrap();
    assert_eq!(train(&w.p("wide.kv"), &w.p("train.kv")), 3);
    fs::remove_file(data.join(&LoadedManifest::load(&m).unwrap().manifest.records[3].left.logmel)).unwrap();
    assert_eq!(train(&w.p("model.kv"), &w.p("train.kv")), 3);

    let numeric = Error::Core(earshot_core::Error::NonFinite("loss".into()));
    assert_eq!(numeric.exit_code(), 4);
    assert_eq!(Error::Data("x".into()).exit_code(), 3);
}
