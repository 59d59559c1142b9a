use earshot_core::attention::CrossAttentionBlock;
use earshot_core::conditioning::{Audiogram, ConditioningMode, ConditioningParams, ConditioningStats, ListenerProfile, Severity, COND_PREFIX};
use earshot_core::dsp::{Backbone, LayerWindow};
use earshot_core::experiments::{SynthDataset, SynthSpec};
use earshot_core::model::{best_ear_pool, best_ear_pool_value, prepare_input, EarPooling, Model, ModelConfig, Readout};
use earshot_core::{Graph, ParameterStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus() -> SynthDataset {
    SynthDataset::generate(SynthSpec {
        n_utterances: 12,
        listeners: [2, 2, 2],
        n_layers: 4,
        min_frames: 9,
        max_frames: 24,
        planted: LayerWindow::new(1, 2).unwrap(),
        ..SynthSpec::default()
    })
    .unwrap()
}

fn tiny() -> ModelConfig {
    ModelConfig::tiny(LayerWindow::new(1, 2).unwrap())
}

fn graph_pool(l: f64, r: f64, beta: f64) -> f64 {
    let mut g = Graph::new();
    let (a, b) = (g.input(Tensor::from_vec(vec![l])), g.input(Tensor::from_vec(vec![r])));
    let p = best_ear_pool(&mut g, a, b, beta).unwrap();
    g.value(p).item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn best_ear_pool_algebra(l in 0.0f64..100.0, r in 0.0f64..100.0, bump in 0.0f64..20.0, beta in 0.5f64..20.0) {
        let p = best_ear_pool_value(l, r, beta);
        prop_assert_eq!(p, best_ear_pool_value(r, l, beta));
        prop_assert_eq!(graph_pool(l, r, beta), graph_pool(r, l, beta));
        prop_assert!((graph_pool(l, r, beta) - p).abs() < 1e-12);
        prop_assert!(best_ear_pool_value(l + bump, r, beta) >= p);
        let m = l.max(r);
        prop_assert!(p <= m + 1e-12);
        prop_assert!(p >= m - std::f64::consts::LN_2 / beta - 1e-12);
        prop_assert_eq!(best_ear_pool_value(l, l, beta), l);
        prop_assert_eq!(graph_pool(l, l, beta), l);
        prop_assert!(m - best_ear_pool_value(l, r, 1000.0) < 1e-2);
    }
}

#[test]
fn smoke_tiny_config_is_finite_and_bounded() {
    let synth = corpus();
    let cfg = tiny();
    let model = Model::new(cfg.clone(), 1).unwrap();
    for (i, u) in synth.utterances.iter().enumerate() {
        let input = prepare_input(&synth.bundle(i, Some(cfg.layer_window[0])).unwrap(), &cfg).unwrap();
        let p = model.predict(&input, synth.listener(&u.listener_id).unwrap()).unwrap();
        assert!(p.left > 0.0 && p.left < 100.0 && p.right > 0.0 && p.right < 100.0);
        assert!((0.0..=100.0).contains(&p.pooled));
    }
}

#[test]
fn ear_swap_is_exact() {
    let synth = corpus();
    for pooling in [EarPooling::BestEarLse, EarPooling::AverageEarFeature] {
        let mut cfg = tiny();
        cfg.ear_pooling = pooling;
        let model = Model::new(cfg.clone(), 2).unwrap();
        let input = prepare_input(&synth.bundle(0, Some(cfg.layer_window[0])).unwrap(), &cfg).unwrap();
        let who = synth.listener(&synth.utterances[0].listener_id).unwrap();
        let a = model.predict(&input, who).unwrap();
        let b = model.predict(&input.swapped(), who).unwrap();
        assert_eq!((a.left, a.right, a.pooled), (b.right, b.left, b.pooled));
    }
}

#[test]
fn padded_frames_and_tokens_are_inert() {
    let synth = corpus();
    let cfg = tiny();
    let model = Model::new(cfg.clone(), 3).unwrap();
    let mut checked = 0;
    for (i, u) in synth.utterances.iter().enumerate() {
        if u.valid_frames > 16 {
            continue;
        }
        let who = synth.listener(&u.listener_id).unwrap();
        let bundle = synth.bundle(i, Some(cfg.layer_window[0])).unwrap();
        let base = model.predict(&prepare_input(&bundle, &cfg).unwrap(), who).unwrap();

        // raw padding frames of every stream
        let mut noisy = bundle.clone();
        for s in [&mut noisy.left, &mut noisy.right, noisy.reference.as_mut().unwrap()] {
            let v = s.valid_frames;
            s.logmel.frames.data_mut()[v * 128..].iter_mut().for_each(|x| *x = 1e3);
            for st in &mut s.sfm {
                for l in &mut st.layers {
                    l.data_mut()[v * 1024..].iter_mut().enumerate().for_each(|(k, x)| *x = (k % 7) as f64 * 50.0);
                }
            }
        }
        let p = model.predict(&prepare_input(&noisy, &cfg).unwrap(), who).unwrap();
        assert!((p.pooled - base.pooled).abs() <= 1e-12);
        assert!((p.left - base.left).abs() <= 1e-12 && (p.right - base.right).abs() <= 1e-12);

        // masked tokens after pooling
        let mut input = prepare_input(&bundle, &cfg).unwrap();
        let tm = input.left.token_mask.clone();
        assert!(tm.contains(&false));
        for s in [&mut input.left, &mut input.right, input.reference.as_mut().unwrap()] {
            for l in &mut s.layers {
                for (t, &keep) in tm.iter().enumerate() {
                    if !keep {
                        l.data_mut()[t * 1024..(t + 1) * 1024].iter_mut().for_each(|x| *x = -77.0);
                    }
                }
            }
        }
        let p = model.predict(&input, who).unwrap();
        assert!((p.pooled - base.pooled).abs() <= 1e-12);
        checked += 1;
    }
    assert!(checked > 0, "fixture has no padded utterance");
}

fn count_without_cond(cfg: ModelConfig) -> usize {
    Model::new(cfg, 0).unwrap().store.num_scalars_excluding(&[COND_PREFIX])
}

#[test]
fn parameter_count_ignores_layers_and_backbones() {
    let base = tiny();
    let n = count_without_cond(base.clone());
    for (lo, hi) in [(0, 0), (3, 6), (0, 15)] {
        let mut c = base.clone();
        c.layer_window = vec![LayerWindow::new(lo, hi).unwrap()];
        if lo == hi {
            c.readout = Readout::MeanPool;
        }
        assert_eq!(count_without_cond(c), n, "window {lo}-{hi}");
    }
    let mut two = base.clone();
    two.backbones = vec![Backbone::CanaryLike, Backbone::ParakeetLike];
    two.layer_window = vec![LayerWindow::new(9, 15).unwrap(), LayerWindow::new(2, 3).unwrap()];
    assert_eq!(count_without_cond(two), n);
    for mode in [ConditioningMode::Pta4, ConditioningMode::Pta8] {
        let mut c = base.clone();
        c.conditioning = mode;
        assert_eq!(count_without_cond(c), n);
    }
}

#[test]
fn removing_the_reference_drops_exactly_two_blocks() {
    let with = tiny();
    let mut without = with.clone();
    without.use_reference = false;
    let block = CrossAttentionBlock::param_count(&with.attention());
    assert_eq!(count_without_cond(with.clone()), count_without_cond(without.clone()) + 2 * block);

    let synth = corpus();
    let who = synth.listener(&synth.utterances[0].listener_id).unwrap();
    let nodes = |cfg: &ModelConfig| {
        let m = Model::new(cfg.clone(), 0).unwrap();
        let input = prepare_input(&synth.bundle(0, Some(cfg.layer_window[0])).unwrap(), cfg).unwrap();
        let mut g = Graph::new();
        m.forward(&mut g, &input, who).unwrap();
        g.len()
    };
    assert!(nodes(&without) < nodes(&with));
}

#[test]
fn conditioning_tokens() {
    let d = 6;
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let stats = ConditioningStats::default();
    let token = |store: &ParameterStore, p: &ConditioningParams, who: &ListenerProfile| {
        let mut g = Graph::new();
        let t = p.token(&mut g, store, who, &stats).unwrap();
        g.value(t).clone()
    };
    let cat = ConditioningParams::register(&mut store, ConditioningMode::Categorical, d, &mut rng).unwrap();
    let a = ListenerProfile::new("a", Severity::Moderate);
    let b = ListenerProfile::new("b", Severity::Moderate);
    let c = ListenerProfile::new("c", Severity::Mild);
    assert_eq!(token(&store, &cat, &a), token(&store, &cat, &b));
    assert_ne!(token(&store, &cat, &a), token(&store, &cat, &c));
    assert_eq!(store.value(store.id("cond.severity_table").unwrap()).shape(), &[3, d]);

    let p4 = ConditioningParams::register(&mut store, ConditioningMode::Pta4, d, &mut rng).unwrap();
    let at = |db: f64| ListenerProfile::new("x", Severity::Moderate).with_audiograms(Audiogram::flat(db), Audiogram::flat(db));
    let (ta, tc, tm) = (token(&store, &p4, &at(20.0)), token(&store, &p4, &at(60.0)), token(&store, &p4, &at(40.0)));
    for i in 0..d {
        assert!((ta.data()[i] + tc.data()[i] - 2.0 * tm.data()[i]).abs() < 1e-12);
    }
    let mut no_audio = store.clone();
    let p8 = ConditioningParams::register(&mut no_audio, ConditioningMode::Pta8, d, &mut rng).unwrap();
    let mut g = Graph::new();
    assert!(p8.token(&mut g, &no_audio, &a, &stats).is_err());

    let none = ConditioningParams::register(&mut store, ConditioningMode::None, d, &mut rng).unwrap();
    assert_eq!(token(&store, &none, &a), token(&store, &none, &at(70.0)));
}

#[test]
fn severity_changes_the_score() {
    let synth = corpus();
    let cfg = tiny();
    let model = Model::new(cfg.clone(), 4).unwrap();
    let input = prepare_input(&synth.bundle(0, Some(cfg.layer_window[0])).unwrap(), &cfg).unwrap();
    let scores: Vec<f64> = Severity::ALL
        .iter()
        .map(|&s| model.predict(&input, &ListenerProfile::new("x", s)).unwrap().pooled)
        .collect();
    assert!(scores[0] != scores[1] && scores[1] != scores[2]);
}

#[test]
fn missing_reference_is_an_input_error() {
    let synth = corpus();
    let cfg = tiny();
    let mut bundle = synth.bundle(0, Some(cfg.layer_window[0])).unwrap();
    bundle.reference = None;
    assert!(prepare_input(&bundle, &cfg).is_err());
    let mut noref = cfg.clone();
    noref.use_reference = false;
    let input = prepare_input(&bundle, &noref).unwrap();
    let m = Model::new(noref, 0).unwrap();
    assert!(m.predict(&input, synth.listener(&synth.utterances[0].listener_id).unwrap()).is_ok());
}

#[test]
fn positional_encoding_option_runs() {
    let synth = corpus();
    let mut cfg = tiny();
    cfg.positional_encoding = true;
    cfg.ref_time_window = Some(1);
    cfg.logmel_normalize = true;
    let m = Model::new(cfg.clone(), 5).unwrap();
    let input = prepare_input(&synth.bundle(1, Some(cfg.layer_window[0])).unwrap(), &cfg).unwrap();
    let p = m.predict(&input, synth.listener(&synth.utterances[1].listener_id).unwrap()).unwrap();
    assert!(p.pooled.is_finite());
}
