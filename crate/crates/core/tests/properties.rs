use earshot_core::attention::{key_mask_matrix, AttentionConfig, CrossAttentionBlock};
use earshot_core::dsp::{pool_frames, select_layers, temporal_pool_x8, Backbone, LayerWindow, SfmStack, SFM_DIM};
use earshot_core::{Graph, ParameterStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(seed: u64, shape: &[usize], spread: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-spread..spread))
}

fn block(d: usize, heads: usize, seed: u64) -> (ParameterStore, CrossAttentionBlock) {
    let cfg = AttentionConfig {
        d_model: d,
        n_heads: heads,
        dropout_p: 0.0,
        ffn_mult: 2,
    };
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = CrossAttentionBlock::register(&mut store, "b", cfg, &mut rng).unwrap();
    (store, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), spread in 0.1f64..40.0) {
        let mut g = Graph::new();
        let x = g.input(tensor(seed, &[rows, cols], spread));
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y);
        for r in 0..rows {
            let row = v.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn layer_norm_standardises(rows in 1usize..5, d in 4usize..32, seed in any::<u64>(), spread in 0.5f64..50.0) {
        let mut g = Graph::new();
        let x = tensor(seed, &[rows, d], spread);
        // skip near-constant rows
        for r in 0..rows {
            let row = x.row(r);
            let m = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d as f64;
            prop_assume!(var > 0.05);
        }
        let xv = g.input(x);
        let (gain, bias) = (g.input(Tensor::ones([d])), g.input(Tensor::zeros([d])));
        let y = g.layer_norm(xv, gain, bias, 1e-5).unwrap();
        let v = g.value(y);
        for r in 0..rows {
            let row = v.row(r);
            let m = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn conv_preserves_length(t in 1usize..40, k in prop::sample::select(vec![3usize, 5, 9]), d in prop::sample::select(vec![1usize, 2, 4]), seed in any::<u64>()) {
        let mut g = Graph::new();
        let x = g.input(tensor(seed, &[t, 3], 1.0));
        let w = g.input(tensor(seed ^ 1, &[k, 3, 2], 1.0));
        let y = g.conv1d_dilated(x, w, None, d).unwrap();
        prop_assert_eq!(g.shape(y), &[t, 2]);
    }

    #[test]
    fn dropout_identities(n in 1usize..50, p in 0.0f64..0.95, seed in any::<u64>()) {
        let x = tensor(seed, &[n], 3.0);
        let mut eval = Graph::new();
        let xv = eval.input(x.clone());
        let y = eval.dropout(xv, p).unwrap();
        prop_assert_eq!(eval.value(y), &x);
        let mut train = Graph::training(seed);
        let xv = train.input(x.clone());
        let y = train.dropout(xv, 0.0).unwrap();
        prop_assert_eq!(train.value(y), &x);
    }

    #[test]
    fn attention_weights_normalised_over_valid_keys(tq in 1usize..5, tk in 1usize..7, seed in any::<u64>(), mask_bits in any::<u32>()) {
        let (store, b) = block(8, 2, seed);
        let mut keys: Vec<bool> = (0..tk).map(|i| mask_bits >> i & 1 == 1).collect();
        keys[0] = true;
        let mut g = Graph::new();
        let q = g.input(tensor(seed ^ 2, &[tq, 8], 1.0));
        let kv = g.input(tensor(seed ^ 3, &[tk, 8], 1.0));
        let m = key_mask_matrix(tq, &keys);
        let out = b.multi_head_attention(&mut g, &store, q, kv, kv, Some(&m)).unwrap();
        for w in out.weights {
            let v = g.value(w);
            for r in 0..tq {
                let row = v.row(r);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for (c, &keep) in keys.iter().enumerate() {
                    if !keep {
                        prop_assert_eq!(row[c], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn masked_keys_are_inert(tq in 1usize..5, tk in 2usize..7, seed in any::<u64>(), mask_bits in any::<u32>(), junk in -1e3f64..1e3) {
        let (store, b) = block(8, 2, seed);
        let mut keys: Vec<bool> = (0..tk).map(|i| mask_bits >> i & 1 == 1).collect();
        keys[0] = true;
        let q = tensor(seed ^ 2, &[tq, 8], 1.0);
        let kv = tensor(seed ^ 3, &[tk, 8], 1.0);
        let mut kv2 = kv.clone();
        for (t, &keep) in keys.iter().enumerate() {
            if !keep {
                kv2.data_mut()[t * 8..(t + 1) * 8].iter_mut().enumerate().for_each(|(i, v)| *v = junk * (i as f64 - 3.5));
            }
        }
        let run = |kv: &Tensor| {
            let mut g = Graph::new();
            let (qv, kvv) = (g.input(q.clone()), g.input(kv.clone()));
            let y = b.forward(&mut g, &store, qv, kvv, kvv, Some(&key_mask_matrix(tq, &keys))).unwrap();
            g.value(y).clone()
        };
        prop_assert!(run(&kv).max_abs_diff(&run(&kv2)) <= 1e-12);
    }

    #[test]
    fn key_permutation_invariance(tq in 1usize..4, tk in 1usize..7, seed in any::<u64>(), mask_bits in any::<u32>()) {
        let (store, b) = block(8, 2, seed);
        let mut keys: Vec<bool> = (0..tk).map(|i| mask_bits >> i & 1 == 1).collect();
        keys[tk - 1] = true;
        let q = tensor(seed ^ 2, &[tq, 8], 1.0);
        let kv = tensor(seed ^ 3, &[tk, 8], 1.0);
        let mut perm: Vec<usize> = (0..tk).collect();
        perm.reverse();
        perm.rotate_left(seed as usize % tk);
        let kv_p = Tensor::from_fn([tk, 8], |i| kv.at2(perm[i / 8], i % 8));
        let keys_p: Vec<bool> = perm.iter().map(|&i| keys[i]).collect();
        let run = |kv: &Tensor, keys: &[bool]| {
            let mut g = Graph::new();
            let (qv, kvv) = (g.input(q.clone()), g.input(kv.clone()));
            let y = b.forward(&mut g, &store, qv, kvv, kvv, Some(&key_mask_matrix(tq, keys))).unwrap();
            g.value(y).clone()
        };
        prop_assert!(run(&kv, &keys).max_abs_diff(&run(&kv_p, &keys_p)) <= 1e-9);
    }

    #[test]
    fn self_encoder_is_permutation_equivariant(t in prop::sample::select(vec![1usize, 2, 4, 7, 32]), seed in any::<u64>()) {
        let (store, b) = block(8, 2, seed);
        let x = tensor(seed ^ 5, &[t, 8], 1.0);
        let mut perm: Vec<usize> = (0..t).collect();
        perm.rotate_left(seed as usize % t);
        perm.swap(0, t - 1);
        let xp = Tensor::from_fn([t, 8], |i| x.at2(perm[i / 8], i % 8));
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let y = b.self_encode(&mut g, &store, xv, None).unwrap();
            g.value(y).clone()
        };
        let (y, yp) = (run(&x), run(&xp));
        prop_assert_eq!(y.shape(), &[t, 8]);
        let y_perm = Tensor::from_fn([t, 8], |i| y.at2(perm[i / 8], i % 8));
        prop_assert!(y_perm.max_abs_diff(&yp) <= 1e-9);
    }

    #[test]
    fn pooling_by_eight_keeps_the_mean(blocks in 1usize..6, seed in any::<u64>()) {
        let t = 8 * blocks;
        let layer = tensor(seed, &[t, SFM_DIM], 10.0);
        let stack = SfmStack::new(Backbone::Synthetic, vec![0], vec![layer.clone()]).unwrap();
        let pooled = temporal_pool_x8(&stack);
        prop_assert_eq!(pooled.layers[0].shape(), &[blocks, SFM_DIM]);
        let before = layer.sum() / layer.numel() as f64;
        let after = pooled.layers[0].sum() / pooled.layers[0].numel() as f64;
        prop_assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn pooled_tokens_ignore_padding(t in 1usize..30, valid_frac in 0.05f64..1.0, seed in any::<u64>()) {
        let valid = ((t as f64 * valid_frac).ceil() as usize).clamp(1, t);
        let x = tensor(seed, &[t, 4], 1.0);
        let mut y = x.clone();
        y.data_mut()[valid * 4..].iter_mut().for_each(|v| *v = 1e6);
        let ((px, mx), (py, my)) = (pool_frames(&x, valid), pool_frames(&y, valid));
        prop_assert_eq!(px, py);
        prop_assert_eq!(mx.iter().filter(|&&m| m).count(), valid.div_ceil(8));
        prop_assert_eq!(mx, my);
    }

    #[test]
    fn nested_layer_selection(n in 2usize..12, a in 0usize..12, b in 0usize..12, c in 0usize..12, d in 0usize..12) {
        let all: Vec<usize> = (0..n).collect();
        let layers: Vec<Tensor> = all.iter().map(|&i| Tensor::full([1, SFM_DIM], i as f64)).collect();
        let stack = SfmStack::new(Backbone::Synthetic, all, layers).unwrap();
        let (lo1, hi1) = (a.min(b) % n, a.max(b) % n);
        prop_assume!(lo1 <= hi1);
        let outer = LayerWindow::new(lo1, hi1).unwrap();
        let (lo2, hi2) = (lo1 + c.min(d) % (hi1 - lo1 + 1), lo1 + c.max(d) % (hi1 - lo1 + 1));
        prop_assume!(lo2 <= hi2);
        let inner = LayerWindow::new(lo2, hi2).unwrap();
        let twice = select_layers(&select_layers(&stack, outer).unwrap(), inner).unwrap();
        let once = select_layers(&stack, outer.intersect(inner).unwrap()).unwrap();
        prop_assert_eq!(twice, once);
    }
}

#[test]
fn block_parameter_count_is_exact() {
    for (d, mult) in [(8, 2), (32, 2), (12, 3)] {
        let cfg = AttentionConfig {
            d_model: d,
            n_heads: 4,
            dropout_p: 0.0,
            ffn_mult: mult,
        };
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        CrossAttentionBlock::register(&mut store, "x", cfg, &mut rng).unwrap();
        let h = mult * d;
        let weights = 4 * d * d + 2 * (2 * d) + d * (2 * h) + h * d;
        let biases = 4 * d + 2 * h + d;
        assert_eq!(store.num_scalars(), weights + biases);
        assert_eq!(CrossAttentionBlock::param_count(&cfg), weights + biases);
    }
}

#[test]
fn zero_weight_block_reduces_to_double_norm() {
    let (mut store, b) = block(8, 2, 1);
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        if !name.contains("norm") {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(shape)).unwrap();
        }
    }
    let q = tensor(9, &[3, 8], 2.0);
    let mut g = Graph::new();
    let qv = g.input(q.clone());
    let kv = g.input(tensor(10, &[5, 8], 2.0));
    let y = b.forward(&mut g, &store, qv, kv, kv, None).unwrap();
    let (one, zero) = (g.input(Tensor::ones([8])), g.input(Tensor::zeros([8])));
    let n1 = g.layer_norm(qv, one, zero, 1e-5).unwrap();
    let n2 = g.layer_norm(n1, one, zero, 1e-5).unwrap();
    assert!(g.value(y).max_abs_diff(g.value(n2)) < 1e-12);
}

#[test]
fn single_key_attention_returns_projected_value() {
    let (store, b) = block(8, 2, 2);
    let mut g = Graph::new();
    let q = g.input(tensor(3, &[2, 8], 1.0));
    let kv = g.input(tensor(4, &[1, 8], 1.0));
    let out = b.multi_head_attention(&mut g, &store, q, kv, kv, None).unwrap().out;
    let names = ["b.attn.wv", "b.attn.bv", "b.attn.wo", "b.attn.bo"];
    let [wv, bv, wo, bo] = names.map(|n| g.input(store.value(store.id(n).unwrap()).clone()));
    let v = g.linear(kv, wv, Some(bv)).unwrap();
    let o = g.linear(v, wo, Some(bo)).unwrap();
    for r in 0..2 {
        let diff: f64 = g.value(out).row(r).iter().zip(g.value(o).row(0)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}

#[test]
fn fully_masked_query_row_is_rejected() {
    let (store, b) = block(8, 2, 3);
    let mut g = Graph::new();
    let q = g.input(tensor(3, &[2, 8], 1.0));
    let kv = g.input(tensor(4, &[3, 8], 1.0));
    let mask = key_mask_matrix(2, &[false, false, false]);
    assert!(b.forward(&mut g, &store, q, kv, kv, Some(&mask)).is_err());
}

#[test]
fn seeded_training_graphs_repeat_exactly() {
    let (store, b) = {
        let cfg = AttentionConfig {
            d_model: 8,
            n_heads: 2,
            dropout_p: 0.1,
            ffn_mult: 2,
        };
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = CrossAttentionBlock::register(&mut store, "b", cfg, &mut rng).unwrap();
        (store, b)
    };
    let x = tensor(5, &[6, 8], 1.0);
    let run = || {
        let mut s = store.clone();
        let mut g = Graph::training(77);
        let xv = g.input(x.clone());
        let y = b.self_encode(&mut g, &s, xv, None).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        g.accumulate_param_grads(&mut s);
        let grads: Vec<Tensor> = s.iter().map(|(_, p)| p.grad.clone()).collect();
        (g.value(y).clone(), grads)
    };
    assert_eq!(run(), run());
}
