use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_ids(rng: &mut ChaCha8Rng, n: usize) -> Vec<TokenId> {
    (0..n).map(|_| rng.random_range(2..6)).collect()
}

fn small() -> ModelConfig {
    ModelConfig {
        hidden: 32,
        n_layers: 2,
        n_heads: 4,
        ffn_dim: 48,
        max_seq_len: 64,
        init_std: 0.2,
        ..ModelConfig::desk_default()
    }
}

#[test]
fn desk_default_param_count_matches_hand_formula() {
    let cfg = ModelConfig::desk_default();
    let state = ModelState::init(&cfg, 0).unwrap();
    // embedding 6x128, per layer: two 128-gains, four 128x128, three 128x352
    let per_layer = 128 + 128 + 4 * 128 * 128 + 3 * 128 * 352;
    let expected = 6 * 128 + 4 * per_layer + 128 + 128 * 6;
    assert_eq!(expected, 805_504);
    assert_eq!(state.param_count(), expected);
    assert_eq!(cfg.param_count(), expected);
}

#[test]
fn tied_embeddings_drop_the_head() {
    let cfg = ModelConfig {
        tie_embeddings: true,
        ..small()
    };
    let state = ModelState::init(&cfg, 1).unwrap();
    assert!(state.lm_head.is_none());
    assert_eq!(state.param_count(), cfg.param_count());
    let logits = state.forward(&[2, 3, 4]).unwrap();
    assert_eq!(logits.shape(), &[3, 6]);
}

#[test]
fn config_validation() {
    let mut cfg = small();
    cfg.n_heads = 3;
    assert!(cfg.validate().is_err());
    let mut cfg = small();
    cfg.hidden = 36;
    cfg.n_heads = 4; // head_dim 9 is odd
    assert!(cfg.validate().is_err());
    let mut cfg = small();
    cfg.max_seq_len = 1;
    assert!(cfg.validate().is_err());
}

#[test]
fn fresh_model_loss_is_near_uniform() {
    let cfg = ModelConfig::desk_default();
    let state = ModelState::init(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ids: Vec<TokenId> = (0..256).map(|_| rng.random_range(0..6)).collect();
    let mut g = Graph::new();
    let bound = state.bind(&mut g, false);
    let logits = state.forward_logits(&mut g, &bound, &[&ids]).unwrap();
    let targets: Vec<u32> = ids[1..].iter().map(|&t| t as u32).chain([0]).collect();
    let mut mask = vec![true; ids.len()];
    mask[ids.len() - 1] = false;
    let loss = g.cross_entropy(logits, &targets, &mask).unwrap();
    let l = g.value(loss).item() as f64;
    assert!((l - 6f64.ln()).abs() < 0.05, "{l}");
}

#[test]
fn prefix_logits_match_full_sequence() {
    let state = ModelState::init(&small(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ids = random_ids(&mut rng, 40);
    let full = state.forward(&ids).unwrap();
    for p in [1, 2, 7, 20, 39] {
        let prefix = state.forward(&ids[..p]).unwrap();
        for r in 0..p {
            for (a, b) in prefix.row(r).iter().zip(full.row(r)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn suffix_perturbation_never_changes_earlier_logits() {
    let state = ModelState::init(&small(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let ids = random_ids(&mut rng, 32);
        let j = rng.random_range(1..32);
        let mut other = ids.clone();
        other[j] = if ids[j] == 2 { 5 } else { 2 };
        let a = state.forward(&ids).unwrap();
        let b = state.forward(&other).unwrap();
        for r in 0..j {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(j), b.row(j));
    }
}

#[test]
fn forward_is_deterministic() {
    let state = ModelState::init(&small(), 6).unwrap();
    let ids = random_ids(&mut ChaCha8Rng::seed_from_u64(1), 30);
    assert_eq!(state.forward(&ids).unwrap(), state.forward(&ids).unwrap());
}

#[test]
fn context_overflow_and_bad_ids() {
    let state = ModelState::init(&small(), 6).unwrap();
    let long = vec![2u8; 65];
    assert!(matches!(state.forward(&long), Err(Error::ContextOverflow { len: 65, max: 64 })));
    assert!(matches!(state.forward(&[2, 9]), Err(Error::InvalidInput(_))));
}

#[test]
fn rope_base_only_matters_beyond_position_zero() {
    let state = ModelState::init(&small(), 9).unwrap();
    let other = state.with_context(64, 1.5e7).unwrap();
    assert_eq!(state.forward(&[3]).unwrap(), other.forward(&[3]).unwrap());
    let ids = [3, 4, 5, 2];
    assert_ne!(state.forward(&ids).unwrap(), other.forward(&ids).unwrap());
}

fn bound_layer(g: &mut Graph, layer: &LayerParams) -> [Var; 9] {
    layer.tensors().map(|t| g.constant(t.clone()))
}

#[test]
fn attention_block_with_zero_output_projection_is_identity() {
    let mut state = ModelState::init(&small(), 10).unwrap();
    state.layers[0].wo = Tensor::zeros(&[32, 32]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[12, 32], 1.0, &mut rng);
    let mut g = Graph::new();
    let layer = bound_layer(&mut g, &state.layers[0]);
    let xv = g.constant(x.clone());
    let angles = RopeAngles::for_length(8, 1e4, 12).unwrap();
    let layout = AttentionLayout {
        n_seq: 1,
        seq_len: 12,
        n_heads: 4,
    };
    let y = attention_block(&mut g, xv, &layer, &angles, layout, 1e-5).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn attention_block_rows_ignore_later_positions() {
    let state = ModelState::init(&small(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[10, 32], 1.0, &mut rng);
    let angles = RopeAngles::for_length(8, 1e4, 10).unwrap();
    let layout = AttentionLayout {
        n_seq: 1,
        seq_len: 10,
        n_heads: 4,
    };
    let run = |x: &Tensor| {
        let mut g = Graph::new();
        let layer = bound_layer(&mut g, &state.layers[0]);
        let xv = g.constant(x.clone());
        let y = attention_block(&mut g, xv, &layer, &angles, layout, 1e-5).unwrap();
        g.value(y).clone()
    };
    let base = run(&x);
    for j in 1..10 {
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[j * 32..(j + 1) * 32] {
            *v += 3.0;
        }
        let out = run(&x2);
        for i in 0..j {
            assert_eq!(base.row(i), out.row(i), "row {i} changed when perturbing {j}");
        }
    }
}

#[test]
fn attention_block_single_position() {
    // t = 1: the block output depends only on position 0 through v
    let state = ModelState::init(&small(), 12).unwrap();
    let x = Tensor::randn(&[1, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    let mut g = Graph::new();
    let layer = bound_layer(&mut g, &state.layers[0]);
    let xv = g.constant(x.clone());
    let angles = RopeAngles::for_length(8, 1e4, 1).unwrap();
    let layout = AttentionLayout {
        n_seq: 1,
        seq_len: 1,
        n_heads: 4,
    };
    let y = attention_block(&mut g, xv, &layer, &angles, layout, 1e-5).unwrap();
    // expected: x + rmsnorm(x) Wv Wo
    let n = g.rmsnorm(xv, layer[0], 1e-5).unwrap();
    let v = g.matmul(n, layer[3]).unwrap();
    let o = g.matmul(v, layer[4]).unwrap();
    let expect = g.add(xv, o).unwrap();
    assert!(g.value(y).max_abs_diff(g.value(expect)) < 1e-6);
}

#[test]
fn ffn_block_identities() {
    let mut state = ModelState::init(&small(), 13).unwrap();
    let x = Tensor::randn(&[5, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(5));

    let mut g = Graph::new();
    state.layers[0].ffn_norm_gain = Tensor::zeros(&[32]);
    let layer = bound_layer(&mut g, &state.layers[0]);
    let zero = g.constant(Tensor::zeros(&[5, 32]));
    let y = ffn_block(&mut g, zero, &layer, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let mut g = Graph::new();
    state.layers[0].ffn_norm_gain = Tensor::full(&[32], 1.0);
    state.layers[0].w2 = Tensor::zeros(&[48, 32]);
    let layer = bound_layer(&mut g, &state.layers[0]);
    let xv = g.constant(x.clone());
    let y = ffn_block(&mut g, xv, &layer, 1e-5).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn ffn_block_gradient_matches_reference() {
    let cfg = ModelConfig {
        hidden: 8,
        n_heads: 2,
        ffn_dim: 6,
        ..small()
    };
    let mut state = ModelState::init(&cfg, 14).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    state.layers[0].ffn_norm_gain = Tensor::randn(&[8], 1.0, &mut rng);
    let l = state.layers[0].clone();
    let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 8], 1.0, &mut rng);

    let f64v = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let (gain, w1, w2, w3, wd) = (f64v(&l.ffn_norm_gain), f64v(&l.w1), f64v(&l.w2), f64v(&l.w3), f64v(&w));
    let reference = |x: &[f64]| -> f64 {
        let mut total = 0.0;
        for r in 0..3 {
            let row = &x[r * 8..(r + 1) * 8];
            let inv = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / 8.0 + 1e-5).sqrt();
            let n: Vec<f64> = row.iter().zip(&gain).map(|(v, g)| v * inv * g).collect();
            let hidden: Vec<f64> = (0..6)
                .map(|j| {
                    let a: f64 = (0..8).map(|i| n[i] * w1[i * 6 + j]).sum();
                    let b: f64 = (0..8).map(|i| n[i] * w3[i * 6 + j]).sum();
                    a / (1.0 + (-a).exp()) * b
                })
                .collect();
            for c in 0..8 {
                let down: f64 = (0..6).map(|j| hidden[j] * w2[j * 8 + c]).sum();
                total += (row[c] + down) * wd[r * 8 + c];
            }
        }
        total
    };

    let mut g = Graph::new();
    let layer = bound_layer(&mut g, &l);
    let xv = g.param(x.clone());
    let y = ffn_block(&mut g, xv, &layer, 1e-5).unwrap();
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv).unwrap();
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    let analytic = grads.get(xv).unwrap();
    let base = f64v(&x);
    let h = 1e-3;
    for j in 0..base.len() {
        let mut plus = base.clone();
        plus[j] += h;
        let mut minus = base.clone();
        minus[j] -= h;
        let numeric = (reference(&plus) - reference(&minus)) / (2.0 * h);
        let a = analytic.data()[j] as f64;
        assert!((a - numeric).abs() <= 1e-4 * a.abs().max(numeric.abs()) + 1e-6, "{j}: {a} vs {numeric}");
    }
}

#[test]
fn rope_relative_position_property() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let head_dim = 16;
    let angles = RopeAngles::for_length(head_dim, 10_000.0, 600).unwrap();
    for _ in 0..100 {
        let (m, n, s) = (rng.random_range(0..200), rng.random_range(0..200), rng.random_range(0..300));
        let q = Tensor::randn(&[1, head_dim], 1.0, &mut rng);
        let k = Tensor::randn(&[1, head_dim], 1.0, &mut rng);
        let rot = |x: &Tensor, pos: usize| -> Vec<f32> {
            let mut rows = Tensor::zeros(&[600, head_dim]);
            rows.data_mut()[pos * head_dim..(pos + 1) * head_dim].copy_from_slice(x.data());
            angles.apply(&rows).unwrap().row(pos).to_vec()
        };
        let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f32>();
        let d0 = dot(&rot(&q, m), &rot(&k, n));
        let d1 = dot(&rot(&q, m + s), &rot(&k, n + s));
        assert!((d0 - d1).abs() < 1e-4, "m={m} n={n} s={s}: {d0} vs {d1}");
    }
}

#[test]
fn mismatched_shapes_name_the_tensor() {
    let state = ModelState::init(&small(), 16).unwrap();
    let tensors: Vec<Tensor> = state.params().into_iter().cloned().collect();
    let mut cfg = small();
    cfg.ffn_dim = 40;
    match ModelState::from_tensors(&cfg, tensors.clone()) {
        Err(Error::Shape(msg)) => assert!(msg.contains("layers.0.w1"), "{msg}"),
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
    assert_eq!(ModelState::from_tensors(&small(), tensors).unwrap(), state);
}

#[test]
fn hidden_layer_selection() {
    let state = ModelState::init(&small(), 17).unwrap();
    let ids = [2, 3, 4, 5, 2];
    assert_eq!(state.hidden_states(&ids, HiddenLayer::Embedding).unwrap().shape(), &[5, 32]);
    assert_eq!(state.hidden_states(&ids, HiddenLayer::Block(1)).unwrap().shape(), &[5, 32]);
    assert!(state.hidden_states(&ids, HiddenLayer::Block(2)).is_err());
}
