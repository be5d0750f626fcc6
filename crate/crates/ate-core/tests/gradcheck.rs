//! Central finite-difference verification of every layer type the engine
//! records, plus the tape's replay/determinism/zero-grad contracts.

use ate_core::graph::{forward, grad_check, Graph};
use ate_core::nn::{Linear, ResidualBlock, TransformerBlock};
use ate_core::params::{Adam, Init, ParamStore};
use ate_core::rng::rng_from_seed;
use ate_core::tape::Tape;
use ate_core::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

const FD_EPS: f64 = 1e-4;
const FD_TOL: f64 = 1e-4;

fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = rng.sample::<f64, _>(StandardNormal);
    }
    t
}

fn check(graph: &impl Graph, store: &mut ParamStore, input: &Tensor) -> f64 {
    grad_check(graph, store, input, FD_EPS).expect("grad_check runs")
}

#[test]
fn identity_graph_has_empty_effect_tape() {
    let store = ParamStore::new(0);
    let g = |_t: &mut Tape, _s: &ParamStore, x| Ok(x);
    let x = randn(3, 4, 1);
    let run = forward(&store, &g, &x).unwrap();
    assert_eq!(run.output_value(), &x);
    assert_eq!(run.tape.len(), 1); // just the input leaf, no recorded effects
}

#[test]
fn zero_weight_dense_layer_outputs_bias() {
    let mut store = ParamStore::new(0);
    store.register("w", 4, 2, Init::Zeros).unwrap();
    store.register("b", 1, 2, Init::Zeros).unwrap();
    store.set("b", Tensor::from_vec(1, 2, vec![0.5, -1.5]).unwrap()).unwrap();
    let g = |t: &mut Tape, s: &ParamStore, x| {
        let w = t.param(s, "w")?;
        let b = t.param(s, "b")?;
        t.linear(x, w, b)
    };
    let run = forward(&store, &g, &randn(3, 4, 2)).unwrap();
    for r in 0..3 {
        assert_eq!(run.output_value().row(r), &[0.5, -1.5]);
    }
}

#[test]
fn two_layer_mlp_replays_deterministically() {
    let build = || {
        let mut store = ParamStore::new(99);
        Linear::new("l1", 5, 8).register(&mut store).unwrap();
        Linear::new("l2", 8, 3).register(&mut store).unwrap();
        store
    };
    let g = |t: &mut Tape, s: &ParamStore, x| {
        let h = Linear::new("l1", 5, 8).apply(t, s, x)?;
        let h = t.tanh(h);
        Linear::new("l2", 8, 3).apply(t, s, h)
    };
    let x = randn(2, 5, 3);
    let a = forward(&build(), &g, &x).unwrap();
    let b = forward(&build(), &g, &x).unwrap();
    assert_eq!(a.output_value(), b.output_value());
}

#[test]
fn backward_identity_passes_gradient_through() {
    let store = ParamStore::new(0);
    let g = |_t: &mut Tape, _s: &ParamStore, x| Ok(x);
    let x = randn(2, 3, 4);
    let run = forward(&store, &g, &x).unwrap();
    let input = run.input;
    let og = randn(2, 3, 5);
    let grads = run.backward(&og).unwrap();
    assert_eq!(grads.wrt_input(input).unwrap(), &og);
}

#[test]
fn backward_sum_of_squares_matches_analytic() {
    let store = ParamStore::new(0);
    let g = |t: &mut Tape, _s: &ParamStore, x| {
        let sq = t.square(x);
        let s = t.row_sum(sq);
        Ok(s)
    };
    let x = Tensor::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
    let run = forward(&store, &g, &x).unwrap();
    let input = run.input;
    let grads = run.backward(&Tensor::from_vec(1, 1, vec![1.0]).unwrap()).unwrap();
    assert_eq!(grads.wrt_input(input).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn tape_cannot_be_consumed_twice() {
    let mut tape = Tape::new();
    let x = tape.input(randn(2, 2, 7));
    let y = tape.square(x);
    let og = Tensor::filled(2, 2, 1.0);
    tape.backward(y, &og).unwrap();
    let err = tape.backward(y, &og).unwrap_err();
    assert!(err.to_string().contains("usage"));
}

#[test]
fn unused_parameters_get_exactly_zero_gradient() {
    let mut store = ParamStore::new(5);
    Linear::new("used", 3, 3).register(&mut store).unwrap();
    Linear::new("unused", 3, 3).register(&mut store).unwrap();
    let g = |t: &mut Tape, s: &ParamStore, x| Linear::new("used", 3, 3).apply(t, s, x);
    let run = forward(&store, &g, &randn(2, 3, 8)).unwrap();
    let grads = run.backward(&Tensor::filled(2, 3, 1.0)).unwrap();
    let gz = grads.wrt_param(&store, "unused.w").unwrap();
    assert!(gz.data().iter().all(|&v| v == 0.0));
    let gu = grads.wrt_param(&store, "used.w").unwrap();
    assert!(gu.data().iter().any(|&v| v != 0.0));
}

#[test]
fn training_is_deterministic_given_seed() {
    let run_training = || {
        let mut store = ParamStore::new(123);
        let layer = Linear::new("l", 4, 2);
        layer.register(&mut store).unwrap();
        let mut opt = Adam::new(1e-2, 1e-4);
        for step in 0..25 {
            let x = randn(6, 4, 1000 + step);
            let target = randn(6, 2, 2000 + step);
            let g = |t: &mut Tape, s: &ParamStore, x| {
                let y = layer.apply(t, s, x)?;
                let tv = t.constant(target.clone());
                let d = t.sub(y, tv)?;
                let sq = t.square(d);
                Ok(t.mean_all(sq))
            };
            let run = forward(&store, &g, &x).unwrap();
            let grads = run.backward(&Tensor::filled(1, 1, 1.0)).unwrap();
            opt.step(&mut store, grads.params()).unwrap();
        }
        store.checksum()
    };
    assert_eq!(run_training(), run_training());
}

// ---- finite-difference sweep over every layer type ----------------------
//
// 100+ random instances total; every single one must clear the 1e-4 bar.

#[test]
fn linear_map_gradcheck_is_near_exact() {
    for i in 0..8 {
        let mut store = ParamStore::new(200 + i);
        let l = Linear::new("l", 4, 3);
        l.register(&mut store).unwrap();
        let g = |t: &mut Tape, s: &ParamStore, x| l.apply(t, s, x);
        let err = check(&g, &mut store, &randn(3, 4, 300 + i));
        assert!(err < 1e-8, "instance {i}: rel err {err}");
    }
}

#[test]
fn elementwise_ops_gradcheck() {
    for i in 0..12 {
        let mut store = ParamStore::new(400 + i);
        store.register("a", 3, 4, Init::Normal(1.0)).unwrap();
        let g = |t: &mut Tape, s: &ParamStore, x| {
            let a = t.param(s, "a")?;
            let m = t.mul(x, a)?;
            let e = t.exp(m);
            let sq = t.square(e);
            let th = t.tanh(sq);
            let ge = t.gelu(th);
            let sc = t.scale(ge, 0.7);
            let su = t.add_scaled(sc, a, -0.3)?;
            Ok(t.row_sum(su))
        };
        let err = check(&g, &mut store, &randn(3, 4, 500 + i));
        assert!(err < FD_TOL, "instance {i}: rel err {err}");
    }
}

#[test]
fn relu_gradcheck_away_from_kink() {
    for i in 0..8 {
        let mut store = ParamStore::new(600 + i);
        store.register("a", 2, 5, Init::Normal(1.0)).unwrap();
        // shift inputs off zero so the finite difference never straddles the kink
        let mut x = randn(2, 5, 700 + i);
        for v in x.data_mut() {
            *v += if *v >= 0.0 { 0.5 } else { -0.5 };
        }
        let g = |t: &mut Tape, s: &ParamStore, x| {
            let a = t.param(s, "a")?;
            let m = t.add(x, a)?;
            let r = t.relu(m);
            Ok(t.mean_all(r))
        };
        let err = check(&g, &mut store, &x);
        assert!(err < FD_TOL, "instance {i}: rel err {err}");
    }
}

#[test]
fn broadcast_ops_gradcheck() {
    for i in 0..10 {
        let mut store = ParamStore::new(800 + i);
        store.register("row", 1, 4, Init::Normal(1.0)).unwrap();
        store.register("col", 3, 1, Init::Normal(1.0)).unwrap();
        let g = |t: &mut Tape, s: &ParamStore, x| {
            let row = t.param(s, "row")?;
            let col = t.param(s, "col")?;
            let a = t.add_row_vec(x, row)?;
            let b = t.mul_row_vec(a, row)?;
            let c = t.mul_col_scalar(b, col)?;
            Ok(t.row_sum(c))
        };
        let err = check(&g, &mut store, &randn(3, 4, 900 + i));
        assert!(err < FD_TOL, "instance {i}: rel err {err}");
    }
}

#[test]
fn layer_norm_block_gradcheck() {
    for i in 0..10 {
        let mut store = ParamStore::new(1000 + i);
        let ln = ate_core::nn::LayerNorm::new("ln", 6);
        ln.register(&mut store).unwrap();
        let g = |t: &mut Tape, s: &ParamStore, x| {
            let y = ln.apply(t, s, x)?;
            Ok(t.square(y))
        };
        // non-degenerate input: rows have spread, so the normalizer is smooth
        let err = check(&g, &mut store, &randn(4, 6, 1100 + i));
        assert!(err < FD_TOL, "instance {i}: rel err {err}");
    }
}

#[test]
fn softmax_attention_block_gradcheck() {
    for i in 0..10 {
        let mut store = ParamStore::new(1200 + i);
        let attn = ate_core::nn::Attention::new("a", 8, 2);
        attn.register(&mut store).unwrap();
        let batch = 2;
        let seq = 3;
        let g = |t: &mut Tape, s: &ParamStore, x| {
            attn.apply(t, s, x, x, batch, seq, seq)
        };
        let err = check(&g, &mut store, &randn(batch * seq, 8, 1300 + i));
        assert!(err < FD_TOL, "instance {i}: rel err {err}");
    }
}

#[test]
fn cross_attention_gradcheck() {
    for i in 0..8 {
        let mut store = ParamStore::new(1400 + i);
        let attn = ate_core::nn::Attention::new("x", 8, 2);
        attn.register(&mut store).unwrap();
        store.register("kv_proj.w", 8, 8, Init::Glorot).unwrap();
        store.register("kv_proj.b", 1, 8, Init::Zeros).unwrap();
        let batch = 2;
        let (q_seq, kv_seq) = (3, 1);
        let kv_src = randn(batch * kv_seq, 8, 1450 + i);
        let g = |t: &mut Tape, s: &ParamStore, x| {
            let w = t.param(s, "kv_proj.w")?;
            let b = t.param(s, "kv_proj.b")?;
            let kvc = t.constant(kv_src.clone());
            let kv = t.linear(kvc, w, b)?;
            attn.apply(t, s, x, kv, batch, q_seq, kv_seq)
        };
        let err = check(&g, &mut store, &randn(batch * q_seq, 8, 1500 + i));
        assert!(err < FD_TOL, "instance {i}: rel err {err}");
    }
}

#[test]
fn transformer_encoder_block_gradcheck() {
    for i in 0..6 {
        let mut store = ParamStore::new(1600 + i);
        let block = TransformerBlock::new("b", 8, 2, false);
        block.register(&mut store).unwrap();
        let batch = 2;
        let seq = 3;
        let g = |t: &mut Tape, s: &ParamStore, x| block.apply(t, s, x, None, batch, seq);
        let err = check(&g, &mut store, &randn(batch * seq, 8, 1700 + i));
        assert!(err < FD_TOL, "instance {i}: rel err {err}");
    }
}

#[test]
fn transformer_cross_block_gradcheck() {
    for i in 0..6 {
        let mut store = ParamStore::new(1800 + i);
        let block = TransformerBlock::new("b", 8, 2, true);
        block.register(&mut store).unwrap();
        let batch = 2;
        let seq = 3;
        let kv_src = randn(batch, 8, 1850 + i);
        let g = |t: &mut Tape, s: &ParamStore, x| {
            let kv = t.input(kv_src.clone());
            block.apply(t, s, x, Some((kv, 1)), batch, seq)
        };
        let err = check(&g, &mut store, &randn(batch * seq, 8, 1900 + i));
        assert!(err < FD_TOL, "instance {i}: rel err {err}");
    }
}

#[test]
fn residual_mlp_block_gradcheck() {
    for i in 0..8 {
        let mut store = ParamStore::new(2000 + i);
        let block = ResidualBlock::new("r", 6);
        block.register(&mut store).unwrap();
        let g = |t: &mut Tape, s: &ParamStore, x| block.apply(t, s, x);
        let err = check(&g, &mut store, &randn(4, 6, 2100 + i));
        assert!(err < FD_TOL, "instance {i}: rel err {err}");
    }
}

#[test]
fn three_layer_net_gradcheck() {
    for i in 0..8 {
        let mut store = ParamStore::new(2200 + i);
        let l1 = Linear::new("l1", 5, 7);
        let l2 = Linear::new("l2", 7, 7);
        let l3 = Linear::new("l3", 7, 2);
        l1.register(&mut store).unwrap();
        l2.register(&mut store).unwrap();
        l3.register(&mut store).unwrap();
        let g = |t: &mut Tape, s: &ParamStore, x| {
            let h = l1.apply(t, s, x)?;
            let h = t.gelu(h);
            let h = l2.apply(t, s, h)?;
            let h = t.tanh(h);
            l3.apply(t, s, h)
        };
        let err = check(&g, &mut store, &randn(3, 5, 2300 + i));
        assert!(err < FD_TOL, "instance {i}: rel err {err}");
    }
}

#[test]
fn structural_ops_gradcheck() {
    for i in 0..8 {
        let mut store = ParamStore::new(2400 + i);
        store.register("tok_a", 1, 4, Init::Normal(0.5)).unwrap();
        store.register("tok_b", 1, 4, Init::Normal(0.5)).unwrap();
        store.register("pos", 5, 4, Init::Normal(0.5)).unwrap();
        store.register("emb", 3, 4, Init::Normal(0.5)).unwrap();
        let batch = 2;
        let seq = 3;
        let g = move |t: &mut Tape, s: &ParamStore, x| {
            let ta = t.param(s, "tok_a")?;
            let tb = t.param(s, "tok_b")?;
            let pos = t.param(s, "pos")?;
            let emb = t.param(s, "emb")?;
            let seqd = t.prepend_tokens(x, ta, tb, batch, seq)?;
            let tiled = t.tile_rows(pos, batch);
            let summed = t.add(seqd, tiled)?;
            let first = t.gather_rows(summed, batch, seq + 2, 0)?;
            let second = t.gather_rows(summed, batch, seq + 2, 1)?;
            let looked = t.embedding(emb, &[0, 2])?;
            let cat = t.concat_cols(&[first, second, looked])?;
            let sq = t.square(cat);
            Ok(t.mean_all(sq))
        };
        let err = check(&g, &mut store, &randn(batch * seq, 4, 2500 + i));
        assert!(err < FD_TOL, "instance {i}: rel err {err}");
    }
}

#[test]
fn mmd_gradcheck() {
    for i in 0..8 {
        let mut store = ParamStore::new(2600 + i);
        store.register("shift", 1, 3, Init::Normal(0.5)).unwrap();
        let ys = randn(5, 3, 2650 + i);
        let g = |t: &mut Tape, s: &ParamStore, x| {
            let sh = t.param(s, "shift")?;
            let xs = t.add_row_vec(x, sh)?;
            let y = t.constant(ys.clone());
            t.mmd_biased(xs, y, &[0.5, 1.0, 2.0])
        };
        let err = check(&g, &mut store, &randn(4, 3, 2700 + i));
        assert!(err < FD_TOL, "instance {i}: rel err {err}");
    }
}

#[test]
fn frozen_params_block_gradient_flow_but_not_forward() {
    let mut store = ParamStore::new(42);
    let l = Linear::new("l", 3, 3);
    l.register(&mut store).unwrap();

    let mut tape = Tape::new();
    tape.set_frozen(true);
    let x = tape.input(randn(2, 3, 1));
    let y = l.apply(&mut tape, &store, x).unwrap();
    let sq = tape.square(y);
    let loss = tape.mean_all(sq);
    let grads = tape.backward(loss, &Tensor::filled(1, 1, 1.0)).unwrap();
    // input still gets a gradient, frozen weights never appear
    assert!(grads.wrt_input(x).is_some());
    assert!(grads.param("l.w").is_none());
    assert!(grads.param("l.b").is_none());
}
