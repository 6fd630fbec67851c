mod common;

use common::{conv2d_loops, probe_weights, rng, uniform};
use fdylka_core::nn::{init, Mode, Session};
use fdylka_core::tensor::gradcheck::{check_inputs, check_params};
use fdylka_core::tensor::{Conv2dConfig, Graph, ParamStore, Tensor, Var};
use fdylka_core::Error;
use rand::Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn probe(g: &mut Graph, y: Var, seed: u64) -> fdylka_core::Result<Var> {
    let r = g.constant(probe_weights(g.shape(y), seed));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

#[test]
fn conv_all_ones_same_padding_counts_overlap() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, w, Some(b), Conv2dConfig::same((3, 3), (1, 1))).unwrap();
    let y = g.value(y);
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert_eq!(y.get(&[0, 0, 1, 1]), 9.0);
    for (t, f) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
        assert_eq!(y.get(&[0, 0, t, f]), 4.0);
    }
    assert_eq!(y.get(&[0, 0, 0, 1]), 6.0);
}

#[test]
fn conv_matches_loop_oracle_on_spec_case() {
    let mut r = rng(1);
    let x = uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut r);
    let w = uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut r);
    let b = uniform(&[4], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(xv, wv, Some(bv), Conv2dConfig::same((3, 3), (1, 1))).unwrap();
    let oracle = conv2d_loops(&x, &w, Some(&b), (1, 1), (1, 1), (1, 1), 1);
    assert!(g.value(y).max_abs_diff(&oracle) <= 1e-12);
}

#[test]
fn conv_matches_loop_oracle_on_fifty_random_shapes() {
    let mut r = rng(2);
    for case in 0..50 {
        let groups = [1, 1, 2, 3][case % 4];
        let cin = groups * r.gen_range(1..=3);
        let cout = groups * r.gen_range(1..=3);
        let kh = r.gen_range(1..=3);
        let kw = r.gen_range(1..=3);
        let stride = (r.gen_range(1..=2), r.gen_range(1..=2));
        let dilation = (r.gen_range(1..=2), r.gen_range(1..=2));
        let padding = (r.gen_range(0..=2), r.gen_range(0..=2));
        let h = dilation.0 * (kh - 1) + 1 + r.gen_range(0..5);
        let wd = dilation.1 * (kw - 1) + 1 + r.gen_range(0..5);
        let nb = r.gen_range(1..=2);
        let x = uniform(&[nb, cin, h, wd], -1.0, 1.0, &mut r);
        let w = uniform(&[cout, cin / groups, kh, kw], -1.0, 1.0, &mut r);
        let b = uniform(&[cout], -1.0, 1.0, &mut r);
        let cfg = Conv2dConfig {
            stride,
            padding,
            dilation,
            groups,
        };
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), cfg).unwrap();
        let oracle = conv2d_loops(&x, &w, Some(&b), stride, padding, dilation, groups);
        assert!(
            g.value(y).max_abs_diff(&oracle) <= 1e-12,
            "case {case}: {cfg:?}"
        );
    }
}

#[test]
fn depthwise_dilated_impulse_response_taps() {
    let mut g = Graph::new();
    let mut x = Tensor::zeros(&[1, 1, 23, 23]);
    x.set(&[0, 0, 11, 11], 1.0);
    let xv = g.constant(x);
    let w = g.constant(Tensor::full(&[1, 1, 7, 7], 1.0));
    let y = g.conv2d(xv, w, None, Conv2dConfig::same((7, 7), (3, 3)).groups(1)).unwrap();
    let y = g.value(y);
    let taps: Vec<isize> = vec![-9, -6, -3, 0, 3, 6, 9];
    for t in 0..23 {
        for f in 0..23 {
            let dt = t as isize - 11;
            let df = f as isize - 11;
            let expect = if taps.contains(&dt) && taps.contains(&df) { 1.0 } else { 0.0 };
            assert_eq!(y.get(&[0, 0, t, f]), expect, "({t},{f})");
        }
    }
    // Same through the depthwise path with several channels.
    let mut g = Graph::new();
    let mut x = Tensor::zeros(&[1, 3, 23, 23]);
    for c in 0..3 {
        x.set(&[0, c, 11, 11], 1.0 + c as f64);
    }
    let xv = g.constant(x);
    let w = g.constant(Tensor::full(&[3, 1, 7, 7], 1.0));
    let y = g.conv2d(xv, w, None, Conv2dConfig::same((7, 7), (3, 3)).groups(3)).unwrap();
    let y = g.value(y);
    for c in 0..3 {
        for t in 0..23 {
            for f in 0..23 {
                let on = taps.contains(&(t as isize - 11)) && taps.contains(&(f as isize - 11));
                assert_eq!(y.get(&[0, c, t, f]), if on { 1.0 + c as f64 } else { 0.0 });
            }
        }
    }
}

#[test]
fn conv_shape_errors_name_the_axis() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[3, 5, 3, 3]));
    match g.conv2d(x, w, None, Conv2dConfig::default()) {
        Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "channel"),
        other => panic!("expected dimension error, got {other:?}"),
    }
    let w = g.constant(Tensor::zeros(&[3, 2, 5, 1]));
    match g.conv2d(x, w, None, Conv2dConfig::default()) {
        Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "frame"),
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn linear_loss_gradient_equals_input() {
    let mut r = rng(3);
    let x = uniform(&[3, 4], -2.0, 2.0, &mut r);
    let mut g = Graph::new();
    let w = g.leaf(uniform(&[3, 4], -2.0, 2.0, &mut r));
    let xv = g.constant(x.clone());
    let p = g.mul(w, xv).unwrap();
    let loss = g.sum(p);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(&g, w).unwrap(), x);
}

#[test]
fn independent_leaf_gets_zero_gradient() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::full(&[2, 2], 1.5));
    let unused = g.leaf(Tensor::full(&[3], 2.0));
    let loss = g.sum(a);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(&g, unused).unwrap(), Tensor::zeros(&[3]));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::full(&[2, 2], 1.0));
    let y = g.relu(a);
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
}

#[test]
fn repeated_backward_accumulates_into_store() {
    let mut store = ParamStore::new();
    store.add_param("w", Tensor::full(&[2], 3.0)).unwrap();
    let mut g = Graph::new();
    let w = g.param(&store, "w").unwrap();
    let loss = g.sum(w);
    g.backward_into(loss, &mut store).unwrap();
    g.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.param("w").unwrap().grad.as_ref().unwrap().data(), &[2.0, 2.0]);
}

fn assert_fd<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> fdylka_core::Result<Var>,
{
    let rep = check_inputs(inputs, STEP, f).unwrap();
    assert!(rep.max_rel_error < TOL, "{name}: {rep:?}");
}

#[test]
fn finite_differences_elementwise_and_reductions() {
    let mut r = rng(4);
    let a = uniform(&[2, 3, 4], -2.0, 2.0, &mut r);
    let b = uniform(&[2, 3, 4], -2.0, 2.0, &mut r);
    let ab = [a.clone(), b.clone()];
    assert_fd("add", &ab, |g, v| {
        let y = g.add(v[0], v[1])?;
        probe(g, y, 1)
    });
    assert_fd("sub", &ab, |g, v| {
        let y = g.sub(v[0], v[1])?;
        probe(g, y, 2)
    });
    assert_fd("mul", &ab, |g, v| {
        let y = g.mul(v[0], v[1])?;
        probe(g, y, 3)
    });
    let one = [a.clone()];
    assert_fd("scale", &one, |g, v| {
        let y = g.scale(v[0], -1.7);
        probe(g, y, 4)
    });
    assert_fd("relu", &one, |g, v| {
        let y = g.relu(v[0]);
        probe(g, y, 5)
    });
    assert_fd("gelu", &one, |g, v| {
        let y = g.gelu(v[0]);
        probe(g, y, 6)
    });
    assert_fd("sigmoid", &one, |g, v| {
        let y = g.sigmoid(v[0]);
        probe(g, y, 7)
    });
    assert_fd("tanh", &one, |g, v| {
        let y = g.tanh(v[0]);
        probe(g, y, 8)
    });
    for axis in 0..3 {
        assert_fd("softmax", &one, |g, v| {
            let y = g.softmax(v[0], axis)?;
            probe(g, y, 9)
        });
        assert_fd("mean_axis", &one, |g, v| {
            let y = g.mean_axis(v[0], axis)?;
            probe(g, y, 10)
        });
        assert_fd("sum_axis", &one, |g, v| {
            let y = g.sum_axis(v[0], axis)?;
            probe(g, y, 11)
        });
    }
    assert_fd("mean", &one, |g, v| Ok(g.mean(v[0])));
    assert_fd("permute", &one, |g, v| {
        let y = g.permute(v[0], &[2, 0, 1])?;
        probe(g, y, 12)
    });
    assert_fd("reshape", &one, |g, v| {
        let y = g.reshape(v[0], &[6, 4])?;
        probe(g, y, 13)
    });
    assert_fd("narrow", &one, |g, v| {
        let y = g.narrow(v[0], 1, 1, 2)?;
        probe(g, y, 14)
    });
    let c = uniform(&[2, 5, 4], -2.0, 2.0, &mut r);
    assert_fd("concat", &[a.clone(), c], |g, v| {
        let y = g.concat(&[v[0], v[1]], 1)?;
        probe(g, y, 15)
    });
}

#[test]
fn finite_differences_layers() {
    let mut r = rng(5);
    let x = uniform(&[2, 2, 4, 5], -2.0, 2.0, &mut r);
    let w = uniform(&[3, 2, 3, 3], -2.0, 2.0, &mut r);
    let b = uniform(&[3], -2.0, 2.0, &mut r);
    assert_fd("conv2d", &[x.clone(), w.clone(), b.clone()], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), Conv2dConfig::same((3, 3), (1, 1)))?;
        probe(g, y, 20)
    });
    assert_fd("conv2d strided dilated", &[x.clone(), w.clone()], |g, v| {
        let cfg = Conv2dConfig {
            stride: (2, 1),
            padding: (2, 1),
            dilation: (2, 1),
            groups: 1,
        };
        let y = g.conv2d(v[0], v[1], None, cfg)?;
        probe(g, y, 21)
    });
    let dw = uniform(&[2, 1, 3, 3], -2.0, 2.0, &mut r);
    assert_fd("depthwise dilated", &[x.clone(), dw], |g, v| {
        let y = g.conv2d(v[0], v[1], None, Conv2dConfig::same((3, 3), (2, 2)).groups(2))?;
        probe(g, y, 22)
    });
    let pw = uniform(&[3, 2, 1, 1], -2.0, 2.0, &mut r);
    assert_fd("pointwise", &[x.clone(), pw], |g, v| {
        let y = g.conv2d(v[0], v[1], None, Conv2dConfig::default())?;
        probe(g, y, 23)
    });
    assert_fd("avg_pool2d", std::slice::from_ref(&x), |g, v| {
        let y = g.avg_pool2d(v[0], (2, 2))?;
        probe(g, y, 24)
    });
    let gamma = uniform(&[2], 0.5, 2.0, &mut r);
    let beta = uniform(&[2], -1.0, 1.0, &mut r);
    assert_fd("batch_norm train", &[x.clone(), gamma.clone(), beta.clone()], |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], None, 1e-5)?;
        probe(g, y, 25)
    });
    let (rm, rv) = ([0.3, -0.2], [1.5, 0.7]);
    assert_fd("batch_norm eval", &[x.clone(), gamma, beta], |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], Some((&rm, &rv)), 1e-5)?;
        probe(g, y, 26)
    });
    let lx = uniform(&[2, 3, 4], -2.0, 2.0, &mut r);
    let lw = uniform(&[5, 4], -2.0, 2.0, &mut r);
    let lb = uniform(&[5], -2.0, 2.0, &mut r);
    assert_fd("linear", &[lx, lw, lb], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        probe(g, y, 27)
    });
    let basis = uniform(&[2, 6, 3, 4], -2.0, 2.0, &mut r);
    let att = uniform(&[2, 2, 4], -2.0, 2.0, &mut r);
    assert_fd("fdy_mix", &[basis, att], |g, v| {
        let y = g.fdy_mix(v[0], v[1], 2)?;
        probe(g, y, 28)
    });
    let p = uniform(&[3, 4], 0.05, 0.95, &mut r);
    let t = Tensor::from_fn(&[3, 4], |i| (i % 3) as f64 / 2.0);
    assert_fd("bce", &[p], move |g, v| g.bce_mean(v[0], &t));
}

#[test]
fn finite_differences_dropout_gate_and_gru() {
    let mut r = rng(6);
    let mut store = ParamStore::new();
    init::glu_gate(&mut store, "gate", 2, &mut r).unwrap();
    init::gru_bidirectional(&mut store, "rnn", 3, 2, &mut r).unwrap();
    let x = uniform(&[1, 2, 3, 4], -2.0, 2.0, &mut r);
    let seq = uniform(&[2, 4, 3], -2.0, 2.0, &mut r);
    let rep = check_params(&store, STEP, |g, s| {
        let graph = std::mem::take(g);
        let mut sess = Session::new(s, Mode::Train, graph);
        let xv = sess.graph.constant(x.clone());
        let y = sess.glu_gate("gate", xv)?;
        let y = sess.dropout(y, 0.3)?;
        let sv = sess.graph.constant(seq.clone());
        let h = sess.gru_bidirectional("rnn", sv, 2)?;
        let a = probe(&mut sess.graph, y, 30)?;
        let b = probe(&mut sess.graph, h, 31)?;
        let out = sess.graph.add(a, b)?;
        *g = sess.into_parts().0;
        Ok(out)
    })
    .unwrap();
    assert!(rep.max_rel_error < TOL, "{rep:?}");
}

#[test]
fn glu_gate_examples() {
    let mut r = rng(7);
    let mut store = ParamStore::new();
    store.add_param("gate.weight", Tensor::zeros(&[3, 3, 1, 1])).unwrap();
    store.add_param("gate.bias", Tensor::zeros(&[3])).unwrap();
    let x = uniform(&[1, 3, 4, 5], -2.0, 2.0, &mut r);
    let mut s = Session::new(&store, Mode::Eval, Graph::new());
    let xv = s.graph.constant(x.clone());
    let y = s.glu_gate("gate", xv).unwrap();
    assert!(s.graph.value(y).max_abs_diff(&x.map(|v| 0.5 * v)) == 0.0);

    store.param_mut("gate.bias").unwrap().value = Tensor::full(&[3], 1e3);
    let mut s = Session::new(&store, Mode::Eval, Graph::new());
    let xv = s.graph.constant(x.clone());
    let y = s.glu_gate("gate", xv).unwrap();
    assert!(s.graph.value(y).max_abs_diff(&x) < 1e-6);
}

#[test]
fn glu_gate_preserves_stem_shape() {
    let mut r = rng(8);
    let mut store = ParamStore::new();
    init::glu_gate(&mut store, "gate", 32, &mut r).unwrap();
    let mut s = Session::new(&store, Mode::Eval, Graph::no_grad());
    let xv = s.graph.constant(Tensor::full(&[1, 32, 500, 64], 0.1));
    let y = s.glu_gate("gate", xv).unwrap();
    assert_eq!(s.graph.shape(y), &[1, 32, 500, 64]);
}

#[test]
fn avg_pool_examples() {
    let mut g = Graph::no_grad();
    let x = g.constant(Tensor::full(&[1, 1, 1001, 128], 2.5));
    let y = g.avg_pool2d(x, (2, 2)).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 500, 64]);
    assert!(g.value(y).data().iter().all(|&v| v == 2.5));
    let x = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
    let y = g.avg_pool2d(x, (2, 2)).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);
    let x = g.constant(Tensor::zeros(&[1, 1, 2, 1]));
    assert!(matches!(
        g.avg_pool2d(x, (1, 2)),
        Err(Error::Dimension { axis, .. }) if axis == "frequency"
    ));
}

#[test]
fn softmax_rows_are_positive_and_normalized() {
    let mut r = rng(9);
    let mut g = Graph::no_grad();
    let x = g.constant(uniform(&[3, 7, 5], -30.0, 30.0, &mut r));
    for axis in 0..3 {
        let y = g.softmax(x, axis).unwrap();
        let y = g.value(y).clone();
        assert!(y.data().iter().all(|&v| v > 0.0));
        let mut gg = Graph::no_grad();
        let yv = gg.constant(y);
        let s = gg.sum_axis(yv, axis).unwrap();
        assert!(gg.value(s).data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }
}

#[test]
fn batch_norm_train_standardizes_each_channel() {
    let mut r = rng(10);
    let mut g = Graph::no_grad();
    let x = g.constant(uniform(&[4, 3, 5, 6], -40.0, 40.0, &mut r));
    let one = g.constant(Tensor::full(&[3], 1.0));
    let zero = g.constant(Tensor::zeros(&[3]));
    let (y, stats) = g.batch_norm(x, one, zero, None, 1e-5).unwrap();
    assert!(stats.is_some());
    let y = g.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| (0..30).map(move |i| (b, i)))
            .map(|(b, i)| y.data()[(b * 3 + c) * 30 + i])
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-6, "mean {m}");
        assert!((v - 1.0).abs() < 1e-6, "var {v}");
    }
}

#[test]
fn dropout_identity_cases() {
    let store = ParamStore::new();
    let x = Tensor::full(&[2, 3], 1.25);
    let mut s = Session::new(&store, Mode::Eval, Graph::new());
    let xv = s.graph.constant(x.clone());
    let y = s.dropout(xv, 0.5).unwrap();
    assert_eq!(s.graph.value(y), &x);
    let mut s = Session::new(&store, Mode::Train, Graph::new());
    let xv = s.graph.constant(x.clone());
    let y = s.dropout(xv, 0.0).unwrap();
    assert_eq!(s.graph.value(y), &x);
    let y = s.dropout(xv, 0.5).unwrap();
    assert!(s.graph.value(y).data().iter().all(|&v| v == 0.0 || v == 2.5));
}

fn gru_store(d: usize, h: usize) -> ParamStore {
    let mut store = ParamStore::new();
    init::gru_bidirectional(&mut store, "rnn", d, h, &mut rng(0)).unwrap();
    store
}

#[test]
fn gru_output_shape_matches_rnn_block() {
    let store = gru_store(256, 256);
    let mut s = Session::new(&store, Mode::Eval, Graph::no_grad());
    let x = s.graph.constant(Tensor::full(&[1, 250, 256], 0.01));
    let y = s.gru_bidirectional("rnn", x, 256).unwrap();
    assert_eq!(s.graph.shape(y), &[1, 250, 512]);
}

#[test]
fn gru_with_zero_parameters_stays_at_zero() {
    let mut store = gru_store(3, 4);
    for p in store.params_mut() {
        p.value.data_mut().fill(0.0);
    }
    let mut s = Session::new(&store, Mode::Eval, Graph::no_grad());
    let x = s.graph.constant(uniform(&[2, 6, 3], -1.0, 1.0, &mut rng(11)));
    let y = s.gru_bidirectional("rnn", x, 4).unwrap();
    assert!(s.graph.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gru_matches_hand_unrolled_two_step_cell() {
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    // Forward direction weights for H = 1, D = 1 in (r, z, n) order.
    let (w_ir, w_iz, w_in) = (0.5, -0.3, 0.8);
    let (w_hr, w_hz, w_hn) = (0.2, 0.4, -0.6);
    let (b_ir, b_iz, b_in) = (0.1, -0.2, 0.05);
    let (b_hr, b_hz, b_hn) = (-0.1, 0.3, 0.2);
    let xs = [0.7, -1.2];
    let cell = |x: f64, h: f64| {
        let r = sig(w_ir * x + b_ir + w_hr * h + b_hr);
        let z = sig(w_iz * x + b_iz + w_hz * h + b_hz);
        let n = (w_in * x + b_in + r * (w_hn * h + b_hn)).tanh();
        (1.0 - z) * n + z * h
    };
    let h1 = cell(xs[0], 0.0);
    let h2 = cell(xs[1], h1);
    // Backward direction reads the sequence in reverse.
    let g1 = cell(xs[1], 0.0);
    let g0 = cell(xs[0], g1);

    let mut store = ParamStore::new();
    for dir in ["fwd", "bwd"] {
        let p = format!("rnn.{dir}");
        store.add_param(format!("{p}.w_ih"), Tensor::new(vec![3, 1], vec![w_ir, w_iz, w_in]).unwrap()).unwrap();
        store.add_param(format!("{p}.w_hh"), Tensor::new(vec![3, 1], vec![w_hr, w_hz, w_hn]).unwrap()).unwrap();
        store.add_param(format!("{p}.b_ih"), Tensor::new(vec![3], vec![b_ir, b_iz, b_in]).unwrap()).unwrap();
        store.add_param(format!("{p}.b_hh"), Tensor::new(vec![3], vec![b_hr, b_hz, b_hn]).unwrap()).unwrap();
    }
    let mut s = Session::new(&store, Mode::Eval, Graph::no_grad());
    let x = s.graph.constant(Tensor::new(vec![1, 2, 1], xs.to_vec()).unwrap());
    let y = s.gru_bidirectional("rnn", x, 1).unwrap();
    let y = s.graph.value(y);
    let expect = [h1, g0, h2, g1];
    for (a, b) in y.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
}
