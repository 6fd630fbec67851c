mod common;

use common::{rng, uniform};
use fdylka_core::checkpoint;
use fdylka_core::lka::LkaConfig;
use fdylka_core::model::{attention_pool, forward, stack_embeddings, stack_features, ModelConfig, ModelParams};
use fdylka_core::nn::{init, Mode, Session};
use fdylka_core::tensor::gradcheck::check_params;
use fdylka_core::tensor::{Graph, ParamStore, Tensor};
use fdylka_core::Error;
use proptest::prelude::*;

fn trace_of(model: &ModelParams, feat: &Tensor, emb: Option<&Tensor>) -> Vec<(String, Vec<usize>)> {
    let mut s = Session::new(&model.store, Mode::Eval, Graph::no_grad()).with_trace();
    let x = stack_features(&mut s.graph, &model.config, &[feat]).unwrap();
    let e = emb.map(|e| stack_embeddings(&mut s.graph, &model.config, &[e]).unwrap());
    forward(&mut s, &model.config, x, e).unwrap();
    s.take_trace()
}

fn shape_of<'a>(trace: &'a [(String, Vec<usize>)], label: &str) -> &'a [usize] {
    &trace.iter().find(|(l, _)| l == label).unwrap_or_else(|| panic!("no {label}")).1
}

#[test]
fn full_width_forward_reproduces_every_table_shape() {
    let model = ModelParams::build(ModelConfig::default(), 1).unwrap();
    let feat = uniform(&[1001, 128], -1.0, 1.0, &mut rng(2));
    let emb = uniform(&[250, 768], -1.0, 1.0, &mut rng(3));
    let trace = trace_of(&model, &feat, Some(&emb));
    let expected: [(&str, &[usize]); 13] = [
        ("input", &[1, 1, 1001, 128]),
        ("stem", &[1, 32, 500, 64]),
        ("block1", &[1, 64, 250, 32]),
        ("block2", &[1, 128, 250, 16]),
        ("block3", &[1, 256, 250, 8]),
        ("block4", &[1, 256, 250, 4]),
        ("block5", &[1, 256, 250, 2]),
        ("block6", &[1, 256, 250, 1]),
        ("squeeze", &[1, 250, 256]),
        ("concat", &[1, 250, 1024]),
        ("fusion", &[1, 250, 256]),
        ("rnn", &[1, 250, 512]),
        ("strong", &[1, 250, 10]),
    ];
    for (label, shape) in expected {
        assert_eq!(shape_of(&trace, label), shape, "{label}");
    }
    assert_eq!(shape_of(&trace, "weak"), &[1, 10]);
}

fn quarter() -> ModelConfig {
    ModelConfig {
        width_scale: 0.25,
        ..ModelConfig::default()
    }
}

#[test]
fn quarter_width_keeps_relative_shapes() {
    let model = ModelParams::build(quarter(), 4).unwrap();
    let feat = uniform(&[1001, 128], -1.0, 1.0, &mut rng(5));
    let emb = uniform(&[250, 768], -1.0, 1.0, &mut rng(6));
    let trace = trace_of(&model, &feat, Some(&emb));
    assert_eq!(shape_of(&trace, "stem"), &[1, 8, 500, 64]);
    assert_eq!(shape_of(&trace, "block1"), &[1, 16, 250, 32]);
    assert_eq!(shape_of(&trace, "block6"), &[1, 64, 250, 1]);
    assert_eq!(shape_of(&trace, "concat"), &[1, 250, 64 + 768]);
    assert_eq!(shape_of(&trace, "rnn"), &[1, 250, 128]);
    assert_eq!(shape_of(&trace, "strong"), &[1, 250, 10]);
}

#[test]
fn eval_predictions_are_probabilities_and_deterministic() {
    let model = ModelParams::build(quarter(), 7).unwrap();
    let feats: Vec<Tensor> = (0..2).map(|i| uniform(&[1001, 128], -3.0, 3.0, &mut rng(10 + i))).collect();
    let embs: Vec<Tensor> = (0..2).map(|i| uniform(&[250, 768], -1.0, 1.0, &mut rng(20 + i))).collect();
    let f: Vec<&Tensor> = feats.iter().collect();
    let e: Vec<&Tensor> = embs.iter().collect();
    let a = model.predict(&f, Some(&e)).unwrap();
    let b = model.predict(&f, Some(&e)).unwrap();
    assert_eq!(a, b);
    for p in &a {
        assert_eq!(p.frames(), 250);
        assert_eq!(p.classes(), 10);
        assert!(p.strong.iter().flatten().chain(&p.weak).all(|v| (0.0..=1.0).contains(v)));
        for c in 0..10 {
            let lo = p.strong.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
            let hi = p.strong.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
            assert!(p.weak[c] >= lo - 1e-12 && p.weak[c] <= hi + 1e-12);
        }
    }
}

#[test]
fn missing_embedding_and_bad_feature_shape_are_rejected() {
    let model = ModelParams::build(quarter(), 8).unwrap();
    let feat = Tensor::zeros(&[1001, 128]);
    assert!(matches!(model.predict(&[&feat], None), Err(Error::Input(_))));
    let short = Tensor::zeros(&[1001, 64]);
    let emb = Tensor::zeros(&[250, 768]);
    assert!(matches!(model.predict(&[&short], Some(&[&emb])), Err(Error::Dimension { .. })));
    let bad_emb = Tensor::zeros(&[250, 512]);
    assert!(matches!(model.predict(&[&feat], Some(&[&bad_emb])), Err(Error::Dimension { .. })));
}

#[test]
fn init_biases_zero_and_seed_deterministic() {
    let a = ModelParams::build(quarter(), 9).unwrap();
    let b = ModelParams::build(quarter(), 9).unwrap();
    let c = ModelParams::build(quarter(), 10).unwrap();
    let mut differs = false;
    for ((pa, pb), pc) in a.store.params().iter().zip(b.store.params()).zip(c.store.params()) {
        assert_eq!(pa.id, pb.id);
        assert_eq!(pa.value, pb.value);
        differs |= pa.value != pc.value;
        let is_bias = pa.id.ends_with(".bias") || pa.id.ends_with(".b_ih") || pa.id.ends_with(".b_hh");
        let is_bn = pa.id.ends_with("bn.bias") || pa.id.ends_with("norm.bias");
        if is_bias && !is_bn {
            assert!(pa.value.data().iter().all(|&v| v == 0.0), "{}", pa.id);
        }
    }
    assert!(differs);
    assert_eq!(a.store.num_scalars(), b.store.num_scalars());
}

#[test]
fn parameter_count_is_a_function_of_config() {
    let n1 = ModelParams::build(quarter(), 1).unwrap().store.num_scalars();
    let n2 = ModelParams::build(quarter(), 99).unwrap().store.num_scalars();
    assert_eq!(n1, n2);
    let no_fusion = ModelConfig {
        embedding_dim: None,
        ..quarter()
    };
    let n3 = ModelParams::build(no_fusion, 1).unwrap().store.num_scalars();
    // The fusion linear maps (64 + 768) → 64 with bias.
    assert_eq!(n1 - n3, (64 + 768) * 64 + 64);
}

#[test]
fn xavier_variance_of_512_to_256_linear() {
    let mut store = ParamStore::new();
    init::linear(&mut store, "probe", 256, 512, true, &mut rng(11)).unwrap();
    let w = &store.param("probe.weight").unwrap().value;
    assert!(w.numel() >= 100_000);
    let n = w.numel() as f64;
    let mean = w.data().iter().sum::<f64>() / n;
    let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let expected = 2.0 / (512.0 + 256.0);
    assert!((var - expected).abs() / expected < 0.1, "{var} vs {expected}");
}

#[test]
fn attention_pool_examples() {
    let strong: Vec<Vec<f64>> = (0..250).map(|t| vec![0.7, (t as f64) / 250.0]).collect();
    let mut r = rng(12);
    let logits: Vec<Vec<f64>> = (0..250).map(|_| vec![rand::Rng::gen_range(&mut r, -5.0..5.0); 2]).collect();
    let w = attention_pool(&strong, &logits).unwrap();
    assert!((w[0] - 0.7).abs() < 1e-12);

    let uniform_logits = vec![vec![0.3, 0.3]; 250];
    let w = attention_pool(&strong, &uniform_logits).unwrap();
    let mean = strong.iter().map(|r| r[1]).sum::<f64>() / 250.0;
    assert!((w[1] - mean).abs() < 1e-12);

    let mut spike = vec![vec![0.0, 0.0]; 250];
    spike[77][1] = 50.0;
    let w = attention_pool(&strong, &spike).unwrap();
    assert!((w[1] - strong[77][1]).abs() < 1e-6);
}

proptest! {
    #[test]
    fn attention_pool_is_a_convex_combination(
        strong in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..40),
        seed in 0u64..1000,
    ) {
        let mut r = rng(seed);
        let logits: Vec<Vec<f64>> = strong.iter().map(|_| (0..3).map(|_| rand::Rng::gen_range(&mut r, -20.0..20.0)).collect()).collect();
        let w = attention_pool(&strong, &logits).unwrap();
        for c in 0..3 {
            let lo = strong.iter().map(|s| s[c]).fold(f64::INFINITY, f64::min);
            let hi = strong.iter().map(|s| s[c]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(w[c] >= lo - 1e-12 && w[c] <= hi + 1e-12);
        }
    }
}

fn miniature() -> ModelConfig {
    ModelConfig {
        class_count: 2,
        channels: vec![2, 2, 2],
        pooling: vec![(2, 2), (1, 1), (1, 2)],
        basis_kernels: 2,
        rnn_hidden: 2,
        rnn_layers: 2,
        embedding_dim: Some(3),
        dropout: 0.5,
        width_scale: 1.0,
        n_frames: 8,
        n_mels: 4,
        lka: LkaConfig::default(),
        rnn_relu: false,
    }
}

fn mini_loss(s: &mut Session, cfg: &ModelConfig, feat: &Tensor, emb: &Tensor) -> fdylka_core::Result<fdylka_core::tensor::Var> {
    let x = stack_features(&mut s.graph, cfg, &[feat])?;
    let e = stack_embeddings(&mut s.graph, cfg, &[emb])?;
    let out = forward(s, cfg, x, Some(e))?;
    let t = cfg.output_frames();
    let strong_target = Tensor::from_fn(&[1, t, 2], |i| (i % 3 == 0) as u8 as f64);
    let ls = s.graph.bce_mean(out.strong, &strong_target)?;
    let lw = s.graph.bce_mean(out.weak, &Tensor::new(vec![1, 2], vec![1.0, 0.0])?)?;
    let la = s.graph.sum(out.attn_logits);
    let la = s.graph.scale(la, 0.01);
    let l = s.graph.add(ls, lw)?;
    s.graph.add(l, la)
}

#[test]
fn miniature_model_gradients_match_finite_differences() {
    let cfg = miniature();
    let model = ModelParams::build(cfg.clone(), 13).unwrap();
    let feat = uniform(&[8, 4], -2.0, 2.0, &mut rng(14));
    let emb = uniform(&[cfg.output_frames(), 3], -2.0, 2.0, &mut rng(15));
    for mode in [Mode::Train, Mode::Eval] {
        let rep = check_params(&model.store, 1e-5, |g, st| {
            let mut s = Session::new(st, mode, std::mem::take(g)).with_rng(rng(16));
            let l = mini_loss(&mut s, &cfg, &feat, &emb)?;
            *g = s.into_parts().0;
            Ok(l)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-5, "{mode:?}: {rep:?}");
    }
}

#[test]
fn gradient_reaches_every_leaf() {
    let cfg = ModelConfig {
        dropout: 0.0,
        ..quarter()
    };
    let mut model = ModelParams::build(cfg.clone(), 17).unwrap();
    let feats: Vec<Tensor> = (0..2).map(|i| uniform(&[1001, 128], -2.0, 2.0, &mut rng(30 + i))).collect();
    let embs: Vec<Tensor> = (0..2).map(|i| uniform(&[250, 768], -1.0, 1.0, &mut rng(40 + i))).collect();
    let f: Vec<&Tensor> = feats.iter().collect();
    let e: Vec<&Tensor> = embs.iter().collect();
    let graph = {
        let mut s = Session::new(&model.store, Mode::Train, Graph::new());
        let x = stack_features(&mut s.graph, &cfg, &f).unwrap();
        let ev = stack_embeddings(&mut s.graph, &cfg, &e).unwrap();
        let out = forward(&mut s, &cfg, x, Some(ev)).unwrap();
        let target = Tensor::from_fn(&[2, 250, 10], |i| ((i / 7) % 2) as f64);
        let l1 = s.graph.bce_mean(out.strong, &target).unwrap();
        let l2 = s.graph.bce_mean(out.weak, &Tensor::from_fn(&[2, 10], |i| (i % 2) as f64)).unwrap();
        let l = s.graph.add(l1, l2).unwrap();
        let (g, _) = s.into_parts();
        (g, l)
    };
    graph.0.backward_into(graph.1, &mut model.store).unwrap();
    for p in model.store.params() {
        let g = p.grad.as_ref().unwrap_or_else(|| panic!("no grad for {}", p.id));
        assert!(g.data().iter().any(|&v| v != 0.0), "all-zero grad for {}", p.id);
    }
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let mut model = ModelParams::build(miniature(), 18).unwrap();
    for (_, b) in model.store.buffers_mut() {
        b.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64 + 1.0 / 3.0);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stage1_epoch3_student.flkc");
    checkpoint::save(&path, &model).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.config, model.config);
    assert!(back.store.same_manifest(&model.store));
    for (a, b) in back.store.params().iter().zip(model.store.params()) {
        assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(back.store.buffers(), model.store.buffers());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    assert!(matches!(checkpoint::from_bytes(&bytes), Err(Error::Format { .. })));
    let bytes = checkpoint::to_bytes(&model).unwrap();
    assert!(matches!(
        checkpoint::from_bytes(&bytes[..bytes.len() - 8]),
        Err(Error::Format { .. })
    ));
}
