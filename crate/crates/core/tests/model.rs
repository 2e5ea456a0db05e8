use std::time::Instant;

use unest::gradcheck::{self, random_tensor};
use unest::model::checkpoint;
use unest::model::{
    count_params_flops, msa_hrchy_traced, AttentionParams, BoundParams, Dropout, LayerOptions,
    UNesT, UNesTConfig,
};
use unest::tensor::{Graph, Tensor};

fn ablated(cfg: UNesTConfig) -> UNesTConfig {
    UNesTConfig {
        block_aggregation: false,
        ..cfg
    }
}

#[test]
fn analytic_param_count_matches_registry() {
    for cfg in [
        UNesTConfig::micro(),
        UNesTConfig::reference_tiny(),
        UNesTConfig::reference_large(),
        ablated(UNesTConfig::reference_tiny()),
    ] {
        let model = UNesT::new(cfg.clone()).unwrap();
        let cost = count_params_flops(&cfg).unwrap();
        assert_eq!(cost.params, model.num_params() as u64, "{cfg:?}");
    }
}

#[test]
fn ablation_keeps_parameter_count() {
    let a = count_params_flops(&UNesTConfig::reference_tiny()).unwrap();
    let b = count_params_flops(&ablated(UNesTConfig::reference_tiny())).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn analytic_macs_match_executed_graph() {
    for cfg in [
        UNesTConfig::micro(),
        ablated(UNesTConfig::micro()),
        UNesTConfig::reference_tiny(),
    ] {
        let model = UNesT::new(cfg.clone()).unwrap();
        let w = model.init_weights::<f32>(1);
        let mut g = Graph::new();
        let p = w.bind(&mut g, false);
        let x = g.constant(
            random_tensor(
                &[
                    1,
                    1,
                    cfg.input_size[0],
                    cfg.input_size[1],
                    cfg.input_size[2],
                ],
                -1.0,
                1.0,
                3,
            )
            .cast(),
        );
        model.logits(&mut g, &p, x, &mut Dropout::eval()).unwrap();
        assert_eq!(count_params_flops(&cfg).unwrap().macs, g.macs(), "{cfg:?}");
    }
}

#[test]
fn forward_shapes_and_probabilities() {
    let cfg = UNesTConfig::reference_tiny();
    let model = UNesT::new(cfg.clone()).unwrap();
    let w = model.init_weights::<f32>(7);
    let x: Tensor<f32> = random_tensor(&[2, 1, 32, 32, 32], -1.0, 1.0, 11).cast();
    let t = Instant::now();
    let probs = model.predict(&w, &x).unwrap();
    eprintln!("tiny forward (batch 2): {:?}", t.elapsed());
    assert_eq!(probs.shape(), [2, 4, 32, 32, 32]);
    let vox = 32 * 32 * 32;
    for b in 0..2 {
        for v in 0..vox {
            let s: f64 = (0..4)
                .map(|k| probs.data()[(b * 4 + k) * vox + v] as f64)
                .sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn encoder_trace_has_reference_layout() {
    let cfg = UNesTConfig::reference_tiny();
    let model = UNesT::new(cfg).unwrap();
    let w = model.init_weights::<f32>(0);
    let mut g = Graph::new();
    let p = w.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(&[1, 1, 32, 32, 32]));
    let trace = model.encode(&mut g, &p, x, &mut Dropout::eval()).unwrap();
    let shapes: Vec<Vec<usize>> = trace
        .outputs
        .iter()
        .map(|b| g.shape(b.data).to_vec())
        .collect();
    assert_eq!(
        shapes,
        vec![vec![1, 64, 8, 32], vec![1, 8, 8, 64], vec![1, 1, 8, 128]]
    );
    let feats: Vec<Vec<usize>> = trace
        .features
        .iter()
        .map(|&f| g.shape(f).to_vec())
        .collect();
    assert_eq!(
        feats,
        vec![
            vec![1, 32, 8, 8, 8],
            vec![1, 64, 4, 4, 4],
            vec![1, 128, 2, 2, 2]
        ]
    );
}

#[test]
fn wrong_input_shape_is_rejected() {
    let model = UNesT::new(UNesTConfig::micro()).unwrap();
    let w = model.init_weights::<f64>(0);
    let err = model
        .predict(&w, &Tensor::zeros(&[1, 1, 8, 16, 16]))
        .unwrap_err();
    assert_eq!(err.category(), "dimension");
}

#[test]
fn same_seed_same_weights() {
    let model = UNesT::new(UNesTConfig::micro()).unwrap();
    assert_eq!(model.init_weights::<f32>(5), model.init_weights::<f32>(5));
    assert_ne!(model.init_weights::<f32>(5), model.init_weights::<f32>(6));
}

#[test]
fn checkpoint_round_trip() {
    let cfg = UNesTConfig::micro();
    let model = UNesT::new(cfg.clone()).unwrap();
    let w = model.init_weights::<f32>(9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &cfg, &w).unwrap();
    let (cfg2, w2) = checkpoint::load::<f32>(&path).unwrap();
    assert_eq!(cfg, cfg2);
    assert_eq!(w, w2);
    w2.check_against(model.param_specs()).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    for cut in [0, 7, 20, bytes.len() - 1] {
        let err = checkpoint::decode::<f32>(&bytes[..cut]).unwrap_err();
        assert_eq!(err.category(), "format");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::decode::<f32>(&bad).is_err());
}

/// Single-head attention written out longhand for two tokens.
#[test]
fn attention_matches_longhand_two_token_example() {
    let d = 2;
    let z = Tensor::new(&[1, 1, 2, d], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
    let qkv_w: Tensor<f64> = random_tensor(&[d, 3 * d], -1.0, 1.0, 1);
    let qkv_b: Tensor<f64> = random_tensor(&[3 * d], -0.5, 0.5, 2);
    let proj_w: Tensor<f64> = random_tensor(&[d, d], -1.0, 1.0, 3);
    let proj_b: Tensor<f64> = random_tensor(&[d], -0.5, 0.5, 4);

    let row = |t: usize| &z.data()[t * d..(t + 1) * d];
    let lin = |x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
        let cols = w.shape()[1];
        (0..cols)
            .map(|j| {
                b.data()[j]
                    + (0..x.len())
                        .map(|i| x[i] * w.data()[i * cols + j])
                        .sum::<f64>()
            })
            .collect()
    };
    let qkv: Vec<Vec<f64>> = (0..2).map(|t| lin(row(t), &qkv_w, &qkv_b)).collect();
    let (q, k, v) = (
        |t: usize| &qkv[t][0..d],
        |t: usize| &qkv[t][d..2 * d],
        |t: usize| &qkv[t][2 * d..],
    );
    let mut expected = Vec::new();
    for i in 0..2 {
        let s: Vec<f64> = (0..2)
            .map(|j| q(i).iter().zip(k(j)).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = s[0].max(s[1]);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let a: Vec<f64> = e.iter().map(|x| x / (e[0] + e[1])).collect();
        let ctx: Vec<f64> = (0..d).map(|c| a[0] * v(0)[c] + a[1] * v(1)[c]).collect();
        expected.extend(lin(&ctx, &proj_w, &proj_b));
    }

    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let p = AttentionParams {
        qkv_w: g.constant(qkv_w),
        qkv_b: g.constant(qkv_b),
        proj_w: g.constant(proj_w),
        proj_b: g.constant(proj_b),
    };
    let (out, probs) =
        msa_hrchy_traced(&mut g, zv, &p, LayerOptions::heads(1), &mut Dropout::eval()).unwrap();
    let got = g.value(out).data();
    for (a, b) in got.iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-10, "{got:?} vs {expected:?}");
    }
    for r in g.value(probs).data().chunks(2) {
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn blocks_do_not_attend_across_each_other() {
    let d = 4;
    let mut g = Graph::<f64>::new();
    let mk = |g: &mut Graph<f64>, shape: &[usize], seed| {
        g.constant(random_tensor(shape, -1.0, 1.0, seed))
    };
    let p = AttentionParams {
        qkv_w: mk(&mut g, &[d, 3 * d], 1),
        qkv_b: mk(&mut g, &[3 * d], 2),
        proj_w: mk(&mut g, &[d, d], 3),
        proj_b: mk(&mut g, &[d], 4),
    };
    let z: Tensor<f64> = random_tensor(&[1, 3, 5, d], -1.0, 1.0, 5);
    let mut z2 = z.clone();
    for v in &mut z2.data_mut()[2 * 5 * d..] {
        *v += 1.0;
    }
    let run = |g: &mut Graph<f64>, t: Tensor<f64>| {
        let x = g.constant(t);
        let (o, _) =
            msa_hrchy_traced(g, x, &p, LayerOptions::heads(2), &mut Dropout::eval()).unwrap();
        g.value(o).data().to_vec()
    };
    let a = run(&mut g, z);
    let b = run(&mut g, z2);
    assert_eq!(a[..2 * 5 * d], b[..2 * 5 * d]);
    assert_ne!(a[2 * 5 * d..], b[2 * 5 * d..]);
}

fn model_gradcheck(cfg: UNesTConfig) {
    let model = UNesT::new(cfg.clone()).unwrap();
    let w = model.init_weights::<f64>(2);
    // Nonzero norms and positional tables exercise more of the graph.
    let mut w = w;
    for (i, t) in w.tensors_mut().iter_mut().enumerate() {
        let noise: Tensor<f64> = random_tensor(t.shape(), -0.2, 0.2, 100 + i as u64);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let x: Tensor<f64> = random_tensor(&[1, 1, 16, 16, 16], -1.0, 1.0, 3);
    let mut inputs = w.tensors().to_vec();
    inputs.push(x);
    let n = inputs.len();
    let report = gradcheck::check(
        |g, vars| {
            let bound = BoundParams::from_vars(vars[..n - 1].to_vec());
            let out = model.forward(g, &bound, vars[n - 1], &mut Dropout::eval())?;
            gradcheck::weighted_sum(g, out, 17)
        },
        &inputs,
        1e-5,
        Some(6),
        4,
    )
    .unwrap();
    eprintln!("{cfg:?}: {report:?}");
    assert!(report.max_rel_err < 1e-3, "{report:?}");
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    model_gradcheck(UNesTConfig::micro());
}

#[test]
fn ablation_gradients_match_finite_differences() {
    model_gradcheck(ablated(UNesTConfig::micro()));
}
