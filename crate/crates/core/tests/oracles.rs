//! Library results against scalar re-implementations that share no code
//! with the matrix engine.

mod common;

use common::*;
use mmdrive::cma::{absorb_question, abstract_scene, cma_forward, AbstractTokens, CmaParams};
use mmdrive::numerics::{
    cross_attention, cross_entropy, layer_norm, matmul, multi_head_cross_attention, softmax_rows, LinearMap, Matrix,
    MultiHeadParams, LN_EPS,
};
use mmdrive::pipeline::{Model, RawSample, RunConfig};
use mmdrive::tmm::{
    modulated_fusion, pool_question, predict_weights, project_modalities, ModalityBundle, TmmDims, TmmParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Rows = Vec<Vec<f64>>;

fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::random_normal(rows, cols, 0.0, 1.0, rng)
}

fn lin(x: &Rows, map: &LinearMap) -> Rows {
    let bias = map.bias.as_ref().map(|b| b.as_slice().to_vec());
    scalar_linear(x, &rows(&map.weight), bias.as_deref())
}

fn col_mean(x: &Rows) -> Vec<f64> {
    (0..x[0].len()).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / x.len() as f64).collect()
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn mha(q: &Rows, kv: &Rows, p: &MultiHeadParams) -> Rows {
    let hd = p.q_proj[0].output_dim();
    let mut concat: Rows = vec![Vec::new(); q.len()];
    for h in 0..p.heads {
        let out = scalar_attend(&lin(q, &p.q_proj[h]), &lin(kv, &p.k_proj[h]), &lin(kv, &p.v_proj[h]), hd);
        for (c, o) in concat.iter_mut().zip(out) {
            c.extend(o);
        }
    }
    lin(&concat, &p.out_proj)
}

/// Full gate, attend, mix, normalize, residual pipeline on projected streams.
fn tmm_oracle(image: &Rows, streams: [&Rows; 3], question: &Rows, p: &TmmParams) -> (Vec<f64>, Rows) {
    let mut pooled = vec![col_mean(question)];
    if let Some(qp) = &p.question_proj {
        pooled = lin(&pooled, qp);
    }
    let w = scalar_softmax(&lin(&pooled, &p.weight_predictor)[0]);
    let d = image[0].len();
    let mut mixed = vec![vec![0.0; d]; image.len()];
    for (m, s) in streams.iter().enumerate() {
        let e = scalar_attend(image, s, s, d);
        for (row, er) in mixed.iter_mut().zip(&e) {
            for (acc, v) in row.iter_mut().zip(er) {
                *acc += w[m] * v;
            }
        }
    }
    (w, add(image, &scalar_layer_norm(&mixed, p.ln_eps)))
}

fn cma_oracle(tokens: &Rows, question: &Rows, fused: &Rows, p: &CmaParams) -> Rows {
    let q_a = scalar_layer_norm(&add(tokens, &mha(tokens, question, &p.stage1)), p.ln_eps);
    scalar_attend(&q_a, fused, fused, q_a[0].len())
}

#[test]
fn matmul_matches_scalar_loop() {
    let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
    let b = Matrix::from_rows(&[[5.0], [6.0]]);
    let mut want = [[0.0]; 2];
    for i in 0..2 {
        for k in 0..2 {
            want[i][0] += a.row(i)[k] * b.row(k)[0];
        }
    }
    assert_eq!(want, [[17.0], [39.0]]);
    assert_eq!(matmul(&a, &b).unwrap(), Matrix::from_rows(&want));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (n, k, m) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
        let (a, b) = (normal(n, k, &mut rng), normal(k, m, &mut rng));
        let got = matmul(&a, &b).unwrap();
        for i in 0..n {
            for j in 0..m {
                let s: f64 = (0..k).map(|t| a.row(i)[t] * b.row(t)[j]).sum();
                assert!((got.row(i)[j] - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn layer_norm_small_row() {
    let got = layer_norm(&Matrix::from_rows(&[[0.0, 2.0]]), 1e-5);
    // mean 1, biased variance 1
    let s = (1.0f64 + 1e-5).sqrt();
    assert!((got.row(0)[0] + 1.0 / s).abs() < 1e-15);
    assert!((got.row(0)[1] - 1.0 / s).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = normal(7, 16, &mut rng);
    assert!(max_abs_diff(&rows(&layer_norm(&x, LN_EPS)), &scalar_layer_norm(&rows(&x), LN_EPS)) < 1e-12);
}

#[test]
fn softmax_and_cross_entropy_match_scalar() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = normal(4, 6, &mut rng).scale(3.0);
    let want: Rows = rows(&x).iter().map(|r| scalar_softmax(r)).collect();
    assert!(max_abs_diff(&rows(&softmax_rows(&x)), &want) < 1e-15);
    for _ in 0..50 {
        let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-4.0..4.0)).collect();
        let t = rng.random_range(0..5);
        let naive = -(logits[t].exp() / logits.iter().map(|v| v.exp()).sum::<f64>()).ln();
        assert!((cross_entropy(&logits, t).unwrap() - naive).abs() < 1e-12);
    }
}

#[test]
fn cross_attention_small_case() {
    let q = Matrix::from_rows(&[[1.0, 0.0]]);
    let kv = Matrix::identity(2);
    let e = (1.0 / 2.0f64.sqrt()).exp();
    let want = [e / (e + 1.0), 1.0 / (e + 1.0)];
    let got = cross_attention(&q, &kv, 2).unwrap();
    assert!((got.row(0)[0] - want[0]).abs() < 1e-15 && (got.row(0)[1] - want[1]).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (q, kv) = (normal(3, 5, &mut rng), normal(7, 5, &mut rng));
    let (qr, kr) = (rows(&q), rows(&kv));
    assert!(max_abs_diff(&rows(&cross_attention(&q, &kv, 5).unwrap()), &scalar_attend(&qr, &kr, &kr, 5)) < 1e-12);
}

#[test]
fn linear_matches_scalar() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let map = LinearMap::random(5, 3, true, &mut rng);
    let x = normal(4, 5, &mut rng);
    assert!(max_abs_diff(&rows(&map.forward(&x).unwrap()), &lin(&rows(&x), &map)) < 1e-12);
}

#[test]
fn multi_head_attention_two_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (d, dkv) in [(4, 4), (6, 5), (8, 3)] {
        let p = MultiHeadParams::random(d, dkv, 2, &mut rng).unwrap();
        let (q, kv) = (normal(3, d, &mut rng), normal(5, dkv, &mut rng));
        let got = multi_head_cross_attention(&q, &kv, &p).unwrap();
        assert!(max_abs_diff(&rows(&got), &mha(&rows(&q), &rows(&kv), &p)) < 1e-12);
    }
}

#[test]
fn gate_matches_hand_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dims = TmmDims {
        lidar: 3,
        occ: 3,
        desc: 3,
        question: 5,
        latent: 4,
    };
    let p = TmmParams::random(dims, true, &mut rng);
    let question = normal(4, 5, &mut rng);
    let pooled = pool_question(&question).unwrap();
    assert!(max_abs_diff(&rows(&pooled), &[col_mean(&rows(&question))].to_vec()) < 1e-15);
    let w = predict_weights(&pooled, &p).unwrap();
    let want = scalar_softmax(&lin(&rows(&pooled), &p.weight_predictor)[0]);
    for m in 0..3 {
        assert!((w.0[m] - want[m]).abs() < 1e-15);
    }
}

#[test]
fn fusion_two_token_bundle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dims = TmmDims {
        lidar: 3,
        occ: 5,
        desc: 2,
        question: 3,
        latent: 4,
    };
    let p = TmmParams::random(dims, true, &mut rng);
    let raw = [normal(2, 3, &mut rng), normal(2, 5, &mut rng), normal(2, 2, &mut rng)];
    let [lidar, occ, desc] = project_modalities(&raw[0], &raw[1], &raw[2], &p).unwrap();
    let bundle = ModalityBundle {
        image: normal(2, 4, &mut rng),
        lidar,
        occ,
        desc,
        question: normal(2, 3, &mut rng),
    };
    let got = modulated_fusion(&bundle, &p).unwrap();

    let e: Vec<Rows> = [(&raw[0], &p.proj_lidar), (&raw[1], &p.proj_occ), (&raw[2], &p.proj_desc)]
        .iter()
        .map(|(x, m)| lin(&rows(x), m))
        .collect();
    let (w, fused) = tmm_oracle(&rows(&bundle.image), [&e[0], &e[1], &e[2]], &rows(&bundle.question), &p);
    for m in 0..3 {
        assert!((got.weights.0[m] - w[m]).abs() < 1e-14);
    }
    assert!(max_abs_diff(&rows(&got.fused), &fused) < 1e-12);
}

#[test]
fn fusion_with_question_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dims = TmmDims {
        lidar: 4,
        occ: 4,
        desc: 4,
        question: 6,
        latent: 4,
    };
    let mut p = TmmParams::random(dims, false, &mut rng);
    p.question_proj = Some(LinearMap::random(6, 4, true, &mut rng));
    p.weight_predictor = LinearMap::random(4, 3, true, &mut rng);
    let bundle = ModalityBundle {
        image: normal(3, 4, &mut rng),
        lidar: normal(2, 4, &mut rng),
        occ: normal(4, 4, &mut rng),
        desc: normal(1, 4, &mut rng),
        question: normal(5, 6, &mut rng),
    };
    let got = modulated_fusion(&bundle, &p).unwrap();
    let (l, o, d) = (rows(&bundle.lidar), rows(&bundle.occ), rows(&bundle.desc));
    let (_, fused) = tmm_oracle(&rows(&bundle.image), [&l, &o, &d], &rows(&bundle.question), &p);
    assert!(max_abs_diff(&rows(&got.fused), &fused) < 1e-12);
}

#[test]
fn absorb_question_small_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let tokens = AbstractTokens::new(normal(2, 4, &mut rng)).unwrap();
    let p = CmaParams::random(4, 4, 2, &mut rng).unwrap();
    let question = normal(3, 4, &mut rng);
    let got = absorb_question(&tokens, &question, &p).unwrap();
    let (t, q) = (rows(&tokens.0), rows(&question));
    let want = scalar_layer_norm(&add(&t, &mha(&t, &q, &p.stage1)), p.ln_eps);
    assert!(max_abs_diff(&rows(&got), &want) < 1e-12);
}

#[test]
fn absorb_single_key_identity_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tokens = AbstractTokens::new(normal(3, 4, &mut rng)).unwrap();
    let p = CmaParams::identity(4, 1).unwrap();
    let v = normal(1, 4, &mut rng);
    let got = absorb_question(&tokens, &v, &p).unwrap();
    let pre: Rows = rows(&tokens.0).iter().map(|a| a.iter().zip(v.row(0)).map(|(x, y)| x + y).collect()).collect();
    assert!(max_abs_diff(&rows(&got), &scalar_layer_norm(&pre, p.ln_eps)) < 1e-12);
}

#[test]
fn abstract_scene_small_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (q_a, fused) = (normal(2, 4, &mut rng), normal(5, 4, &mut rng));
    let got = abstract_scene(&q_a, &fused).unwrap();
    let f = rows(&fused);
    assert_eq!(got.shape(), (2, 4));
    assert!(max_abs_diff(&rows(&got), &scalar_attend(&rows(&q_a), &f, &f, 4)) < 1e-12);
}

#[test]
fn cma_end_to_end_sixteen_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let tokens = AbstractTokens::random(16, 8, &mut rng).unwrap();
    let p = CmaParams::random(8, 6, 2, &mut rng).unwrap();
    let (question, fused) = (normal(4, 6, &mut rng), normal(9, 8, &mut rng));
    let got = cma_forward(&tokens, &question, &fused, &p).unwrap();
    assert_eq!(got.shape(), (16, 8));
    let want = cma_oracle(&rows(&tokens.0), &rows(&question), &rows(&fused), &p);
    assert!(max_abs_diff(&rows(&got), &want) < 1e-12);
}

#[test]
fn toy_model_prediction_matches_scalar_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut config = RunConfig::default();
    config.dims.latent = 8;
    config.dims.question = 3;
    config.dims.lidar = 5;
    config.dims.occ = 4;
    config.dims.desc = 6;
    config.dims.classes = 4;
    config.cma.num_tokens = 8;
    let model = Model::new(&config, &mut rng).unwrap();
    let d = &config.dims;
    let sample = RawSample {
        image: normal(d.image_tokens, d.latent, &mut rng),
        lidar: normal(d.lidar_tokens, d.lidar, &mut rng),
        occ: normal(d.occ_tokens, d.occ, &mut rng),
        desc: normal(d.desc_tokens, d.desc, &mut rng),
        question: normal(d.question_tokens, d.question, &mut rng),
    };
    let e = [
        lin(&rows(&sample.lidar), &model.tmm.proj_lidar),
        lin(&rows(&sample.occ), &model.tmm.proj_occ),
        lin(&rows(&sample.desc), &model.tmm.proj_desc),
    ];
    let q = rows(&sample.question);
    let (w, fused) = tmm_oracle(&rows(&sample.image), [&e[0], &e[1], &e[2]], &q, &model.tmm);

    for use_cma in [true, false] {
        let pred = model.predict(&sample, &Model::control(&config), use_cma).unwrap();
        let pooled = if use_cma {
            col_mean(&cma_oracle(&rows(&model.tokens.0), &q, &fused, &model.cma))
        } else {
            col_mean(&fused)
        };
        let logits = lin(&vec![pooled], &model.decoder).remove(0);
        for m in 0..3 {
            assert!((pred.weights[m] - w[m]).abs() < 1e-14);
        }
        for (a, b) in pred.logits.iter().zip(&logits) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(pred.abstraction.is_some(), use_cma);
    }
}
