use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffusion::standard_normal;

fn small_config() -> AcdConfig {
    AcdConfig {
        d_model: 16,
        heads: 4,
        gloss_layers: 2,
        ffn_mult: 2,
        head_hidden: 16,
        residual: true,
        feed_forward: false,
    }
}

fn model_with(config: AcdConfig) -> AcdModel {
    let vocab = (0..5).map(|i| format!("w{i}")).collect();
    AcdModel::new(config, SkeletonTopology::toy8(), vocab, 1000, 3).unwrap()
}

fn model() -> AcdModel {
    model_with(small_config())
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < tol, "{x} vs {y}");
    }
}

#[test]
fn gloss_encoder_contract() {
    let m = model();
    let one = m.encode_gloss(&GlossSequence::new(vec![2])).unwrap();
    assert_eq!(one.matrix.shape(), &[1, 16]);

    let ab = m.encode_gloss(&GlossSequence::new(vec![1, 3])).unwrap();
    let ba = m.encode_gloss(&GlossSequence::new(vec![3, 1])).unwrap();
    assert_ne!(ab, ba);
    assert_eq!(ab, m.encode_gloss(&GlossSequence::new(vec![1, 3])).unwrap());

    assert!(m.encode_gloss(&GlossSequence::new(vec![5])).is_err());
    assert!(m.encode_gloss(&GlossSequence::new(vec![])).is_err());
    assert!(matches!(m.tokenize(&["w1", "xyz"]), Err(Error::UnknownToken(t)) if t == "xyz"));
}

fn identity_mha(g: &mut Graph, d: usize) -> MhaVars {
    MhaVars {
        wq: g.constant(Tensor::identity(d)),
        wk: g.constant(Tensor::identity(d)),
        wv: g.constant(Tensor::identity(d)),
        wo: g.constant(Tensor::identity(d)),
    }
}

#[test]
fn mha_single_head_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let q = standard_normal(&[3, 4], &mut rng);
    let k = standard_normal(&[5, 4], &mut rng);
    let v = standard_normal(&[5, 4], &mut rng);
    let (qv, kv, vv) = (
        g.constant(q.clone()),
        g.constant(k.clone()),
        g.constant(v.clone()),
    );
    let w = identity_mha(&mut g, 4);
    let out = mha(&mut g, qv, kv, vv, &w, 1).unwrap();
    assert_eq!(g.value(out.output).shape(), &[3, 4]);
    for i in 0..3 {
        let mut scores: Vec<f64> = (0..5)
            .map(|j| {
                q.row(i)
                    .iter()
                    .zip(k.row(j))
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / 2.0
            })
            .collect();
        let max = scores.iter().copied().fold(f64::MIN, f64::max);
        let z: f64 = scores
            .iter_mut()
            .map(|s| {
                *s = (*s - max).exp();
                *s
            })
            .sum();
        let expect: Vec<f64> = (0..4)
            .map(|c| (0..5).map(|j| scores[j] / z * v.row(j)[c]).sum())
            .collect();
        assert_close(g.value(out.output).row(i), &expect, 1e-12);
    }
}

#[test]
fn mha_single_key_is_linear_in_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let q = g.constant(standard_normal(&[3, 8], &mut rng));
    let k = g.constant(standard_normal(&[1, 6], &mut rng));
    let v_t = standard_normal(&[1, 6], &mut rng);
    let v = g.constant(v_t.clone());
    let wv_t = standard_normal(&[8, 6], &mut rng);
    let wo_t = standard_normal(&[8, 8], &mut rng);
    let w = MhaVars {
        wq: g.constant(standard_normal(&[8, 8], &mut rng)),
        wk: g.constant(standard_normal(&[8, 6], &mut rng)),
        wv: g.constant(wv_t.clone()),
        wo: g.constant(wo_t.clone()),
    };
    let out = mha(&mut g, q, k, v, &w, 4).unwrap();
    for a in &out.weights {
        assert!(g.value(*a).data().iter().all(|&p| p == 1.0));
    }
    let mut vw = [0.0; 8];
    for (o, slot) in vw.iter_mut().enumerate() {
        *slot = (0..6).map(|i| v_t.data()[i] * wv_t.row(o)[i]).sum();
    }
    let expect: Vec<f64> = (0..8)
        .map(|o| (0..8).map(|i| vw[i] * wo_t.row(o)[i]).sum())
        .collect();
    for r in 0..3 {
        assert_close(g.value(out.output).row(r), &expect, 1e-12);
    }

    let bad = MhaVars {
        wq: g.constant(Tensor::zeros(&[6, 8])),
        ..w
    };
    assert!(mha(&mut g, q, k, v, &bad, 4).is_err());
}

#[test]
fn self_embed_structure() {
    let m = model();
    let d = 16;
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let zero = g.constant(Tensor::zeros(&[3, 56]));
    let out = m.self_embed(&mut g, &b, zero, 250).unwrap();
    let pe = positional_encoding(1..=3, d);
    let mut tg = Graph::new();
    let tb = m.bind(&mut tg, false);
    let ts = tg.constant(positional_encoding(250..=250, d));
    let te = linear(&mut tg, &tb, m.layers.time_embed, ts).unwrap();
    let te = tg.value(te).data().to_vec();
    for s in 0..3 {
        let expect: Vec<f64> = pe.row(s).iter().zip(&te).map(|(a, b)| a + b).collect();
        assert_close(g.value(out).row(s), &expect, 1e-12);
    }

    // equal frames differ only by PE
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let frame = standard_normal(&[1, 56], &mut rng);
    let mut two = frame.data().to_vec();
    two.extend_from_slice(frame.data());
    let x = g.constant(Tensor::matrix(2, 56, two).unwrap());
    let y = m.self_embed(&mut g, &b, x, 10).unwrap();
    let diff: Vec<f64> = g
        .value(y)
        .row(0)
        .iter()
        .zip(g.value(y).row(1))
        .map(|(a, b)| a - b)
        .collect();
    let pe_diff: Vec<f64> = pe
        .row(0)
        .iter()
        .zip(pe.row(1))
        .map(|(a, b)| a - b)
        .collect();
    assert_close(&diff, &pe_diff, 1e-12);

    // t shifts every row by the same vector
    let y2 = m.self_embed(&mut g, &b, x, 900).unwrap();
    let shift0: Vec<f64> = g
        .value(y2)
        .row(0)
        .iter()
        .zip(g.value(y).row(0))
        .map(|(a, b)| a - b)
        .collect();
    let shift1: Vec<f64> = g
        .value(y2)
        .row(1)
        .iter()
        .zip(g.value(y).row(1))
        .map(|(a, b)| a - b)
        .collect();
    assert_close(&shift0, &shift1, 1e-12);
    assert!(shift0.iter().any(|v| v.abs() > 1e-6));

    let wrong = g.constant(Tensor::zeros(&[2, 55]));
    assert!(m.self_embed(&mut g, &b, wrong, 1).is_err());
}

#[test]
fn condition_integration_cases() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let pose = g.constant(standard_normal(&[4, 16], &mut rng));
    let gloss = g.constant(standard_normal(&[1, 16], &mut rng));
    let a = m.condition_integrate(&mut g, &b, pose, gloss).unwrap();
    for w in &a.weights {
        assert!(g.value(*w).data().iter().all(|&p| p == 1.0));
    }
    let again = m.condition_integrate(&mut g, &b, pose, gloss).unwrap();
    assert_eq!(g.value(a.output), g.value(again.output));

    let no_res = model_with(AcdConfig {
        residual: false,
        ..small_config()
    });
    let mut g = Graph::new();
    let b = no_res.bind(&mut g, false);
    let pose = g.constant(standard_normal(&[4, 16], &mut rng));
    let zero_gloss = g.constant(Tensor::zeros(&[3, 16]));
    let out = no_res
        .condition_integrate(&mut g, &b, pose, zero_gloss)
        .unwrap();
    assert!(g.value(out.output).data().iter().all(|&v| v == 0.0));

    let narrow = g.constant(Tensor::zeros(&[3, 8]));
    assert!(no_res
        .condition_integrate(&mut g, &b, pose, narrow)
        .is_err());
}

#[test]
fn attribute_separation_cases() {
    let m = model();
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let zero = g.constant(Tensor::zeros(&[3, 16]));
    let (dc, da) = m.attribute_separate(&mut g, &b, zero).unwrap();
    assert_eq!(g.value(dc).shape(), &[3, 24]);
    assert_eq!(g.value(da).shape(), &[3, 32]);
    assert!(g
        .value(dc)
        .data()
        .iter()
        .chain(g.value(da).data())
        .all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = g.constant(standard_normal(&[3, 16], &mut rng));
    let (dc, da) = m.attribute_separate(&mut g, &b, d).unwrap();
    let full = linear(&mut g, &b, m.layers.separate, d).unwrap();
    for s in 0..3 {
        for j in 0..8 {
            let row = &g.value(full).row(s)[7 * j..7 * j + 7];
            assert_eq!(&g.value(dc).row(s)[3 * j..3 * j + 3], &row[..3]);
            assert_eq!(&g.value(da).row(s)[4 * j..4 * j + 4], &row[3..]);
        }
    }
}

#[test]
fn attribute_control_cases() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let b = m.bind(&mut g, false);
    let dc = g.constant(standard_normal(&[5, 16], &mut rng));
    let da = g.constant(standard_normal(&[1, 32], &mut rng));
    let out = m.attribute_control(&mut g, &b, dc, da).unwrap();
    assert_eq!(g.value(out.output).cols(), 16);
    // one key: every frame receives the same vector, linear in d_a
    let contrib = g.sub(out.output, dc).unwrap();
    let first = g.value(contrib).row(0).to_vec();
    for r in 1..5 {
        assert_close(g.value(contrib).row(r), &first, 1e-12);
    }
    let da2 = g.constant(g.value(da).map(|v| 2.0 * v));
    let out2 = m.attribute_control(&mut g, &b, dc, da2).unwrap();
    let contrib2 = g.sub(out2.output, dc).unwrap();
    // the lift has a bias, so doubling d_a doubles only the bias-free part
    let da0 = g.constant(Tensor::zeros(&[1, 32]));
    let out0 = m.attribute_control(&mut g, &b, dc, da0).unwrap();
    let contrib0 = g.sub(out0.output, dc).unwrap();
    for k in 0..16 {
        let c0 = g.value(contrib0).row(0)[k];
        let c1 = g.value(contrib).row(0)[k];
        let c2 = g.value(contrib2).row(0)[k];
        assert!(((c2 - c0) - 2.0 * (c1 - c0)).abs() < 1e-12);
    }
    let again = m.attribute_control(&mut g, &b, dc, da).unwrap();
    assert_eq!(g.value(again.output), g.value(out.output));
    let narrow = g.constant(Tensor::zeros(&[5, 8]));
    assert!(m.attribute_control(&mut g, &b, narrow, da).is_err());
}

#[test]
fn project_pose_cases() {
    let m = model();
    let mut g = Graph::new();
    let b = m.bind(&mut g, true);
    let zero = g.constant(Tensor::zeros(&[2, 16]));
    let p = m.project_pose(&mut g, &b, zero).unwrap();
    assert_eq!(g.value(p).shape(), &[2, 24]);
    assert!(g.value(p).data().iter().all(|&v| v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = g.constant(standard_normal(&[2, 16], &mut rng));
    let p = m.project_pose(&mut g, &b, x).unwrap();
    let sq = g.square(p);
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    for ids in [m.layers.head_up, m.layers.head_down] {
        for id in [ids.weight, ids.bias] {
            let gr = g.grad(b.var(id)).unwrap();
            assert!(gr.iter().any(|v| v.abs() > 0.0), "{}", m.params().name(id));
        }
    }
}

#[test]
fn denoise_contract() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let gloss = m.encode_gloss(&GlossSequence::new(vec![0, 4, 2])).unwrap();
    let p = standard_normal(&[6, 8, 3], &mut rng);
    let fused = crate::disentangle::fuse_frames(p.data(), m.topology());
    let a = m.denoise(&fused, 6, &gloss, 500).unwrap();
    assert_eq!(a.shape(), &[6, 24]);
    assert!(a.is_finite());
    assert_eq!(a, m.denoise(&fused, 6, &gloss, 500).unwrap());
    assert!(matches!(
        m.denoise(&fused[..fused.len() - 1], 6, &gloss, 500),
        Err(Error::Stage { .. })
    ));
}

#[test]
fn attention_rows_sum_to_one_and_stress_inputs_stay_finite() {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..5 {
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let gloss = m
            .encode_gloss_graph(&mut g, &b, &GlossSequence::new(vec![1, 2, 3]))
            .unwrap();
        let p = standard_normal(&[7, 8, 3], &mut rng).map(|v| 3.0 * v);
        let fused = crate::disentangle::fuse_frames(p.data(), m.topology());
        let f = g.constant(Tensor::matrix(7, 56, fused).unwrap());
        let trace = m
            .denoise_graph(&mut g, &b, f, gloss, 1 + trial * 200)
            .unwrap();
        assert_eq!(trace.attention.len(), 12);
        for a in &trace.attention {
            let t = g.value(*a);
            for r in 0..t.rows() {
                assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        assert!(g.value(trace.pose).is_finite());
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut m = model();
    m.durations = DurationTable::fit(5, [(&[0usize, 1][..], 20usize), (&[1][..], 12)]);
    let bytes = m.to_checkpoint_bytes();
    let back = AcdModel::from_checkpoint_bytes(&bytes).unwrap();
    assert_eq!(back.params(), m.params());
    assert_eq!(back.durations, m.durations);
    assert_eq!(back.vocab(), m.vocab());
    assert_eq!(back.topology(), m.topology());
    assert_eq!(back.to_checkpoint_bytes(), bytes);
}

#[test]
fn duration_table() {
    let table = DurationTable::fit(4, [(&[0usize, 1][..], 20usize), (&[1, 1, 2][..], 30)]);
    assert_eq!(table.per_token[0], Some(10.0));
    assert_eq!(table.per_token[1], Some(10.0));
    assert_eq!(table.per_token[3], None);
    assert_eq!(table.frames_for(&GlossSequence::new(vec![0, 3, 2])), 30);
}
