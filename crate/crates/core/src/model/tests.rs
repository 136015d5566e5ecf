use super::*;
use crate::numerics::Var;

fn tiny() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden_size: 8,
        query_heads: 2,
        kv_heads: 1,
        head_dim: 4,
        intermediate_size: 16,
        vocab_size: 11,
        chunk_size: 4,
        ratio_set: vec![2, 4],
        rope_base: 10000.0,
        norm_eps: 1e-5,
    }
}

fn perturbed(seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::init(tiny(), seed).unwrap();
    // Give the beacon path its own weights.
    let other = BaseParams::<f64>::init(&m.config, seed + 1000);
    for (b, o) in m.beacon.layers.iter_mut().zip(&other.layers) {
        b.wq = o.wq.clone();
        b.wk = o.wk.clone();
        b.wv = o.wv.clone();
    }
    m.beacon.embed = Arc::new(Tensor::from_fn(&[1, 8], |i| (i as f64 * 0.37).sin()));
    m
}

#[test]
fn embed_examples() {
    let m = perturbed(1);
    let b = m.config.beacon_token();
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, GradMode::NONE);

    let (h, kinds) = embed(&mut tape, &m.config, &bound, &[b, b, b]).unwrap();
    assert_eq!(kinds.beacon_count(), 3);
    let v = tape.value(h);
    for r in 0..3 {
        assert_eq!(v.row(r), m.beacon.embed.row(0));
    }

    let (h, _) = embed(&mut tape, &m.config, &bound, &[3, 7]).unwrap();
    assert_eq!(tape.value(h).row(0), m.base.embed.row(3));
    assert_eq!(tape.value(h).row(1), m.base.embed.row(7));

    let (h, kinds) = embed(&mut tape, &m.config, &bound, &[5, b, 5]).unwrap();
    assert_eq!(
        kinds.kinds(),
        &[TokenKind::Raw, TokenKind::Beacon, TokenKind::Raw]
    );
    assert_eq!(tape.value(h).row(0), m.base.embed.row(5));
    assert_eq!(tape.value(h).row(1), m.beacon.embed.row(0));
    assert_eq!(tape.value(h).row(2), m.base.embed.row(5));

    assert!(matches!(
        embed(&mut tape, &m.config, &bound, &[b + 1]),
        Err(Error::Data(_))
    ));
}

#[test]
fn dual_projection_with_copied_weights_matches_single_path() {
    // Freshly initialized beacon weights are copies of the raw ones.
    let m = Model::<f64>::init(tiny(), 3).unwrap();
    let b = m.config.beacon_token();
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, GradMode::NONE);
    let (h, kinds) = embed(&mut tape, &m.config, &bound, &[1, 2, b, 4, 5, b]).unwrap();
    let layer = &bound.layers[0];
    let (q, k, v) = project_qkv_dual(&mut tape, layer, h, &kinds).unwrap();
    let q1 = tape.matmul(h, layer.wq).unwrap();
    let k1 = tape.matmul(h, layer.wk).unwrap();
    let v1 = tape.matmul(h, layer.wv).unwrap();
    assert_eq!(tape.value(q), tape.value(q1));
    assert_eq!(tape.value(k), tape.value(k1));
    assert_eq!(tape.value(v), tape.value(v1));
}

#[test]
fn all_raw_chunk_leaves_beacon_weights_untouched() {
    let m = perturbed(4);
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, GradMode::BEACON);
    let prefix = vec![None; 2];
    let out = forward_chunk(&mut tape, &m.config, &bound, &[1, 2, 3, 4], &prefix, 0).unwrap();
    let logits = lm_logits(&mut tape, &m.config, &bound, out.hidden).unwrap();
    let ce = tape.cross_entropy(logits, &[2, 3, 4, 5], -100).unwrap();
    let grads = tape.backward(ce.loss).unwrap();
    for var in bound.beacon_vars() {
        assert!(grads.get(var).unwrap().data().iter().all(|g| *g == 0.0));
    }
}

#[test]
fn mixed_rows_use_their_own_projection() {
    let m = perturbed(5);
    let b = m.config.beacon_token();
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, GradMode::NONE);
    let (h, kinds) = embed(&mut tape, &m.config, &bound, &[6, 9, b]).unwrap();
    let layer = &bound.layers[1];
    let (q, k, v) = project_qkv_dual(&mut tape, layer, h, &kinds).unwrap();

    // Direct per-row products.
    let hv = tape.value(h).clone();
    let row_times = |row: &[f64], w: &Tensor<f64>| -> Vec<f64> {
        let (inp, out) = w.dims2().unwrap();
        (0..out)
            .map(|j| (0..inp).map(|i| row[i] * w.data()[i * out + j]).sum())
            .collect()
    };
    let bl = &m.beacon.layers[1];
    let rl = &m.base.layers[1];
    for (got, w_raw, w_bcn) in [
        (q, &rl.wq, &bl.wq),
        (k, &rl.wk, &bl.wk),
        (v, &rl.wv, &bl.wv),
    ] {
        let got = tape.value(got);
        for r in 0..3 {
            let w = if r == 2 { w_bcn } else { w_raw };
            let want = row_times(hv.row(r), w);
            for (a, e) in got.row(r).iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }
}

fn attention_config(heads: usize, kv_heads: usize, d: usize) -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        hidden_size: heads * d,
        query_heads: heads,
        kv_heads,
        head_dim: d,
        intermediate_size: 4,
        vocab_size: 4,
        chunk_size: 4,
        ratio_set: vec![2],
        rope_base: 10000.0,
        norm_eps: 1e-5,
    }
}

fn rot2(x: [f64; 2], p: f64) -> [f64; 2] {
    [
        x[0] * p.cos() - x[1] * p.sin(),
        x[0] * p.sin() + x[1] * p.cos(),
    ]
}

#[test]
fn attention_over_one_cached_entry_matches_enumeration() {
    let cfg = attention_config(1, 1, 2);
    let q = [[0.3, -0.8], [1.1, 0.4]];
    let k = [[0.5, 0.2], [-0.7, 0.9]];
    let v = [[1.0, -2.0], [0.5, 0.25]];
    let ck = [[0.6, -0.1]];
    let cv = [[3.0, 1.5]];

    let mut tape = Tape::<f64>::new();
    let t = |rows: &[[f64; 2]]| {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    };
    let (qv, kv, vv) = (
        tape.constant(t(&q)),
        tape.constant(t(&k)),
        tape.constant(t(&v)),
    );
    let (ckv, cvv) = (tape.constant(t(&ck)), tape.constant(t(&cv)));
    let pos = Positions::condensed(1, 2);
    let att = attend_with_cache(&mut tape, &cfg, qv, kv, vv, Some((ckv, cvv)), &pos).unwrap();
    let out = tape.value(att.output).clone();

    // Explicit enumeration: keys at positions 0 (cached), 1, 2.
    let keys = [(ck[0], cv[0], 0.0), (k[0], v[0], 1.0), (k[1], v[1], 2.0)];
    for (i, qi) in q.iter().enumerate() {
        let qp = 1.0 + i as f64;
        let qr = rot2(*qi, qp);
        let visible: Vec<_> = keys.iter().filter(|(_, _, p)| *p <= qp).collect();
        let scores: Vec<f64> = visible
            .iter()
            .map(|(kk, _, p)| {
                let kr = rot2(*kk, *p);
                (qr[0] * kr[0] + qr[1] * kr[1]) / 2f64.sqrt()
            })
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let mut want = [0.0; 2];
        for (s, (_, vv, _)) in scores.iter().zip(&visible) {
            want[0] += s.exp() / z * vv[0];
            want[1] += s.exp() / z * vv[1];
        }
        assert!((out.row(i)[0] - want[0]).abs() < 1e-12);
        assert!((out.row(i)[1] - want[1]).abs() < 1e-12);
    }
}

#[test]
fn single_query_over_cache_is_a_distribution() {
    let cfg = attention_config(2, 2, 2);
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(Tensor::from_fn(&[1, 4], |i| i as f64 * 0.3 - 0.4));
    let k = tape.constant(Tensor::from_fn(&[1, 4], |i| 0.2 - i as f64 * 0.1));
    let v = tape.constant(Tensor::from_fn(&[1, 4], |i| i as f64));
    let ck = tape.constant(Tensor::from_fn(&[2, 4], |i| (i as f64).cos()));
    let cv = tape.constant(Tensor::from_fn(&[2, 4], |i| (i as f64).sin()));
    let att = attend_with_cache(
        &mut tape,
        &cfg,
        q,
        k,
        v,
        Some((ck, cv)),
        &Positions::condensed(2, 1),
    )
    .unwrap();
    for w in att.weights {
        let w = tape.value(w);
        assert_eq!(w.shape(), &[1, 3]);
        assert!((w.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn attention_rejects_mismatched_cache() {
    let cfg = attention_config(1, 1, 2);
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(Tensor::zeros(&[2, 2]));
    let ck = tape.constant(Tensor::zeros(&[3, 2]));
    let err = attend_with_cache(
        &mut tape,
        &cfg,
        q,
        q,
        q,
        Some((ck, ck)),
        &Positions::condensed(2, 2),
    );
    assert!(matches!(err, Err(Error::State(_))));
}

#[test]
fn causal_mask_zeroes_future_keys() {
    let m = perturbed(6);
    let b = m.config.beacon_token();
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, GradMode::NONE);
    let ck = tape.constant(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).sin()));
    let cv = tape.constant(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.3).cos()));
    let prefix = vec![Some((ck, cv)); 2];
    let out = forward_chunk(
        &mut tape,
        &m.config,
        &bound,
        &[1, 2, b, 3, 4, b],
        &prefix,
        3,
    )
    .unwrap();
    let pos = Positions::condensed(3, 6);
    for layer in &out.attention {
        for &w in layer {
            let w = tape.value(w);
            for (i, qp) in pos.queries.iter().enumerate() {
                for (j, kp) in pos.keys.iter().enumerate() {
                    if kp > qp {
                        assert_eq!(w.row(i)[j], 0.0);
                    } else {
                        assert!(w.row(i)[j] > 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn condensed_positions_follow_the_cache() {
    let p = Positions::condensed(24, 40);
    assert_eq!(p.queries[0], 24);
    assert_eq!(p.keys.len(), 64);
    assert_eq!(*p.queries.last().unwrap(), 63);
    let distinct: std::collections::BTreeSet<_> = p.keys.iter().collect();
    assert_eq!(distinct.len(), 24 + 40);
}

/// Replicates every kv head `group` times so the expanded model runs with
/// `kv_heads == query_heads`.
fn expand_kv(m: &Model<f64>) -> Model<f64> {
    let cfg = &m.config;
    let group = cfg.query_heads / cfg.kv_heads;
    let d = cfg.head_dim;
    let expand = |w: &Param<f64>| {
        let (rows, _) = w.dims2().unwrap();
        let out_cols = cfg.query_heads * d;
        let src_cols = cfg.kv_heads * d;
        Arc::new(Tensor::from_fn(&[rows, out_cols], |i| {
            let (r, c) = (i / out_cols, i % out_cols);
            let head = c / d / group;
            w.data()[r * src_cols + head * d + c % d]
        }))
    };
    let mut e = m.clone();
    e.config.kv_heads = cfg.query_heads;
    for l in &mut e.base.layers {
        l.wk = expand(&l.wk);
        l.wv = expand(&l.wv);
    }
    for l in &mut e.beacon.layers {
        l.wk = expand(&l.wk);
        l.wv = expand(&l.wv);
    }
    e
}

#[test]
fn grouped_heads_equal_explicitly_repeated_heads() {
    let m = perturbed(7);
    let e = expand_kv(&m);
    let b = m.config.beacon_token();
    let run = |model: &Model<f64>| {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, GradMode::NONE);
        let prefix = vec![None; 2];
        let out = forward_chunk(
            &mut tape,
            &model.config,
            &bound,
            &[3, 1, b, 4, 1, b],
            &prefix,
            0,
        )
        .unwrap();
        tape.value(out.hidden).clone()
    };
    assert_eq!(run(&m), run(&e));
}

#[test]
fn zeroed_blocks_are_residual_identity() {
    let mut m = perturbed(8);
    for l in &mut m.base.layers {
        l.wo = Arc::new(Tensor::zeros(l.wo.shape()));
        l.w_down = Arc::new(Tensor::zeros(l.w_down.shape()));
    }
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, GradMode::NONE);
    let (h, kinds) = embed(&mut tape, &m.config, &bound, &[1, 2, 3]).unwrap();
    let out = layer_forward(
        &mut tape,
        &m.config,
        &bound.layers[0],
        h,
        &kinds,
        None,
        &Positions::condensed(0, 3),
    )
    .unwrap();
    assert_eq!(tape.value(out.hidden), tape.value(h));
}

#[test]
fn lm_logits_examples() {
    let mut m = perturbed(9);
    m.base.lm_head = Arc::new(Tensor::from_fn(&[8, 11], |i| {
        if i % 11 == i / 11 {
            1.0
        } else {
            0.0
        }
    }));
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, GradMode::NONE);

    let zero = tape.constant(Tensor::zeros(&[1, 8]));
    let l = lm_logits(&mut tape, &m.config, &bound, zero).unwrap();
    assert!(tape.value(l).data().iter().all(|x| *x == 0.0));

    // final norm of [2, 0, ..., 0] is [sqrt(8), 0, ...]; head picks coordinate 0.
    let mut row = vec![0.0; 8];
    row[0] = 2.0;
    let x = tape.constant(Tensor::new(vec![1, 8], row).unwrap());
    let l = lm_logits(&mut tape, &m.config, &bound, x).unwrap();
    let normed = 2.0 / (4.0 / 8.0 + 1e-5f64).sqrt();
    assert!((tape.value(l).data()[0] - normed).abs() < 1e-9);
    assert_eq!(tape.value(l).data()[1], 0.0);

    let b = m.config.beacon_token();
    let (h, kinds) = embed(&mut tape, &m.config, &bound, &[b, b]).unwrap();
    let err = last_raw_logits(&mut tape, &m.config, &bound, h, &kinds);
    assert!(matches!(err, Err(Error::Usage(_))));
}

#[test]
fn checkpoint_round_trip_keeps_prefixes_disjoint() {
    let m = Model::<f32>::init(ModelConfig::default(), 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let back = Model::<f32>::load(&path).unwrap();
    assert_eq!(back.base.hash(), m.base.hash());
    assert_eq!(back.beacon.hash(), m.beacon.hash());
    let c = m.to_container();
    assert!(c
        .tensors
        .iter()
        .all(|(n, _)| n.starts_with(BASE_PREFIX) ^ n.starts_with(BEACON_PREFIX)));
}

#[test]
fn beacon_grad_mode_only_marks_beacon_leaves() {
    let m = perturbed(10);
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, GradMode::BEACON);
    let flags: Vec<bool> = bound
        .base_vars()
        .iter()
        .map(|v: &Var| tape.requires_grad(*v))
        .collect();
    assert!(flags.iter().all(|f| !f));
    assert!(bound.beacon_vars().iter().all(|v| tape.requires_grad(*v)));
}
