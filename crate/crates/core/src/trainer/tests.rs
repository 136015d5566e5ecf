use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::error::Error;
use crate::model::{BaseParams, GradMode, Model, ModelConfig};
use crate::numerics::{central_difference, relative_error, sample_coordinates, Tape, Tensor};

fn cfg(vocab: usize) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden_size: 16,
        query_heads: 4,
        kv_heads: 2,
        head_dim: 4,
        intermediate_size: 32,
        vocab_size: vocab,
        chunk_size: 8,
        ratio_set: vec![2, 4, 8],
        rope_base: 10000.0,
        norm_eps: 1e-5,
    }
}

/// Model whose beacon weights differ from the raw projections.
fn model<T: crate::numerics::Scalar>(vocab: usize, seed: u64) -> Model<T> {
    let mut m = Model::<T>::init(cfg(vocab), seed).unwrap();
    let other = BaseParams::<T>::init(&m.config, seed + 99);
    for (b, o) in m.beacon.layers.iter_mut().zip(&other.layers) {
        b.wq = o.wq.clone();
        b.wk = o.wk.clone();
        b.wv = o.wv.clone();
    }
    m
}

fn seq(n: usize, vocab: u32, seed: u32) -> Vec<u32> {
    (0..n as u32)
        .map(|i| {
            i.wrapping_mul(2654435761)
                .wrapping_add(seed.wrapping_mul(40503))
                .rotate_left(7)
                % vocab
        })
        .collect()
}

#[test]
fn ratio_schedule_examples() {
    let mut s = RatioSchedule::new(1, vec![4], RatioMode::ChunkWise).unwrap();
    assert_eq!(s.sample(5).unwrap(), vec![4; 5]);
    let draw = |seed| {
        RatioSchedule::new(seed, vec![2, 4, 8, 16, 32], RatioMode::ChunkWise)
            .unwrap()
            .sample(30)
            .unwrap()
    };
    assert_eq!(draw(7), draw(7));
    assert_ne!(draw(7), draw(8));
    let mut inst = RatioSchedule::new(3, vec![2, 4, 8, 16, 32], RatioMode::InstanceWise).unwrap();
    let v = inst.sample(6).unwrap();
    assert!(v.iter().all(|x| *x == v[0]));
    assert!(matches!(
        RatioSchedule::new(0, vec![], RatioMode::ChunkWise),
        Err(Error::Config(_))
    ));
    assert!(s.sample(0).is_err());
}

#[test]
fn ratio_draws_are_uniform() {
    let set = vec![2, 4, 8, 16, 32];
    let mut s = RatioSchedule::new(11, set.clone(), RatioMode::ChunkWise).unwrap();
    let draws = s.sample(10_000).unwrap();
    for a in set {
        let f = draws.iter().filter(|x| **x == a).count() as f64 / 10_000.0;
        assert!((f - 0.2).abs() <= 0.02, "ratio {a}: frequency {f}");
    }
}

#[test]
fn labels_examples() {
    let c = cfg(16);
    let single = training_plan(&c, 8, &[2]).unwrap();
    assert!(build_labels(&single, &seq(8, 16, 0))
        .iter()
        .all(|l| *l == IGNORE_LABEL));

    let tokens: Vec<u32> = (1..=16).collect();
    let plan = training_plan(&c, 16, &[2, 2]).unwrap();
    let labels = build_labels(&plan, &tokens);
    let n = IGNORE_LABEL;
    let mut want = vec![n; 12];
    // chunk 2: raw tokens 9..=16 interleaved with beacons, final token unlabeled
    want.extend([10, 11, n, 12, 13, n, 14, 15, n, 16, n, n]);
    assert_eq!(labels, want);
}

proptest! {
    #[test]
    fn labelled_positions_are_raw_slots_after_chunk_one(n in 1usize..60, seed in 0u64..100) {
        let c = cfg(16);
        let chunks = n.div_ceil(8);
        let ratios = RatioSchedule::new(seed, c.ratio_set.clone(), RatioMode::ChunkWise).unwrap().sample(chunks).unwrap();
        let plan = training_plan(&c, n, &ratios).unwrap();
        let labels = build_labels(&plan, &seq(n, 16, seed as u32));
        let mut offset = 0;
        for (i, chunk) in plan.iter().enumerate() {
            let part = &labels[offset..offset + chunk.kinds.len()];
            let count = part.iter().filter(|l| **l != IGNORE_LABEL).count();
            let want = if i == 0 { 0 } else if i + 1 == plan.len() { chunk.len() - 1 } else { chunk.len() };
            prop_assert_eq!(count, want);
            for (l, k) in part.iter().zip(chunk.kinds.kinds()) {
                if *k == crate::model::TokenKind::Beacon {
                    prop_assert_eq!(*l, IGNORE_LABEL);
                }
            }
            offset += chunk.kinds.len();
        }
    }
}

#[test]
fn untrained_loss_is_near_uniform() {
    let m = Model::<f32>::init(cfg(256), 5).unwrap();
    let tokens = seq(40, 256, 3);
    let mut tape = Tape::new();
    let (out, _) = compression_ar_loss(&mut tape, &m, &tokens, &[2, 4, 8, 2, 2]).unwrap();
    let loss = tape.value(out.loss).item() as f64;
    assert!((loss - 256f64.ln()).abs() < 0.1, "loss {loss}");
    assert_eq!(out.count, 8 + 8 + 8 + 7);
}

#[test]
fn short_example_has_no_loss() {
    let m = Model::<f32>::init(cfg(16), 5).unwrap();
    let mut tape = Tape::new();
    let (out, _) = compression_ar_loss(&mut tape, &m, &seq(6, 16, 1), &[2]).unwrap();
    assert_eq!(out.count, 0);
    assert_eq!(tape.value(out.loss).item(), 0.0);
}

#[test]
fn final_chunk_loss_reaches_first_chunk_beacons() {
    let m = model::<f64>(16, 3);
    let tokens = seq(24, 16, 2);
    let plan = training_plan(&m.config, 24, &[4, 4, 4]).unwrap();
    let mut labels = build_labels(&plan, &tokens);
    let first_two = plan[0].kinds.len() + plan[1].kinds.len();
    labels[..first_two]
        .iter_mut()
        .for_each(|l| *l = IGNORE_LABEL);
    let mut tape = Tape::new();
    let first = m.bind(&mut tape, GradMode::BEACON);
    let rest = m.bind(&mut tape, GradMode::NONE);
    let out = ar_loss_on_tape(
        &mut tape,
        &m.config,
        &[&first, &rest, &rest],
        &tokens,
        &plan,
        &labels,
    )
    .unwrap();
    assert_eq!(out.count, 7);
    let grads = tape.backward(out.loss).unwrap();
    assert!(grads.get(first.layers[0].beacon_wk).unwrap().norm() > 0.0);
}

fn beacon_loss(m: &Model<f64>, tokens: &[u32], ratios: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let (out, _) = compression_ar_loss(&mut tape, m, tokens, ratios).unwrap();
    tape.value(out.loss).item()
}

#[test]
fn beacon_gradients_match_finite_differences() {
    let m = model::<f64>(16, 8);
    let tokens = seq(22, 16, 4);
    let ratios = [2, 4, 8];
    let mut tape = Tape::new();
    let (out, bound) = compression_ar_loss(&mut tape, &m, &tokens, &ratios).unwrap();
    let grads = tape.backward(out.loss).unwrap();
    let vars = bound.beacon_vars();
    let mut worst: f64 = 0.0;
    for (p, var) in [0usize, 2, 6].into_iter().map(|i| (i, vars[i])) {
        let g = grads.get(var).unwrap().clone();
        for c in sample_coordinates(g.len(), 6, p as u64) {
            let fd = central_difference(
                |delta| {
                    let mut shifted = m.clone();
                    let slot = &mut shifted.beacon.params_mut()[p];
                    Arc::make_mut(slot).data_mut()[c] += delta;
                    Ok(beacon_loss(&shifted, &tokens, &ratios))
                },
                1e-6,
            )
            .unwrap();
            worst = worst.max(relative_error(fd, g.data()[c], 1e-6));
        }
    }
    assert!(worst <= 1e-5, "relative error {worst}");
}

#[test]
fn zero_gradients_leave_parameters_unchanged() {
    let m = model::<f32>(16, 1);
    let mut p = m.beacon.clone();
    let mut opt = OptState::new(AdamWConfig::new(1e-2, 10), &p.named());
    let zeros: Vec<Tensor<f32>> = p
        .named()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();
    let before = p.hash();
    opt.update(p.params_mut(), &zeros).unwrap();
    assert_eq!(p.hash(), before);
}

#[test]
fn learning_rate_decays_linearly() {
    let m = model::<f32>(16, 1);
    let mut p = m.beacon.clone();
    let mut opt = OptState::new(AdamWConfig::new(1.0, 4), &p.named());
    let zeros: Vec<Tensor<f32>> = p
        .named()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();
    let mut lrs = Vec::new();
    for _ in 0..4 {
        lrs.push(opt.lr());
        opt.update(p.params_mut(), &zeros).unwrap();
    }
    assert_eq!(lrs, vec![1.0, 0.75, 0.5, 0.25]);
}

#[test]
fn beacon_training_freezes_base_and_overfits() {
    let mut m = model::<f32>(16, 2);
    let base = m.base.hash();
    let beacon = m.beacon.hash();
    let batch = vec![
        TrainExample {
            tokens: seq(24, 16, 9),
        },
        TrainExample {
            tokens: seq(20, 16, 1),
        },
    ];
    let mut opt = OptState::new(AdamWConfig::new(3e-3, 1000), &m.beacon.named());
    let mut sched = RatioSchedule::new(0, vec![2], RatioMode::ChunkWise).unwrap();
    let mut losses = Vec::new();
    for _ in 0..50 {
        losses.push(
            train_step(&mut m, &mut opt, &batch, &mut sched)
                .unwrap()
                .loss,
        );
    }
    assert_eq!(m.base.hash(), base);
    assert_ne!(m.beacon.hash(), beacon);
    assert!(losses[49] < losses[0] - 0.05, "{:?}", losses);
}

#[test]
fn base_phase_fits_windows() {
    let mut m = Model::<f32>::init(cfg(16), 4).unwrap();
    let beacon = m.beacon.hash();
    let windows = vec![seq(8, 16, 1), seq(8, 16, 2)];
    let mut opt = OptState::new(AdamWConfig::new(3e-3, 1000), &m.base.named());
    let first = base_train_step(&mut m, &mut opt, &windows).unwrap().loss;
    let mut last = first;
    for _ in 0..40 {
        last = base_train_step(&mut m, &mut opt, &windows).unwrap().loss;
    }
    assert!(last < first * 0.8, "{first} -> {last}");
    assert_eq!(m.beacon.hash(), beacon);
}

#[test]
fn corpus_filtering() {
    let tok = ByteTokenizer;
    let docs: Vec<String> = ["abc", "abcd", "abcdefgh", "abcdefghi"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let ex = prepare_corpus(&docs, &tok, 4, 8, 0).unwrap();
    assert_eq!(ex.len(), 2);
    assert!(ex
        .iter()
        .all(|e| *e.tokens.last().unwrap() == ByteTokenizer::EOS));
    let mut lens: Vec<usize> = ex.iter().map(|e| e.tokens.len()).collect();
    lens.sort();
    assert_eq!(lens, vec![5, 9]);
    assert_eq!(prepare_corpus(&docs, &tok, 4, 8, 0).unwrap(), ex);
    assert!(matches!(
        prepare_corpus(&docs, &tok, 20, 30, 0),
        Err(Error::Data(_))
    ));

    let long = vec![
        "x".repeat(2399),
        "x".repeat(2400),
        "x".repeat(20480),
        "x".repeat(20481),
    ];
    assert_eq!(
        prepare_corpus(&long, &tok, 2400, 20480, 0).unwrap().len(),
        2
    );
}

#[test]
fn train_config_parses_and_validates() {
    let text = r#"
        phase = "beacon"
        seed = 7
        lr = 0.001
        total_steps = 20
        ratio_mode = "instance_wise"
        ratios = [2, 4]
        [model]
        chunk_size = 64
    "#;
    let c = TrainConfig::from_toml(text).unwrap();
    assert_eq!(c.seed, 7);
    assert_eq!(c.ratio_mode, RatioMode::InstanceWise);
    assert_eq!(c.ratio_list(), &[2, 4]);
    assert!(TrainConfig::from_toml("ratios = [3]").is_err());
    assert!(TrainConfig::from_toml("bogus = 1").is_err());
}

#[test]
fn trainer_runs_are_reproducible() {
    let run = || {
        let mut m = model::<f32>(16, 6);
        let config = TrainConfig {
            seed: 3,
            total_steps: 5,
            min_len: 1,
            model: m.config.clone(),
            ..Default::default()
        };
        let examples: Vec<TrainExample> = (0..4)
            .map(|i| TrainExample {
                tokens: seq(20 + i, 16, i as u32),
            })
            .collect();
        let mut out = Vec::new();
        let report = Trainer::new(config, &m)
            .unwrap()
            .run(&mut m, &examples, &mut out)
            .unwrap();
        assert_eq!(report.steps, 5);
        (String::from_utf8(out).unwrap(), m.beacon.hash())
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert_eq!(a.lines().count(), 5);
    let first: StepMetrics = serde_json::from_str(a.lines().next().unwrap()).unwrap();
    assert_eq!(first.step, 0);
}
