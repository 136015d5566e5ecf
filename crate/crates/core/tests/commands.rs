use std::fs;
use std::path::Path;
use std::sync::Arc;

use beaconkv::compressor::{RatioPolicy, Session};
use beaconkv::harness::commands::{
    cmd_compress, cmd_flops, cmd_generate, cmd_needle_eval, cmd_needle_gen, cmd_train,
    default_lengths, ContextSource, CorpusKind, FlopsArgs, GenerateArgs, NeedleEvalArgs,
    NeedleGenArgs, TrainArgs,
};
use beaconkv::model::{Model, ModelConfig};
use beaconkv::trainer::{ByteTokenizer, Phase, TrainConfig};

fn small_model() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden_size: 32,
        query_heads: 2,
        kv_heads: 1,
        head_dim: 16,
        intermediate_size: 64,
        chunk_size: 16,
        ratio_set: vec![2, 4, 8],
        ..Default::default()
    }
}

fn save_fresh(path: &Path) -> Model<f32> {
    let m = Model::<f32>::init(small_model(), 3).unwrap();
    m.save(path).unwrap();
    m
}

#[test]
fn train_writes_one_metric_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s);
    cmd_needle_gen(&NeedleGenArgs::Corpus {
        kind: CorpusKind::Beacon,
        seed: 1,
        docs: 20,
        len: 48,
        out: p("corpus.txt"),
    })
    .unwrap();
    let config = TrainConfig {
        phase: Phase::Beacon,
        total_steps: 50,
        batch_size: 2,
        min_len: 17,
        model: small_model(),
        ..Default::default()
    };
    fs::write(p("c.toml"), toml::to_string(&config).unwrap()).unwrap();
    let args = TrainArgs {
        config: p("c.toml"),
        corpus: p("corpus.txt"),
        init: None,
        out: p("out/model.bkv"),
        metrics: p("m.jsonl"),
    };
    let r = cmd_train(&args).unwrap();
    assert_eq!(r.steps, 50);
    let rows = fs::read_to_string(p("m.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 50);
    for l in rows.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite());
    }
    assert!(Model::<f32>::load(p("out/model.bkv")).is_ok());
}

#[test]
fn compress_counts_entries_and_snapshot_is_reusable() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s);
    let model = save_fresh(&p("m.bkv"));
    let text: String = (0..100)
        .map(|i| char::from(b'a' + (i % 26) as u8))
        .collect();
    fs::write(p("ctx.txt"), &text).unwrap();
    let s = cmd_compress(
        &p("m.bkv"),
        &p("ctx.txt"),
        &RatioPolicy::Constant(4),
        &p("c.bkv"),
    )
    .unwrap();
    assert_eq!((s.n, s.chunks), (100, 7));
    assert_eq!(s.m, 6 * 4 + 1);
    assert_eq!(s.predicted, Some(s.m as u64));
    assert!(s.entries_per_layer.iter().all(|&e| e == s.m));

    let gen = |context| {
        cmd_generate(&GenerateArgs {
            checkpoint: p("m.bkv"),
            context,
            prompt: "xyz".into(),
            max_new: 6,
            policy: RatioPolicy::Constant(4),
            temperature: None,
            stop_at_eos: false,
        })
        .unwrap()
    };
    let from_snapshot = gen(ContextSource::Snapshot(p("c.bkv")));
    let from_text = gen(ContextSource::Text(p("ctx.txt")));
    assert_eq!(from_snapshot, from_text);

    // Same as a session that saw the context first.
    let mut session = Session::new(Arc::new(model), RatioPolicy::Constant(4));
    session.append(&ByteTokenizer.encode(&text)).unwrap();
    assert_eq!(session.cache().m(), s.m);
}

#[test]
fn flops_csv_has_one_row_per_length() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("f.csv");
    let args = FlopsArgs {
        preset: Some("llama2-7b".into()),
        config: None,
        alpha: None,
        chunk_size: None,
        lengths: default_lengths(),
        ratios: vec![2, 8],
        out: Some(out.clone()),
    };
    let rows = cmd_flops(&args).unwrap();
    assert_eq!(rows.len(), 32);
    let csv = fs::read_to_string(out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "n,flops_full,flops_beacon_x2,flops_beacon_x8,ratio_x2,ratio_x8"
    );
    assert_eq!(lines.count(), 32);
    assert!(cmd_flops(&FlopsArgs {
        preset: Some("nope".into()),
        out: None,
        ..args
    })
    .is_err());
}

#[test]
fn needle_gen_is_reproducible_and_eval_scores_every_case() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s);
    let tasks = |out| NeedleGenArgs::Tasks {
        seed: 4,
        context_len: 64,
        chunk_size: 16,
        depths: vec![0.0, 1.0],
        cases: 3,
        multi: true,
        out,
    };
    assert_eq!(cmd_needle_gen(&tasks(p("a.jsonl"))).unwrap(), 6);
    cmd_needle_gen(&tasks(p("b.jsonl"))).unwrap();
    assert_eq!(
        fs::read(p("a.jsonl")).unwrap(),
        fs::read(p("b.jsonl")).unwrap()
    );

    save_fresh(&p("m.bkv"));
    for multi_turn in [false, true] {
        let report = cmd_needle_eval(&NeedleEvalArgs {
            checkpoint: p("m.bkv"),
            tasks: p("a.jsonl"),
            policy: RatioPolicy::Constant(2),
            max_new: 1,
            multi_turn,
            report: Some(p("r.json")),
        })
        .unwrap();
        assert_eq!(report.total, 18);
        assert!(report.correct <= report.total);
        assert!(fs::metadata(p("r.json")).unwrap().len() > 0);
    }
}

#[test]
fn ratio_policy_parses_cli_forms() {
    assert_eq!(
        "8".parse::<RatioPolicy>().unwrap(),
        RatioPolicy::Constant(8)
    );
    assert_eq!(
        "8,4,2".parse::<RatioPolicy>().unwrap(),
        RatioPolicy::PerChunk(vec![8, 4, 2])
    );
    assert_eq!(
        "random:7".parse::<RatioPolicy>().unwrap(),
        RatioPolicy::Random { seed: 7 }
    );
    assert!("adaptive".parse::<RatioPolicy>().is_ok());
    assert!("x".parse::<RatioPolicy>().is_err());
    assert!("random:".parse::<RatioPolicy>().is_err());
}
