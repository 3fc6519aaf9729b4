use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use span2d::appcli::{
    build_train_units, expand_samples, gold_spans, predict_samples, save_checkpoint, synthetic_corpus,
    synthetic_queries, all_entities, write_dataset, CheckpointMeta, PredictConfig,
};
use span2d::inference::{evaluate, DecodeConfig};
use span2d::model::{Model, ModelConfig};
use span2d::subword::{train_bpe, MergeTable};
use span2d::training::{train_monitored, TrainConfig};

fn span2d(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_span2d"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn span2d")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--data", "d.jsonl", "--queries", "q.json", "--epochs", "2", "--d", "16", "--heads", "2", "--ff",
        "32", "--out", "m.ckpt",
    ];
    args.extend_from_slice(extra);
    span2d(dir, &args)
}

fn synth(dir: &Path, n: &str) {
    let o = span2d(dir, &["synth", "--sentences", n, "--out", "d.jsonl", "--queries-out", "q.json"]);
    assert!(o.status.success());
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["nonsense"][..],
        &["train", "--data", "d.jsonl"],
        &["eval", "--data", "d.jsonl", "--ckpt", "m", "--unknown-flag"],
        &["extract", "--ckpt", "m"],
    ] {
        let o = span2d(dir.path(), args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"), "{args:?}");
    }
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "4");
    fs::write(dir.path().join("bad.jsonl"), "{\"text\": \"ab\", \"entities\": [{\"type\": \"DNA\", \"start\": 2, \"end\": 1}]}\n").unwrap();
    let o = span2d(
        dir.path(),
        &["train", "--data", "bad.jsonl", "--queries", "q.json", "--out", "m.ckpt"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.jsonl:1"));

    fs::write(dir.path().join("junk.ckpt"), b"NOPE\x01\x00\x00\x00").unwrap();
    let o = span2d(dir.path(), &["eval", "--data", "d.jsonl", "--ckpt", "junk.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));

    fs::write(dir.path().join("other.json"), "{\"virus\": \"virus capsid\"}").unwrap();
    let o = span2d(
        dir.path(),
        &["train", "--data", "d.jsonl", "--queries", "other.json", "--out", "m.ckpt"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("has no query"));
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "4");
    let o = small_train(dir.path(), &["--lr", "1e300"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn loss_log_reflects_lambda_weighting() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "6");
    let o = small_train(dir.path(), &["--lambda", "0.1", "--loss-log", "loss.csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(stdout(&o), log);
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("epoch,mean_loss,f_s,f_e,f_m"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let weighted = 0.45 * r[2] + 0.45 * r[3] + 0.1 * r[4];
        assert!((r[1] - weighted).abs() < 1e-12 * r[1].max(1.0), "{r:?}");
    }
}

#[test]
fn dumped_matrices_respect_the_mask() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "3");
    assert!(small_train(dir.path(), &[]).status.success());
    let o = span2d(
        dir.path(),
        &["extract", "--data", "d.jsonl", "--ckpt", "m.ckpt", "--dump-matrices", "dump", "--out", "p.jsonl"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let units: Vec<_> = fs::read_dir(dir.path().join("dump")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(units.len(), 3 * 3);
    for u in units {
        let tokens = fs::read_to_string(u.join("tokens.csv")).unwrap();
        let kinds: Vec<(String, bool)> = tokens
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.rsplitn(5, ',').collect();
                (f[3].to_string(), f[2] == "true")
            })
            .collect();
        let read = |name: &str| -> Vec<Vec<f64>> {
            fs::read_to_string(u.join(name))
                .unwrap()
                .lines()
                .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
                .collect()
        };
        let m = read("m.csv");
        let s = read("s.csv");
        let l = kinds.len();
        assert_eq!(m.len(), l);
        assert!(read("attention.csv").len() == l);
        let text = |i: usize| kinds[i].0 == "text";
        let start_ok = |i: usize| text(i) && !kinds[i].1;
        let end_ok = |j: usize| text(j) && !(j + 1 < l && text(j + 1) && kinds[j + 1].1);
        for i in 0..l {
            assert_eq!(m[i].len(), l);
            if !start_ok(i) {
                assert_eq!(s[i][0], 0.0);
            }
            for j in 0..l {
                assert!((0.0..=1.0).contains(&m[i][j]));
                if j < i || !start_ok(i) || !end_ok(j) {
                    assert_eq!(m[i][j], 0.0, "cell ({i},{j}) in {}", u.display());
                }
            }
        }
    }
}

#[test]
fn extract_records_are_verbatim_substrings() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "3");
    assert!(small_train(dir.path(), &["--no-2dp"]).status.success());
    let sentence = "we NFkB alpha A1 regulates monocytes today.";
    for ablate in [false, true] {
        let mut args = vec!["extract", "--text", sentence, "--ckpt", "m.ckpt", "--t-eval", "0.01", "--t-select", "0.01"];
        if ablate {
            args.extend_from_slice(&["--max-len", "2"]);
        }
        let o = span2d(dir.path(), &args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let out = stdout(&o);
        let rec: serde_json::Value = serde_json::from_str(out.lines().next().unwrap()).unwrap();
        assert_eq!(rec["text"], sentence);
        let chars: Vec<char> = sentence.chars().collect();
        for e in rec["entities"].as_array().unwrap() {
            let (a, b) = (e["start"].as_u64().unwrap() as usize, e["end"].as_u64().unwrap() as usize);
            let surface: String = chars[a..b].iter().collect();
            assert_eq!(e["text"].as_str().unwrap(), surface);
        }
    }
}

#[test]
fn attention_ablated_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "3");
    assert!(small_train(dir.path(), &["--no-interactive-attention"]).status.success());
    let o = span2d(dir.path(), &["eval", "--data", "d.jsonl", "--ckpt", "m.ckpt", "--macro"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("macro"));
}

#[test]
fn bpe_train_writes_a_loadable_table() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.txt"), "low lower lowest\nnewer wider\n\n").unwrap();
    let o = span2d(dir.path(), &["bpe-train", "--corpus", "c.txt", "--merges", "5", "--out", "m.bpe"]);
    assert!(o.status.success());
    let t = MergeTable::load(&dir.path().join("m.bpe")).unwrap();
    assert_eq!(t.merges().len(), 5);
    assert_eq!(t.merges()[0], ("e".to_string(), "r".to_string()));
}

#[test]
fn eval_of_perfect_predictions_prints_hundred() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synthetic_corpus(4, 21);
    let queries = synthetic_queries();
    let corpus: Vec<&str> = samples
        .iter()
        .map(|s| s.text.as_str())
        .chain(queries.0.values().map(String::as_str))
        .collect();
    let table = train_bpe(&corpus, 300).unwrap();
    let expanded = expand_samples(&samples, &queries).unwrap();
    let (units, _) = build_train_units(&expanded, &table, 64).unwrap();

    let mut cfg = ModelConfig::new(table.vocab_size());
    cfg.encoder.d = 32;
    cfg.encoder.ff = 64;
    cfg.head_dropout = 0.1;
    let mut model = Model::init(cfg.clone(), 3).unwrap();
    let predict = PredictConfig {
        select_threshold: 0.5,
        decode: DecodeConfig::default(),
        cap: 64,
    };
    let gold = gold_spans(&samples);
    let train_cfg = TrainConfig {
        epochs: 400,
        seed: 3,
        ..TrainConfig::default()
    };
    train_monitored(&mut model, &units, &train_cfg, |log, m| {
        if log.epoch % 10 != 0 {
            return true;
        }
        let pred = all_entities(&predict_samples(m, &table, &queries, &samples, &predict).unwrap());
        evaluate(&pred, &gold).micro.f1 < 1.0
    })
    .unwrap();

    let meta = CheckpointMeta {
        model: cfg,
        merges: table.to_file_string(),
        vocab_hash: table.fingerprint(),
        queries,
        epoch: 0,
        seed: 3,
        lambda: 0.1,
        t_train: 0.5,
    };
    save_checkpoint(&dir.path().join("m.ckpt"), &model, &meta).unwrap();
    write_dataset(&dir.path().join("d.jsonl"), &samples).unwrap();
    let o = span2d(dir.path(), &["eval", "--data", "d.jsonl", "--ckpt", "m.ckpt", "--csv", "r.csv"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().last(), Some("P=100.0 R=100.0 F1=100.0"));
    let csv = fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("micro,") && l.ends_with(",1,1,1")), "{csv}");
}
