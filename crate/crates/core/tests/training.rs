use span2d::model::{Model, ModelConfig};
use span2d::numkernel::ParamSet;
use span2d::subword::train_bpe;
use span2d::training::{train, TrainConfig, TrainUnit};

fn one_unit() -> (TrainUnit, usize) {
    let sentence = "PEBP2 alpha A1 and alpha B1 enhanced the expression";
    let query = "protein enzymes antibodies";
    let table = train_bpe(&[sentence, query], 20).unwrap();
    let seq = table.encode(query, sentence, 64).unwrap();
    let (unit, dropped) = TrainUnit::new(seq, &[(0, 5), (0, 14), (6, 14), (19, 27)], "protein");
    assert_eq!(dropped, 0);
    (unit, table.vocab_size())
}

fn quiet_model(vocab: usize) -> Model {
    let mut cfg = ModelConfig::new(vocab);
    cfg.encoder.d = 16;
    cfg.encoder.heads = 2;
    cfg.encoder.ff = 32;
    cfg.encoder.dropout = 0.0;
    cfg.head_dropout = 0.0;
    Model::init(cfg, 8).unwrap()
}

#[test]
fn single_sample_loss_decreases_every_epoch() {
    let (unit, vocab) = one_unit();
    let mut model = quiet_model(vocab);
    let cfg = TrainConfig {
        epochs: 10,
        batch: 1,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let logs = train(&mut model, std::slice::from_ref(&unit), &cfg, |_| {}).unwrap();
    assert_eq!(logs.len(), 10);
    for w in logs.windows(2) {
        assert!(w[1].mean_loss < w[0].mean_loss, "{:?}", logs);
    }
}

#[test]
fn one_epoch_moves_parameters() {
    let (unit, vocab) = one_unit();
    let before = quiet_model(vocab);
    let mut after = before.clone();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    train(&mut after, &[unit], &cfg, |_| {}).unwrap();
    let mut changed = 0;
    let mut a = Vec::new();
    after.visit("", &mut |_, t| a.push(t.clone()));
    let mut k = 0;
    before.visit("", &mut |_, t| {
        if *t != a[k] {
            changed += 1;
        }
        k += 1;
    });
    assert!(changed > 0);
}

#[test]
fn training_is_deterministic_given_seed() {
    let (unit, vocab) = one_unit();
    let units = vec![unit.clone(), unit.clone(), unit];
    let run = || {
        let mut cfg = ModelConfig::new(vocab);
        cfg.encoder.d = 16;
        cfg.encoder.heads = 2;
        cfg.encoder.ff = 32;
        let mut m = Model::init(cfg, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch: 2,
            ..TrainConfig::default()
        };
        let logs = train(&mut m, &units, &cfg, |_| {}).unwrap();
        (m, logs)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn empty_dataset_rejected() {
    let mut model = quiet_model(40);
    assert!(train(&mut model, &[], &TrainConfig::default(), |_| {}).is_err());
}
