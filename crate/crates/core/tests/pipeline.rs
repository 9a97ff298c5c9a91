use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use osegnet::checkpoint::{load_checkpoint, save_checkpoint};
use osegnet::data::{load_index, synth_generate, Split};
use osegnet::error::CheckpointError;
use osegnet::eval::{evaluate, Evaluation};
use osegnet::metrics::{render_table_row, MetricsReport};
use osegnet::train::{load_split, train_run, Trainer, CHECKPOINT_FILE, LOG_FILE};
use osegnet::{Error, ModelConfig, OSegNetModel, RunConfig, Tensor};

fn tiny_model(q: usize) -> ModelConfig {
    ModelConfig {
        q_order: q,
        input_size: 32,
        encoder_channels: vec![4, 8, 8, 8, 8],
    }
}

fn tiny_run(dir: &Path, count: usize) -> RunConfig {
    let data = synth_generate(count, 32, 9, &dir.join("data")).unwrap();
    let mut cfg = RunConfig::default();
    cfg.merge_str(
        "q_order = 2\ninput_size = 32\nencoder_channels = 4,8,8,8,8\nlr = 1e-3\nseed = 5\n",
    )
    .unwrap();
    cfg.data_index = data;
    cfg.out_dir = dir.join("run");
    cfg
}

#[test]
fn checkpoint_round_trip_and_order_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.osgn");
    let model = OSegNetModel::build(tiny_model(3), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    save_checkpoint(&model, &path).unwrap();
    assert_eq!(load_checkpoint(&path, &tiny_model(3)).unwrap(), model);

    let err = load_checkpoint(&path, &tiny_model(2)).unwrap_err();
    match err {
        Error::Checkpoint(CheckpointError::ShapeMismatch {
            name,
            found,
            expected,
        }) => {
            assert_eq!(name, "decoder.block1.kernel");
            assert_eq!(found[0], 8 * 3);
            assert_eq!(expected[0], 8 * 2);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path(), 10);
    let index = load_index(&cfg.data_index).unwrap();
    let train = load_split(&index, Split::Train, 32).unwrap();
    let path = dir.path().join("last.osgn");

    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    trainer.save(&path).unwrap();
    let good = trainer.model.clone();
    for (_, t) in trainer.model.parameters_mut() {
        t.data_mut().fill(f32::NAN);
    }
    let err = trainer.run_epoch(&train).unwrap_err();
    assert!(
        matches!(err, Error::NonFiniteLoss { epoch: 1, batch: 1 }),
        "{err}"
    );
    assert_eq!(trainer.epoch, 0);
    assert_eq!(load_checkpoint(&path, &cfg.model()).unwrap(), good);
}

#[test]
fn train_run_logs_every_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run(dir.path(), 10);
    cfg.epochs = 2;
    let index = load_index(&cfg.data_index).unwrap();
    let outcome = train_run(&cfg, &index, false).unwrap();
    assert_eq!(outcome.logs.len(), 2);
    assert!(outcome.logs.iter().all(|l| l.mean_loss.is_finite()));
    assert_eq!(outcome.checkpoint, cfg.out_dir.join(CHECKPOINT_FILE));
    let log = std::fs::read_to_string(cfg.out_dir.join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 3);
    let loaded = load_checkpoint(&outcome.checkpoint, &cfg.model()).unwrap();
    assert_eq!(loaded, outcome.trainer.model);

    let test = load_split(&index, Split::Test, 32).unwrap();
    let report = evaluate(&loaded, &test, 0.5).unwrap();
    assert_eq!(report.pixel.0.total(), (test.len() * 32 * 32) as u64);
    assert_eq!(report.detection.0.total(), test.len() as u64);
}

#[test]
fn ground_truth_as_prediction_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path(), 40);
    let index = load_index(&cfg.data_index).unwrap();
    let test = load_split(&index, Split::Test, 32).unwrap();
    let mut eval = Evaluation::new();
    for s in &test {
        let gt = s.mask.to_binary_tensor();
        eval.record(&gt, &gt, 0.5).unwrap();
    }
    let report = eval.report().unwrap();
    for m in [&report.pixel.1, &report.detection.1] {
        assert_eq!(m.accuracy, 1.0);
        if m.undefined.is_empty() {
            assert_eq!(
                (m.sensitivity, m.specificity, m.f1, m.f2),
                (1.0, 1.0, 1.0, 1.0)
            );
        }
    }
}

#[test]
fn all_zero_predictor_detects_nothing() {
    let mut eval = Evaluation::new();
    for positive in [true, false, true, false, false] {
        let mut gt = Tensor::zeros(&[1, 1, 4, 4]);
        if positive {
            gt.data_mut()[5] = 1.0;
        }
        eval.record(&Tensor::zeros(&[1, 1, 4, 4]), &gt, 0.5)
            .unwrap();
    }
    let report = eval.report().unwrap();
    let (counts, m) = &report.detection;
    assert_eq!((counts.tp, counts.fp, counts.tn, counts.fn_), (0, 0, 3, 2));
    assert_eq!(m.sensitivity, 0.0);
    assert_eq!(m.specificity, 1.0);
    assert!(m.undefined.contains(&"precision"));
}

#[test]
fn table_row_prints_percentages() {
    let m = MetricsReport {
        sensitivity: 0.9735,
        specificity: 0.9965,
        precision: 0.81234,
        accuracy: 0.99,
        f1: 0.5,
        f2: 0.123449,
        undefined: vec![],
    };
    let table = render_table_row("Q=3", &m);
    let row = table.lines().nth(1).unwrap();
    let cells: Vec<&str> = row.split_whitespace().collect();
    assert_eq!(
        cells,
        ["Q=3", "97.35", "99.65", "81.23", "50.00", "12.34", "99.00"]
    );
}
