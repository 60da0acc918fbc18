use gma_core::checkpoint::Checkpoint;
use gma_core::data::{TaskKind, TaskSpec};
use gma_core::model::ModelConfig;
use gma_core::params::ParamStore;
use gma_core::training::{
    adam_step, evaluate, lr_schedule, metrics_csv, split_corpus, train, AdamParams, AdamState,
    TrainConfig,
};
use gma_core::{Error, Tensor};

fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        ..ModelConfig::default()
    }
}

fn small_task() -> TaskSpec {
    TaskSpec {
        kind: TaskKind::Reverse,
        max_len: 6,
        corpus_size: 60,
        ..TaskSpec::default()
    }
}

fn short() -> TrainConfig {
    TrainConfig {
        steps: 30,
        warmup_steps: 10,
        batch_size: 8,
        heldout_size: 10,
        eval_every: 10,
        analysis_metrics: true,
        ..TrainConfig::default()
    }
}

#[test]
fn equal_seeds_give_identical_logs() {
    let a = train(&small_model(), &small_task(), &short()).unwrap();
    let b = train(&small_model(), &small_task(), &short()).unwrap();
    assert_eq!(metrics_csv(&a.metrics, true), metrics_csv(&b.metrics, true));
    assert_eq!(a.train_losses, b.train_losses);
    assert_eq!(
        a.metrics.iter().map(|r| r.step).collect::<Vec<_>>(),
        vec![0, 10, 20, 30]
    );
    let c = train(
        &small_model(),
        &small_task(),
        &TrainConfig { seed: 2, ..short() },
    )
    .unwrap();
    assert_ne!(a.train_losses, c.train_losses);
}

#[test]
fn checkpoint_reproduces_heldout_loss_bit_for_bit() {
    let out = train(&small_model(), &small_task(), &short()).unwrap();
    let (_, heldout) = split_corpus(&small_task(), short().heldout_size).unwrap();
    let before = evaluate(&out.model, &heldout, true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    Checkpoint::new(&out.model, Some(&out.adam), out.step)
        .save(&p)
        .unwrap();
    let loaded = Checkpoint::load(&p).unwrap();
    assert_eq!(loaded.step, 30);
    assert_eq!(loaded.adam.as_ref(), Some(&out.adam));
    let after = evaluate(&loaded.model().unwrap(), &heldout, true).unwrap();
    assert_eq!(before.loss.to_bits(), after.loss.to_bits());
    assert_eq!(before, after);
}

#[test]
fn copy_loss_halves_within_500_steps() {
    let cfg = TrainConfig {
        steps: 500,
        eval_every: 100,
        ..TrainConfig::default()
    };
    let out = train(&ModelConfig::default(), &TaskSpec::default(), &cfg).unwrap();
    let initial = out.metrics[0].loss;
    let best = out
        .metrics
        .iter()
        .map(|r| r.loss)
        .fold(f64::INFINITY, f64::min);
    assert!(best <= 0.5 * initial, "held-out loss {initial} -> {best}");
}

#[test]
fn schedule_is_monotone_on_each_side_of_warmup() {
    let (d, w) = (64, 400);
    for s in 1..w {
        assert!(lr_schedule(s + 1, d, w) >= lr_schedule(s, d, w));
    }
    for s in w..3 * w {
        assert!(lr_schedule(s + 1, d, w) <= lr_schedule(s, d, w));
    }
}

#[test]
fn adam_refuses_non_finite_gradients() {
    let mut store = ParamStore::new();
    store
        .insert("enc.1.w", Tensor::from_vec(vec![1.0, 2.0]))
        .unwrap();
    let mut st = AdamState::new(&store);
    let err = adam_step(
        &mut store,
        &[vec![0.1, f64::NAN]],
        &mut st,
        0.1,
        AdamParams::default(),
    )
    .unwrap_err();
    match err {
        Error::NonFiniteGradient { param, .. } => assert_eq!(param, "enc.1.w"),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(st.t, 0);
    assert_eq!(store.get("enc.1.w").unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn incompatible_task_is_rejected() {
    let task = TaskSpec {
        vocab_size: 40,
        ..TaskSpec::default()
    };
    assert!(train(&small_model(), &task, &short()).is_err());
    let long = TaskSpec {
        kind: TaskKind::Expand(0.5),
        max_len: 20,
        ..TaskSpec::default()
    };
    assert!(train(&small_model(), &long, &short()).is_err());
}
