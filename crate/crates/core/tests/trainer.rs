use causal_rul::dataset::{Dataset, Experiment};
use causal_rul::gradcore::{Parameters, Tensor};
use causal_rul::models::{init_params, predict, ModelConfig, ModelKind};
use causal_rul::prob::{fit_moments, nll, GammaParams};
use causal_rul::rng::stream;
use causal_rul::sampler::{eval_graphs, sample_at, CausalSample, SamplerConfig};
use causal_rul::trainer::{
    adam_step, batch_gradient, evaluate, lr_at, report_from_predictions, train, train_from, AdamState, StopReason,
    TrainConfig, TrainRun,
};
use rand::Rng;

const LEN: usize = 16;

fn model_cfg() -> ModelConfig {
    ModelConfig {
        segment_len: LEN,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// Observations every `spacing` seconds whose noise level grows towards
/// failure.
fn toy_experiment(id: &str, n: usize, spacing: f64, failure: f64, seed: u64) -> Experiment {
    let mut rng = stream(seed, &[]);
    let times: Vec<f64> = (0..n).map(|k| k as f64 * spacing).collect();
    let segments = times
        .iter()
        .map(|t| {
            let level = 0.1 + t / failure;
            let data = (0..LEN).map(|_| level * rng.random_range(-1.0..1.0)).collect();
            Tensor::new(vec![1, LEN], data).unwrap()
        })
        .collect();
    Experiment::new(id, "toy", times, segments, failure, None).unwrap()
}

fn toy_dataset(n_exp: usize, n_obs: usize) -> Dataset {
    let train = (0..n_exp)
        .map(|i| toy_experiment(&format!("t{i}"), n_obs, 100.0, 100.0 * n_obs as f64 + 50.0 * i as f64, i as u64))
        .collect();
    let test = vec![toy_experiment("x0", n_obs, 100.0, 100.0 * n_obs as f64 + 30.0, 99)];
    Dataset {
        kind: "toy".into(),
        time_scale: 1000.0,
        train,
        test,
    }
}

fn quick_train_cfg() -> TrainConfig {
    TrainConfig {
        max_epochs: 6,
        samples_per_experiment: 8,
        batch_size: 8,
        burn_in: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn constant_target_is_learned() {
    // Every sample has RUL 600 s, i.e. 0.6 in normalised units.
    let experiments: Vec<Experiment> = (0..8).map(|i| toy_experiment(&format!("c{i}"), 1, 100.0, 600.0, i)).collect();
    let cfg = model_cfg();
    let train_cfg = TrainConfig {
        lr: 1e-2,
        max_epochs: 150,
        patience: 150,
        samples_per_experiment: 16,
        ..TrainConfig::default()
    };
    let params = init_params(ModelKind::GnnTcnn, &cfg, 1).unwrap();
    let run = train_from(ModelKind::GnnTcnn, params, &experiments, &cfg, &SamplerConfig::default(), &train_cfg).unwrap();
    assert_eq!(run.stop, StopReason::MaxEpochs);
    let samples: Vec<CausalSample> = experiments
        .iter()
        .map(|e| sample_at(e, 0, &SamplerConfig::default(), 1, &mut stream(0, &[])).unwrap())
        .collect();
    let refs: Vec<&CausalSample> = samples.iter().collect();
    let preds = predict(ModelKind::GnnTcnn, &run.params, &cfg, &refs).unwrap();
    let mean = preds.iter().map(|p| p.stats().mean).sum::<f64>() / preds.len() as f64;
    assert!((mean - 0.6).abs() < 0.05 * 0.6, "fitted mean {mean}");
}

#[test]
fn small_step_decreases_sample_loss() {
    let cfg = model_cfg();
    let exp = toy_experiment("ls", 30, 100.0, 3500.0, 3);
    for kind in [ModelKind::GnnTcnn, ModelKind::LstmTcnn] {
        for seed in 0..4 {
            let params = init_params(kind, &cfg, seed).unwrap();
            let s = sample_at(&exp, 10 + seed as usize, &SamplerConfig::default(), 5, &mut stream(seed, &[])).unwrap();
            let loss = |p: &Parameters| nll(&predict(kind, p, &cfg, &[&s]).unwrap(), &[s.target / cfg.time_scale]).unwrap();
            let (value, grads) = batch_gradient(kind, &params, &cfg, &[&s], 0, &[]).unwrap();
            assert!((value - loss(&params)).abs() < 1e-12);

            let mut adam = params.clone();
            adam_step(&mut adam, &grads, &mut AdamState::new(&params), 1e-5).unwrap();
            assert!(loss(&adam) < value, "{kind} seed {seed}: Adam step");

            let mut sgd = params.clone();
            for (name, t) in sgd.iter_mut() {
                let g = grads.get(name).unwrap();
                t.data_mut().iter_mut().zip(g.data()).for_each(|(w, g)| *w -= 1e-5 * g);
            }
            assert!(loss(&sgd) < value, "{kind} seed {seed}: gradient step");
        }
    }
}

#[test]
fn oracle_predictions_beat_constant_predictor() {
    let data = toy_dataset(3, 40);
    let sampler = SamplerConfig::default();
    let samples: Vec<CausalSample> = data
        .test
        .iter()
        .flat_map(|e| eval_graphs(e, &sampler, 1, 0).unwrap())
        .collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.target / data.time_scale).collect();
    let oracle: Vec<GammaParams> = ys.iter().map(|&y| GammaParams::new(1e4, 1e4 / y).unwrap()).collect();
    let train_ys: Vec<f64> = data
        .train
        .iter()
        .flat_map(|e| (0..e.len()).map(|k| e.rul(k) / data.time_scale).collect::<Vec<_>>())
        .collect();
    let constant = vec![fit_moments(&train_ys).unwrap(); ys.len()];
    let a = report_from_predictions(&samples, &oracle, data.time_scale).unwrap();
    let b = report_from_predictions(&samples, &constant, data.time_scale).unwrap();
    assert!(a.aggregate_nll < b.aggregate_nll);
    assert!(a.rows.iter().zip(&b.rows).all(|(x, y)| x.nll < y.nll));
}

#[test]
fn report_rows_and_aggregate() {
    let data = toy_dataset(2, 25);
    let cfg = model_cfg();
    let params = init_params(ModelKind::GnnTcnn, &cfg, 2).unwrap();
    let exps: Vec<Experiment> = data.train.iter().chain(&data.test).cloned().collect();
    let report = evaluate(ModelKind::GnnTcnn, &params, &cfg, &exps, &SamplerConfig::default(), 10, 0).unwrap();
    let anchors: usize = exps.iter().map(|e| (0..e.len()).filter(|&k| e.rul(k) > 0.0).count()).sum();
    assert_eq!(report.rows.len(), anchors);
    assert_eq!(report.experiments.len(), exps.len());
    let weighted: f64 = report.experiments.iter().map(|e| e.mean_nll * e.n as f64).sum::<f64>()
        / report.experiments.iter().map(|e| e.n).sum::<usize>() as f64;
    assert!((weighted - report.aggregate_nll).abs() < 1e-12);
    for r in &report.rows {
        assert!(r.q05 < r.q50 && r.q50 < r.q95);
        assert!((r.mean - r.alpha / r.beta * cfg.time_scale).abs() < 1e-9);
        assert!(r.n_nodes <= 10);
    }
    let again = evaluate(ModelKind::GnnTcnn, &params, &cfg, &exps, &SamplerConfig::default(), 10, 0).unwrap();
    assert_eq!(report, again);
}

fn assert_stopped_after_patience(run: &TrainRun, patience: usize) {
    assert_eq!(run.stop, StopReason::EarlyStopped);
    let best = run.best_epoch.unwrap();
    let last = run.history.last().unwrap();
    assert_eq!(last.epoch, best + patience);
    let best_val = run.history[best].val_nll;
    assert!(run.history[best + 1..].iter().all(|h| h.val_nll >= best_val));
    assert!(run.history[..best].iter().all(|h| h.val_nll > best_val));
}

#[test]
fn early_stopping_waits_exactly_patience_epochs() {
    let data = toy_dataset(3, 30);
    // Steps this small leave every parameter unchanged, so the validation
    // loss is flat and epoch 0 stays best.
    let frozen = TrainConfig {
        lr: 1e-300,
        patience: 3,
        max_epochs: 60,
        ..quick_train_cfg()
    };
    let run = train(ModelKind::GnnTcnn, &data, &model_cfg(), &SamplerConfig::default(), &frozen).unwrap();
    assert_stopped_after_patience(&run, 3);
    assert_eq!(run.best_epoch, Some(0));

    let fast = TrainConfig {
        lr: 0.05,
        patience: 4,
        max_epochs: 80,
        ..quick_train_cfg()
    };
    let run = train(ModelKind::GnnTcnn, &data, &model_cfg(), &SamplerConfig::default(), &fast).unwrap();
    assert_stopped_after_patience(&run, 4);
}

#[test]
fn history_follows_schedules() {
    let data = toy_dataset(2, 30);
    let train_cfg = quick_train_cfg();
    let run = train(ModelKind::LstmTcnn, &data, &model_cfg(), &SamplerConfig::default(), &train_cfg).unwrap();
    assert_eq!(run.history.len(), train_cfg.max_epochs);
    for (e, h) in run.history.iter().enumerate() {
        assert_eq!(h.epoch, e);
        assert_eq!(h.lr, lr_at(e, &train_cfg));
        assert_eq!(h.n_past, [1, 2, 5, 10][e % 4]);
        assert!(h.train_nll.is_finite() && h.val_nll.is_finite());
    }
}

#[test]
fn training_is_reproducible_across_thread_counts() {
    let data = toy_dataset(3, 30);
    let cfg = ModelConfig {
        dropout: 0.2,
        ..model_cfg()
    };
    let run_with = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train(ModelKind::GnnTcnn, &data, &cfg, &SamplerConfig::default(), &quick_train_cfg()).unwrap())
    };
    let a = run_with(1);
    let b = run_with(1);
    let c = run_with(3);
    assert_eq!(a.params, b.params);
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, c.params);
    assert_eq!(a.history, c.history);
}

#[test]
fn non_finite_parameters_abort_training() {
    let data = toy_dataset(2, 20);
    let cfg = model_cfg();
    let mut params = init_params(ModelKind::GnnTcnn, &cfg, 0).unwrap();
    params.get_mut("head_alpha.l2.b").unwrap().data_mut()[0] = f64::NAN;
    let run = train_from(ModelKind::GnnTcnn, params.clone(), &data.train, &cfg, &SamplerConfig::default(), &quick_train_cfg())
        .unwrap();
    assert!(matches!(run.stop, StopReason::NonFinite(_)));
    assert!(run.history.is_empty());
    assert!(run.best_epoch.is_none());
}

#[test]
fn empty_training_set_is_rejected() {
    let cfg = model_cfg();
    let params = init_params(ModelKind::GnnTcnn, &cfg, 0).unwrap();
    assert!(train_from(ModelKind::GnnTcnn, params, &[], &cfg, &SamplerConfig::default(), &quick_train_cfg()).is_err());
}
