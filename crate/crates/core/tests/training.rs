use squeezetime::checkpoint::Checkpoint;
use squeezetime::data::{self, Dataset};
use squeezetime::error::Error;
use squeezetime::eval::{self, evaluate_multiview};
use squeezetime::model::build_model;
use squeezetime::train::{self, lr_schedule, sgd_step, TrainConfig, Trainer};
use squeezetime::{RunConfig, Tape, Tensor};

fn small_run() -> RunConfig {
    let mut run = RunConfig::toy();
    run.data.spec.per_class = 4;
    run.data.test_per_class = 2;
    run.train.batch_size = 6;
    run.train.epochs = 4;
    run.train.warmup_epochs = 1;
    run
}

fn datasets(run: &RunConfig) -> (Dataset, Dataset) {
    (
        data::generate_dataset(&run.data.train_spec()).unwrap(),
        data::generate_dataset(&run.data.test_spec()).unwrap(),
    )
}

fn bits(t: &Trainer) -> Vec<Vec<u32>> {
    let p = &t.model.params;
    p.tensors()
        .iter()
        .chain(&t.momentum)
        .chain(p.running().iter().flat_map(|r| [&r.mean, &r.var]))
        .map(|x| x.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

#[test]
fn uniform_logits_cost_log_classes() {
    for c in [2usize, 4, 10] {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros(vec![3, c]).unwrap());
        let loss = tape.cross_entropy(z, &[0, 1, c - 1]).unwrap();
        assert!((tape.value(loss).data()[0] - (c as f64).ln()).abs() < 1e-15);
    }
}

#[test]
fn momentum_matches_two_step_recurrence() {
    let cfg = TrainConfig {
        momentum: 0.9,
        weight_decay: 0.01,
        ..TrainConfig::default()
    };
    let p0 = [0.5f64, -1.0];
    let (g1, g2) = ([0.2, 0.4], [-0.3, 0.1]);
    let mut params = vec![Tensor::new(vec![2], p0.to_vec()).unwrap(), Tensor::new(vec![2], p0.to_vec()).unwrap()];
    let mut bufs = vec![Tensor::zeros(vec![2]).unwrap(), Tensor::zeros(vec![2]).unwrap()];
    let decays = [true, false];
    for (g, lr) in [(g1, 0.1), (g2, 0.05)] {
        let grads = vec![Tensor::new(vec![2], g.to_vec()).unwrap(); 2];
        sgd_step(&mut params, &grads, &mut bufs, &decays, lr, &cfg).unwrap();
    }
    for (k, wd) in [(0usize, 0.01), (1, 0.0)] {
        for j in 0..2 {
            let v1 = g1[j] + wd * p0[j];
            let p1 = p0[j] - 0.1 * v1;
            let v2 = 0.9 * v1 + g2[j] + wd * p1;
            let p2 = p1 - 0.05 * v2;
            assert!((params[k].data()[j] - p2).abs() < 1e-15);
            assert!((bufs[k].data()[j] - v2).abs() < 1e-15);
        }
    }
    let bad = vec![Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap(); 2];
    let before = params.clone();
    assert!(matches!(
        sgd_step(&mut params, &bad, &mut bufs, &decays, 0.1, &cfg),
        Err(Error::NonFinite { .. })
    ));
    assert_eq!(params, before);
}

#[test]
fn schedule_warms_up_then_decays_to_zero() {
    let cfg = TrainConfig {
        lr0: 0.2,
        warmup_epochs: 4,
        epochs: 12,
        ..TrainConfig::default()
    };
    let lrs: Vec<f64> = (0..=12).map(|e| lr_schedule(e, &cfg)).collect();
    assert!((lrs[0] - 0.05).abs() < 1e-15 && (lrs[3] - 0.2).abs() < 1e-15);
    assert!((lrs[4] - 0.2).abs() < 1e-15);
    assert!((lrs[8] - 0.1).abs() < 1e-12);
    assert!(lrs[12].abs() < 1e-15);
    assert!(lrs[4..].windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn zero_epochs_return_the_initial_model() {
    let mut run = small_run();
    run.train.epochs = 0;
    run.train.warmup_epochs = 0;
    let (train_set, _) = datasets(&run);
    let (history, model) = train::train(&run, &train_set).unwrap();
    assert!(history.is_empty());
    let init = build_model::<f32>(&run.model, run.train.seed).unwrap();
    assert_eq!(model.params.tensors(), init.params.tensors());
}

#[test]
fn training_is_deterministic() {
    let run = small_run();
    let (train_set, _) = datasets(&run);
    let mut a = Trainer::new(run.clone()).unwrap();
    let mut b = Trainer::new(run.clone()).unwrap();
    a.train_until(&train_set, 2).unwrap();
    b.train_until(&train_set, 2).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(bits(&a), bits(&b));
    assert!(a.history.iter().all(|h| h.loss.is_finite()));

    let mut other = run;
    other.train.seed += 1;
    let mut c = Trainer::new(other).unwrap();
    c.train_until(&train_set, 2).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn resume_from_checkpoint_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = small_run();
    run.checkpoint_dir = Some(dir.path().to_path_buf());
    let (train_set, _) = datasets(&run);

    let mut straight = Trainer::new(run.clone()).unwrap();
    straight.train_until(&train_set, run.train.epochs).unwrap();

    let path = train::checkpoint_path(dir.path(), 2);
    let ckpt = Checkpoint::load(&path).unwrap();
    assert_eq!(ckpt.epoch, 2);
    assert_eq!(ckpt.history, straight.history[..2]);
    let mut resumed = Trainer::from_checkpoint(ckpt).unwrap();
    resumed.run.checkpoint_dir = None;
    resumed.train_until(&train_set, run.train.epochs).unwrap();
    assert_eq!(resumed.history, straight.history);
    assert_eq!(bits(&resumed), bits(&straight));
}

#[test]
fn checkpoint_file_roundtrip_and_rejects_damage() {
    let run = small_run();
    let (train_set, _) = datasets(&run);
    let mut t = Trainer::new(run).unwrap();
    t.run_epoch(&train_set).unwrap();
    let ckpt = t.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.sqzt");
    ckpt.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(Checkpoint::load(&path).is_err());
    let mut extra = bytes;
    extra.push(1);
    std::fs::write(&path, &extra).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let mut run = small_run();
    run.train.lr0 = 1e30;
    let (train_set, _) = datasets(&run);
    let mut t = Trainer::new(run).unwrap();
    let err = (0..4).find_map(|_| t.run_epoch(&train_set).err()).expect("training should diverge");
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
}

#[test]
fn evaluation_is_order_and_thread_invariant() {
    let run = small_run();
    let (train_set, test_set) = datasets(&run);
    let mut t = Trainer::new(run.clone()).unwrap();
    t.run_epoch(&train_set).unwrap();
    let model = t.into_model();
    let views = run.data.views(run.model.frames, run.model.input_resolution);
    let scores = eval::score_dataset(&model, &test_set, &views, None).unwrap();
    let serial = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| eval::score_dataset(&model, &test_set, &views, None).unwrap());
    assert_eq!(scores, serial);

    let mut reversed = test_set.clone();
    reversed.records.reverse();
    let back = eval::score_dataset(&model, &reversed, &views, None).unwrap();
    assert!(scores.iter().zip(back.iter().rev()).all(|(a, b)| a == b));

    let res = evaluate_multiview(&model, &test_set, &views, None).unwrap();
    assert_eq!(res.samples, test_set.len());
    assert!((0.0..=1.0).contains(&res.top1) && res.top5 == 1.0);
    for s in &scores {
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
