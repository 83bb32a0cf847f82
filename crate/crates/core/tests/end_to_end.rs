use flowsculpt::datasets::{random_target_sequence, Dataset, DatasetKind, GenSpec};
use flowsculpt::inference::{run_pipeline, InferenceConfig, Mode, Models};
use flowsculpt::metrics::{eval_report, pmr, Method};
use flowsculpt::nn::{evaluate, train, Checkpoint, TrainConfig, TrainMeta};
use flowsculpt::{Apn, ChannelSpec, Itn, MapGenParams, PillarLibrary, PillarSequence};

fn library() -> PillarLibrary {
    PillarLibrary::build(ChannelSpec::new(12, 100, 0.25).unwrap(), &MapGenParams::default()).unwrap()
}

#[test]
fn library_file_round_trip_renders_identically() {
    let lib = library();
    let back = PillarLibrary::from_bytes(&lib.to_bytes(), 0.25).unwrap();
    let seq = PillarSequence::from(vec![1, 12, 27, 32]);
    assert_eq!(lib.render(&seq).unwrap(), back.render(&seq).unwrap());
}

#[test]
fn dataset_generation_is_thread_count_independent() {
    let lib = library();
    let spec = GenSpec::new(DatasetKind::ApnC, 24, 11);
    let one = Dataset::generate(&spec, &lib, 1).unwrap();
    let four = Dataset::generate(&spec, &lib, 4).unwrap();
    assert_eq!(one.to_bytes(), four.to_bytes());
    assert_eq!(Dataset::from_bytes(&one.to_bytes()).unwrap(), one);
}

#[test]
fn short_training_run_feeds_the_pipeline() {
    let lib = library();
    let train_set = Dataset::generate(&GenSpec::new(DatasetKind::Apn, 200, 1), &lib, 1).unwrap();
    let valid_set = Dataset::generate(&GenSpec::new(DatasetKind::Apn, 50, 2), &lib, 1).unwrap();
    let mut net = Apn::new(lib.channel(), 3).unwrap().into_network();
    let config = TrainConfig {
        max_epochs: 2,
        seed: 4,
        ..TrainConfig::default()
    };
    let hist = train(&mut net, &train_set, &valid_set, &config, |_| {}).unwrap();
    assert!(!hist.epochs.is_empty() && hist.epochs.len() <= 2);
    let eval = evaluate(&net, &valid_set, 100).unwrap();
    assert!((eval.loss - hist.best_valid_loss).abs() < 1e-9);

    let meta = TrainMeta {
        epochs: hist.epochs.len() as u32,
        best_valid: hist.best_valid_loss,
        seed: 4,
    };
    let bytes = Checkpoint::new(net, meta).to_bytes();
    let apn = Apn::from_network(Checkpoint::<f64>::from_bytes(&bytes).unwrap().network).unwrap();
    assert!(Itn::from_network(Checkpoint::<f64>::from_bytes(&bytes).unwrap().network).is_err());

    let target = lib.render(&random_target_sequence(9, 0, 3)).unwrap();
    let models = Models {
        apn: Some(&apn),
        ..Models::default()
    };
    let config = InferenceConfig::with_mode(Mode::ApnOnly);
    let r = run_pipeline(&target, &lib, models, &config).unwrap();
    assert!(r.trace.steps.len() <= config.max_steps_total);
    let start: f64 = pmr(&lib.initial_shape(), &target).unwrap();
    assert!(r.pmr >= start);
    assert_eq!(run_pipeline(&target, &lib, models, &config).unwrap(), r);
}

#[test]
fn eval_report_scores_the_true_sequence_perfectly() {
    let lib = library();
    let seqs: Vec<PillarSequence> = (0..3).map(|i| random_target_sequence(5, i, 4)).collect();
    let targets: Vec<_> = seqs
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("t{i}"), lib.render(s).unwrap()))
        .collect();
    let truth = |shape: &flowsculpt::FlowShape| {
        let i = targets.iter().position(|(_, t)| t == shape).unwrap();
        Ok(seqs[i].clone())
    };
    let report = eval_report(&targets, &[Method::new("truth", truth)], &lib).unwrap();
    let avg = report.average("truth").unwrap();
    assert_eq!(avg.pmr, 1.0);
    assert!((avg.ssim - 1.0).abs() < 1e-12);
}
