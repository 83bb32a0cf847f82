//! End-to-end acceptance suite (custom harness). Runs every criterion in
//! order, prints one PASS/FAIL line each and exits non-zero if any failed.
//!
//! Set FLOWSCULPT_ACCEPTANCE_CACHE to a directory to reuse trained models
//! between runs. FLOWSCULPT_ACCEPTANCE_ONLY=1,4,9 runs a subset; skipped
//! criteria count as failures.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flowsculpt::datasets::{random_target_sequence, Dataset, DatasetKind, GenSpec, Preset};
use flowsculpt::forward::{mirror_index, NUM_CLASSES};
use flowsculpt::inference::{run_pipeline, InferenceConfig, Mode, Models, Stage};
use flowsculpt::metrics::{eval_report, median, perimetric_complexity, pmr, ssim, Method, SsimParams};
use flowsculpt::models::{ApnCModel, ApnModel, ItnModel, SmcModel};
use flowsculpt::nn::{
    evaluate, grad_check, train, Activation, Checkpoint, LayerSpec, Loss, Network, Targets, Tensor, TrainConfig, TrainMeta,
};
use flowsculpt::{FlowShape, MapGenParams, PillarLibrary, PillarSequence};

type Outcome = Result<String, String>;

const APN_EPOCHS: usize = 20;
const SMC_EPOCHS: usize = 20;
const ITN_EPOCHS: usize = 20;
const PATIENCE: usize = 10;

// dataset seeds: train, validation, held-out test
const APN_SEEDS: (u64, u64, u64) = (101, 102, 103);
const ITN_SEEDS: (u64, u64, u64) = (201, 202, 203);
const SMC_SEEDS: (u64, u64) = (301, 302);
const TRAIN_SEED: u64 = 7;
const ORACLE_TARGET_SEED: u64 = 401;
const TREND_TARGET_SEED: u64 = 501;

fn library() -> PillarLibrary {
    let channel = flowsculpt::ChannelSpec::new(12, 100, 0.25).unwrap();
    PillarLibrary::build(channel, &MapGenParams::default()).unwrap()
}

fn threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn dataset(kind: DatasetKind, count: usize, seed: u64, lib: &PillarLibrary) -> Dataset {
    Dataset::generate(&GenSpec::new(kind, count, seed), lib, threads()).unwrap()
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os("FLOWSCULPT_ACCEPTANCE_CACHE").map(PathBuf::from)
}

/// Trains `net` (or reloads a cached copy) and returns it.
fn trained(name: &str, mut net: Network<f32>, train_set: &Dataset, valid_set: &Dataset, epochs: usize) -> Network<f32> {
    let cached = cache_dir().map(|d| d.join(format!("{name}.fsnn")));
    if let Some(p) = cached.as_ref().filter(|p| p.exists()) {
        return Checkpoint::<f32>::load(p).unwrap().network;
    }
    let config = TrainConfig {
        learning_rate: 0.01,
        batch_size: 50,
        max_epochs: epochs,
        patience: PATIENCE,
        seed: TRAIN_SEED,
    };
    let started = Instant::now();
    let hist = train(&mut net, train_set, valid_set, &config, |r| {
        eprintln!(
            "  [{name}] epoch {} train {:.4} valid {:.4} acc {:?} ({:.0}s)",
            r.epoch,
            r.train_loss,
            r.valid_loss,
            r.valid_accuracy,
            started.elapsed().as_secs_f64()
        );
    })
    .unwrap();
    if let Some(p) = cached {
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        let meta = TrainMeta {
            epochs: hist.epochs.len() as u32,
            best_valid: hist.best_valid_loss,
            seed: TRAIN_SEED,
        };
        Checkpoint::new(net.clone(), meta).save(&p).unwrap();
    }
    net
}

struct Suite {
    lib: PillarLibrary,
    apn: Option<ApnModel<f32>>,
    itn: Option<ItnModel<f32>>,
}

// ---------------------------------------------------------------- 1

fn forward_exactness() -> Outcome {
    let started = Instant::now();
    let lib = library();
    ensure(
        lib.render(&PillarSequence::new()).map_err(|e| e.to_string())? == lib.initial_shape(),
        || "empty render differs from the stripe".into(),
    )?;
    let singles: Vec<FlowShape> = (1..=NUM_CLASSES)
        .map(|k| lib.render(&PillarSequence::from(vec![k])).unwrap())
        .collect();
    for k in 1..=NUM_CLASSES {
        let m = mirror_index(k).unwrap();
        ensure(singles[m - 1] == singles[k - 1].mirror_columns(), || {
            format!("pillar {k} and its mirror {m} disagree")
        })?;
    }
    for a in 0..NUM_CLASSES {
        for b in a + 1..NUM_CLASSES {
            ensure(singles[a] != singles[b], || {
                format!("pillars {} and {} render identically", a + 1, b + 1)
            })?;
        }
    }
    let t = started.elapsed();
    ensure(t < Duration::from_secs(5), || format!("took {t:?}"))?;
    Ok(format!("32 mirror pairs, 496 distinct pairs, {:.2}s", t.as_secs_f64()))
}

// ---------------------------------------------------------------- 2

const GC_INSTANCES: u64 = 20;
const GC_TOL: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Distinct values on a 0.05 grid, away from zero, so no max or kink flips under ±ε.
fn spaced(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let data = order.iter().map(|&k| (k as f64 - (n / 2) as f64 + 0.5) * 0.05).collect();
    Tensor::new(shape, data).unwrap()
}

fn targets_for(rng: &mut ChaCha8Rng, net: &Network<f64>, batch: usize) -> Targets<f64> {
    match net.loss_kind() {
        Loss::Mse => {
            let mut shape = vec![batch];
            shape.extend_from_slice(net.output_shape());
            Targets::Values(uniform(rng, shape, 1.0))
        }
        loss => {
            let heads = loss.heads();
            let classes = net.output_shape().iter().product::<usize>() / heads;
            Targets::Labels((0..batch * heads).map(|_| rng.gen_range(1..=classes)).collect())
        }
    }
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    fn tanh() -> LayerSpec {
        LayerSpec::Activation(Activation::Tanh)
    }
    type Case = (
        &'static str,
        Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<usize>, Vec<LayerSpec>, Loss, bool)>,
    );
    let cases: Vec<Case> = vec![
        (
            "conv/mse",
            Box::new(|r| {
                let (c, h, w) = (r.gen_range(1..=3), r.gen_range(3..=6), r.gen_range(3..=7));
                let spec = LayerSpec::Conv2dValid {
                    kernels: r.gen_range(1..=3),
                    kh: r.gen_range(1..=3.min(h)),
                    kw: r.gen_range(1..=3.min(w)),
                };
                (vec![c, h, w], vec![spec, LayerSpec::Flatten], Loss::Mse, false)
            }),
        ),
        (
            "pool/mse",
            Box::new(|r| {
                let dims = vec![r.gen_range(1..=2), r.gen_range(2..=5), r.gen_range(2..=5)];
                (dims, vec![LayerSpec::MaxPool2x2, LayerSpec::Flatten], Loss::Mse, true)
            }),
        ),
        (
            "dense/mse",
            Box::new(|r| {
                (
                    vec![r.gen_range(2..=6)],
                    vec![LayerSpec::Dense {
                        units: r.gen_range(1..=5),
                    }],
                    Loss::Mse,
                    false,
                )
            }),
        ),
        (
            "sigmoid/mse",
            Box::new(|r| {
                (
                    vec![r.gen_range(2..=6)],
                    vec![LayerSpec::Activation(Activation::Sigmoid)],
                    Loss::Mse,
                    true,
                )
            }),
        ),
        (
            "tanh/mse",
            Box::new(|r| (vec![r.gen_range(2..=6)], vec![tanh()], Loss::Mse, true)),
        ),
        (
            "relu/mse",
            Box::new(|r| {
                (
                    vec![r.gen_range(2..=6)],
                    vec![LayerSpec::Activation(Activation::Relu)],
                    Loss::Mse,
                    true,
                )
            }),
        ),
        (
            "softmax/mse",
            Box::new(|r| {
                let g = r.gen_range(1..=3);
                let c = r.gen_range(2..=5);
                (
                    vec![2, g * c],
                    vec![LayerSpec::Flatten, LayerSpec::Softmax { groups: g }],
                    Loss::Mse,
                    false,
                )
            }),
        ),
        (
            "dense+softmax/nll",
            Box::new(|r| {
                let c = r.gen_range(2..=5);
                (
                    vec![4],
                    vec![LayerSpec::Dense { units: c }, LayerSpec::Softmax { groups: 1 }],
                    Loss::Nll,
                    false,
                )
            }),
        ),
        (
            "dense+softmax/summed-nll",
            Box::new(|r| {
                let (g, c) = (r.gen_range(1..=3), r.gen_range(2..=5));
                (
                    vec![4],
                    vec![LayerSpec::Dense { units: g * c }, LayerSpec::Softmax { groups: g }],
                    Loss::SummedNll(g),
                    false,
                )
            }),
        ),
        (
            "towers/nll",
            Box::new(move |_| {
                let tower = vec![
                    LayerSpec::Conv2dValid {
                        kernels: 2,
                        kh: 2,
                        kw: 2,
                    },
                    tanh(),
                    LayerSpec::Flatten,
                ];
                let specs = vec![
                    LayerSpec::ConcatTowers(vec![tower.clone(), tower]),
                    LayerSpec::Dense { units: 3 },
                    LayerSpec::Softmax { groups: 1 },
                ];
                (vec![2, 3, 4], specs, Loss::Nll, false)
            }),
        ),
        (
            "conv-stack/nll",
            Box::new(move |_| {
                let specs = vec![
                    LayerSpec::Conv2dValid {
                        kernels: 2,
                        kh: 3,
                        kw: 3,
                    },
                    tanh(),
                    LayerSpec::MaxPool2x2,
                    LayerSpec::Flatten,
                    LayerSpec::Dense { units: 4 },
                    tanh(),
                    LayerSpec::Dense { units: 3 },
                    LayerSpec::Softmax { groups: 1 },
                ];
                (vec![1, 7, 8], specs, Loss::Nll, false)
            }),
        ),
    ];
    let mut worst = (0.0f64, "");
    let mut checked = 0;
    for (name, make) in &cases {
        for seed in 0..GC_INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let (input, specs, loss, use_spaced) = make(&mut rng);
            let net = Network::<f64>::new("gc", &input, &specs, loss, seed).map_err(|e| format!("{name}: {e}"))?;
            let mut shape = vec![2];
            shape.extend_from_slice(&input);
            let x = if use_spaced {
                spaced(&mut rng, shape)
            } else {
                uniform(&mut rng, shape, 1.0)
            };
            let t = targets_for(&mut rng, &net, 2);
            let r = grad_check(&net, &x, &t, 1e-3, 1, true).map_err(|e| format!("{name}: {e}"))?;
            ensure(r.max_relative_error < GC_TOL, || {
                format!("{name} seed {seed}: relative error {:.3e}", r.max_relative_error)
            })?;
            if r.max_relative_error > worst.0 {
                worst = (r.max_relative_error, name);
            }
            checked += 1;
        }
    }
    let t = started.elapsed();
    ensure(t < Duration::from_secs(120), || format!("took {t:?}"))?;
    Ok(format!(
        "{checked} instances, worst {:.2e} ({}), {:.1}s",
        worst.0,
        worst.1,
        t.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 3

fn oracle_recovery(s: &Suite) -> Outcome {
    let config = InferenceConfig::with_mode(Mode::Oracle);
    let none = Models::<f64>::default();
    for k in 1..=NUM_CLASSES {
        let target = s.lib.render(&PillarSequence::from(vec![k])).unwrap();
        let r = run_pipeline(&target, &s.lib, none, &config).map_err(|e| e.to_string())?;
        ensure(r.pmr == 1.0, || format!("single pillar {k}: PMR {}", r.pmr))?;
    }
    let mut scores = Vec::new();
    let mut slowest = Duration::ZERO;
    for i in 0..20 {
        let target = s.lib.render(&random_target_sequence(ORACLE_TARGET_SEED, i, 5)).unwrap();
        let started = Instant::now();
        let r = run_pipeline(&target, &s.lib, none, &config).map_err(|e| e.to_string())?;
        slowest = slowest.max(started.elapsed());
        scores.push(r.pmr);
    }
    let med = median(&scores).unwrap();
    ensure(slowest < Duration::from_secs(60), || {
        format!("slowest target took {slowest:?}")
    })?;
    ensure(med >= 0.85, || format!("median PMR {med:.4} on 5-pillar targets"))?;
    Ok(format!(
        "32/32 single pillars exact; 5-pillar median PMR {med:.4}, slowest {:.2}s",
        slowest.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 4

fn metric_oracles() -> Outcome {
    let a = FlowShape::from_fn(12, 100, |r, c| (r * 7 + c * 3) % 5 < 2);
    let mut b = a.clone();
    let mut flipped = 0;
    for i in (0..1200).step_by(20) {
        b.set(i / 100, i % 100, !a.get(i / 100, i % 100));
        flipped += 1;
    }
    let p: f64 = pmr(&a, &b).map_err(|e| e.to_string())?;
    ensure(flipped == 60 && p == 1.0 - 60.0 / 1200.0, || {
        format!("60-pixel mismatch PMR {p}")
    })?;

    let full = FlowShape::full(12, 100);
    let c = perimetric_complexity::<f64>(&full).map_err(|e| e.to_string())?;
    let expected = 224.0f64.powi(2) / (4.0 * std::f64::consts::PI * 1200.0);
    ensure(c.perimeter == 224 && c.area == 1200, || {
        format!("P {} A {}", c.perimeter, c.area)
    })?;
    ensure(
        (c.complexity - expected).abs() <= 1e-6 && (c.complexity - 3.327).abs() < 5e-4,
        || format!("C = {}", c.complexity),
    )?;

    let params = SsimParams::<f64>::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_self = 0.0f64;
    for _ in 0..20 {
        let x = FlowShape::from_fn(12, 100, |_, _| rng.gen_bool(0.3));
        let v = ssim(&x, &x, &params).map_err(|e| e.to_string())?;
        worst_self = worst_self.max((v - 1.0).abs());
    }
    ensure(worst_self <= 1e-12, || format!("ssim(a,a) off by {worst_self:e}"))?;
    let zero = FlowShape::empty(12, 100);
    let v = ssim(&zero, &full, &params).map_err(|e| e.to_string())?;
    let c1 = (0.01f64 * 1.0).powi(2);
    let want = c1 / (1.0 + c1);
    ensure((v - want).abs() <= 1e-9, || format!("ssim(0,1) = {v:e}, expected {want:e}"))?;
    Ok(format!("PMR 0.95, C {:.6}, ssim(0,1) {v:.6e}", c.complexity))
}

// ---------------------------------------------------------------- 5

fn apn_learnability(s: &mut Suite) -> Outcome {
    let started = Instant::now();
    let p = Preset::DESK;
    let channel = *s.lib.channel();
    let (tr, va, te) = APN_SEEDS;

    let train_set = dataset(DatasetKind::Apn, p.apn_train, tr, &s.lib);
    let valid_set = dataset(DatasetKind::Apn, p.apn_valid, va, &s.lib);
    let test_set = dataset(DatasetKind::Apn, p.apn_valid, te, &s.lib);
    let net = ApnModel::<f32>::new(&channel, TRAIN_SEED).unwrap().into_network();
    let net = trained("apn", net, &train_set, &valid_set, APN_EPOCHS);
    let acc = evaluate(&net, &test_set, 100).unwrap().accuracy.unwrap();
    drop((train_set, valid_set, test_set));
    s.apn = Some(ApnModel::from_network(net).unwrap());
    let apn_time = started.elapsed();

    let train_set = dataset(DatasetKind::ApnC, p.apn_train, tr, &s.lib);
    let valid_set = dataset(DatasetKind::ApnC, p.apn_valid, va, &s.lib);
    let test_set = dataset(DatasetKind::ApnC, p.apn_valid, te, &s.lib);
    let net = ApnCModel::<f32>::new(&channel, TRAIN_SEED).unwrap().into_network();
    let net = trained("apnc", net, &train_set, &valid_set, APN_EPOCHS);
    let acc_c = evaluate(&net, &test_set, 100).unwrap().accuracy.unwrap();

    let detail = format!(
        "APN top-1 {:.1}% ({:.0} min), APN-C {:.1}%, chance 3.1%",
        acc * 100.0,
        apn_time.as_secs_f64() / 60.0,
        acc_c * 100.0
    );
    ensure(acc >= 0.5, || format!("APN accuracy below 50%: {detail}"))?;
    ensure((acc - acc_c).abs() <= 0.10, || {
        format!("APN-C more than 10 points from APN: {detail}")
    })?;
    Ok(detail)
}

// ---------------------------------------------------------------- 7

fn itn_learnability(s: &mut Suite) -> Outcome {
    let p = Preset::DESK;
    let (tr, va, te) = ITN_SEEDS;
    let train_set = dataset(DatasetKind::Itn, p.itn_train, tr, &s.lib);
    let valid_set = dataset(DatasetKind::Itn, p.itn_valid, va, &s.lib);
    let net = ItnModel::<f32>::new(s.lib.channel(), TRAIN_SEED).unwrap().into_network();
    let net = trained("itn", net, &train_set, &valid_set, ITN_EPOCHS);
    drop((train_set, valid_set));
    let itn = ItnModel::from_network(net).unwrap();
    let test_set = dataset(DatasetKind::Itn, 1000, te, &s.lib);
    let scores: Vec<f64> = (0..test_set.len())
        .map(|i| pmr(&itn.predict_bridge(&test_set.shape(i, 0)).unwrap(), &test_set.shape(i, 1)).unwrap())
        .collect();
    let med = median(&scores).unwrap();
    // the undeformed stripe as a bridge estimate, for scale
    let stripe = s.lib.initial_shape();
    let base: Vec<f64> = (0..test_set.len())
        .map(|i| pmr(&stripe, &test_set.shape(i, 1)).unwrap())
        .collect();
    s.itn = Some(itn);
    let detail = format!(
        "held-out median PMR {med:.4} over {} samples (stripe baseline {:.4})",
        scores.len(),
        median(&base).unwrap()
    );
    ensure(med >= 0.85, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 6

fn trend_reproduction(s: &Suite) -> Outcome {
    let (apn, itn) = match (&s.apn, &s.itn) {
        (Some(a), Some(i)) => (a, i),
        _ => return Err("needs the trained APN and ITN from criteria 5 and 7".into()),
    };
    let p = Preset::DESK;
    let (tr, va) = SMC_SEEDS;
    let train_set = dataset(DatasetKind::Smc, p.smc_train, tr, &s.lib);
    let valid_set = dataset(DatasetKind::Smc, p.smc_valid, va, &s.lib);
    let net = SmcModel::<f32>::new(s.lib.channel(), TRAIN_SEED).unwrap().into_network();
    let net = trained("smc", net, &train_set, &valid_set, SMC_EPOCHS);
    drop((train_set, valid_set));
    let smc = SmcModel::from_network(net).unwrap();

    let targets: Vec<(String, FlowShape)> = (0..20)
        .map(|i| {
            (
                format!("target_{i:03}"),
                s.lib.render(&random_target_sequence(TREND_TARGET_SEED, i, 10)).unwrap(),
            )
        })
        .collect();
    let lib = &s.lib;
    let with_itn = Models {
        apn: Some(apn),
        apnc: None,
        itn: Some(itn),
    };
    let apn_only = Models { itn: None, ..with_itn };
    let methods = vec![
        Method::new("smc", |t: &FlowShape| smc.predict_sequence(t)),
        Method::new("apn", move |t: &FlowShape| {
            Ok(run_pipeline(t, lib, apn_only, &InferenceConfig::with_mode(Mode::ApnOnly))?.sequence)
        }),
        Method::new("apn+itn", move |t: &FlowShape| {
            Ok(run_pipeline(t, lib, with_itn, &InferenceConfig::with_mode(Mode::ApnItn))?.sequence)
        }),
    ];
    let report = eval_report(&targets, &methods, lib).map_err(|e| e.to_string())?;
    let out = std::env::temp_dir().join("flowsculpt_acceptance_trend.csv");
    std::fs::write(&out, report.to_csv()).map_err(|e| e.to_string())?;
    eprintln!("{}", report.to_csv());

    let avg = |m: &str| report.average(m).unwrap().clone();
    let (smc_a, apn_a, both) = (avg("smc"), avg("apn"), avg("apn+itn"));
    let detail = format!(
        "mean PMR/SSIM: apn+itn {:.4}/{:.4}, apn {:.4}/{:.4}, smc {:.4}/{:.4}; report {}",
        both.pmr,
        both.ssim,
        apn_a.pmr,
        apn_a.ssim,
        smc_a.pmr,
        smc_a.ssim,
        out.display()
    );
    ensure(both.pmr >= smc_a.pmr + 0.05, || {
        format!("PMR margin over SMC below 0.05: {detail}")
    })?;
    ensure(both.ssim > smc_a.ssim, || format!("SSIM not above SMC: {detail}"))?;
    ensure(both.pmr >= apn_a.pmr, || format!("APN+ITN below APN-only: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn pipeline_invariants(s: &Suite) -> Outcome {
    let none = Models::<f64>::default();
    let runs = 200;
    for run in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(8000 + run);
        let len = rng.gen_range(1..=10);
        let target = s.lib.render(&random_target_sequence(8000, run, len)).unwrap();
        let total = rng.gen_range(1..=20);
        let config = InferenceConfig {
            tau_a: rng.gen_range(0.85..=1.0),
            tau_b: rng.gen_range(0.9..=1.0),
            max_steps_total: total,
            max_steps_stage_a: rng.gen_range(1..=total.min(10)),
            no_improve_patience: rng.gen_range(1..=4),
            mode: if rng.gen_bool(0.5) && s.itn.is_some() {
                Mode::OracleItn
            } else {
                Mode::Oracle
            },
            prune: false,
        };
        let ctx = |m: &str| format!("run {run} ({len} pillars, {config:?}): {m}");
        // ORACLE_ITN needs an ITN; use the trained one when it exists
        let models = Models::<f32> {
            itn: s.itn.as_ref(),
            ..Models::default()
        };
        let plain = if config.mode.uses_itn() {
            run_pipeline(&target, &s.lib, models, &config)
        } else {
            run_pipeline(&target, &s.lib, Models::<f32>::default(), &config)
        }
        .map_err(|e| ctx(&e.to_string()))?;
        let steps = &plain.trace.steps;
        ensure(steps.len() <= total && plain.trace.final_sequence.len() <= total, || {
            ctx("step budget exceeded")
        })?;
        let stage_a = steps.iter().filter(|t| t.stage == Stage::A).count();
        ensure(stage_a <= config.max_steps_stage_a, || ctx("stage A budget exceeded"))?;

        let start: f64 = pmr(&s.lib.initial_shape(), &target).unwrap();
        let mut best = start;
        for t in steps {
            best = best.max(t.pmr_final);
        }
        ensure(plain.pmr == best, || {
            ctx(&format!("returned PMR {} but best-so-far {best}", plain.pmr))
        })?;
        let rendered: f64 = pmr(&s.lib.render(&plain.sequence).unwrap(), &target).unwrap();
        ensure(rendered == plain.pmr, || {
            ctx("reported PMR does not match the returned sequence")
        })?;

        let pruned_cfg = InferenceConfig { prune: true, ..config };
        let pruned = if config.mode.uses_itn() {
            run_pipeline(&target, &s.lib, models, &pruned_cfg)
        } else {
            run_pipeline(&target, &s.lib, none, &pruned_cfg)
        }
        .map_err(|e| ctx(&e.to_string()))?;
        ensure(pruned.pmr >= plain.pmr, || {
            ctx(&format!("pruning lowered PMR {} -> {}", plain.pmr, pruned.pmr))
        })?;
        ensure(pruned.sequence.len() <= plain.sequence.len(), || {
            ctx("pruning lengthened the sequence")
        })?;
    }
    let note = if s.itn.is_none() {
        ", ORACLE only (no ITN)"
    } else {
        ", ORACLE and ORACLE_ITN"
    };
    Ok(format!("{runs} randomized runs{note}"))
}

// ---------------------------------------------------------------- 9

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_flowsculpt"))
        .args(args)
        .env("FLOWSCULPT_THREADS", "1")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!(
            "`flowsculpt {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        )
    })
}

fn files_under(p: &Path, into: &mut Vec<PathBuf>) {
    if p.is_dir() {
        for e in std::fs::read_dir(p).unwrap() {
            files_under(&e.unwrap().path(), into);
        }
    } else if p.exists() {
        into.push(p.to_path_buf());
    }
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = |name: &str| dir.path().join(name).display().to_string();
    let steps: Vec<Vec<String>> = vec![
        vec!["maps", "build", "--out", &d("maps.bin")],
        vec![
            "render",
            "--seq",
            "3,17,30",
            "--maps",
            &d("maps.bin"),
            "--out",
            &d("render.pgm"),
        ],
        vec![
            "dataset",
            "--kind",
            "apn",
            "--n",
            "80",
            "--seed",
            "5",
            "--maps",
            &d("maps.bin"),
            "--out",
            &d("apn_train.fsds"),
        ],
        vec![
            "dataset",
            "--kind",
            "apn",
            "--n",
            "20",
            "--seed",
            "6",
            "--maps",
            &d("maps.bin"),
            "--out",
            &d("apn_valid.fsds"),
        ],
        vec![
            "dataset",
            "--kind",
            "itn",
            "--n",
            "60",
            "--seed",
            "7",
            "--maps",
            &d("maps.bin"),
            "--out",
            &d("itn_train.fsds"),
        ],
        vec![
            "dataset",
            "--kind",
            "itn",
            "--n",
            "20",
            "--seed",
            "8",
            "--maps",
            &d("maps.bin"),
            "--out",
            &d("itn_valid.fsds"),
        ],
        vec![
            "train",
            "--arch",
            "apn",
            "--data",
            &d("apn_train.fsds"),
            "--valid",
            &d("apn_valid.fsds"),
            "--epochs",
            "2",
            "--batch",
            "20",
            "--seed",
            "3",
            "--out",
            &d("apn.fsnn"),
            "--history",
            &d("apn_history.csv"),
        ],
        vec![
            "train",
            "--arch",
            "itn",
            "--data",
            &d("itn_train.fsds"),
            "--valid",
            &d("itn_valid.fsds"),
            "--epochs",
            "1",
            "--batch",
            "20",
            "--seed",
            "4",
            "--out",
            &d("itn.fsnn"),
        ],
        vec![
            "targets",
            "--maps",
            &d("maps.bin"),
            "--n",
            "2",
            "--len",
            "4",
            "--seed",
            "9",
            "--out",
            &d("targets"),
        ],
        vec![
            "infer",
            "--target",
            &d("targets/target_000.pgm"),
            "--mode",
            "apn+itn",
            "--apn",
            &d("apn.fsnn"),
            "--itn",
            &d("itn.fsnn"),
            "--maps",
            &d("maps.bin"),
            "--max-steps",
            "6",
            "--out",
            &d("seq.txt"),
            "--trace",
            &d("trace.csv"),
            "--frames",
            &d("frames"),
        ],
        vec![
            "eval",
            "--targets",
            &d("targets"),
            "--methods",
            "oracle,apn",
            "--apn",
            &d("apn.fsnn"),
            "--maps",
            &d("maps.bin"),
            "--report",
            &d("report.csv"),
        ],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(str::to_string).collect())
    .collect();

    let mut manifests = Vec::new();
    for args in &steps {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        cli(&refs)?;
        let out = args
            .iter()
            .position(|a| a == "--out" || a == "--report")
            .map(|i| PathBuf::from(&args[i + 1]))
            .unwrap();
        let mut name = out.file_name().unwrap().to_os_string();
        name.push(".manifest.json");
        let manifest = out.with_file_name(name);
        ensure(manifest.exists(), || format!("no manifest for `{}`", args.join(" ")))?;
        manifests.push(manifest);
    }

    let mut outputs = Vec::new();
    for m in &manifests {
        let text = std::fs::read_to_string(m).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        for o in value["outputs"].as_array().ok_or("manifest without outputs")? {
            files_under(Path::new(o.as_str().unwrap()), &mut outputs);
        }
    }
    outputs.sort();
    outputs.dedup();
    outputs.retain(|p| !p.to_string_lossy().ends_with(".manifest.json"));
    let before: BTreeMap<PathBuf, Vec<u8>> = outputs.iter().map(|p| (p.clone(), std::fs::read(p).unwrap())).collect();
    for p in &outputs {
        std::fs::remove_file(p).unwrap();
    }
    for m in &manifests {
        cli(&["replay", "--manifest", &m.display().to_string()])?;
    }
    for (p, bytes) in &before {
        let again = std::fs::read(p).map_err(|e| format!("{} not regenerated: {e}", p.display()))?;
        ensure(&again == bytes, || format!("{} differs after replay", p.display()))?;
    }
    Ok(format!(
        "{} commands replayed, {} files byte-identical",
        manifests.len(),
        before.len()
    ))
}

// ----------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let mut suite = Suite {
        lib: library(),
        apn: None,
        itn: None,
    };
    let mut results: Vec<(u32, &str, Outcome, Duration)> = Vec::new();
    let only: Option<Vec<u32>> = std::env::var("FLOWSCULPT_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut record = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let started = Instant::now();
        let r = match &only {
            Some(list) if !list.contains(&n) => Err("skipped".to_string()),
            _ => guarded(f),
        };
        let t = started.elapsed();
        let (tag, msg) = match &r {
            Ok(m) => ("PASS", m),
            Err(m) => ("FAIL", m),
        };
        println!("[{tag}] {n}. {name}: {msg} [{:.1}s]", t.as_secs_f64());
        results.push((n, name, r, t));
    };

    record(1, "forward-model exactness", &mut forward_exactness);
    record(2, "gradient correctness", &mut gradient_correctness);
    record(3, "oracle exact recovery", &mut || oracle_recovery(&suite));
    record(4, "metric oracles", &mut metric_oracles);
    record(5, "APN desk-scale learnability", &mut || apn_learnability(&mut suite));
    record(7, "ITN learnability", &mut || itn_learnability(&mut suite));
    record(6, "trend reproduction", &mut || trend_reproduction(&suite));
    record(8, "pipeline invariants", &mut || pipeline_invariants(&suite));
    record(9, "reproducibility", &mut reproducibility);

    results.sort_by_key(|r| r.0);
    println!("---- acceptance summary ----");
    for (n, name, r, t) in &results {
        println!(
            "{} {n}. {name} ({:.0}s)",
            if r.is_ok() { "PASS" } else { "FAIL" },
            t.as_secs_f64()
        );
    }
    let failed: Vec<String> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0.to_string()).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
