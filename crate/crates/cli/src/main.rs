use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use flowsculpt::datasets::{Dataset, DatasetKind, GenSpec, Preset};
use flowsculpt::forward::class_table;
use flowsculpt::inference::{run_pipeline, InferenceConfig, Mode, Models};
use flowsculpt::metrics::{eval_report, perimetric_complexity, Method};
use flowsculpt::nn::{train, Checkpoint, TrainConfig, TrainMeta};
use flowsculpt::{Apn, ApnC, ChannelSpec, FlowShape, Itn, MapGenParams, PillarLibrary, PillarSequence, Smc};

mod manifest;

use manifest::{write_atomic, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "flowsculpt", version, about = "Flow-shape design by sequential pillar prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pillar class table.
    Pillars {
        #[command(subcommand)]
        action: PillarsAction,
    },
    /// Deformation-map library.
    Maps {
        #[command(subcommand)]
        action: MapsAction,
    },
    /// Render a pillar sequence to a PGM image.
    Render {
        #[arg(long, allow_hyphen_values = true)]
        seq: String,
        #[arg(long)]
        maps: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        inlet: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a training dataset.
    Dataset {
        #[arg(long, value_enum)]
        kind: KindArg,
        /// Sample count; defaults to the preset's count for the split.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        #[arg(long, value_enum, default_value_t = PresetArg::Desk)]
        preset: PresetArg,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        maps: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        inlet: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on generated datasets.
    Train {
        #[arg(long, value_enum)]
        arch: ArchArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 50)]
        batch: usize,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 10)]
        patience: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch log as CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Infer a pillar sequence for a target image.
    Infer {
        #[arg(long)]
        target: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Mode,
        #[arg(long)]
        apn: Option<PathBuf>,
        #[arg(long)]
        apnc: Option<PathBuf>,
        #[arg(long)]
        itn: Option<PathBuf>,
        #[arg(long)]
        maps: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        inlet: f64,
        #[arg(long, default_value_t = 20)]
        max_steps: usize,
        #[arg(long, default_value_t = 10)]
        max_steps_a: usize,
        #[arg(long, default_value_t = 3)]
        patience: usize,
        #[arg(long, default_value_t = 0.95)]
        tau_a: f64,
        #[arg(long, default_value_t = 0.99)]
        tau_b: f64,
        #[arg(long)]
        prune: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        frames: Option<PathBuf>,
    },
    /// Score methods on a directory of target images.
    Eval {
        #[arg(long)]
        targets: PathBuf,
        /// Comma-separated: smc, apn, apnc, apn+itn, oracle, oracle+itn.
        #[arg(long)]
        methods: String,
        #[arg(long)]
        apn: Option<PathBuf>,
        #[arg(long)]
        apnc: Option<PathBuf>,
        #[arg(long)]
        itn: Option<PathBuf>,
        #[arg(long)]
        smc: Option<PathBuf>,
        #[arg(long)]
        maps: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        inlet: f64,
        #[arg(long)]
        prune: bool,
        #[arg(long)]
        report: PathBuf,
    },
    /// Perimetric complexity of a PGM image.
    Complexity {
        #[arg(long)]
        image: PathBuf,
    },
    /// Render seeded random sequences into a directory of target images.
    Targets {
        #[arg(long)]
        maps: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        inlet: f64,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        len: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run the command recorded in a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum PillarsAction {
    List,
}

#[derive(Subcommand, Debug)]
enum MapsAction {
    Build {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        amplitude: Option<f64>,
        #[arg(long)]
        kappa: Option<f64>,
        #[arg(long)]
        substeps: Option<usize>,
        #[arg(long, default_value_t = 12)]
        height: usize,
        #[arg(long, default_value_t = 100)]
        width: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Apn,
    Apnc,
    Itn,
    Smc,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ArchArg {
    Apn,
    Apnc,
    Itn,
    Smc,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum SplitArg {
    Train,
    Valid,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| format!("unknown mode {s:?} (expected apn, apnc, apn+itn, oracle or oracle+itn)"))
}

fn threads() -> usize {
    std::env::var("FLOWSCULPT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn load_library(path: &Path, inlet: f64) -> Result<PillarLibrary> {
    PillarLibrary::read(
        std::fs::File::open(path).with_context(|| format!("opening map library {}", path.display()))?,
        inlet,
    )
    .with_context(|| format!("reading map library {}", path.display()))
}

fn load_pgm(path: &Path) -> Result<FlowShape> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    FlowShape::from_pgm_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<f64>> {
    Checkpoint::<f64>::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_opt<M>(path: &Option<PathBuf>, f: impl Fn(flowsculpt::Network) -> flowsculpt::Result<M>) -> Result<Option<M>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let ck = load_checkpoint(p)?;
            Ok(Some(f(ck.network).with_context(|| format!("checkpoint {}", p.display()))?))
        }
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}

fn one_line(e: &anyhow::Error) -> String {
    e.chain()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(": ")
        .replace('\n', " ")
}

fn run(argv: Vec<String>) -> Result<()> {
    let cli = match Cli::try_parse_from(std::iter::once("flowsculpt".to_string()).chain(argv.iter().cloned())) {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            bail!("{first}");
        }
    };
    let started = Instant::now();
    let mut manifest = RunManifest::new(&argv);
    execute(cli.command, &mut manifest)?;
    if let Some(path) = manifest.manifest_path() {
        manifest.finish(started.elapsed());
        write_atomic(&path, manifest.to_json()?.as_bytes())?;
    }
    Ok(())
}

fn execute(command: Command, m: &mut RunManifest) -> Result<()> {
    match command {
        Command::Pillars {
            action: PillarsAction::List,
        } => {
            m.command("pillars list");
            for c in class_table() {
                println!("{} {:.3} {:.3}", c.index, c.position, c.diameter);
            }
            Ok(())
        }
        Command::Maps {
            action:
                MapsAction::Build {
                    out,
                    amplitude,
                    kappa,
                    substeps,
                    height,
                    width,
                },
        } => {
            m.command("maps build");
            let mut params = MapGenParams::default();
            if let Some(a) = amplitude {
                params.amplitude = a;
            }
            if let Some(k) = kappa {
                params.width_scale = k;
            }
            if let Some(s) = substeps {
                params.substeps = s;
            }
            let channel = ChannelSpec::new(height, width, 0.25)?;
            let lib = PillarLibrary::build(channel, &params)?;
            write_atomic(&out, &lib.to_bytes())?;
            m.output(&out);
            Ok(())
        }
        Command::Render { seq, maps, inlet, out } => {
            m.command("render");
            let seq = PillarSequence::parse(&seq)?;
            let lib = load_library(&maps, inlet)?;
            m.input(&maps);
            let shape = lib.render(&seq)?;
            write_atomic(&out, &shape.to_pgm_bytes())?;
            m.output(&out);
            Ok(())
        }
        Command::Dataset {
            kind,
            n,
            split,
            preset,
            seed,
            maps,
            inlet,
            out,
        } => {
            m.command("dataset");
            let kind = match kind {
                KindArg::Apn => DatasetKind::Apn,
                KindArg::Apnc => DatasetKind::ApnC,
                KindArg::Itn => DatasetKind::Itn,
                KindArg::Smc => DatasetKind::Smc,
            };
            let p = match preset {
                PresetArg::Desk => Preset::DESK,
                PresetArg::Paper => Preset::PAPER,
            };
            let n = n.unwrap_or(match (kind, split) {
                (DatasetKind::Apn | DatasetKind::ApnC, SplitArg::Train) => p.apn_train,
                (DatasetKind::Apn | DatasetKind::ApnC, SplitArg::Valid) => p.apn_valid,
                (DatasetKind::Itn, SplitArg::Train) => p.itn_train,
                (DatasetKind::Itn, SplitArg::Valid) => p.itn_valid,
                (DatasetKind::Smc, SplitArg::Train) => p.smc_train,
                (DatasetKind::Smc, SplitArg::Valid) => p.smc_valid,
            });
            let lib = load_library(&maps, inlet)?;
            m.input(&maps);
            m.seed("dataset", seed);
            let ds = Dataset::generate(&GenSpec::new(kind, n, seed), &lib, threads())?;
            write_atomic(&out, &ds.to_bytes())?;
            m.output(&out);
            Ok(())
        }
        Command::Train {
            arch,
            data,
            valid,
            lr,
            batch,
            epochs,
            patience,
            seed,
            out,
            history,
        } => {
            m.command("train");
            let config = TrainConfig {
                learning_rate: lr,
                batch_size: batch,
                max_epochs: epochs,
                patience,
                seed,
            };
            config.validate()?;
            let train_set = Dataset::load(&data).with_context(|| format!("loading {}", data.display()))?;
            let valid_set = Dataset::load(&valid).with_context(|| format!("loading {}", valid.display()))?;
            m.input(&data);
            m.input(&valid);
            m.seed("train", seed);
            let want = match arch {
                ArchArg::Apn => DatasetKind::Apn,
                ArchArg::Apnc => DatasetKind::ApnC,
                ArchArg::Itn => DatasetKind::Itn,
                ArchArg::Smc => DatasetKind::Smc,
            };
            for (p, d) in [(&data, &train_set), (&valid, &valid_set)] {
                if d.kind() != want {
                    bail!(
                        "{} holds {} samples, architecture needs {}",
                        p.display(),
                        d.kind().name(),
                        want.name()
                    );
                }
            }
            let (h, w) = train_set.raster_dims();
            let channel = match want {
                DatasetKind::Apn => ChannelSpec::new((h - flowsculpt::datasets::PADDING_ROWS) / 2, w, 0.25)?,
                _ => ChannelSpec::new(h, w, 0.25)?,
            };
            let mut net = match arch {
                ArchArg::Apn => Apn::new(&channel, seed)?.into_network(),
                ArchArg::Apnc => ApnC::new(&channel, seed)?.into_network(),
                ArchArg::Itn => Itn::new(&channel, seed)?.into_network(),
                ArchArg::Smc => Smc::new(&channel, seed)?.into_network(),
            };
            let hist = train(&mut net, &train_set, &valid_set, &config, |r| {
                eprintln!(
                    "epoch {:>3}  train {:.5}  valid {:.5}{}",
                    r.epoch,
                    r.train_loss,
                    r.valid_loss,
                    r.valid_accuracy.map(|a| format!("  acc {a:.4}")).unwrap_or_default()
                );
            })?;
            let meta = TrainMeta {
                epochs: hist.epochs.len() as u32,
                best_valid: hist.best_valid_loss,
                seed,
            };
            let bytes = Checkpoint::new(net, meta).to_bytes();
            let hist_csv = history.as_ref().map(|_| {
                let mut s = String::from("epoch,train_loss,valid_loss,valid_accuracy\n");
                for r in &hist.epochs {
                    s.push_str(&format!(
                        "{},{:.8},{:.8},{}\n",
                        r.epoch,
                        r.train_loss,
                        r.valid_loss,
                        r.valid_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default()
                    ));
                }
                s
            });
            write_atomic(&out, &bytes)?;
            m.output(&out);
            if let (Some(p), Some(csv)) = (&history, hist_csv) {
                write_atomic(p, csv.as_bytes())?;
                m.output(p);
            }
            Ok(())
        }
        Command::Infer {
            target,
            mode,
            apn,
            apnc,
            itn,
            maps,
            inlet,
            max_steps,
            max_steps_a,
            patience,
            tau_a,
            tau_b,
            prune,
            out,
            trace,
            frames,
        } => {
            m.command("infer");
            let config = InferenceConfig {
                tau_a,
                tau_b,
                max_steps_total: max_steps,
                max_steps_stage_a: max_steps_a,
                no_improve_patience: patience,
                mode,
                prune,
            };
            config.validate()?;
            let lib = load_library(&maps, inlet)?;
            let target_shape = load_pgm(&target)?;
            m.input(&maps);
            m.input(&target);
            let apn_m = load_opt(&apn, Apn::from_network)?;
            let apnc_m = load_opt(&apnc, ApnC::from_network)?;
            let itn_m = load_opt(&itn, Itn::from_network)?;
            for p in [&apn, &apnc, &itn].into_iter().flatten() {
                m.input(p);
            }
            let models = Models {
                apn: apn_m.as_ref(),
                apnc: apnc_m.as_ref(),
                itn: itn_m.as_ref(),
            };
            let result = run_pipeline(&target_shape, &lib, models, &config)?;
            let mut frame_files = Vec::new();
            if let Some(dir) = &frames {
                let full = &result.trace.final_sequence;
                for i in 0..=full.len() {
                    frame_files.push((
                        dir.join(format!("frame_{i:03}.pgm")),
                        lib.render(&full.prefix(i))?.to_pgm_bytes(),
                    ));
                }
                frame_files.push((dir.join("result.pgm"), lib.render(&result.sequence)?.to_pgm_bytes()));
                frame_files.push((dir.join("target.pgm"), target_shape.to_pgm_bytes()));
                if let Some(b) = &result.trace.bridge {
                    frame_files.push((dir.join("bridge.pgm"), b.to_pgm_bytes()));
                }
            }
            write_atomic(&out, format!("{}\n", result.sequence.to_csv()).as_bytes())?;
            m.output(&out);
            if let Some(t) = &trace {
                write_atomic(t, result.trace.to_csv().as_bytes())?;
                m.output(t);
            }
            if let Some(dir) = &frames {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                for (p, bytes) in &frame_files {
                    write_atomic(p, bytes)?;
                    m.output(p);
                }
            }
            println!("{}  pmr {:.4}", result.sequence.to_csv(), result.pmr);
            Ok(())
        }
        Command::Eval {
            targets,
            methods,
            apn,
            apnc,
            itn,
            smc,
            maps,
            inlet,
            prune,
            report,
        } => {
            m.command("eval");
            let names: Vec<String> = methods
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            if names.is_empty() {
                bail!("--methods lists no methods");
            }
            for n in &names {
                if n != "smc" && Mode::parse(n).is_none() {
                    bail!("unknown method {n:?}");
                }
            }
            let lib = load_library(&maps, inlet)?;
            m.input(&maps);
            let target_list = load_target_dir(&targets)?;
            m.input(&targets);
            let apn_m = load_opt(&apn, Apn::from_network)?;
            let apnc_m = load_opt(&apnc, ApnC::from_network)?;
            let itn_m = load_opt(&itn, Itn::from_network)?;
            let smc_m = load_opt(&smc, Smc::from_network)?;
            for p in [&apn, &apnc, &itn, &smc].into_iter().flatten() {
                m.input(p);
            }
            let models = Models {
                apn: apn_m.as_ref(),
                apnc: apnc_m.as_ref(),
                itn: itn_m.as_ref(),
            };
            let lib_ref = &lib;
            let smc_ref = smc_m.as_ref();
            let method_list: Vec<Method<'_>> = names
                .iter()
                .map(|name| {
                    if name == "smc" {
                        Method::new("smc", move |t: &FlowShape| {
                            smc_ref.ok_or(flowsculpt::Error::MissingModel("SMC"))?.predict_sequence(t)
                        })
                    } else {
                        let config = InferenceConfig {
                            prune,
                            ..InferenceConfig::with_mode(Mode::parse(name).unwrap())
                        };
                        Method::new(name.clone(), move |t: &FlowShape| {
                            Ok(run_pipeline(t, lib_ref, models, &config)?.sequence)
                        })
                    }
                })
                .collect();
            let rep = eval_report(&target_list, &method_list, &lib)?;
            write_atomic(&report, rep.to_csv().as_bytes())?;
            m.output(&report);
            for a in &rep.averages {
                println!("{:<12} pmr {:.4}  ssim {:.4}  ({} ok)", a.method, a.pmr, a.ssim, a.succeeded);
            }
            Ok(())
        }
        Command::Complexity { image } => {
            m.command("complexity");
            let shape = load_pgm(&image)?;
            let r = perimetric_complexity::<f64>(&shape)?;
            println!(
                "P {} A {} C {:.6} test_gate {}",
                r.perimeter,
                r.area,
                r.complexity,
                if r.passes_test_gate() { "pass" } else { "fail" }
            );
            Ok(())
        }
        Command::Targets {
            maps,
            inlet,
            n,
            len,
            seed,
            out,
        } => {
            m.command("targets");
            if n == 0 {
                bail!("--n must be at least 1");
            }
            if len == 0 || len > flowsculpt::forward::MAX_SEQUENCE_LEN {
                bail!("--len must lie in 1..={}", flowsculpt::forward::MAX_SEQUENCE_LEN);
            }
            let lib = load_library(&maps, inlet)?;
            m.input(&maps);
            m.seed("targets", seed);
            let mut files = Vec::new();
            let mut listing = String::from("target_id,sequence\n");
            for i in 0..n {
                let seq = flowsculpt::datasets::random_target_sequence(seed, i as u64, len);
                let id = format!("target_{i:03}");
                files.push((out.join(format!("{id}.pgm")), lib.render(&seq)?.to_pgm_bytes()));
                listing.push_str(&format!("{id},\"{}\"\n", seq.to_csv()));
            }
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (p, b) in &files {
                write_atomic(p, b)?;
            }
            let list_path = out.join("sequences.csv");
            write_atomic(&list_path, listing.as_bytes())?;
            m.output(&out);
            Ok(())
        }
        Command::Replay { manifest } => {
            let recorded = RunManifest::load(&manifest)?;
            if recorded.args.first().map(String::as_str) == Some("replay") {
                bail!("a replay manifest cannot be replayed");
            }
            run(recorded.args.clone()).map_err(|e| anyhow!("replaying {}: {}", manifest.display(), one_line(&e)))
        }
    }
}

/// `(stem, shape)` for every `.pgm` file in `dir`, sorted by file name.
fn load_target_dir(dir: &Path) -> Result<Vec<(String, FlowShape)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading target directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .pgm targets in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| {
            let id = p.file_stem().unwrap().to_string_lossy().into_owned();
            Ok((id, load_pgm(p)?))
        })
        .collect()
}
