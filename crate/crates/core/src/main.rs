use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use brainteacher::data::{SyntheticCifar, DATA_ENV};
use brainteacher::harness::{self, ExperimentConfig, Sweep};
use brainteacher::nn::{load_checkpoint, Architecture};
use brainteacher::rsm::save_rsm;
use brainteacher::teacher::{TeacherKind, TeacherSpec};
use brainteacher::training::{composite_grad_check, GradCheckSetup, LambdaMode};
use brainteacher::{Error, Result};

/// Train CNNs with a representational-similarity teacher and evaluate them.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment (all sweep points and seeds) and write its outputs.
    Run(RunArgs),
    /// Aggregate record files into mean ± SEM tables.
    Summarize {
        /// Record files or directories searched for record.json.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Directory for summary_by_epoch.csv and summary_final.csv.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Write synthetic CIFAR-100 style train.bin/test.bin files.
    GenSynthetic {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 250)]
        train_per_class: usize,
        #[arg(long, default_value_t = 50)]
        test_per_class: usize,
        /// Superclasses whose fine classes are generated.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        superclasses: Vec<usize>,
    },
    /// Build a teacher RSM over an experiment's stimulus set and save it.
    Teacher {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        teacher: TeacherSpec,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the composite-loss gradient (64-bit).
    Gradcheck {
        #[arg(long, default_value = "cornet-z-mini")]
        arch: Architecture,
        #[arg(long, default_value_t = 0.1)]
        r: f64,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Export a checkpoint's tagged-layer activations on test images.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "V1")]
        tag: String,
        #[arg(long, default_value_t = 1280)]
        images: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment TOML; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    r: Option<f64>,
    /// e.g. `kind=random,mu=5,sigma=0.582,seed=3,tag=V1`.
    #[arg(long)]
    teacher: Option<TeacherSpec>,
    #[arg(long)]
    attach_tag: Option<String>,
    #[arg(long)]
    corrupt_fraction: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    neural_epochs: Option<usize>,
    #[arg(long)]
    lambda_mode: Option<LambdaMode>,
    #[arg(long)]
    arch: Option<Architecture>,
    /// CIFAR-100 binary root (overrides the config and the environment).
    #[arg(long, env = DATA_ENV)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "runs/out")]
    out_dir: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    path.map_or_else(|| Ok(ExperimentConfig::default()), ExperimentConfig::load)
}

fn set<V: Into<toml::Value>>(cfg: &mut ExperimentConfig, key: &str, v: Option<V>) {
    if let Some(v) = v {
        cfg.train.insert(key.into(), v.into());
    }
}

fn apply_overrides(cfg: &mut ExperimentConfig, a: RunArgs) -> PathBuf {
    if let Some(t) = a.teacher {
        cfg.teacher = t;
        cfg.sweep.teacher.clear();
    }
    if let Some(tag) = a.attach_tag {
        cfg.teacher.attach_tag = Some(tag);
        cfg.sweep.attach_tag.clear();
    }
    if a.r.is_some() {
        cfg.sweep.r.clear();
    }
    if a.corrupt_fraction.is_some() {
        cfg.sweep.corrupt_fraction.clear();
    }
    set(cfg, "r", a.r);
    set(cfg, "label_corruption_fraction", a.corrupt_fraction);
    set(cfg, "total_epochs", a.epochs.map(|e| e as i64));
    set(cfg, "neural_epochs", a.neural_epochs.map(|e| e as i64));
    set(cfg, "lambda_mode", a.lambda_mode.map(|m| m.to_string()));
    set(cfg, "arch", a.arch.map(|m| m.to_string()));
    if let Some(seeds) = a.seeds {
        let list: Vec<toml::Value> = seeds.into_iter().map(|s| toml::Value::Integer(s as i64)).collect();
        cfg.train.insert("seeds".into(), toml::Value::Array(list));
    }
    if a.data.is_some() {
        cfg.data.root = a.data;
    }
    a.out_dir
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let mut cfg = load_config(args.config.as_deref())?;
            let out = apply_overrides(&mut cfg, args);
            let results = harness::run(&cfg, &out)?;
            for (plan, record) in &results {
                let acc = harness::final_metric(record, "test_accuracy");
                if let Some((mean, sem)) = acc {
                    println!(
                        "{}: final test accuracy {:.4} ± {}",
                        plan.name,
                        mean,
                        sem.map_or("n/a".into(), |s| format!("{s:.4}"))
                    );
                }
            }
            println!("outputs in {}", out.display());
            Ok(())
        }
        Command::Summarize { paths, out_dir } => {
            let s = harness::summarize(&paths)?;
            for label in &s.single_seed {
                eprintln!("warning: `{label}` has a single seed; SEM omitted");
            }
            match out_dir {
                Some(dir) => {
                    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    for (name, body) in [("summary_by_epoch.csv", &s.per_epoch), ("summary_final.csv", &s.final_epoch)] {
                        let p = dir.join(name);
                        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
                    }
                }
                None => print!("{}", s.final_epoch),
            }
            Ok(())
        }
        Command::GenSynthetic {
            out_dir,
            train_per_class,
            test_per_class,
            superclasses,
        } => {
            let map = brainteacher::eval::SuperclassMap::cifar100();
            let syn = SyntheticCifar {
                fine_classes: superclasses.iter().flat_map(|&c| map.members(c)).collect(),
                train_per_class,
                test_per_class,
                ..SyntheticCifar::default()
            };
            syn.write(&out_dir)?;
            println!("wrote {}/train.bin and test.bin", out_dir.display());
            Ok(())
        }
        Command::Teacher { config, teacher, out } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.teacher = teacher;
            cfg.sweep = Sweep::default();
            let data = cfg.load_data()?;
            let session_dir = out.with_extension("sessions");
            let runs = cfg.plan(data.num_classes(), &session_dir)?;
            harness::ensure_sessions(&runs, &data, &cfg.sessions, &session_dir)?;
            let spec = &runs[0].config.teacher;
            if spec.kind == TeacherKind::None {
                return Err(Error::InvalidArgument("teacher kind `none` has no RSM".into()));
            }
            let rsm = spec.build(&data.stimuli.ids)?.expect("not none");
            save_rsm(&rsm, &out)?;
            println!("{} stimuli, off-diagonal mean {:.6}", rsm.size(), rsm.off_diagonal_mean());
            Ok(())
        }
        Command::Gradcheck {
            arch,
            r,
            samples,
            epsilon,
            tolerance,
        } => {
            let mut setup = GradCheckSetup::cornet_mini(r);
            setup.network = brainteacher::nn::NetworkSpec::for_arch(arch, 10, [3, 32, 32]);
            setup.samples = samples;
            setup.epsilon = epsilon;
            let check = composite_grad_check(&setup)?;
            println!(
                "probes {} max relative error {:.3e} (lambda {:.4e}, ce {:.4}, mismatch {:.4})",
                check.report.probes.len(),
                check.report.max_relative_error,
                check.lambda,
                check.ce,
                check.mismatch
            );
            if check.report.max_relative_error < tolerance {
                Ok(())
            } else {
                Err(Error::NumericFailure {
                    layer: format!("gradient check exceeded tolerance {tolerance}"),
                })
            }
        }
        Command::Export {
            checkpoint,
            config,
            tag,
            images,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let data = cfg.load_data()?;
            let ckpt = load_checkpoint::<f32>(&checkpoint)?;
            let n = images.min(data.test.len());
            let subset = data.test.select(&(0..n).collect::<Vec<_>>())?;
            brainteacher::eval::export_activations(&ckpt.network, &subset.images, &subset.ids, &subset.labels, &tag, &out)?;
            println!("exported {n} × `{tag}` activations to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
