use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use protoseg::encoder::knn_group;
use protoseg::eval::{
    evaluate, run_experiment, sample_support, segment_points, support_bank, RunConfig, EXPERIMENTS,
};
use protoseg::shapes::{
    generate_pool, load_manifest, make_folds, read_shape, save_manifest, write_shape, ClassId,
    DatasetSplit, LabeledShape, ShapePool, SyntheticClass,
};
use protoseg::tensor::TensorError;
use protoseg::trainer::{meta_finetune, meta_train, pretrain, resume_meta_train, Checkpoint};
use protoseg::Error;

#[derive(Parser)]
#[command(
    name = "protoseg",
    version,
    about = "Few-shot part segmentation of point clouds"
)]
struct Cli {
    /// Seed for data generation and training; evaluation seeds start here.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration (encoder, data, stage and evaluation settings).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct DataArgs {
    /// Dataset manifest written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated novel class names; overrides the configured fold.
    #[arg(long, value_delimiter = ',')]
    novel: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    GenData {
        /// Comma-separated class names (default: all).
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Supervised pre-training on the base classes.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Episodic meta-training on the base classes.
    MetaTrain {
        #[command(flatten)]
        data: DataArgs,
        /// Start from this checkpoint (default: fresh parameters).
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Continue an interrupted meta-training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Meta-finetune on K labeled shapes of every novel class.
    Finetune {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        k_shot: Option<usize>,
    },
    /// Few-shot evaluation on the novel classes.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        k_shot: Option<usize>,
        /// Number of evaluation seeds.
        #[arg(long)]
        seeds: Option<usize>,
        /// Meta-finetune on the support shapes of each seed first.
        #[arg(long)]
        finetune: bool,
    },
    /// Segment one shape file using support shapes of its class.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest providing labeled support shapes.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output shape file (default: `<out>/segmented.shape`).
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        k_shot: Option<usize>,
    },
    /// Run a named experiment grid.
    Experiment {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(EXPERIMENTS))]
        name: String,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numeric() => 3,
        Error::Parse { .. } | Error::Sampling(_) | Error::Format(_) | Error::Io { .. } => 2,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.data.seed = seed;
        cfg.pretrain.seed = seed;
        cfg.metatrain.seed = seed;
        cfg.finetune.seed = seed;
    }
    Ok(cfg)
}

fn class_by_name(pool: &ShapePool, name: &str) -> Result<ClassId, Error> {
    pool.catalog()
        .by_name(name)
        .map(|c| c.id)
        .ok_or_else(|| Error::Usage(format!("unknown class `{name}`")))
}

fn load_data(args: &DataArgs, cfg: &RunConfig) -> Result<(ShapePool, DatasetSplit), Error> {
    let pool = load_manifest(&args.data)?;
    let split = if args.novel.is_empty() {
        make_folds(&pool.class_ids(), cfg.data.n_folds)?
            .swap_remove(cfg.data.fold.min(cfg.data.n_folds - 1))
    } else {
        let novel = args
            .novel
            .iter()
            .map(|n| class_by_name(&pool, n))
            .collect::<Result<Vec<_>, _>>()?;
        let base = pool
            .class_ids()
            .into_iter()
            .filter(|c| !novel.contains(c))
            .collect();
        DatasetSplit {
            fold: 0,
            base_classes: base,
            novel_classes: novel,
        }
    };
    Ok((pool, split))
}

fn prepare_out(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Saves a trained checkpoint and its loss history as `<name>.ckpt` / `<name>_history.csv`.
fn save_stage(out: &Path, name: &str, ckpt: &Checkpoint) -> Result<(), Error> {
    let path = out.join(format!("{name}.ckpt"));
    ckpt.save(&path)?;
    write_text(
        &out.join(format!("{name}_history.csv")),
        &ckpt.history_csv(),
    )?;
    println!("{}", path.display());
    Ok(())
}

/// On divergence, keeps the last finite state next to the intended output.
fn trained(out: &Path, name: &str, result: Result<Checkpoint, Error>) -> Result<(), Error> {
    match result {
        Ok(ckpt) => save_stage(out, name, &ckpt),
        Err(Error::Diverged { step, cause, last }) => {
            let path = out.join(format!("{name}.diverged.ckpt"));
            last.save(&path)?;
            log::error!("last finite state saved to {}", path.display());
            Err(Error::Diverged { step, cause, last })
        }
        Err(e) => Err(e),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = load_config(&cli)?;
    let out = cli.out.as_path();
    prepare_out(out)?;
    match cli.command {
        Command::GenData {
            classes,
            train,
            test,
            points,
        } => {
            let classes = if classes.is_empty() {
                SyntheticClass::ALL.to_vec()
            } else {
                classes
                    .iter()
                    .map(|n| n.parse())
                    .collect::<Result<Vec<SyntheticClass>, _>>()?
            };
            let d = &mut cfg.data;
            d.n_train = train.unwrap_or(d.n_train);
            d.n_test = test.unwrap_or(d.n_test);
            d.n_points = points.unwrap_or(d.n_points);
            let pool = generate_pool(&classes, d.n_train, d.n_test, d.n_points, d.seed)?;
            println!("{}", save_manifest(out, &pool)?.display());
        }
        Command::Pretrain { data, steps } => {
            cfg.pretrain.steps = steps.unwrap_or(cfg.pretrain.steps);
            let (pool, split) = load_data(&data, &cfg)?;
            trained(
                out,
                "pretrain",
                pretrain(&pool, &split, &cfg.encoder, &cfg.pretrain),
            )?;
        }
        Command::MetaTrain {
            data,
            init,
            resume,
            steps,
        } => {
            cfg.metatrain.steps = steps.unwrap_or(cfg.metatrain.steps);
            let (pool, split) = load_data(&data, &cfg)?;
            let result = match (init, resume) {
                (_, Some(path)) => {
                    let ckpt = Checkpoint::load(&path)?;
                    let saved = ckpt
                        .config
                        .clone()
                        .ok_or_else(|| Error::Usage("checkpoint has no config".into()))?;
                    let config = protoseg::trainer::TrainConfig {
                        steps: cfg.metatrain.steps,
                        ..saved
                    };
                    resume_meta_train(&pool, &split, &ckpt, &config)
                }
                (Some(path), None) => {
                    meta_train(&pool, &split, &Checkpoint::load(&path)?, &cfg.metatrain)
                }
                (None, None) => {
                    let fresh = Checkpoint::fresh(cfg.encoder.clone(), cfg.metatrain.seed)?;
                    meta_train(&pool, &split, &fresh, &cfg.metatrain)
                }
            };
            trained(out, "metatrain", result)?;
        }
        Command::Finetune {
            data,
            checkpoint,
            k_shot,
        } => {
            let (pool, split) = load_data(&data, &cfg)?;
            let start = Checkpoint::load(&checkpoint)?;
            let k = k_shot.unwrap_or(cfg.eval.k_shot);
            let seed = cli.seed.unwrap_or(0);
            let mut shapes = BTreeMap::new();
            for &c in &split.novel_classes {
                shapes.insert(c, sample_support(&pool, c, k, seed)?);
            }
            let config = protoseg::trainer::TrainConfig {
                k_shot: k,
                ..cfg.finetune.clone()
            };
            trained(
                out,
                "finetune",
                meta_finetune(&pool, &shapes, &start, &config),
            )?;
        }
        Command::Eval {
            data,
            checkpoint,
            k_shot,
            seeds,
            finetune,
        } => {
            let (pool, split) = load_data(&data, &cfg)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut eval = cfg.eval.clone();
            eval.k_shot = k_shot.unwrap_or(eval.k_shot);
            if let Some(n) = seeds {
                let base = cli.seed.unwrap_or(0);
                eval.seeds = (0..n as u64).map(|i| base + i).collect();
            }
            eval.finetune = finetune.then(|| cfg.finetune.clone());
            let report = evaluate(&ckpt, &pool, &split, &eval)?;
            write_text(&out.join("metrics.csv"), &report.metrics_csv())?;
            let path = out.join("report.json");
            write_text(&path, &report.summary_json())?;
            println!(
                "category mIoU {:.4} ± {:.4}",
                report.category_miou, report.category_std
            );
            println!("{}", path.display());
        }
        Command::Segment {
            checkpoint,
            data,
            input,
            output,
            k_shot,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let pool = load_manifest(&data)?;
            let shape = read_shape(&input)?;
            let parts = pool.catalog().class(shape.class_id)?.parts.clone();
            let k = k_shot.unwrap_or(cfg.eval.k_shot);
            let support = sample_support(&pool, shape.class_id, k, cli.seed.unwrap_or(0))?;
            let tables = support
                .iter()
                .map(|&i| knn_group(&pool.shape(i).points, ckpt.encoder.knn_k))
                .collect::<Result<Vec<_>, _>>()?;
            let labeled: Vec<_> = support
                .iter()
                .zip(&tables)
                .map(|(&i, t)| (pool.shape(i), t))
                .collect();
            let (bank, missing) = support_bank(&ckpt.params, &ckpt.encoder, &labeled, &parts)?;
            if !missing.is_empty() {
                log::warn!("support shapes lack parts {missing:?}; they cannot be predicted");
            }
            let nbr = knn_group(&shape.points, ckpt.encoder.knn_k)?;
            let labels = segment_points(&ckpt.params, &ckpt.encoder, &bank, &shape.points, &nbr)?;
            let result = LabeledShape::new(shape.class_id, shape.points, labels)?;
            let path = output.unwrap_or_else(|| out.join("segmented.shape"));
            write_shape(&path, &result)?;
            println!("{}", path.display());
        }
        Command::Experiment { name } => {
            let result = run_experiment(&name, &cfg, out)?;
            for (setting, r) in &result.rows {
                println!("{setting}: {:.4}", r.category_miou);
            }
            println!("{}", result.table.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Diverged {
                cause: TensorError::Numeric { op },
                ..
            } = &e
            {
                eprintln!("non-finite value produced by {op}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
