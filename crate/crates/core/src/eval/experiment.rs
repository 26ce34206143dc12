//! Run configuration and the ablation grids built on top of it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalConfig, EvalReport};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::shapes::{generate_pool, make_folds, DatasetSplit, ShapePool, SyntheticClass};
use crate::trainer::{meta_train, pretrain, Checkpoint, Stage, TrainConfig};

pub const EXPERIMENTS: [&str; 5] = [
    "shots_sweep",
    "points_sweep",
    "pretrain_ablation",
    "alignment_ablation",
    "main",
];

const SHOTS: [usize; 4] = [1, 2, 5, 10];
const POINTS: [usize; 4] = [512, 1024, 2048, 4096];

/// Synthetic dataset and fold selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub n_points: usize,
    pub seed: u64,
    pub n_folds: usize,
    pub fold: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 20,
            n_test: 10,
            n_points: 512,
            seed: 0,
            n_folds: 4,
            fold: 0,
        }
    }
}

/// Everything a full pipeline run needs. Missing fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub data: DataConfig,
    pub pretrain: TrainConfig,
    pub metatrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            data: DataConfig::default(),
            pretrain: TrainConfig {
                learning_rate: 3e-3,
                ..TrainConfig::for_stage(Stage::Pretrain)
            },
            metatrain: TrainConfig::for_stage(Stage::Metatrain),
            finetune: TrainConfig {
                learning_rate: 1e-2,
                ..TrainConfig::for_stage(Stage::Finetune)
            },
            eval: EvalConfig::default(),
        }
    }
}

/// Which training stages a model goes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Meta-training from scratch, evaluated without finetuning.
    MetaOnly,
    /// Pre-training then meta-training, evaluated without finetuning.
    PretrainMeta,
    /// All three stages.
    Full,
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Parses a JSON config. Each training section gets its stage set
    /// regardless of what the file says.
    /// Parses a possibly partial config; every missing field, including inside
    /// a stage block, keeps its value from [`RunConfig::default`].
    pub fn from_json(text: &str) -> Result<Self> {
        let err = |e: serde_json::Error| Error::Config(format!("config file: {e}"));
        let user: serde_json::Value = serde_json::from_str(text).map_err(err)?;
        let mut merged = serde_json::to_value(Self::default()).expect("config serializes");
        merge(&mut merged, user);
        let mut cfg: Self = serde_json::from_value(merged).map_err(err)?;
        cfg.pretrain.stage = Stage::Pretrain;
        cfg.metatrain.stage = Stage::Metatrain;
        cfg.finetune.stage = Stage::Finetune;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.pretrain.validate()?;
        self.metatrain.validate()?;
        self.finetune.validate()?;
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(Error::Config("data needs training and test shapes".into()));
        }
        if self.data.fold >= self.data.n_folds {
            return Err(Error::Config(format!(
                "fold {} of {} folds",
                self.data.fold, self.data.n_folds
            )));
        }
        Ok(())
    }

    /// Generates every synthetic class and picks the configured fold.
    pub fn dataset(&self) -> Result<(ShapePool, DatasetSplit)> {
        let d = &self.data;
        let pool = generate_pool(
            &SyntheticClass::ALL,
            d.n_train,
            d.n_test,
            d.n_points,
            d.seed,
        )?;
        let split = make_folds(&pool.class_ids(), d.n_folds)?.swap_remove(d.fold);
        Ok((pool, split))
    }

    /// Pre-training (unless `variant` skips it) followed by meta-training.
    pub fn train(
        &self,
        pool: &ShapePool,
        split: &DatasetSplit,
        variant: Variant,
    ) -> Result<Checkpoint> {
        let start = match variant {
            Variant::MetaOnly => Checkpoint::fresh(self.encoder.clone(), self.metatrain.seed)?,
            Variant::PretrainMeta | Variant::Full => {
                pretrain(pool, split, &self.encoder, &self.pretrain)?
            }
        };
        meta_train(pool, split, &start, &self.metatrain)
    }

    /// Evaluation settings for `variant` at `k_shot`.
    pub fn eval_config(&self, variant: Variant, k_shot: usize) -> EvalConfig {
        EvalConfig {
            k_shot,
            seeds: self.eval.seeds.clone(),
            finetune: (variant == Variant::Full).then(|| self.finetune.clone()),
        }
    }
}

/// Files written by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub table: PathBuf,
    pub summary: PathBuf,
    pub rows: Vec<(String, EvalReport)>,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    setting: &'a str,
    per_class_miou: &'a BTreeMap<String, f64>,
    category_miou: f64,
    category_std: f64,
    report: &'a EvalReport,
}

#[derive(Serialize)]
struct Summary<'a> {
    experiment: &'a str,
    config: &'a RunConfig,
    rows: Vec<SummaryRow<'a>>,
}

fn table_csv(rows: &[(String, EvalReport)]) -> String {
    let classes = rows
        .first()
        .map(|(_, r)| r.novel_classes.clone())
        .unwrap_or_default();
    let mut out = String::from("setting");
    for c in &classes {
        let _ = write!(out, ",{c}");
    }
    out.push_str(",avg\n");
    for (name, r) in rows {
        out.push_str(name);
        for c in &classes {
            let _ = write!(out, ",{}", r.per_class_miou[c]);
        }
        let _ = writeln!(out, ",{}", r.category_miou);
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn grid(name: &str, cfg: &RunConfig) -> Result<Vec<(String, EvalReport)>> {
    let k = cfg.eval.k_shot;
    let mut rows = Vec::new();
    match name {
        "main" => {
            let (pool, split) = cfg.dataset()?;
            let pre = pretrain(&pool, &split, &cfg.encoder, &cfg.pretrain)?;
            let plain = EvalConfig {
                k_shot: k,
                seeds: cfg.eval.seeds.clone(),
                finetune: None,
            };
            rows.push(("pretrain".into(), evaluate(&pre, &pool, &split, &plain)?));
            let tuned = EvalConfig {
                finetune: Some(cfg.finetune.clone()),
                ..plain
            };
            rows.push((
                "pretrain-finetune".into(),
                evaluate(&pre, &pool, &split, &tuned)?,
            ));
            let ours = meta_train(&pool, &split, &pre, &cfg.metatrain)?;
            rows.push(("ours".into(), evaluate(&ours, &pool, &split, &tuned)?));
        }
        "shots_sweep" => {
            let (pool, split) = cfg.dataset()?;
            let model = cfg.train(&pool, &split, Variant::Full)?;
            for shots in SHOTS {
                let report = evaluate(
                    &model,
                    &pool,
                    &split,
                    &cfg.eval_config(Variant::Full, shots),
                )?;
                rows.push((format!("{shots}-shot"), report));
            }
        }
        "points_sweep" => {
            for n in POINTS {
                let sized = RunConfig {
                    data: DataConfig {
                        n_points: n,
                        ..cfg.data.clone()
                    },
                    ..cfg.clone()
                };
                let (pool, split) = sized.dataset()?;
                let model = sized.train(&pool, &split, Variant::Full)?;
                let report = evaluate(&model, &pool, &split, &sized.eval_config(Variant::Full, k))?;
                rows.push((format!("{n}-points"), report));
            }
        }
        "pretrain_ablation" => {
            let (pool, split) = cfg.dataset()?;
            let scratch = cfg.train(&pool, &split, Variant::MetaOnly)?;
            let pre = cfg.train(&pool, &split, Variant::PretrainMeta)?;
            for (label, model, variant) in [
                ("a-metatrain", &scratch, Variant::MetaOnly),
                ("b-pretrain-metatrain", &pre, Variant::PretrainMeta),
                ("c-pretrain-metatrain-finetune", &pre, Variant::Full),
            ] {
                rows.push((
                    label.to_string(),
                    evaluate(model, &pool, &split, &cfg.eval_config(variant, k))?,
                ));
            }
        }
        "alignment_ablation" => {
            let (pool, split) = cfg.dataset()?;
            let pre = pretrain(&pool, &split, &cfg.encoder, &cfg.pretrain)?;
            for (label, lambda) in [("ours", cfg.metatrain.lambda), ("ours-wo-align", 0.0)] {
                let c = RunConfig {
                    metatrain: TrainConfig {
                        lambda,
                        ..cfg.metatrain.clone()
                    },
                    finetune: TrainConfig {
                        lambda,
                        ..cfg.finetune.clone()
                    },
                    ..cfg.clone()
                };
                let model = meta_train(&pool, &split, &pre, &c.metatrain)?;
                rows.push((
                    label.to_string(),
                    evaluate(&model, &pool, &split, &c.eval_config(Variant::Full, k))?,
                ));
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown experiment `{other}`; expected one of {}",
                EXPERIMENTS.join(", ")
            )))
        }
    }
    Ok(rows)
}

/// Runs one named grid and writes `<name>.csv` (one row per setting, one
/// column per novel class plus the average), `<name>.json` and a metrics
/// CSV per setting into `out_dir`.
pub fn run_experiment(name: &str, config: &RunConfig, out_dir: &Path) -> Result<ExperimentOutput> {
    if !EXPERIMENTS.contains(&name) {
        return Err(Error::Config(format!(
            "unknown experiment `{name}`; expected one of {}",
            EXPERIMENTS.join(", ")
        )));
    }
    config.validate()?;
    let rows = grid(name, config)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (setting, report) in &rows {
        write(
            &out_dir.join(format!("{name}_{setting}_metrics.csv")),
            &report.metrics_csv(),
        )?;
    }
    let table = out_dir.join(format!("{name}.csv"));
    write(&table, &table_csv(&rows))?;
    let summary = Summary {
        experiment: name,
        config,
        rows: rows
            .iter()
            .map(|(setting, r)| SummaryRow {
                setting,
                per_class_miou: &r.per_class_miou,
                category_miou: r.category_miou,
                category_std: r.category_std,
                report: r,
            })
            .collect(),
    };
    let summary_path = out_dir.join(format!("{name}.json"));
    write(
        &summary_path,
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(ExperimentOutput {
        table,
        summary: summary_path,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig {
            encoder: EncoderConfig {
                embed_dim: 8,
                hidden: vec![8],
                knn_k: 4,
            },
            data: DataConfig {
                n_train: 10,
                n_test: 1,
                n_points: 48,
                seed: 1,
                n_folds: 4,
                fold: 1,
            },
            ..RunConfig::default()
        };
        cfg.pretrain.steps = 2;
        cfg.metatrain.steps = 2;
        cfg.finetune.steps = 2;
        cfg.eval = EvalConfig {
            k_shot: 2,
            seeds: vec![0],
            finetune: None,
        };
        cfg
    }

    #[test]
    fn config_json_round_trips_and_fixes_stages() {
        let cfg = tiny();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let partial =
            RunConfig::from_json(r#"{"pretrain": {"steps": 7}, "encoder": {"knn_k": 4}}"#).unwrap();
        assert_eq!(partial.pretrain.stage, Stage::Pretrain);
        assert_eq!(partial.pretrain.steps, 7);
        assert_eq!(
            partial.pretrain.learning_rate,
            RunConfig::default().pretrain.learning_rate
        );
        let tuned = RunConfig::from_json(r#"{"finetune": {"learning_rate": 0.5}}"#).unwrap();
        assert_eq!(tuned.finetune.steps, 50);
        assert_eq!(partial.encoder.embed_dim, 64);
        assert_eq!(partial.encoder.knn_k, 4);
        assert!(matches!(RunConfig::from_json("{"), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_experiment_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_experiment("everything", &tiny(), dir.path()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn shots_sweep_writes_one_row_per_shot_count() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment("shots_sweep", &tiny(), dir.path()).unwrap();
        let table = fs::read_to_string(&out.table).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "setting,lamp,mug,avg");
        let settings: Vec<&str> = lines[1..]
            .iter()
            .map(|l| l.split(',').next().unwrap())
            .collect();
        assert_eq!(settings, ["1-shot", "2-shot", "5-shot", "10-shot"]);
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&out.summary).unwrap()).unwrap();
        assert_eq!(summary["rows"].as_array().unwrap().len(), 4);
        assert!(dir.path().join("shots_sweep_10-shot_metrics.csv").exists());
    }

    #[test]
    fn ablations_have_the_expected_rows() {
        let dir = tempfile::tempdir().unwrap();
        let names = |name: &str| -> Vec<String> {
            run_experiment(name, &tiny(), dir.path())
                .unwrap()
                .rows
                .into_iter()
                .map(|(s, _)| s)
                .collect()
        };
        assert_eq!(names("alignment_ablation"), ["ours", "ours-wo-align"]);
        assert_eq!(
            names("pretrain_ablation"),
            [
                "a-metatrain",
                "b-pretrain-metatrain",
                "c-pretrain-metatrain-finetune"
            ]
        );
        assert_eq!(names("main"), ["pretrain", "pretrain-finetune", "ours"]);
    }
}
