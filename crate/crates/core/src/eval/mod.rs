//! Part IoU scoring, the few-shot evaluation protocol and experiment grids.

mod experiment;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use experiment::{
    run_experiment, DataConfig, ExperimentOutput, RunConfig, Variant, EXPERIMENTS,
};

use crate::encoder::{embed, EncoderConfig, ModelParams, NeighborCache, NeighborTable};
use crate::error::{Error, Result};
use crate::metric::{masked_avg_pool, nearest_labels, BankSnapshot, BankSource};
use crate::shapes::{ClassId, DatasetSplit, LabeledShape, PartId, Partition, ShapePool};
use crate::tensor::Tape;
use crate::trainer::{meta_finetune, Checkpoint, Stage, TrainConfig};

/// Mean IoU over `class_parts` of one shape. A part absent from both the
/// prediction and the ground truth scores 1.
pub fn shape_iou(pred: &[PartId], gt: &[PartId], class_parts: &[PartId]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Usage(format!(
            "{} predicted labels for {} points",
            pred.len(),
            gt.len()
        )));
    }
    if class_parts.is_empty() {
        return Err(Error::Usage("class has no parts".into()));
    }
    let mut total = 0.0;
    for &part in class_parts {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&p, &g) in pred.iter().zip(gt) {
            let (a, b) = (p == part, g == part);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        total += if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
    }
    Ok(total / class_parts.len() as f64)
}

/// Evaluation protocol settings, echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k_shot: usize,
    pub seeds: Vec<u64>,
    /// Meta-finetuning on the support shapes before scoring; `k_shot` and
    /// `seed` are overridden per evaluation seed.
    pub finetune: Option<TrainConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_shot: 5,
            seeds: (0..5).collect(),
            finetune: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeScore {
    pub class: String,
    pub seed: u64,
    pub shape_id: usize,
    pub instance_miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub seed: u64,
    pub support: BTreeMap<String, Vec<usize>>,
    pub per_class_miou: BTreeMap<String, f64>,
    pub category_miou: f64,
    /// Class parts that none of the support shapes contained.
    pub uncovered_parts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub encoder: EncoderConfig,
    pub novel_classes: Vec<String>,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedEntry>,
    pub per_shape_miou: Vec<ShapeScore>,
    /// Mean over seeds of each class mIoU.
    pub per_class_miou: BTreeMap<String, f64>,
    pub per_class_std: BTreeMap<String, f64>,
    /// Unweighted mean of `per_class_miou`.
    pub category_miou: f64,
    /// Spread of the per-seed category mIoU.
    pub category_std: f64,
    pub uncovered_parts: usize,
}

pub const METRICS_HEADER: &str = "class,seed,shape_id,instance_miou";

impl EvalReport {
    /// One row per scored query shape.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for s in &self.per_shape_miou {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                s.class, s.seed, s.shape_id, s.instance_miou
            );
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("evaluation report: {e}")))
    }
}

/// Parses a metrics CSV written by [`EvalReport::metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<ShapeScore>> {
    let err = |line: usize, message: String| Error::Parse {
        file: "metrics csv".into(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == METRICS_HEADER => {}
        _ => return Err(err(1, format!("expected header `{METRICS_HEADER}`"))),
    }
    lines
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(err(i + 1, format!("expected 4 fields, got {}", f.len())));
            }
            let bad = |what: &str| err(i + 1, format!("invalid {what}"));
            Ok(ShapeScore {
                class: f[0].to_string(),
                seed: f[1].parse().map_err(|_| bad("seed"))?,
                shape_id: f[2].parse().map_err(|_| bad("shape id"))?,
                instance_miou: f[3].parse().map_err(|_| bad("mIoU"))?,
            })
        })
        .collect()
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub(crate) fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Prototypes of `parts` from labeled support shapes.
pub fn support_bank(
    params: &ModelParams,
    encoder: &EncoderConfig,
    support: &[(&LabeledShape, &NeighborTable)],
    parts: &[PartId],
) -> Result<(BankSnapshot, Vec<PartId>)> {
    let mut tape = Tape::new();
    let embeddings = support
        .iter()
        .map(|(s, nbr)| Ok(tape.constant(embed(params, encoder, &s.points, nbr)?)))
        .collect::<Result<Vec<_>>>()?;
    let masks: Vec<&[PartId]> = support.iter().map(|(s, _)| s.labels.as_slice()).collect();
    let bank = masked_avg_pool(&mut tape, &embeddings, &masks, parts, BankSource::Support)?;
    Ok((bank.snapshot(&tape), bank.missing))
}

/// Labels each point with its nearest prototype.
pub fn segment_points(
    params: &ModelParams,
    encoder: &EncoderConfig,
    bank: &BankSnapshot,
    points: &[[f64; 3]],
    neighbors: &NeighborTable,
) -> Result<Vec<PartId>> {
    if bank.part_ids.is_empty() {
        return Err(Error::Usage(
            "cannot segment against an empty prototype bank".into(),
        ));
    }
    let emb = embed(params, encoder, points, neighbors)?;
    if emb.shape()[1] != bank.vectors.shape()[1] {
        return Err(Error::Usage(format!(
            "embedding width {} does not match prototype width {}",
            emb.shape()[1],
            bank.vectors.shape()[1]
        )));
    }
    let mut tape = Tape::new();
    let e = tape.constant(emb);
    let b = tape.constant(bank.vectors.clone());
    let ue = tape.l2_normalize_rows(e)?;
    let ub = tape.l2_normalize_rows(b)?;
    let sim = tape.matmul_nt(ue, ub)?;
    let negated = tape.scale(sim, -1.0)?;
    let distances = tape.add_scalar(negated, 1.0)?;
    Ok(nearest_labels(tape.value(distances), &bank.part_ids))
}

/// Picks `k_shot` distinct training shapes of `class` for `seed`.
pub fn sample_support(
    pool: &ShapePool,
    class: ClassId,
    k_shot: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let train = pool.indices(class, Partition::Train);
    if train.len() < k_shot {
        return Err(Error::Sampling(format!(
            "class {class} has {} labeled shapes, {k_shot} needed",
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, class.0 as u64 + 1));
    let picks = rand::seq::index::sample(&mut rng, train.len(), k_shot);
    Ok(picks.iter().map(|i| train[i]).collect())
}

fn draw_support(
    pool: &ShapePool,
    classes: &[ClassId],
    k_shot: usize,
    seed: u64,
) -> Result<BTreeMap<ClassId, Vec<usize>>> {
    let mut out = BTreeMap::new();
    for &c in classes {
        if pool.indices(c, Partition::Test).is_empty() {
            return Err(Error::Sampling(format!("class {c} has no query shapes")));
        }
        out.insert(c, sample_support(pool, c, k_shot, seed)?);
    }
    Ok(out)
}

/// Scores `checkpoint` on the novel classes of `split`.
///
/// For every seed, `k_shot` labeled shapes per class are drawn from the
/// training partition, optionally used for meta-finetuning, and averaged
/// into prototypes; every test-partition shape of the class is then
/// segmented and scored.
pub fn evaluate(
    checkpoint: &Checkpoint,
    pool: &ShapePool,
    split: &DatasetSplit,
    config: &EvalConfig,
) -> Result<EvalReport> {
    if config.k_shot == 0 {
        return Err(Error::Config("k_shot must be at least 1".into()));
    }
    if config.seeds.is_empty() {
        return Err(Error::Config("evaluation needs at least one seed".into()));
    }
    if split.novel_classes.is_empty() {
        return Err(Error::Config("split has no novel classes".into()));
    }
    let mut classes = split.novel_classes.clone();
    classes.sort_unstable();
    let distinct: BTreeSet<_> = classes.iter().collect();
    if distinct.len() != classes.len() {
        return Err(Error::Config("novel classes repeat".into()));
    }
    let names: Vec<String> = classes
        .iter()
        .map(|&c| Ok(pool.catalog().class(c)?.name.clone()))
        .collect::<Result<_>>()?;
    let neighbors = NeighborCache::new(pool, checkpoint.encoder.knn_k);

    let mut per_seed = Vec::new();
    let mut per_shape = Vec::new();
    for &seed in &config.seeds {
        let support = draw_support(pool, &classes, config.k_shot, seed)?;
        let tuned;
        let model = match &config.finetune {
            Some(ft) => {
                let ft = TrainConfig {
                    stage: Stage::Finetune,
                    k_shot: config.k_shot,
                    seed,
                    ..ft.clone()
                };
                tuned = meta_finetune(pool, &support, checkpoint, &ft)?;
                &tuned
            }
            None => checkpoint,
        };
        let mut entry = SeedEntry {
            seed,
            support: BTreeMap::new(),
            per_class_miou: BTreeMap::new(),
            category_miou: 0.0,
            uncovered_parts: 0,
        };
        for (&c, name) in classes.iter().zip(&names) {
            let parts = &pool.catalog().class(c)?.parts;
            let shots = &support[&c];
            let tables = shots
                .iter()
                .map(|&i| neighbors.get(pool, i))
                .collect::<Result<Vec<_>>>()?;
            let labeled: Vec<_> = shots
                .iter()
                .zip(&tables)
                .map(|(&i, t)| (pool.shape(i), t.as_ref()))
                .collect();
            let (bank, missing) = support_bank(&model.params, &model.encoder, &labeled, parts)?;
            entry.uncovered_parts += missing.len();
            let mut scores = Vec::new();
            for &q in pool.indices(c, Partition::Test) {
                let shape = pool.shape(q);
                let table = neighbors.get(pool, q)?;
                let pred =
                    segment_points(&model.params, &model.encoder, &bank, &shape.points, &table)?;
                let iou = shape_iou(&pred, &shape.labels, parts)?;
                scores.push(iou);
                per_shape.push(ShapeScore {
                    class: name.clone(),
                    seed,
                    shape_id: q,
                    instance_miou: iou,
                });
            }
            entry.support.insert(name.clone(), shots.clone());
            entry.per_class_miou.insert(name.clone(), mean(&scores));
        }
        entry.category_miou = mean(&entry.per_class_miou.values().copied().collect::<Vec<_>>());
        log::info!("seed {seed}: category mIoU {:.4}", entry.category_miou);
        per_seed.push(entry);
    }

    let mut per_class_miou = BTreeMap::new();
    let mut per_class_std = BTreeMap::new();
    for name in &names {
        let xs: Vec<f64> = per_seed.iter().map(|e| e.per_class_miou[name]).collect();
        per_class_miou.insert(name.clone(), mean(&xs));
        per_class_std.insert(name.clone(), std_dev(&xs));
    }
    let category: Vec<f64> = per_seed.iter().map(|e| e.category_miou).collect();
    Ok(EvalReport {
        config: config.clone(),
        encoder: checkpoint.encoder.clone(),
        novel_classes: names,
        seeds: config.seeds.clone(),
        uncovered_parts: per_seed.iter().map(|e| e.uncovered_parts).sum(),
        per_seed,
        per_shape_miou: per_shape,
        category_miou: mean(&per_class_miou.values().copied().collect::<Vec<_>>()),
        category_std: std_dev(&category),
        per_class_miou,
        per_class_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::knn_group;
    use crate::metric::part_probabilities;
    use crate::shapes::{generate_pool, SyntheticClass};

    const A: PartId = PartId(0);
    const B: PartId = PartId(1);

    #[test]
    fn hand_counted_case() {
        let v = shape_iou(&[A, B, B, B], &[A, A, B, B], &[A, B]).unwrap();
        assert!((v - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_disjoint() {
        assert_eq!(shape_iou(&[A, B, A], &[A, B, A], &[A, B]).unwrap(), 1.0);
        assert_eq!(shape_iou(&[A, A], &[B, B], &[A, B]).unwrap(), 0.0);
    }

    #[test]
    fn absent_part_counts_as_one() {
        let c = PartId(2);
        let v = shape_iou(&[A, B], &[A, B], &[A, B, c]).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn constant_prediction_on_balanced_shape() {
        let v = shape_iou(&[A, A, A, A], &[A, A, B, B], &[A, B]).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_is_usage() {
        assert!(matches!(
            shape_iou(&[A], &[A, B], &[A, B]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn std_of_constant_is_zero() {
        assert_eq!(std_dev(&[0.5, 0.5, 0.5]), 0.0);
        assert!((std_dev(&[0.0, 1.0]) - 0.5).abs() < 1e-15);
    }

    fn small_setup() -> (ShapePool, DatasetSplit, Checkpoint) {
        let classes = [
            SyntheticClass::Table,
            SyntheticClass::Mug,
            SyntheticClass::Knife,
        ];
        let pool = generate_pool(&classes, 3, 2, 64, 5).unwrap();
        let split = DatasetSplit {
            fold: 0,
            base_classes: vec![SyntheticClass::Table.id()],
            novel_classes: vec![SyntheticClass::Knife.id(), SyntheticClass::Mug.id()],
        };
        let enc = EncoderConfig {
            embed_dim: 8,
            hidden: vec![8, 8],
            knn_k: 4,
        };
        (pool, split, Checkpoint::fresh(enc, 3).unwrap())
    }

    #[test]
    fn report_has_one_entry_per_seed_and_consistent_means() {
        let (pool, split, ckpt) = small_setup();
        let cfg = EvalConfig {
            k_shot: 2,
            seeds: vec![4, 5, 6, 7, 8],
            finetune: None,
        };
        let r = evaluate(&ckpt, &pool, &split, &cfg).unwrap();
        assert_eq!(r.per_seed.len(), 5);
        assert_eq!(r.per_shape_miou.len(), 5 * 2 * 2);
        let class_mean = mean(&r.per_class_miou.values().copied().collect::<Vec<_>>());
        assert!((r.category_miou - class_mean).abs() < 1e-12);
        assert!(r
            .per_shape_miou
            .iter()
            .all(|s| (0.0..=1.0).contains(&s.instance_miou)));
        assert_eq!(
            r.novel_classes,
            vec!["mug".to_string(), "knife".to_string()]
        );
    }

    #[test]
    fn reports_round_trip_and_repeat() {
        let (pool, split, ckpt) = small_setup();
        let ft = TrainConfig {
            steps: 2,
            ..TrainConfig::for_stage(Stage::Finetune)
        };
        let cfg = EvalConfig {
            k_shot: 2,
            seeds: vec![1, 2],
            finetune: Some(ft),
        };
        let a = evaluate(&ckpt, &pool, &split, &cfg).unwrap();
        let b = evaluate(&ckpt, &pool, &split, &cfg).unwrap();
        assert_eq!(a.metrics_csv(), b.metrics_csv());
        assert_eq!(a.summary_json(), b.summary_json());
        assert_eq!(EvalReport::from_json(&a.summary_json()).unwrap(), a);
        assert_eq!(
            parse_metrics_csv(&a.metrics_csv()).unwrap(),
            a.per_shape_miou
        );
    }

    #[test]
    fn too_few_shapes_is_sampling_error() {
        let (pool, split, ckpt) = small_setup();
        let cfg = EvalConfig {
            k_shot: 4,
            seeds: vec![0],
            finetune: None,
        };
        assert!(matches!(
            evaluate(&ckpt, &pool, &split, &cfg),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn segmentation_matches_the_probability_labels() {
        let (pool, _, ckpt) = small_setup();
        let mug = pool.indices(SyntheticClass::Mug.id(), Partition::Train);
        let (support, query) = (pool.shape(mug[0]), pool.shape(mug[1]));
        let (sn, qn) = (
            knn_group(&support.points, 4).unwrap(),
            knn_group(&query.points, 4).unwrap(),
        );
        let parts = SyntheticClass::Mug.parts();
        let (bank, missing) =
            support_bank(&ckpt.params, &ckpt.encoder, &[(support, &sn)], &parts).unwrap();
        assert!(missing.is_empty());
        let labels =
            segment_points(&ckpt.params, &ckpt.encoder, &bank, &query.points, &qn).unwrap();

        let mut tape = Tape::new();
        let emb = tape.constant(embed(&ckpt.params, &ckpt.encoder, &query.points, &qn).unwrap());
        let on_tape = bank.on_tape(&mut tape);
        let result = part_probabilities(&mut tape, emb, &on_tape, 2.0).unwrap();
        assert_eq!(labels, result.labels);
    }
}
