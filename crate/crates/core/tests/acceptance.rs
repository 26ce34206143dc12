//! Acceptance checks. Each test prints one `PASS`/`FAIL` line to stderr
//! (uncaptured) before asserting.

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use protoseg::encoder::{encode, init_params, knn_group, EncoderConfig, ModelParams};
use protoseg::eval::{evaluate, shape_iou, EvalReport, RunConfig, Variant};
use protoseg::metric::{episode_loss, masked_avg_pool, part_probabilities, BankSource};
use protoseg::shapes::{
    generate_pool, generate_shape, make_folds, DatasetSplit, LabeledShape, PartId, ShapePool,
    SyntheticClass,
};
use protoseg::tensor::{grad_check_many, Tape, Tensor, TensorError};
use protoseg::trainer::{meta_train, pretrain, resume_meta_train, Checkpoint, TrainConfig};
use protoseg::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "[acceptance {criterion:>2}] {verdict} {name}: {detail}"
    );
}

fn tensor_err(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

fn randomize_biases(params: &mut ModelParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.tensors_mut() {
        if t.shape().len() == 1 {
            t.data_mut()
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
    }
}

#[test]
fn c01_full_loss_gradient_check() {
    let start = Instant::now();
    let cfg = EncoderConfig {
        embed_dim: 16,
        hidden: vec![8, 16],
        knn_k: 4,
    };
    let mut params = init_params(&cfg, 21);
    randomize_biases(&mut params, 22);
    let shapes: Vec<LabeledShape> = (0..4)
        .map(|i| generate_shape(SyntheticClass::Chair, 100 + i, 64).unwrap())
        .collect();
    let tables: Vec<_> = shapes
        .iter()
        .map(|s| knn_group(&s.points, cfg.knn_k).unwrap())
        .collect();
    let parts = SyntheticClass::Chair.parts();
    assert_eq!(parts.len(), 3);
    let gts: Vec<&[PartId]> = shapes.iter().map(|s| s.labels.as_slice()).collect();

    let loss = |tape: &mut Tape, vars: &[protoseg::tensor::Var], fixed: Option<&[PartId]>| {
        let emb: Vec<_> = (0..4)
            .map(|i| encode(tape, vars, &cfg, &shapes[i].points, &tables[i]))
            .collect::<Result<_, _>>()?;
        episode_loss(
            tape,
            &emb[..2],
            &gts[..2],
            &emb[2..],
            &gts[2..],
            &parts,
            2.0,
            1.0,
            fixed,
        )
    };
    let predicted = {
        let mut tape = Tape::new();
        let vars = params.register_frozen(&mut tape);
        loss(&mut tape, &vars, None).unwrap().predicted
    };
    let rep = grad_check_many(
        |tape, vars| {
            Ok(loss(tape, vars, Some(&predicted))
                .map_err(tensor_err)?
                .total)
        },
        params.tensors(),
        1e-5,
    )
    .unwrap();
    let elapsed = start.elapsed();
    let pass = rep.max_rel_error <= 1e-4 && elapsed < Duration::from_secs(60);
    report(
        1,
        "gradient check of the full episode loss",
        pass,
        &format!(
            "max rel err {:.2e} over {} params in {:.1?}",
            rep.max_rel_error, rep.elements, elapsed
        ),
    );
    assert!(pass, "{rep:?} in {elapsed:?}");
}

fn permuted(shape: &LabeledShape, order: &[usize]) -> LabeledShape {
    LabeledShape::new(
        shape.class_id,
        order.iter().map(|&i| shape.points[i]).collect(),
        order.iter().map(|&i| shape.labels[i]).collect(),
    )
    .unwrap()
}

fn bank_of(
    params: &ModelParams,
    cfg: &EncoderConfig,
    support: &[&LabeledShape],
    parts: &[PartId],
) -> Tensor {
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let emb: Vec<_> = support
        .iter()
        .map(|s| {
            encode(
                &mut tape,
                &vars,
                cfg,
                &s.points,
                &knn_group(&s.points, cfg.knn_k).unwrap(),
            )
            .unwrap()
        })
        .collect();
    let masks: Vec<&[PartId]> = support.iter().map(|s| s.labels.as_slice()).collect();
    let bank = masked_avg_pool(&mut tape, &emb, &masks, parts, BankSource::Support).unwrap();
    tape.value(bank.vectors).clone()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn c02_prototype_permutation_invariance() {
    let cfg = EncoderConfig {
        embed_dim: 16,
        hidden: vec![8, 16],
        knn_k: 6,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for episode in 0..50u64 {
        let class = SyntheticClass::ALL[rng.random_range(0..SyntheticClass::ALL.len())];
        let k = rng.random_range(1..=4);
        let params = init_params(&cfg, 1000 + episode);
        let support: Vec<LabeledShape> = (0..k)
            .map(|i| generate_shape(class, episode * 10 + i as u64, 64).unwrap())
            .collect();
        let parts = class.parts();
        let refs: Vec<&LabeledShape> = support.iter().collect();
        let base = bank_of(&params, &cfg, &refs, &parts);

        let shuffled: Vec<LabeledShape> = support
            .iter()
            .map(|s| {
                let mut order: Vec<usize> = (0..s.len()).collect();
                order.shuffle(&mut rng);
                permuted(s, &order)
            })
            .collect();
        let mut refs: Vec<&LabeledShape> = shuffled.iter().collect();
        worst = worst.max(max_abs_diff(&base, &bank_of(&params, &cfg, &refs, &parts)));
        refs.shuffle(&mut rng);
        refs.reverse();
        worst = worst.max(max_abs_diff(&base, &bank_of(&params, &cfg, &refs, &parts)));
    }
    let pass = worst <= 1e-12;
    report(
        2,
        "prototype point/shot permutation invariance",
        pass,
        &format!("max abs diff {worst:.2e} over 50 episodes"),
    );
    assert!(pass);
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

/// Nearest prototype by cosine distance, computed directly; lowest part id wins ties.
fn brute_labels(emb: &Tensor, protos: &Tensor, parts: &[PartId]) -> Vec<PartId> {
    let (n, d) = (emb.shape()[0], emb.shape()[1]);
    let c = protos.shape()[0];
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (0..n)
        .map(|j| {
            let e = &emb.data()[j * d..(j + 1) * d];
            let mut best = (f64::INFINITY, 0);
            for p in 0..c {
                let q = &protos.data()[p * d..(p + 1) * d];
                let dot: f64 = e.iter().zip(q).map(|(a, b)| a * b).sum();
                let dist = 1.0 - dot / (norm(e) * norm(q));
                if dist < best.0 {
                    best = (dist, p);
                }
            }
            parts[best.1]
        })
        .collect()
}

fn classify(emb: &Tensor, protos: &Tensor, parts: &[PartId]) -> (Tensor, Vec<PartId>) {
    let mut tape = Tape::new();
    let e = tape.constant(emb.clone());
    let p = tape.constant(protos.clone());
    let bank = protoseg::metric::PrototypeBank {
        part_ids: parts.to_vec(),
        vectors: p,
        source: BankSource::Support,
        missing: vec![],
    };
    let r = part_probabilities(&mut tape, e, &bank, 2.0).unwrap();
    (tape.value(r.probabilities).clone(), r.labels)
}

#[test]
fn c03_probability_rows_and_nearest_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_sum, mut mismatches) = (0.0f64, 0usize);
    for _ in 0..100 {
        let (n, d, c) = (
            rng.random_range(1..20),
            rng.random_range(1..8),
            rng.random_range(1..6),
        );
        let parts: Vec<PartId> = (0..c as u32).map(|i| PartId(3 * i + 1)).collect();
        let emb = random_matrix(&mut rng, n, d);
        let protos = random_matrix(&mut rng, c, d);
        let (probs, labels) = classify(&emb, &protos, &parts);
        for row in probs.data().chunks(c) {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        mismatches += labels
            .iter()
            .zip(brute_labels(&emb, &protos, &parts))
            .filter(|(a, b)| **a != *b)
            .count();
    }
    let pass = worst_sum <= 1e-9 && mismatches == 0;
    report(
        3,
        "probability normalization and nearest-prototype labels",
        pass,
        &format!(
            "max |row sum - 1| {worst_sum:.2e}, {mismatches} label mismatches over 100 instances"
        ),
    );
    assert!(pass);
}

#[test]
fn c04_labels_are_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut changed = 0usize;
    for _ in 0..100 {
        let (n, d, c) = (
            rng.random_range(1..30),
            rng.random_range(2..10),
            rng.random_range(2..6),
        );
        let parts: Vec<PartId> = (0..c as u32).map(PartId).collect();
        let emb = random_matrix(&mut rng, n, d);
        let protos = random_matrix(&mut rng, c, d);
        let (_, base) = classify(&emb, &protos, &parts);
        for s in [0.1, 10.0] {
            let scale = |t: &Tensor| {
                Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect()).unwrap()
            };
            let (_, scaled) = classify(&scale(&emb), &scale(&protos), &parts);
            changed += base.iter().zip(&scaled).filter(|(a, b)| a != b).count();
        }
    }
    let pass = changed == 0;
    report(
        4,
        "label invariance to scaling by 0.1 and 10",
        pass,
        &format!("{changed} changed labels over 100 instances"),
    );
    assert!(pass);
}

/// Confusion-matrix form of the per-part IoU; a part absent from both
/// prediction and ground truth counts as 1.
fn confusion_miou(pred: &[PartId], gt: &[PartId], parts: &[PartId]) -> f64 {
    let idx = |l: PartId| parts.iter().position(|&p| p == l).unwrap_or(parts.len());
    let m = parts.len() + 1;
    let mut conf = vec![vec![0usize; m]; m];
    for (&p, &g) in pred.iter().zip(gt) {
        conf[idx(g)][idx(p)] += 1;
    }
    let mut sum = 0.0;
    for c in 0..parts.len() {
        let tp = conf[c][c];
        let row: usize = conf[c].iter().sum();
        let col: usize = conf.iter().map(|r| r[c]).sum();
        let union = row + col - tp;
        sum += if union == 0 {
            1.0
        } else {
            tp as f64 / union as f64
        };
    }
    sum / parts.len() as f64
}

#[test]
fn c05_iou_matches_confusion_matrix_oracle() {
    let (a, b) = (PartId(0), PartId(1));
    let hand = shape_iou(&[a, b, b, b], &[a, a, b, b], &[a, b]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst, mut empty_parts) = (0.0f64, 0usize);
    for _ in 0..100 {
        let parts: Vec<PartId> = (0..rng.random_range(1..6u32))
            .map(|i| PartId(10 + i))
            .collect();
        // Only a random subset of parts is ever used, so some are absent from both sides.
        let used: Vec<PartId> = parts
            .iter()
            .copied()
            .filter(|_| rng.random_bool(0.7))
            .collect();
        let used = if used.is_empty() {
            vec![parts[0]]
        } else {
            used
        };
        let n = rng.random_range(1..60);
        let gt: Vec<PartId> = (0..n)
            .map(|_| used[rng.random_range(0..used.len())])
            .collect();
        let pred: Vec<PartId> = (0..n)
            .map(|_| used[rng.random_range(0..used.len())])
            .collect();
        empty_parts += parts.len() - used.len();
        worst = worst.max(
            (shape_iou(&pred, &gt, &parts).unwrap() - confusion_miou(&pred, &gt, &parts)).abs(),
        );
    }
    let pass = worst <= 1e-12 && (hand - 7.0 / 12.0).abs() <= 1e-12 && empty_parts > 0;
    report(
        5,
        "shape IoU against a confusion-matrix oracle",
        pass,
        &format!(
            "max diff {worst:.2e} over 100 cases ({empty_parts} absent parts), hand case {hand:.6}"
        ),
    );
    assert!(pass);
}

// Shared trained models for the end-to-end and trend checks.

fn bench_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.fold = 0;
    cfg.eval.seeds = vec![0, 1, 2];
    cfg
}

struct Bench {
    cfg: RunConfig,
    pool: ShapePool,
    split: DatasetSplit,
    pretrained: Checkpoint,
    meta: Checkpoint,
    pretrain_time: Duration,
    meta_time: Duration,
}

fn bench() -> &'static Bench {
    static BENCH: OnceLock<Bench> = OnceLock::new();
    BENCH.get_or_init(|| {
        let cfg = bench_config();
        let (pool, split) = cfg.dataset().unwrap();
        let t = Instant::now();
        let pretrained = pretrain(&pool, &split, &cfg.encoder, &cfg.pretrain).unwrap();
        let pretrain_time = t.elapsed();
        let t = Instant::now();
        let meta = meta_train(&pool, &split, &pretrained, &cfg.metatrain).unwrap();
        let meta_time = t.elapsed();
        Bench {
            cfg,
            pool,
            split,
            pretrained,
            meta,
            pretrain_time,
            meta_time,
        }
    })
}

fn eval(
    b: &Bench,
    model: &Checkpoint,
    cfg: &RunConfig,
    variant: Variant,
    k_shot: usize,
    seeds: &[u64],
) -> EvalReport {
    let mut ec = cfg.eval_config(variant, k_shot);
    ec.seeds = seeds.to_vec();
    evaluate(model, &b.pool, &b.split, &ec).unwrap()
}

#[test]
fn c06_end_to_end_few_shot() {
    let b = bench();
    let t = Instant::now();
    let r = eval(b, &b.meta, &b.cfg, Variant::Full, 5, &[0, 1, 2]);
    let total = b.pretrain_time + b.meta_time + t.elapsed();
    let pass = r.category_miou >= 0.80 && total < Duration::from_secs(30 * 60);
    report(
        6,
        "end-to-end 5-shot novel-class mIoU",
        pass,
        &format!(
            "mIoU {:.4} ± {:.4} {:?} (pretrain {:.0?}, meta-train {:.0?}, total {:.0?})",
            r.category_miou, r.category_std, r.per_class_miou, b.pretrain_time, b.meta_time, total
        ),
    );
    assert!(pass);
}

#[test]
fn c07_more_shots_do_not_hurt() {
    let b = bench();
    let m = |k| eval(b, &b.meta, &b.cfg, Variant::Full, k, &[0, 1, 2]).category_miou;
    let (one, five, ten) = (m(1), m(5), m(10));
    let pass = ten >= one - 0.02 && five >= one - 0.02;
    report(
        7,
        "shot scaling",
        pass,
        &format!("1-shot {one:.4}, 5-shot {five:.4}, 10-shot {ten:.4}"),
    );
    assert!(pass);
}

#[test]
fn c08_alignment_does_not_hurt() {
    let b = bench();
    let seeds = [0, 1, 2, 3, 4];
    let with = eval(b, &b.meta, &b.cfg, Variant::Full, 5, &seeds).category_miou;
    let mut cfg = b.cfg.clone();
    cfg.metatrain.lambda = 0.0;
    cfg.finetune.lambda = 0.0;
    let plain = meta_train(&b.pool, &b.split, &b.pretrained, &cfg.metatrain).unwrap();
    let without = eval(b, &plain, &cfg, Variant::Full, 5, &seeds).category_miou;
    let pass = with >= without - 0.01;
    report(
        8,
        "prototype alignment ablation",
        pass,
        &format!("with {with:.4}, without {without:.4} (5 seeds)"),
    );
    assert!(pass);
}

#[test]
fn c09_pretraining_and_finetuning_help() {
    let b = bench();
    let seeds = [0, 1, 2];
    let scratch = b.cfg.train(&b.pool, &b.split, Variant::MetaOnly).unwrap();
    let a = eval(b, &scratch, &b.cfg, Variant::MetaOnly, 5, &seeds).category_miou;
    let bb = eval(b, &b.meta, &b.cfg, Variant::PretrainMeta, 5, &seeds).category_miou;
    let c = eval(b, &b.meta, &b.cfg, Variant::Full, 5, &seeds).category_miou;
    let pass = c >= bb && c >= a;
    report(
        9,
        "pre-training/finetuning ablation",
        pass,
        &format!("(a) {a:.4}, (b) {bb:.4}, (c) {c:.4}"),
    );
    assert!(pass);
}

#[test]
fn c10_determinism_and_resume() {
    let enc = EncoderConfig {
        embed_dim: 16,
        hidden: vec![8, 16],
        knn_k: 6,
    };
    let classes = [
        SyntheticClass::Table,
        SyntheticClass::Lamp,
        SyntheticClass::Mug,
        SyntheticClass::Knife,
    ];
    let run = || {
        let pool = generate_pool(&classes, 6, 3, 128, 10).unwrap();
        let split = make_folds(&pool.class_ids(), 2).unwrap().swap_remove(1);
        let mut cfg = RunConfig {
            encoder: enc.clone(),
            ..RunConfig::default()
        };
        cfg.pretrain.steps = 20;
        cfg.metatrain.steps = 20;
        cfg.finetune.steps = 10;
        let model = cfg.train(&pool, &split, Variant::Full).unwrap();
        let mut ec = cfg.eval_config(Variant::Full, 2);
        ec.seeds = vec![0, 1, 2];
        evaluate(&model, &pool, &split, &ec).unwrap().metrics_csv()
    };
    let (first, second) = (run(), run());
    let csv_same = first.as_bytes() == second.as_bytes();

    let pool = generate_pool(&classes, 6, 3, 128, 11).unwrap();
    let split = make_folds(&pool.class_ids(), 2).unwrap().swap_remove(0);
    let config = TrainConfig {
        steps: 30,
        k_shot: 2,
        n_query: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    let start = Checkpoint::fresh(enc.clone(), 9).unwrap();
    let straight = meta_train(&pool, &split, &start, &config).unwrap();
    let half = meta_train(
        &pool,
        &split,
        &start,
        &TrainConfig {
            steps: 13,
            ..config.clone()
        },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    half.save(&path).unwrap();
    let resumed =
        resume_meta_train(&pool, &split, &Checkpoint::load(&path).unwrap(), &config).unwrap();
    let bits = |c: &Checkpoint| -> Vec<u64> {
        c.params
            .tensors()
            .iter()
            .flat_map(|t| t.data().iter().map(|x| x.to_bits()))
            .collect()
    };
    let resume_same =
        bits(&straight) == bits(&resumed) && straight.to_bytes() == resumed.to_bytes();

    let pass = csv_same && resume_same;
    report(
        10,
        "determinism and bit-exact resume",
        pass,
        &format!("metric CSVs identical: {csv_same}, resumed run identical: {resume_same}"),
    );
    assert!(pass);
}
