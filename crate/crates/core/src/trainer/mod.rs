//! Three-stage training: supervised pre-training, episodic meta-training on
//! base classes, and meta-finetuning on the few labeled novel shapes.

mod checkpoint;
mod optim;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, HistoryEntry, RngState, Stage, FORMAT_VERSION, MAGIC};
pub use optim::{global_norm, optimizer_step, AdamState};

use crate::encoder::{encode, ClassifierHead, EncoderConfig, NeighborCache};
use crate::error::{Error, Result};
use crate::metric::episode_loss;
use crate::shapes::{
    finetune_episode, sample_episode, ClassId, DatasetSplit, Episode, PartId, Partition, ShapePool,
};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub steps: usize,
    /// Support shapes per episode. For finetuning, the labeled budget per class.
    pub k_shot: usize,
    /// Query shapes per meta-training episode.
    pub n_query: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub seed: u64,
    pub grad_clip_norm: f64,
    /// Shapes per pre-training batch.
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Metatrain,
            learning_rate: 1e-3,
            steps: 2000,
            k_shot: 1,
            n_query: 1,
            alpha: 2.0,
            lambda: 1.0,
            seed: 0,
            grad_clip_norm: 10.0,
            batch_size: 2,
        }
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let steps = if stage == Stage::Finetune { 50 } else { 2000 };
        Self {
            stage,
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{m} in {self:?}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.k_shot == 0 {
            return bad("k_shot must be at least 1");
        }
        if self.stage == Stage::Metatrain && self.n_query == 0 {
            return bad("n_query must be at least 1");
        }
        if self.stage == Stage::Pretrain && self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.alpha.is_finite() && self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("alpha and lambda must be finite, lambda non-negative");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive");
        }
        if self.stage == Stage::Init {
            return bad("init is not a training stage");
        }
        Ok(())
    }

    fn expect_stage(&self, stage: Stage) -> Result<()> {
        self.validate()?;
        if self.stage != stage {
            return Err(Error::Config(format!(
                "{} config passed to {}",
                self.stage.name(),
                stage.name()
            )));
        }
        Ok(())
    }
}

/// Mutable training state: parameters (encoder first, then an optional
/// head), optimizer moments and the sampling stream.
struct Run<'a> {
    pool: &'a ShapePool,
    neighbors: NeighborCache,
    base: Checkpoint,
    config: TrainConfig,
    tensors: Vec<Tensor>,
    encoder_len: usize,
    adam: AdamState,
    rng: ChaCha8Rng,
    step: usize,
}

impl<'a> Run<'a> {
    fn new(
        pool: &'a ShapePool,
        start: &Checkpoint,
        head: Option<ClassifierHead>,
        config: &TrainConfig,
    ) -> Self {
        let mut tensors = start.params.tensors().to_vec();
        let encoder_len = tensors.len();
        let mut base = start.clone();
        if let Some(h) = &head {
            tensors.push(h.weight.clone());
            tensors.push(h.bias.clone());
            base.head = head;
        }
        let adam = AdamState::new(&tensors);
        Self {
            pool,
            neighbors: NeighborCache::new(pool, start.encoder.knn_k),
            base,
            config: config.clone(),
            tensors,
            encoder_len,
            adam,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            step: 0,
        }
    }

    fn checkpoint(&self) -> Checkpoint {
        let mut c = self.base.clone();
        let mut params = c.params.clone();
        params
            .tensors_mut()
            .clone_from_slice(&self.tensors[..self.encoder_len]);
        c.params = params;
        if let Some(h) = &mut c.head {
            if self.tensors.len() > self.encoder_len {
                h.weight = self.tensors[self.encoder_len].clone();
                h.bias = self.tensors[self.encoder_len + 1].clone();
            }
        }
        c.config = Some(self.config.clone());
        c.stage = self.config.stage;
        c.step = self.step;
        c.optimizer = Some(self.adam.clone());
        c.rng = Some(RngState::capture(&self.rng));
        c
    }

    fn embed(&self, tape: &mut Tape, vars: &[Var], idx: usize) -> Result<Var> {
        let table = self.neighbors.get(self.pool, idx)?;
        encode(
            tape,
            &vars[..self.encoder_len],
            &self.base.encoder,
            &self.pool.shape(idx).points,
            &table,
        )
    }

    /// Runs until `config.steps`. `loss_fn` builds one step's scalar loss and
    /// reports how many points it skipped.
    fn run(
        mut self,
        mut loss_fn: impl FnMut(
            &Self,
            &mut Tape,
            &[Var],
            &mut ChaCha8Rng,
            usize,
        ) -> Result<(Var, usize)>,
    ) -> Result<Checkpoint> {
        let stage = self.config.stage;
        while self.step < self.config.steps {
            let step = self.step + 1;
            let diverged = |run: &Self, cause: TensorError| Error::Diverged {
                step,
                cause,
                last: Box::new(run.checkpoint()),
            };
            let mut tape = Tape::new();
            let vars: Vec<Var> = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
            let mut rng = self.rng.clone();
            let (loss, uncovered) = match loss_fn(&self, &mut tape, &vars, &mut rng, step) {
                Ok(out) => out,
                Err(Error::Tensor(cause @ TensorError::Numeric { .. })) => {
                    return Err(diverged(&self, cause))
                }
                Err(e) => return Err(e),
            };
            let value = tape.value(loss).item().expect("scalar loss");
            let grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = vars
                .iter()
                .map(|&v| grads.get(v).expect("parameter gradient").clone())
                .collect();
            let (lr, clip) = (self.config.learning_rate, self.config.grad_clip_norm);
            let mut updated = self.tensors.clone();
            let mut adam = self.adam.clone();
            if let Err(e) = optimizer_step(&mut updated, &grads, &mut adam, lr, clip) {
                return match e {
                    Error::Tensor(cause) => Err(diverged(&self, cause)),
                    other => Err(other),
                };
            }
            self.tensors = updated;
            self.adam = adam;
            self.rng = rng;
            self.step = step;
            self.base.history.push(HistoryEntry {
                step,
                stage,
                loss: value,
                uncovered_points: uncovered,
            });
            if step.is_multiple_of(100) {
                log::info!(
                    "{} step {step}/{}: loss {value:.4}",
                    stage.name(),
                    self.config.steps
                );
            }
        }
        Ok(self.checkpoint())
    }
}

fn check_fresh_start(start: &Checkpoint) -> Result<()> {
    start.encoder.validate()?;
    start.params.check(&start.encoder)
}

/// Trains the encoder and a linear head over every base-class part with
/// per-point cross-entropy on random batches of base-class training shapes.
/// The head stays in the checkpoint but is never used afterwards.
pub fn pretrain(
    pool: &ShapePool,
    split: &DatasetSplit,
    encoder: &EncoderConfig,
    config: &TrainConfig,
) -> Result<Checkpoint> {
    config.expect_stage(Stage::Pretrain)?;
    if split.base_classes.is_empty() {
        return Err(Error::Config(
            "pre-training needs at least one base class".into(),
        ));
    }
    let shapes: Vec<usize> = split
        .base_classes
        .iter()
        .flat_map(|&c| pool.indices(c, Partition::Train).iter().copied())
        .collect();
    if shapes.is_empty() {
        return Err(Error::Sampling(
            "base classes have no training shapes".into(),
        ));
    }
    let parts = pool.catalog().parts_of(&split.base_classes)?;
    let start = Checkpoint::fresh(encoder.clone(), config.seed)?;
    let head = ClassifierHead::init(encoder.embed_dim, parts.clone(), config.seed);
    let run = Run::new(pool, &start, Some(head), config);
    run.run(|run, tape, vars, rng, _| {
        let batch: Vec<usize> = (0..run.config.batch_size)
            .map(|_| shapes[rng.random_range(0..shapes.len())])
            .collect();
        let mut embeddings = Vec::with_capacity(batch.len());
        let mut columns = Vec::new();
        for &idx in &batch {
            embeddings.push(run.embed(tape, vars, idx)?);
            for l in &pool.shape(idx).labels {
                columns.push(
                    parts
                        .binary_search(l)
                        .expect("base-class label has a head column"),
                );
            }
        }
        let stacked = if embeddings.len() == 1 {
            embeddings[0]
        } else {
            tape.concat(&embeddings, 0)?
        };
        let logits = tape.matmul(stacked, vars[run.encoder_len])?;
        let logits = tape.add_row(logits, vars[run.encoder_len + 1])?;
        let log_p = tape.log_softmax(logits, 1)?;
        let picked = tape.pick(log_p, &columns)?;
        let mean = tape.mean(picked)?;
        Ok((tape.scale(mean, -1.0)?, 0))
    })
}

fn episode_step(
    run: &Run,
    tape: &mut Tape,
    vars: &[Var],
    episode: &Episode,
) -> Result<(Var, usize)> {
    let pool = run.pool;
    let embed_all = |tape: &mut Tape, idx: &[usize]| -> Result<Vec<Var>> {
        idx.iter().map(|&i| run.embed(tape, vars, i)).collect()
    };
    let support = embed_all(tape, &episode.support)?;
    let query = embed_all(tape, &episode.query)?;
    let support_gt: Vec<&[PartId]> = episode
        .support
        .iter()
        .map(|&i| pool.shape(i).labels.as_slice())
        .collect();
    let query_gt: Vec<&[PartId]> = episode
        .query
        .iter()
        .map(|&i| pool.shape(i).labels.as_slice())
        .collect();
    let parts = &pool.catalog().class(episode.class_id)?.parts;
    let cfg = &run.config;
    let out = episode_loss(
        tape,
        &support,
        &support_gt,
        &query,
        &query_gt,
        parts,
        cfg.alpha,
        cfg.lambda,
        None,
    )?;
    Ok((out.total, out.uncovered_points()))
}

fn check_meta_data(pool: &ShapePool, split: &DatasetSplit, config: &TrainConfig) -> Result<()> {
    if split.base_classes.is_empty() {
        return Err(Error::Config(
            "meta-training needs at least one base class".into(),
        ));
    }
    for &c in &split.base_classes {
        let have = pool.indices(c, Partition::Train).len();
        if have < config.k_shot + config.n_query {
            return Err(Error::Sampling(format!(
                "class {c} has {have} training shapes, episodes need {}",
                config.k_shot + config.n_query
            )));
        }
    }
    Ok(())
}

fn meta_loop(run: Run, split: &DatasetSplit) -> Result<Checkpoint> {
    let classes = split.base_classes.clone();
    run.run(|run, tape, vars, rng, _| {
        let class = classes[rng.random_range(0..classes.len())];
        let cfg = &run.config;
        let episode = sample_episode(
            run.pool,
            class,
            Partition::Train,
            cfg.k_shot,
            cfg.n_query,
            rng.random(),
        )?;
        episode_step(run, tape, vars, &episode)
    })
}

/// Episodic training on base classes, one episode from a uniformly drawn
/// class per step, starting from the parameters of `start`.
pub fn meta_train(
    pool: &ShapePool,
    split: &DatasetSplit,
    start: &Checkpoint,
    config: &TrainConfig,
) -> Result<Checkpoint> {
    config.expect_stage(Stage::Metatrain)?;
    check_fresh_start(start)?;
    check_meta_data(pool, split, config)?;
    meta_loop(Run::new(pool, start, None, config), split)
}

/// Continues an unfinished meta-training run up to `config.steps`. Apart
/// from `steps`, `config` must equal the configuration the run started with.
/// The result is bit-identical to an uninterrupted run.
pub fn resume_meta_train(
    pool: &ShapePool,
    split: &DatasetSplit,
    checkpoint: &Checkpoint,
    config: &TrainConfig,
) -> Result<Checkpoint> {
    config.expect_stage(Stage::Metatrain)?;
    let (Some(saved), Some(adam), Some(rng)) =
        (&checkpoint.config, &checkpoint.optimizer, &checkpoint.rng)
    else {
        return Err(Error::Config(
            "checkpoint carries no resumable training state".into(),
        ));
    };
    let same_run = TrainConfig {
        steps: config.steps,
        ..saved.clone()
    } == *config;
    if checkpoint.stage != Stage::Metatrain || !same_run {
        return Err(Error::Config(
            "checkpoint was not produced by this meta-training configuration".into(),
        ));
    }
    if checkpoint.step > config.steps {
        return Err(Error::Config(format!(
            "checkpoint is at step {}, past {}",
            checkpoint.step, config.steps
        )));
    }
    check_meta_data(pool, split, config)?;
    let mut run = Run::new(pool, checkpoint, None, config);
    if adam.m.len() != run.tensors.len() {
        return Err(Error::Format(
            "optimizer state does not match the parameters".into(),
        ));
    }
    run.adam = adam.clone();
    run.rng = rng.restore()?;
    run.step = checkpoint.step;
    meta_loop(run, split)
}

/// Adapts to novel classes from exactly `k_shot` labeled shapes each. Each
/// step takes the next class round-robin and splits its shapes into a
/// support half and a query remainder.
pub fn meta_finetune(
    pool: &ShapePool,
    novel_shapes: &BTreeMap<ClassId, Vec<usize>>,
    start: &Checkpoint,
    config: &TrainConfig,
) -> Result<Checkpoint> {
    config.expect_stage(Stage::Finetune)?;
    check_fresh_start(start)?;
    if novel_shapes.is_empty() {
        return Err(Error::Config(
            "finetuning needs at least one novel class".into(),
        ));
    }
    let classes: Vec<(&ClassId, &Vec<usize>)> = novel_shapes.iter().collect();
    for (c, shapes) in &classes {
        if shapes.iter().any(|&i| pool.shape(i).class_id != **c) {
            return Err(Error::Config(format!(
                "finetuning shapes listed under class {c} belong to another class"
            )));
        }
    }
    // A single shape always splits the same way; build those episodes once.
    let fixed: Vec<Option<Episode>> = classes
        .iter()
        .map(|(_, s)| {
            if config.k_shot == 1 {
                finetune_episode(pool, s, 1, 0).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    let run = Run::new(pool, start, None, config);
    run.run(|run, tape, vars, rng, step| {
        let i = (step - 1) % classes.len();
        let episode = match &fixed[i] {
            Some(e) => e.clone(),
            None => finetune_episode(run.pool, classes[i].1, run.config.k_shot, rng.random())?,
        };
        episode_step(run, tape, vars, &episode)
    })
}
