//! Fold splits over classes and episode sampling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassId, LabeledShape, ShapePool};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
}

/// Base (training) and novel (few-shot) classes of one fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub fold: usize,
    pub base_classes: Vec<ClassId>,
    pub novel_classes: Vec<ClassId>,
}

/// Sorts the classes and cuts them into `n_folds` equal chunks; fold `k`
/// uses chunk `k` as its novel classes and everything else as base classes.
pub fn make_folds(class_ids: &[ClassId], n_folds: usize) -> Result<Vec<DatasetSplit>> {
    let mut ids = class_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if n_folds == 0 || ids.is_empty() || !ids.len().is_multiple_of(n_folds) {
        return Err(Error::Config(format!(
            "{} classes cannot be divided evenly into {n_folds} folds",
            ids.len()
        )));
    }
    let per = ids.len() / n_folds;
    Ok((0..n_folds)
        .map(|k| {
            let novel = ids[k * per..(k + 1) * per].to_vec();
            let base = ids.iter().copied().filter(|c| !novel.contains(c)).collect();
            DatasetSplit {
                fold: k,
                base_classes: base,
                novel_classes: novel,
            }
        })
        .collect())
}

/// One few-shot task. Shapes are referenced by their index in a [`ShapePool`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub class_id: ClassId,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

impl Episode {
    pub fn support_shapes<'a>(&self, pool: &'a ShapePool) -> Vec<&'a LabeledShape> {
        self.support.iter().map(|&i| pool.shape(i)).collect()
    }

    pub fn query_shapes<'a>(&self, pool: &'a ShapePool) -> Vec<&'a LabeledShape> {
        self.query.iter().map(|&i| pool.shape(i)).collect()
    }
}

/// Draws `k_shot + n_query` distinct shapes of `class_id` from `partition`
/// without replacement; the first `k_shot` form the support set.
pub fn sample_episode(
    pool: &ShapePool,
    class_id: ClassId,
    partition: Partition,
    k_shot: usize,
    n_query: usize,
    seed: u64,
) -> Result<Episode> {
    let candidates = pool.indices(class_id, partition);
    let needed = k_shot + n_query;
    if candidates.len() < needed {
        return Err(Error::Sampling(format!(
            "class {class_id} has {} {partition:?} shapes, episode needs {needed}",
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, candidates.len(), needed);
    let chosen: Vec<usize> = picks.iter().map(|i| candidates[i]).collect();
    Ok(Episode {
        class_id,
        support: chosen[..k_shot].to_vec(),
        query: chosen[k_shot..].to_vec(),
    })
}

/// Splits the `k_shot` labeled shapes of a novel class into a random support
/// half (`floor(K/2)`) and a query remainder. With a single shape it serves
/// as both support and query.
pub fn finetune_episode(
    pool: &ShapePool,
    novel_shapes: &[usize],
    k_shot: usize,
    seed: u64,
) -> Result<Episode> {
    if novel_shapes.len() != k_shot {
        return Err(Error::Config(format!(
            "finetuning expects exactly {k_shot} labeled shapes, got {}",
            novel_shapes.len()
        )));
    }
    let Some(&first) = novel_shapes.first() else {
        return Err(Error::Config(
            "finetuning needs at least one labeled shape".into(),
        ));
    };
    let class_id = pool.shape(first).class_id;
    if let Some(&other) = novel_shapes
        .iter()
        .find(|&&i| pool.shape(i).class_id != class_id)
    {
        return Err(Error::Config(format!(
            "finetuning shapes mix classes {class_id} and {}",
            pool.shape(other).class_id
        )));
    }
    if k_shot == 1 {
        log::warn!("1-shot finetuning of class {class_id}: the single shape is used as both support and query");
        return Ok(Episode {
            class_id,
            support: vec![first],
            query: vec![first],
        });
    }
    let mut order = novel_shapes.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let half = k_shot / 2;
    Ok(Episode {
        class_id,
        support: order[..half].to_vec(),
        query: order[half..].to_vec(),
    })
}
