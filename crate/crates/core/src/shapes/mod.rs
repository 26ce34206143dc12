//! Labeled point clouds, the class/part catalog, data sources and episode
//! sampling.
//!
//! Part ids are global: no two classes share a part id, so a label alone
//! identifies the object class it belongs to.

mod generator;
mod io;
mod shapenet;
mod split;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generator::{generate_pool, generate_shape, SyntheticClass};
pub use io::{load_manifest, read_shape, save_manifest, write_shape, Manifest, ManifestClass};
pub use shapenet::{load_shapenet_part, shapenet_catalog};
pub use split::{finetune_episode, make_folds, sample_episode, DatasetSplit, Episode, Partition};

/// Default number of points sampled per shape.
pub const DEFAULT_POINTS: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PartId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for PartId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A point cloud with one part label per point.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledShape {
    pub class_id: ClassId,
    pub points: Vec<[f64; 3]>,
    pub labels: Vec<PartId>,
}

impl LabeledShape {
    pub fn new(class_id: ClassId, points: Vec<[f64; 3]>, labels: Vec<PartId>) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::Usage(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        Ok(Self {
            class_id,
            points,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Flattened row-major `N×3` coordinates.
    pub fn flat_points(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(norm).fold(0.0, f64::max)
    }
}

pub(crate) fn norm(p: &[f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// Centers points on their centroid and scales them into the unit sphere.
pub fn normalize_points(points: &mut [[f64; 3]]) {
    if points.is_empty() {
        return;
    }
    let n = points.len() as f64;
    let mut centroid = [0.0; 3];
    for p in points.iter() {
        for d in 0..3 {
            centroid[d] += p[d];
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n);
    for p in points.iter_mut() {
        for d in 0..3 {
            p[d] -= centroid[d];
        }
    }
    let scale = points.iter().map(norm).fold(0.0, f64::max);
    if scale > 0.0 {
        for p in points.iter_mut() {
            for v in p.iter_mut() {
                *v /= scale;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: ClassId,
    pub name: String,
    pub parts: Vec<PartId>,
    pub part_names: Vec<String>,
}

/// Object classes and their (disjoint) part sets.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Catalog {
    classes: BTreeMap<ClassId, ClassInfo>,
}

impl Catalog {
    pub fn new(classes: impl IntoIterator<Item = ClassInfo>) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut owner: BTreeMap<PartId, ClassId> = BTreeMap::new();
        for mut info in classes {
            if info.parts.is_empty() {
                return Err(Error::Config(format!("class {} has no parts", info.name)));
            }
            if info.part_names.len() != info.parts.len() {
                info.part_names = info.parts.iter().map(|p| format!("part{p}")).collect();
            }
            for &p in &info.parts {
                if let Some(other) = owner.insert(p, info.id) {
                    return Err(Error::Config(format!(
                        "part {p} claimed by classes {other} and {}",
                        info.id
                    )));
                }
            }
            if map.insert(info.id, info.clone()).is_some() {
                return Err(Error::Config(format!("duplicate class id {}", info.id)));
            }
        }
        Ok(Self { classes: map })
    }

    pub fn class(&self, id: ClassId) -> Result<&ClassInfo> {
        self.classes
            .get(&id)
            .ok_or_else(|| Error::Config(format!("unknown class id {id}")))
    }

    pub fn by_name(&self, name: &str) -> Option<&ClassInfo> {
        self.classes
            .values()
            .find(|c| c.name.eq_ignore_ascii_case(name))
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.classes.keys().copied().collect()
    }

    pub fn classes(&self) -> impl Iterator<Item = &ClassInfo> {
        self.classes.values()
    }

    /// Sorted union of the part sets of `classes`.
    pub fn parts_of(&self, classes: &[ClassId]) -> Result<Vec<PartId>> {
        let mut parts = Vec::new();
        for &c in classes {
            parts.extend_from_slice(&self.class(c)?.parts);
        }
        parts.sort_unstable();
        Ok(parts)
    }

    /// Checks that every label of `shape` belongs to its class's part set.
    pub fn validate(&self, shape: &LabeledShape) -> Result<()> {
        let info = self.class(shape.class_id)?;
        if let Some(bad) = shape.labels.iter().find(|l| !info.parts.contains(l)) {
            return Err(Error::Config(format!(
                "label {bad} is not a part of class {} ({})",
                info.id, info.name
            )));
        }
        Ok(())
    }
}

/// Shapes grouped by class with a train/test partition per class.
#[derive(Debug, Clone)]
pub struct ShapePool {
    catalog: Catalog,
    shapes: Vec<LabeledShape>,
    partitions: BTreeMap<ClassId, ClassShapes>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassShapes {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ShapePool {
    pub fn new(catalog: Catalog) -> Self {
        Self {
            catalog,
            shapes: Vec::new(),
            partitions: BTreeMap::new(),
        }
    }

    /// Adds a shape after validating its labels; returns its index.
    pub fn push(&mut self, shape: LabeledShape, partition: Partition) -> Result<usize> {
        self.catalog.validate(&shape)?;
        let idx = self.shapes.len();
        let entry = self.partitions.entry(shape.class_id).or_default();
        match partition {
            Partition::Train => entry.train.push(idx),
            Partition::Test => entry.test.push(idx),
        }
        self.shapes.push(shape);
        Ok(idx)
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn shape(&self, idx: usize) -> &LabeledShape {
        &self.shapes[idx]
    }

    pub fn shapes(&self) -> &[LabeledShape] {
        &self.shapes
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.partitions.keys().copied().collect()
    }

    pub fn indices(&self, class_id: ClassId, partition: Partition) -> &[usize] {
        match self.partitions.get(&class_id) {
            Some(c) => match partition {
                Partition::Train => &c.train,
                Partition::Test => &c.test,
            },
            None => &[],
        }
    }
}
