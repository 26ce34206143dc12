//! Per-point embedding network.
//!
//! Each level gathers the `k` nearest neighbors of every point, encodes the
//! neighbor features relative to the center feature with a shared two-layer
//! MLP, and max-pools over the neighborhood. The raw coordinates and every
//! level's output are concatenated and projected to `embed_dim` channels.
//!
//! The first MLP layer is linear, so `W·(f_n − f_c)` is evaluated as
//! `W·f_n − W·f_c` on per-point products before gathering. That keeps the
//! expensive part of each level proportional to `N·k·h²` only once.

use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shapes::{PartId, ShapePool};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    /// MLP width of each local-aggregation level; its length is the level count.
    pub hidden: Vec<usize>,
    pub knn_k: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden: vec![32, 64],
            knn_k: 8,
        }
    }
}

impl EncoderConfig {
    pub fn levels(&self) -> usize {
        self.hidden.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0
            || self.knn_k == 0
            || self.hidden.is_empty()
            || self.hidden.contains(&0)
        {
            return Err(Error::Config(format!("invalid encoder config {self:?}")));
        }
        Ok(())
    }

    /// Width of the concatenated coordinate + level features.
    fn concat_width(&self) -> usize {
        3 + self.hidden.iter().sum::<usize>()
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut width = 3;
        for (l, &h) in self.hidden.iter().enumerate() {
            out.push((format!("level{l}.w1"), vec![width, h]));
            out.push((format!("level{l}.b1"), vec![h]));
            out.push((format!("level{l}.w2"), vec![h, h]));
            out.push((format!("level{l}.b2"), vec![h]));
            width = h;
        }
        out.push(("proj.w".into(), vec![self.concat_width(), self.embed_dim]));
        out.push(("proj.b".into(), vec![self.embed_dim]));
        out
    }
}

/// Named parameter tensors, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn new(named: Vec<(String, Tensor)>) -> Self {
        let (names, tensors) = named.into_iter().unzip();
        Self { names, tensors }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Checks names, shapes and finiteness against `config`.
    pub fn check(&self, config: &EncoderConfig) -> Result<()> {
        let layout = config.layout();
        if layout.len() != self.len() {
            return Err(Error::Config(format!(
                "encoder config expects {} tensors, params hold {}",
                layout.len(),
                self.len()
            )));
        }
        for ((name, shape), (have, t)) in layout.iter().zip(self.iter()) {
            if name != have || shape.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {have} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Config(format!("parameter {name} is not finite")));
            }
        }
        Ok(())
    }

    /// Puts the parameters on `tape` as gradient-tracking leaves.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Puts the parameters on `tape` as constants.
    pub fn register_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect()
    }
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-a..=a))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("consistent shape")
}

/// Glorot-uniform weights and zero biases, deterministic in `seed`.
pub fn init_params(config: &EncoderConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let named = config
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            let t = match shape.as_slice() {
                &[fan_in, fan_out] => glorot(&mut rng, fan_in, fan_out),
                _ => Tensor::zeros(shape),
            };
            (name, t)
        })
        .collect();
    ModelParams::new(named)
}

/// Linear classifier over a fixed list of part ids, used during pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub parts: Vec<PartId>,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn init(embed_dim: usize, parts: Vec<PartId>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4845_4144);
        let weight = glorot(&mut rng, embed_dim, parts.len());
        let bias = Tensor::zeros(vec![parts.len()]);
        Self {
            parts,
            weight,
            bias,
        }
    }
}

/// Row `j` holds the `k` nearest neighbors of point `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborTable {
    k: usize,
    index: Vec<usize>,
}

impl NeighborTable {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.index.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn row(&self, j: usize) -> &[usize] {
        &self.index[j * self.k..(j + 1) * self.k]
    }

    pub fn flat(&self) -> &[usize] {
        &self.index
    }
}

/// Brute-force k-nearest-neighbor table by Euclidean distance.
///
/// Every row starts with the point itself; the remaining neighbors follow by
/// increasing distance, ties broken by lower index.
pub fn knn_group(points: &[[f64; 3]], k: usize) -> Result<NeighborTable> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Usage(format!(
            "knn needs 1 <= k <= N, got k={k} with N={n}"
        )));
    }
    let mut index = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    for (j, p) in points.iter().enumerate() {
        cand.clear();
        cand.extend(
            points
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != j)
                .map(|(i, q)| {
                    let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2], i)
                }),
        );
        index.push(j);
        let rest = k - 1;
        if rest > 0 {
            if rest < cand.len() {
                cand.select_nth_unstable_by(rest - 1, order);
                cand.truncate(rest);
            }
            cand.sort_unstable_by(order);
            index.extend(cand.iter().map(|c| c.1));
        }
    }
    Ok(NeighborTable { k, index })
}

/// Lazily computed neighbor tables for every shape of a pool.
#[derive(Debug)]
pub struct NeighborCache {
    k: usize,
    tables: Vec<OnceLock<Arc<NeighborTable>>>,
}

impl NeighborCache {
    pub fn new(pool: &ShapePool, k: usize) -> Self {
        Self {
            k,
            tables: (0..pool.len()).map(|_| OnceLock::new()).collect(),
        }
    }

    pub fn get(&self, pool: &ShapePool, idx: usize) -> Result<Arc<NeighborTable>> {
        let cell = &self.tables[idx];
        if let Some(t) = cell.get() {
            return Ok(t.clone());
        }
        let table = Arc::new(knn_group(&pool.shape(idx).points, self.k)?);
        Ok(cell.get_or_init(|| table).clone())
    }
}

/// Per-point embeddings of one shape as an `N×embed_dim` tape value.
///
/// `params` are the tape handles returned by [`ModelParams::register`] (or
/// its frozen variant) in layout order.
pub fn encode(
    tape: &mut Tape,
    params: &[Var],
    config: &EncoderConfig,
    points: &[[f64; 3]],
    neighbors: &NeighborTable,
) -> Result<Var> {
    let n = points.len();
    let k = neighbors.k();
    if neighbors.len() != n {
        return Err(Error::Usage(format!(
            "neighbor table has {} rows for {n} points",
            neighbors.len()
        )));
    }
    if k != config.knn_k {
        return Err(Error::Usage(format!(
            "neighbor table k={k}, encoder expects {}",
            config.knn_k
        )));
    }
    if params.len() != config.layout().len() {
        return Err(Error::Usage(format!(
            "{} parameter handles for {} tensors",
            params.len(),
            config.layout().len()
        )));
    }
    let coords = Tensor::matrix(n, 3, points.iter().flatten().copied().collect())?;
    let coords = tape.constant(coords);
    let centers: Vec<usize> = (0..n).flat_map(|j| std::iter::repeat_n(j, k)).collect();

    let mut features = coords;
    let mut pieces = vec![coords];
    for l in 0..config.levels() {
        let [w1, b1, w2, b2] = [
            params[4 * l],
            params[4 * l + 1],
            params[4 * l + 2],
            params[4 * l + 3],
        ];
        let projected = tape.matmul(features, w1)?;
        let relative = tape.gather_sub(projected, neighbors.flat(), &centers)?;
        let hidden = tape.bias_relu(relative, b1)?;
        let hidden = tape.matmul(hidden, w2)?;
        let hidden = tape.bias_relu(hidden, b2)?;
        features = tape.group_max(hidden, k)?;
        pieces.push(features);
    }
    let base = 4 * config.levels();
    let joined = tape.concat(&pieces, 1)?;
    let out = tape.matmul(joined, params[base])?;
    Ok(tape.add_row(out, params[base + 1])?)
}

/// Embeddings without gradient tracking.
pub fn embed(
    params: &ModelParams,
    config: &EncoderConfig,
    points: &[[f64; 3]],
    neighbors: &NeighborTable,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let out = encode(&mut tape, &vars, config, points, neighbors)?;
    Ok(tape.value(out).clone())
}
