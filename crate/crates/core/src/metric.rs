//! Part prototypes and the cosine-distance metric learner.
//!
//! A prototype is the masked average of a part's point embeddings: the mean
//! over that part's points within each shape, then the mean over the shapes
//! that contain the part. Points are classified by a softmax over negated,
//! `alpha`-scaled cosine distances to the prototypes.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shapes::PartId;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankSource {
    Support,
    Query,
}

/// Prototype vectors on a tape, one row per part id (ascending).
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    pub part_ids: Vec<PartId>,
    pub vectors: Var,
    pub source: BankSource,
    /// Requested parts that no shape contained.
    pub missing: Vec<PartId>,
}

impl PrototypeBank {
    pub fn len(&self) -> usize {
        self.part_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.part_ids.is_empty()
    }

    pub fn column(&self, part: PartId) -> Option<usize> {
        self.part_ids.binary_search(&part).ok()
    }

    pub fn snapshot(&self, tape: &Tape) -> BankSnapshot {
        BankSnapshot {
            part_ids: self.part_ids.clone(),
            source: self.source,
            vectors: tape.value(self.vectors).clone(),
        }
    }
}

/// A prototype bank detached from any tape, serializable as JSON with the
/// vectors stored as base64 little-endian doubles.
#[derive(Debug, Clone, PartialEq)]
pub struct BankSnapshot {
    pub part_ids: Vec<PartId>,
    pub source: BankSource,
    pub vectors: Tensor,
}

#[derive(Serialize, Deserialize)]
struct BankJson {
    part_ids: Vec<PartId>,
    source: BankSource,
    dim: usize,
    vectors: String,
}

impl BankSnapshot {
    pub fn to_json(&self) -> String {
        let dim = self.vectors.shape().get(1).copied().unwrap_or(0);
        let bytes: Vec<u8> = self
            .vectors
            .data()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let json = BankJson {
            part_ids: self.part_ids.clone(),
            source: self.source,
            dim,
            vectors: BASE64.encode(bytes),
        };
        serde_json::to_string_pretty(&json).expect("bank serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let json: BankJson = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("prototype bank: {e}")))?;
        let bytes = BASE64
            .decode(&json.vectors)
            .map_err(|e| Error::Format(format!("prototype bank vectors: {e}")))?;
        let expected = json.part_ids.len() * json.dim * 8;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "prototype bank holds {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let vectors = Tensor::matrix(json.part_ids.len(), json.dim, data)?;
        Ok(Self {
            part_ids: json.part_ids,
            source: json.source,
            vectors,
        })
    }

    pub fn on_tape(&self, tape: &mut Tape) -> PrototypeBank {
        PrototypeBank {
            part_ids: self.part_ids.clone(),
            vectors: tape.constant(self.vectors.clone()),
            source: self.source,
            missing: vec![],
        }
    }
}

/// Builds prototypes for `part_ids` from per-shape embeddings and labels.
///
/// Parts absent from every shape are left out of the bank and listed in
/// [`PrototypeBank::missing`]. Labels outside `part_ids` are ignored.
pub fn masked_avg_pool(
    tape: &mut Tape,
    embeddings: &[Var],
    masks: &[&[PartId]],
    part_ids: &[PartId],
    source: BankSource,
) -> Result<PrototypeBank> {
    if embeddings.len() != masks.len() || embeddings.is_empty() {
        return Err(Error::Usage(format!(
            "{} embedding sets for {} masks",
            embeddings.len(),
            masks.len()
        )));
    }
    let mut dim = None;
    for (&e, m) in embeddings.iter().zip(masks) {
        let Some((rows, d)) = tape.value(e).dims2() else {
            return Err(Error::Usage(format!(
                "embeddings must be matrices, got {:?}",
                tape.shape(e)
            )));
        };
        if rows != m.len() || dim.is_some_and(|x| x != d) {
            return Err(Error::Usage(format!(
                "embedding {rows}x{d} does not match {} labels",
                m.len()
            )));
        }
        dim = Some(d);
    }
    let mut parts = part_ids.to_vec();
    parts.sort_unstable();
    parts.dedup();

    // counts[s][c]: points of part c in shape s.
    let counts: Vec<Vec<usize>> = masks
        .iter()
        .map(|m| {
            parts
                .iter()
                .map(|p| m.iter().filter(|l| *l == p).count())
                .collect()
        })
        .collect();
    let containing: Vec<usize> = (0..parts.len())
        .map(|c| counts.iter().filter(|n| n[c] > 0).count())
        .collect();
    let present: Vec<usize> = (0..parts.len()).filter(|&c| containing[c] > 0).collect();
    let missing: Vec<PartId> = (0..parts.len())
        .filter(|&c| containing[c] == 0)
        .map(|c| parts[c])
        .collect();
    if !missing.is_empty() {
        log::warn!("no {source:?} points for parts {missing:?}; they are left out of the bank");
    }
    if present.is_empty() {
        return Err(Error::Usage(
            "no requested part occurs in the shapes; the prototype bank would be empty".into(),
        ));
    }

    // Row c of the weight matrix averages part c's points per shape, then shapes.
    let total: usize = masks.iter().map(|m| m.len()).sum();
    let mut weights = vec![0.0; present.len() * total];
    let mut offset = 0;
    for (s, m) in masks.iter().enumerate() {
        for (row, &c) in present.iter().enumerate() {
            let n = counts[s][c];
            if n == 0 {
                continue;
            }
            let w = 1.0 / (n as f64 * containing[c] as f64);
            for (j, l) in m.iter().enumerate() {
                if *l == parts[c] {
                    weights[row * total + offset + j] = w;
                }
            }
        }
        offset += m.len();
    }
    let weights = tape.constant(Tensor::matrix(present.len(), total, weights)?);
    let stacked = if embeddings.len() == 1 {
        embeddings[0]
    } else {
        tape.concat(embeddings, 0)?
    };
    let vectors = tape.matmul(weights, stacked)?;
    Ok(PrototypeBank {
        part_ids: present.iter().map(|&c| parts[c]).collect(),
        vectors,
        source,
        missing,
    })
}

/// `1 − a·b / (‖a‖‖b‖)`. A zero vector has no direction, so any pair
/// involving one is at distance 1.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        if na == 0.0 && nb == 0.0 {
            log::warn!("cosine distance between two zero vectors");
        }
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    1.0 - dot / (na * nb)
}

/// Per-point classification against a bank.
#[derive(Debug, Clone)]
pub struct SegmentationResult {
    pub part_ids: Vec<PartId>,
    /// `N×C` softmax over `−alpha·distance`.
    pub probabilities: Var,
    pub log_probabilities: Var,
    /// `N×C` cosine distances.
    pub distances: Var,
    pub labels: Vec<PartId>,
}

/// Classifies every row of the `N×D` `embeddings` against `bank`.
pub fn part_probabilities(
    tape: &mut Tape,
    embeddings: Var,
    bank: &PrototypeBank,
    alpha: f64,
) -> Result<SegmentationResult> {
    if bank.is_empty() {
        return Err(Error::Usage(
            "cannot classify against an empty prototype bank".into(),
        ));
    }
    let unit_points = tape.l2_normalize_rows(embeddings)?;
    let unit_protos = tape.l2_normalize_rows(bank.vectors)?;
    let similarity = tape.matmul_nt(unit_points, unit_protos)?;
    let negated = tape.scale(similarity, -1.0)?;
    let distances = tape.add_scalar(negated, 1.0)?;
    let logits = tape.scale(distances, -alpha)?;
    let probabilities = tape.softmax(logits, 1)?;
    let log_probabilities = tape.log_softmax(logits, 1)?;
    let labels = nearest_labels(tape.value(distances), &bank.part_ids);
    Ok(SegmentationResult {
        part_ids: bank.part_ids.clone(),
        probabilities,
        log_probabilities,
        distances,
        labels,
    })
}

/// Part of the smallest distance in each row; ties go to the lowest part id.
pub fn nearest_labels(distances: &Tensor, part_ids: &[PartId]) -> Vec<PartId> {
    let c = part_ids.len();
    distances
        .data()
        .chunks_exact(c.max(1))
        .map(|row| {
            let mut best = 0;
            for (i, &d) in row.iter().enumerate() {
                if d < row[best] {
                    best = i;
                }
            }
            part_ids[best]
        })
        .collect()
}

/// A loss value together with the number of points it had to skip because
/// their ground-truth part has no prototype.
#[derive(Debug, Clone, Copy)]
pub struct LossTerm {
    pub loss: Var,
    pub counted_points: usize,
    pub uncovered_points: usize,
}

/// Mean negative log-probability of the ground-truth part over all points.
pub fn segmentation_loss(
    tape: &mut Tape,
    result: &SegmentationResult,
    gt: &[PartId],
) -> Result<LossTerm> {
    let rows = tape.shape(result.log_probabilities)[0];
    if gt.len() != rows {
        return Err(Error::Usage(format!(
            "{} labels for {rows} classified points",
            gt.len()
        )));
    }
    let mut kept = Vec::with_capacity(rows);
    let mut columns = Vec::with_capacity(rows);
    for (j, l) in gt.iter().enumerate() {
        if let Ok(c) = result.part_ids.binary_search(l) {
            kept.push(j);
            columns.push(c);
        }
    }
    let uncovered_points = rows - kept.len();
    if kept.is_empty() {
        let loss = tape.constant(Tensor::scalar(0.0));
        return Ok(LossTerm {
            loss,
            counted_points: 0,
            uncovered_points,
        });
    }
    let selected = if kept.len() == rows {
        result.log_probabilities
    } else {
        tape.gather_rows(result.log_probabilities, &kept)?
    };
    let picked = tape.pick(selected, &columns)?;
    let mean = tape.mean(picked)?;
    let loss = tape.scale(mean, -1.0)?;
    Ok(LossTerm {
        loss,
        counted_points: kept.len(),
        uncovered_points,
    })
}

/// Segments the support shapes with prototypes pooled from the query shapes
/// under their predicted labels. The labels are constants; gradients reach
/// both the query embeddings (through the pooling) and the support embeddings.
pub fn dual_alignment_loss(
    tape: &mut Tape,
    support: &[Var],
    support_gt: &[&[PartId]],
    query: &[Var],
    query_predicted: &[&[PartId]],
    part_ids: &[PartId],
    alpha: f64,
) -> Result<LossTerm> {
    let bank = match masked_avg_pool(tape, query, query_predicted, part_ids, BankSource::Query) {
        Ok(bank) => bank,
        Err(Error::Usage(_))
            if query_predicted
                .iter()
                .all(|m| m.iter().all(|l| !part_ids.contains(l))) =>
        {
            let points = support_gt.iter().map(|m| m.len()).sum();
            let loss = tape.constant(Tensor::scalar(0.0));
            return Ok(LossTerm {
                loss,
                counted_points: 0,
                uncovered_points: points,
            });
        }
        Err(e) => return Err(e),
    };
    let stacked = if support.len() == 1 {
        support[0]
    } else {
        tape.concat(support, 0)?
    };
    let result = part_probabilities(tape, stacked, &bank, alpha)?;
    let gt: Vec<PartId> = support_gt.iter().flat_map(|m| m.iter().copied()).collect();
    segmentation_loss(tape, &result, &gt)
}

/// `l_seg + lambda·l_dual`.
pub fn total_loss(tape: &mut Tape, l_seg: Var, l_dual: Var, lambda: f64) -> Result<Var> {
    if tape.value(l_seg).numel() != 1 || tape.value(l_dual).numel() != 1 {
        return Err(Error::Usage("total loss combines two scalars".into()));
    }
    let weighted = tape.scale(l_dual, lambda)?;
    Ok(tape.add(l_seg, weighted)?)
}

/// Everything one episode contributes to training.
#[derive(Debug, Clone)]
pub struct EpisodeLoss {
    pub total: Var,
    pub query_loss: LossTerm,
    pub dual_loss: Option<LossTerm>,
    /// Labels predicted for the concatenated query points.
    pub predicted: Vec<PartId>,
}

impl EpisodeLoss {
    pub fn uncovered_points(&self) -> usize {
        self.query_loss.uncovered_points + self.dual_loss.map_or(0, |d| d.uncovered_points)
    }
}

/// Full episode objective: support prototypes segment the query shapes, and
/// with `lambda > 0` the dual branch segments the support shapes back.
///
/// `fixed_predictions` replaces the query labels fed to the dual branch,
/// which keeps the branch's masks constant under parameter perturbation.
#[allow(clippy::too_many_arguments)]
pub fn episode_loss(
    tape: &mut Tape,
    support: &[Var],
    support_gt: &[&[PartId]],
    query: &[Var],
    query_gt: &[&[PartId]],
    part_ids: &[PartId],
    alpha: f64,
    lambda: f64,
    fixed_predictions: Option<&[PartId]>,
) -> Result<EpisodeLoss> {
    let bank = masked_avg_pool(tape, support, support_gt, part_ids, BankSource::Support)?;
    let stacked = if query.len() == 1 {
        query[0]
    } else {
        tape.concat(query, 0)?
    };
    let result = part_probabilities(tape, stacked, &bank, alpha)?;
    let gt: Vec<PartId> = query_gt.iter().flat_map(|m| m.iter().copied()).collect();
    let query_loss = segmentation_loss(tape, &result, &gt)?;
    let predicted = match fixed_predictions {
        Some(p) if p.len() != gt.len() => {
            return Err(Error::Usage(format!(
                "{} fixed predictions for {} query points",
                p.len(),
                gt.len()
            )));
        }
        Some(p) => p.to_vec(),
        None => result.labels,
    };
    if lambda == 0.0 {
        return Ok(EpisodeLoss {
            total: query_loss.loss,
            query_loss,
            dual_loss: None,
            predicted,
        });
    }
    let mut per_shape = Vec::with_capacity(query.len());
    let mut start = 0;
    for m in query_gt {
        per_shape.push(&predicted[start..start + m.len()]);
        start += m.len();
    }
    let dual = dual_alignment_loss(
        tape, support, support_gt, query, &per_shape, part_ids, alpha,
    )?;
    let total = total_loss(tape, query_loss.loss, dual.loss, lambda)?;
    Ok(EpisodeLoss {
        total,
        query_loss,
        dual_loss: Some(dual),
        predicted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_many;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const A: PartId = PartId(0);
    const B: PartId = PartId(1);

    fn mat(t: &mut Tape, rows: usize, cols: usize, data: &[f64]) -> Var {
        t.param(Tensor::matrix(rows, cols, data.to_vec()).unwrap())
    }

    #[test]
    fn pooling_averages_per_shape_then_across_shapes() {
        let mut t = Tape::new();
        let s1 = mat(&mut t, 3, 2, &[1.5, 0.0, 0.5, 0.0, 9.0, 9.0]);
        let s2 = mat(&mut t, 2, 2, &[0.0, 1.0, -4.0, 4.0]);
        let bank = masked_avg_pool(
            &mut t,
            &[s1, s2],
            &[&[A, A, B], &[A, B]],
            &[A, B],
            BankSource::Support,
        )
        .unwrap();
        assert_eq!(bank.part_ids, vec![A, B]);
        let v = t.value(bank.vectors).data();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert_eq!(&v[2..], &[2.5, 6.5]);
    }

    #[test]
    fn pooling_single_shape_cases() {
        let mut t = Tape::new();
        let e = mat(&mut t, 3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]);
        let bank = masked_avg_pool(&mut t, &[e], &[&[A, A, A]], &[A], BankSource::Support).unwrap();
        let v = t.value(bank.vectors).data();
        assert!((v[0] - 3.0).abs() < 1e-15 && (v[1] - 5.0).abs() < 1e-15);
        let bank =
            masked_avg_pool(&mut t, &[e], &[&[A, B, A]], &[A, B], BankSource::Support).unwrap();
        assert_eq!(t.value(bank.vectors).row(1), &[3.0, 4.0]);
    }

    #[test]
    fn absent_part_is_left_out() {
        let mut t = Tape::new();
        let e = mat(&mut t, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let bank = masked_avg_pool(&mut t, &[e], &[&[A, A]], &[B, A], BankSource::Support).unwrap();
        assert_eq!(bank.part_ids, vec![A]);
        assert_eq!(bank.missing, vec![B]);
        assert!(masked_avg_pool(&mut t, &[e], &[&[A, A]], &[B], BankSource::Support).is_err());
    }

    #[test]
    fn cosine_distance_cases() {
        assert!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).abs() < 1e-15);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert!((cosine_distance(&[1.0, 2.0], &[-1.0, -2.0]) - 2.0).abs() < 1e-15);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
    }

    fn bank_of(t: &mut Tape, rows: &[[f64; 2]]) -> PrototypeBank {
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        PrototypeBank {
            part_ids: (0..rows.len() as u32).map(PartId).collect(),
            vectors: t.constant(Tensor::matrix(rows.len(), 2, data).unwrap()),
            source: BankSource::Support,
            missing: vec![],
        }
    }

    #[test]
    fn probabilities_for_distances_zero_and_one() {
        let mut t = Tape::new();
        let bank = bank_of(&mut t, &[[1.0, 0.0], [0.0, 1.0]]);
        let e = t.constant(Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 3.0]).unwrap());
        let r = part_probabilities(&mut t, e, &bank, 2.0).unwrap();
        let h = t.value(r.probabilities).data();
        let e2 = (-2.0f64).exp();
        assert!((h[0] - 1.0 / (1.0 + e2)).abs() < 1e-15);
        assert!((h[1] - e2 / (1.0 + e2)).abs() < 1e-15);
        assert!((h[0] - 0.8808).abs() < 1e-4 && (h[1] - 0.1192).abs() < 1e-4);
        assert_eq!(r.labels, vec![A, B]);

        // Ground truth makes the second point's probability 0.1192.
        let loss = segmentation_loss(&mut t, &r, &[A, A]).unwrap();
        let v = t.value(loss.loss).item().unwrap();
        let expected = -((1.0 / (1.0 + e2)).ln() + (e2 / (1.0 + e2)).ln()) / 2.0;
        assert!((v - expected).abs() < 1e-14);
        assert!((v - 1.1269).abs() < 1e-4);
    }

    #[test]
    fn equidistant_point_is_uniform_and_takes_lowest_id() {
        let mut t = Tape::new();
        let bank = bank_of(&mut t, &[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]);
        let e = t.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let r = part_probabilities(&mut t, e, &bank, 2.0).unwrap();
        assert!(t
            .value(r.probabilities)
            .data()
            .iter()
            .all(|p| (p - 0.25).abs() < 1e-15));
        assert_eq!(r.labels, vec![A]);
        let loss = segmentation_loss(&mut t, &r, &[PartId(2)]).unwrap();
        assert!((t.value(loss.loss).item().unwrap() - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn single_part_bank_is_certain() {
        let mut t = Tape::new();
        let bank = bank_of(&mut t, &[[0.3, -0.2]]);
        let e = t.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.0, 4.0]).unwrap());
        let r = part_probabilities(&mut t, e, &bank, 2.0).unwrap();
        assert!(t.value(r.probabilities).data().iter().all(|&p| p == 1.0));
        let loss = segmentation_loss(&mut t, &r, &[A, A, A]).unwrap();
        assert_eq!(t.value(loss.loss).item(), Some(0.0));
    }

    #[test]
    fn uncovered_points_are_excluded_and_counted() {
        let mut t = Tape::new();
        let bank = bank_of(&mut t, &[[1.0, 0.0], [0.0, 1.0]]);
        let e = t.constant(Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap());
        let r = part_probabilities(&mut t, e, &bank, 2.0).unwrap();
        let loss = segmentation_loss(&mut t, &r, &[A, PartId(7), PartId(7)]).unwrap();
        assert_eq!((loss.counted_points, loss.uncovered_points), (1, 2));
        let p0 = t.value(r.probabilities).data()[0];
        assert!((t.value(loss.loss).item().unwrap() + p0.ln()).abs() < 1e-15);
    }

    /// Independent scalar evaluation of pooling, probabilities and loss.
    fn hand_loss(
        support: &[Vec<[f64; 2]>],
        support_gt: &[Vec<PartId>],
        query: &[Vec<[f64; 2]>],
        query_gt: &[Vec<PartId>],
        alpha: f64,
    ) -> (f64, Vec<PartId>) {
        let mut parts: Vec<PartId> = support_gt.iter().flatten().copied().collect();
        parts.sort();
        parts.dedup();
        let mut protos = Vec::new();
        for &p in &parts {
            let mut acc = [0.0, 0.0];
            let mut shapes = 0.0;
            for (e, m) in support.iter().zip(support_gt) {
                let pts: Vec<&[f64; 2]> = e
                    .iter()
                    .zip(m)
                    .filter(|(_, l)| **l == p)
                    .map(|(x, _)| x)
                    .collect();
                if pts.is_empty() {
                    continue;
                }
                shapes += 1.0;
                for d in 0..2 {
                    acc[d] += pts.iter().map(|x| x[d]).sum::<f64>() / pts.len() as f64;
                }
            }
            protos.push([acc[0] / shapes, acc[1] / shapes]);
        }
        let mut total = 0.0;
        let mut count = 0.0;
        let mut labels = Vec::new();
        for (e, m) in query.iter().zip(query_gt) {
            for (x, l) in e.iter().zip(m) {
                let d: Vec<f64> = protos.iter().map(|p| cosine_distance(x, p)).collect();
                let z: f64 = d.iter().map(|d| (-alpha * d).exp()).sum();
                let best = (0..d.len()).fold(0, |b, i| if d[i] < d[b] { i } else { b });
                labels.push(parts[best]);
                if let Some(c) = parts.iter().position(|p| p == l) {
                    total -= ((-alpha * d[c]).exp() / z).ln();
                    count += 1.0;
                }
            }
        }
        (total / count, labels)
    }

    #[test]
    fn episode_loss_matches_hand_evaluation() {
        let support = vec![
            vec![[1.0, 0.2], [0.9, 0.1], [0.1, 1.0]],
            vec![[0.8, -0.1], [-0.2, 0.7], [0.0, 1.2]],
        ];
        let support_gt = vec![vec![A, A, B], vec![A, B, B]];
        let query = vec![
            vec![[0.7, 0.5], [0.2, 0.9], [1.0, -0.3]],
            vec![[0.4, 0.4], [-0.3, 1.0]],
        ];
        let query_gt = vec![vec![A, B, A], vec![B, B]];
        let (l_seg, predicted) = hand_loss(&support, &support_gt, &query, &query_gt, 2.0);
        let pred_split = vec![predicted[..3].to_vec(), predicted[3..].to_vec()];
        let (l_dual, _) = hand_loss(&query, &pred_split, &support, &support_gt, 2.0);

        for lambda in [0.0, 1.0, 0.5] {
            let mut t = Tape::new();
            let to_var = |t: &mut Tape, e: &Vec<[f64; 2]>| {
                t.param(Tensor::matrix(e.len(), 2, e.iter().flatten().copied().collect()).unwrap())
            };
            let s: Vec<Var> = support.iter().map(|e| to_var(&mut t, e)).collect();
            let q: Vec<Var> = query.iter().map(|e| to_var(&mut t, e)).collect();
            let sg: Vec<&[PartId]> = support_gt.iter().map(Vec::as_slice).collect();
            let qg: Vec<&[PartId]> = query_gt.iter().map(Vec::as_slice).collect();
            let out = episode_loss(&mut t, &s, &sg, &q, &qg, &[A, B], 2.0, lambda, None).unwrap();
            assert_eq!(out.predicted, predicted);
            let total = t.value(out.total).item().unwrap();
            assert!(
                (total - (l_seg + lambda * l_dual)).abs() < 1e-12,
                "lambda {lambda}"
            );
            assert!((t.value(out.query_loss.loss).item().unwrap() - l_seg).abs() < 1e-12);
            assert_eq!(out.dual_loss.is_some(), lambda != 0.0);
        }
    }

    #[test]
    fn total_loss_weights_the_dual_term() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(0.5));
        let b = t.constant(Tensor::scalar(0.5));
        let l = total_loss(&mut t, a, b, 1.0).unwrap();
        assert_eq!(t.value(l).item(), Some(1.0));
        let l = total_loss(&mut t, a, b, 0.0).unwrap();
        assert_eq!(t.value(l).item(), Some(0.5));
    }

    #[test]
    fn dual_branch_vanishes_at_the_separated_fixed_point() {
        // Part-wise constant embeddings shared by support and query, with
        // correct predictions: the dual loss is pure softmax sharpness, and
        // tends to 0 as alpha grows.
        let mut t = Tape::new();
        let s = mat(&mut t, 4, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let q = mat(&mut t, 3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let l = dual_alignment_loss(
            &mut t,
            &[s],
            &[&[A, A, B, B]],
            &[q],
            &[&[A, B, B]],
            &[A, B],
            40.0,
        )
        .unwrap();
        let v = t.value(l.loss).item().unwrap();
        assert!(v < 1e-16, "{v}");
        let one = dual_alignment_loss(
            &mut t,
            &[s],
            &[&[A, A, A, A]],
            &[q],
            &[&[A, A, A]],
            &[A],
            2.0,
        )
        .unwrap();
        assert_eq!(t.value(one.loss).item(), Some(0.0));
    }

    #[test]
    fn gradient_descent_on_embeddings_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut q: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sg = [A, B, A, B];
        let qg = [B, B, A, A];
        let mut last = f64::INFINITY;
        for _ in 0..10 {
            let mut t = Tape::new();
            let sv = t.param(Tensor::matrix(4, 3, s.clone()).unwrap());
            let qv = t.param(Tensor::matrix(4, 3, q.clone()).unwrap());
            let out = episode_loss(
                &mut t,
                &[sv],
                &[&sg],
                &[qv],
                &[&qg],
                &[A, B],
                2.0,
                0.0,
                None,
            )
            .unwrap();
            let v = t.value(out.total).item().unwrap();
            assert!(v < last, "{v} !< {last}");
            last = v;
            let g = t.backward(out.total).unwrap();
            s.iter_mut()
                .zip(g.get(sv).unwrap().data())
                .for_each(|(x, g)| *x -= 0.1 * g);
            q.iter_mut()
                .zip(g.get(qv).unwrap().data())
                .for_each(|(x, g)| *x -= 0.1 * g);
        }
    }

    #[test]
    fn episode_loss_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs: Vec<Tensor> = (0..3)
            .map(|_| {
                Tensor::matrix(6, 4, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .unwrap()
            })
            .collect();
        let parts = [A, B, PartId(2)];
        let sg: Vec<PartId> = (0..6).map(|i| parts[i % 3]).collect();
        let qg: Vec<PartId> = (0..6).map(|i| parts[(i + 1) % 3]).collect();
        let predicted = {
            let mut t = Tape::new();
            let v: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
            episode_loss(
                &mut t,
                &v[..2],
                &[&sg, &sg],
                &v[2..],
                &[&qg],
                &parts,
                2.0,
                1.0,
                None,
            )
            .unwrap()
            .predicted
        };
        let report = grad_check_many(
            |t, v| {
                let out = episode_loss(
                    t,
                    &v[..2],
                    &[&sg, &sg],
                    &v[2..],
                    &[&qg],
                    &parts,
                    2.0,
                    1.0,
                    Some(&predicted),
                )
                .map_err(|e| match e {
                    Error::Tensor(e) => e,
                    other => panic!("{other}"),
                })?;
                Ok(out.total)
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn snapshot_json_round_trip() {
        let mut t = Tape::new();
        let bank = bank_of(&mut t, &[[0.1, 1.0 / 3.0], [-2.5e-300, 7.0]]);
        let snap = bank.snapshot(&t);
        let back = BankSnapshot::from_json(&snap.to_json()).unwrap();
        assert_eq!(back, snap);
        assert!(matches!(
            BankSnapshot::from_json("{"),
            Err(Error::Format(_))
        ));
    }
}
