//! Checkpoint container.
//!
//! Layout: the 4-byte magic `PSEG`, a little-endian `u32` format version, a
//! little-endian `u64` header length, the JSON header, then the raw
//! little-endian `f64` data of every tensor listed in the header, in order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::TrainConfig;
use crate::encoder::{init_params, ClassifierHead, EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::shapes::PartId;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PSEG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Freshly initialized, never trained.
    Init,
    Pretrain,
    Metatrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Pretrain => "pretrain",
            Stage::Metatrain => "metatrain",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub uncovered_points: usize,
}

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte seed.
    pub seed: String,
    /// Word position within the stream, as a decimal string (it is a u128).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng
            .get_seed()
            .iter()
            .fold(String::with_capacity(64), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            });
        Self {
            seed,
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format(format!("invalid RNG state {self:?}"));
        if self.seed.len() != 64 || !self.seed.is_ascii() {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Everything needed to use a model or to continue training it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub params: ModelParams,
    /// Pre-training classifier; never used by the episodic stages.
    pub head: Option<ClassifierHead>,
    /// Configuration of the stage that produced this checkpoint.
    pub config: Option<TrainConfig>,
    pub stage: Stage,
    /// Optimizer steps completed in `stage`.
    pub step: usize,
    pub history: Vec<HistoryEntry>,
    pub optimizer: Option<AdamState>,
    pub rng: Option<RngState>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    encoder: EncoderConfig,
    config: Option<TrainConfig>,
    stage: Stage,
    step: usize,
    history: Vec<HistoryEntry>,
    rng: Option<RngState>,
    adam_t: Option<u64>,
    head_parts: Option<Vec<PartId>>,
    tensors: Vec<TensorEntry>,
}

const HEAD_WEIGHT: &str = "head.weight";
const HEAD_BIAS: &str = "head.bias";

impl Checkpoint {
    /// Untrained model with initial parameters drawn from `seed`.
    pub fn fresh(encoder: EncoderConfig, seed: u64) -> Result<Self> {
        encoder.validate()?;
        let params = init_params(&encoder, seed);
        Ok(Self {
            encoder,
            params,
            head: None,
            config: None,
            stage: Stage::Init,
            step: 0,
            history: vec![],
            optimizer: None,
            rng: None,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut named: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        if let Some(head) = &self.head {
            named.push((HEAD_WEIGHT.into(), &head.weight));
            named.push((HEAD_BIAS.into(), &head.bias));
        }
        if let Some(adam) = &self.optimizer {
            for (i, (m, v)) in adam.m.iter().zip(&adam.v).enumerate() {
                named.push((format!("adam.m.{i}"), m));
                named.push((format!("adam.v.{i}"), v));
            }
        }
        let header = Header {
            encoder: self.encoder.clone(),
            config: self.config.clone(),
            stage: self.stage,
            step: self.step,
            history: self.history.clone(),
            rng: self.rng.clone(),
            adam_t: self.optimizer.as_ref().map(|a| a.t),
            head_parts: self.head.as_ref().map(|h| h.parts.clone()),
            tensors: named
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let payload: usize = named.iter().map(|(_, t)| t.numel() * 8).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: String| Error::Format(m);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(fmt("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(fmt(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let body = &bytes[16..];
        let header_len = usize::try_from(header_len)
            .ok()
            .filter(|&n| n <= body.len())
            .ok_or_else(|| fmt("truncated checkpoint header".into()))?;
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| fmt(format!("checkpoint header: {e}")))?;
        let mut data = &body[header_len..];
        let expected: usize = header
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>() * 8)
            .sum();
        if data.len() != expected {
            return Err(fmt(format!(
                "checkpoint holds {} data bytes, header lists {expected}",
                data.len()
            )));
        }

        let mut params = Vec::new();
        let (mut head_w, mut head_b) = (None, None);
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let values = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[n * 8..];
            let tensor = Tensor::new(entry.shape, values)?;
            match entry.name.as_str() {
                HEAD_WEIGHT => head_w = Some(tensor),
                HEAD_BIAS => head_b = Some(tensor),
                name if name.starts_with("adam.m.") => m.push(tensor),
                name if name.starts_with("adam.v.") => v.push(tensor),
                _ => params.push((entry.name, tensor)),
            }
        }
        let params = ModelParams::new(params);
        params
            .check(&header.encoder)
            .map_err(|e| fmt(e.to_string()))?;
        let head = match (header.head_parts, head_w, head_b) {
            (Some(parts), Some(weight), Some(bias)) => Some(ClassifierHead {
                parts,
                weight,
                bias,
            }),
            (None, None, None) => None,
            _ => return Err(fmt("incomplete classifier head".into())),
        };
        let optimizer = match header.adam_t {
            Some(t) if m.len() == v.len() => Some(AdamState { t, m, v }),
            None if m.is_empty() && v.is_empty() => None,
            _ => return Err(fmt("incomplete optimizer state".into())),
        };
        Ok(Self {
            encoder: header.encoder,
            params,
            head,
            config: header.config,
            stage: header.stage,
            step: header.step,
            history: header.history,
            optimizer,
            rng: header.rng,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Metric history as CSV with header `step,stage,loss,uncovered_points`.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("step,stage,loss,uncovered_points\n");
        for h in &self.history {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                h.step,
                h.stage.name(),
                h.loss,
                h.uncovered_points
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample() -> Checkpoint {
        let enc = EncoderConfig {
            embed_dim: 4,
            hidden: vec![3, 5],
            knn_k: 2,
        };
        let mut c = Checkpoint::fresh(enc, 3).unwrap();
        c.head = Some(ClassifierHead::init(4, vec![PartId(2), PartId(9)], 1));
        c.optimizer = Some(AdamState::new(c.params.tensors()));
        c.stage = Stage::Metatrain;
        c.step = 7;
        c.history = vec![HistoryEntry {
            step: 1,
            stage: Stage::Metatrain,
            loss: 0.1 + 0.2,
            uncovered_points: 3,
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _: u64 = rng.random();
        c.rng = Some(RngState::capture(&rng));
        c
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        for (a, b) in back.params.tensors().iter().zip(c.params.tensors()) {
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let _: [u64; 3] = rng.random();
        let mut resumed = RngState::capture(&rng).restore().unwrap();
        let a: [u64; 4] = rng.random();
        let b: [u64; 4] = resumed.random();
        assert_eq!(a, b);
    }

    #[test]
    fn damaged_files_are_format_errors() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 15, 40, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Format(_))
        ));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&long),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(!path.with_extension("partial").exists());
    }

    #[test]
    fn history_csv_layout() {
        let csv = sample().history_csv();
        assert_eq!(
            csv,
            "step,stage,loss,uncovered_points\n1,metatrain,0.30000000000000004,3\n"
        );
    }
}
