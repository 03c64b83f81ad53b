//! `SHPKCKPT` files: spec JSON, f32 parameter blocks, training log JSON.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelSpec};
use crate::tensor::Tensor;
use crate::NeuralError;

pub const MAGIC: &[u8; 8] = b"SHPKCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Pooled collapse-class IoU on the validation set, if one was given.
    pub val_c_iou: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training loss of the initial parameters.
    pub initial_loss: f64,
    pub class_weights: [f64; 4],
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: Vec<Tensor<f32>>,
    pub log: TrainLog,
}

fn format_err(msg: impl Into<String>) -> NeuralError {
    NeuralError::Format(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NeuralError> {
        if self.bytes.len() < n {
            return Err(format_err("truncated checkpoint"));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, NeuralError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn json<T: for<'de> Deserialize<'de>>(&mut self) -> Result<T, NeuralError> {
        let n = self.u32()? as usize;
        serde_json::from_slice(self.take(n)?).map_err(|e| format_err(e.to_string()))
    }
}

fn put_json<T: Serialize>(out: &mut Vec<u8>, value: &T) {
    let s = serde_json::to_vec(value).expect("serializable");
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(&s);
}

impl Checkpoint {
    pub fn from_model<T: crate::gemm::Gemm>(model: &Model<T>, log: TrainLog) -> Self {
        Self {
            spec: model.spec.clone(),
            params: model.params.iter().map(Tensor::cast).collect(),
            log,
        }
    }

    pub fn model<T: crate::gemm::Gemm>(&self) -> Result<Model<T>, NeuralError> {
        Model::from_params(self.spec.clone(), self.params.iter().map(Tensor::cast).collect())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_json(&mut out, &self.spec);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_json(&mut out, &self.log);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, NeuralError> {
        let mut r = Reader { bytes };
        if r.take(8)? != MAGIC {
            return Err(format_err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let spec: ModelSpec = r.json()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| format_err("tensor too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            params.push(Tensor { shape, data });
        }
        let log: TrainLog = r.json()?;
        if !r.bytes.is_empty() {
            return Err(format_err("trailing bytes"));
        }
        let ckpt = Self { spec, params, log };
        // Rejects parameter shapes that disagree with the spec.
        ckpt.model::<f32>().map_err(|e| format_err(e.to_string()))?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }
}
