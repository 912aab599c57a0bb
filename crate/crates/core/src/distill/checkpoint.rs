//! Binary checkpoint container.
//!
//! ```text
//! magic    8 bytes  "DSTLCKPT"
//! version  u32 LE
//! hlen     u64 LE   length of the JSON header
//! header   hlen bytes of UTF-8 JSON
//! arrays   f64 LE values, concatenated in header order
//! digest   32 bytes SHA-256 of everything above
//! ```

use std::io::Write;
use std::path::Path;

use ndarray::Array1;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Checkpoint;
use crate::error::{DistlError, Result};
use crate::model::{ModelParams, ModelSpec};
use crate::optim::AdamState;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DSTLCKPT";
const ARRAYS: [&str; 5] = ["student", "teacher", "center", "adam_m", "adam_v"];

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    generation: usize,
    global_step: u64,
    optimizer_step: u64,
    rng: ChaCha8Rng,
    arrays: Vec<(String, usize)>,
}

fn format_err(msg: impl Into<String>) -> DistlError {
    DistlError::Format(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arrays: [&[f64]; 5] = [
            &self.student.data,
            &self.teacher.data,
            self.center.as_slice().expect("contiguous center"),
            &self.optimizer.m,
            &self.optimizer.v,
        ];
        let header = Header {
            spec: self.student.spec,
            generation: self.generation,
            global_step: self.global_step,
            optimizer_step: self.optimizer.step,
            rng: self.rng.clone(),
            arrays: ARRAYS.iter().zip(&arrays).map(|(n, a)| (n.to_string(), a.len())).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(64 + json.len() + 8 * arrays.iter().map(|a| a.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in arrays {
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(format_err("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(format_err("checkpoint digest mismatch"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(format_err(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| format_err("truncated checkpoint header"))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])?;
        let names: Vec<&str> = header.arrays.iter().map(|(n, _)| n.as_str()).collect();
        if names != ARRAYS {
            return Err(format_err("unexpected checkpoint array list"));
        }
        let mut rest = &body[header_end..];
        let expected: usize = header.arrays.iter().map(|(_, n)| n * 8).sum();
        if rest.len() != expected {
            return Err(format_err("checkpoint payload length mismatch"));
        }
        let mut take = |n: usize| -> Vec<f64> {
            let (head, tail) = rest.split_at(n * 8);
            rest = tail;
            head.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        };
        let lens: Vec<usize> = header.arrays.iter().map(|(_, n)| *n).collect();
        let student = ModelParams::from_data(header.spec, take(lens[0]))?;
        let teacher = ModelParams::from_data(header.spec, take(lens[1]))?;
        let center = Array1::from(take(lens[2]));
        let m = take(lens[3]);
        let v = take(lens[4]);
        if center.len() != header.spec.proj_dim || m.len() != student.param_count() || v.len() != m.len() {
            return Err(format_err("checkpoint array sizes disagree with the model spec"));
        }
        Ok(Checkpoint {
            student,
            teacher,
            center,
            optimizer: AdamState {
                step: header.optimizer_step,
                m,
                v,
            },
            generation: header.generation,
            global_step: header.global_step,
            rng: header.rng,
        })
    }

    /// Writes atomically through a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
