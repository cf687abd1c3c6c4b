//! Codebook checkpoint file.
//!
//! ```text
//! header (41 bytes, little-endian)
//!   0  magic "DKVC"
//!   4  u32 version = 1
//!   8  u32 C (heads)
//!  12  u32 K
//!  16  u32 d_key
//!  20  u32 d_value
//!  24  f32 EMA decay
//!  28  u32 init epochs
//!  32  u8  frozen
//!  33  u64 key-table hash (FNV-1a over the f32 key payload bytes)
//! keys    C*K*d_key f32
//! values  C*K*d_value f32
//! optional decoder trailer
//!   magic "DKVD", u32 count, then per decoder:
//!   u32 task (u32::MAX = shared head), u32 in_dim, u32 n_out,
//!   n_out u32 class IDs, f32 dropout, in_dim*n_out f32 weights, n_out f32 bias
//! ```

use std::fs;
use std::path::Path;

use super::codebook::Bottleneck;
use crate::error::{Error, Result};
use crate::heads::{HeadRegistry, ParametricDecoder, TaskHead};
use crate::numkit::{fnv1a, Matrix};
use crate::Float;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DKVC";
pub const DECODER_MAGIC: &[u8; 4] = b"DKVD";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 41;
const SHARED_TASK: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub heads: usize,
    pub codebook_size: usize,
    pub d_key: usize,
    pub d_value: usize,
    pub ema_decay: f32,
    pub init_epochs: u32,
    pub frozen: bool,
    pub key_hash: u64,
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
    /// `(task, head)`; `None` is the shared single head.
    pub decoders: Vec<(Option<u32>, TaskHead)>,
}

fn key_payload(keys: &[Matrix]) -> Vec<u8> {
    keys.iter()
        .flat_map(|m| m.as_slice().iter().flat_map(|&x| (x as f32).to_le_bytes()))
        .collect()
}

impl Checkpoint {
    pub fn from_bottleneck(b: &Bottleneck, registry: Option<&HeadRegistry>) -> Self {
        let keys: Vec<Matrix> = b.codebooks.iter().map(|cb| cb.keys.clone()).collect();
        let decoders = registry
            .map(|r| {
                r.heads()
                    .filter(|(_, h)| h.decoder.is_some())
                    .map(|(t, h)| (t, h.clone()))
                    .collect()
            })
            .unwrap_or_default();
        Checkpoint {
            heads: b.num_heads(),
            codebook_size: b.config.codebook_size,
            d_key: b.config.d_key,
            d_value: b.config.d_value,
            ema_decay: b.config.ema_decay as f32,
            init_epochs: b.config.init_epochs as u32,
            frozen: b.is_frozen(),
            key_hash: fnv1a(&key_payload(&keys)),
            values: b.codebooks.iter().map(|cb| cb.values.clone()).collect(),
            keys,
            decoders,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [
            VERSION,
            self.heads as u32,
            self.codebook_size as u32,
            self.d_key as u32,
            self.d_value as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.ema_decay.to_le_bytes());
        out.extend_from_slice(&self.init_epochs.to_le_bytes());
        out.push(self.frozen as u8);
        out.extend_from_slice(&self.key_hash.to_le_bytes());
        out.extend(key_payload(&self.keys));
        for m in &self.values {
            for &x in m.as_slice() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        if !self.decoders.is_empty() {
            out.extend_from_slice(DECODER_MAGIC);
            out.extend_from_slice(&(self.decoders.len() as u32).to_le_bytes());
            for (task, head) in &self.decoders {
                let dec = head.decoder.as_ref().expect("only parametric heads are stored");
                out.extend_from_slice(&task.unwrap_or(SHARED_TASK).to_le_bytes());
                out.extend_from_slice(&(dec.in_dim() as u32).to_le_bytes());
                out.extend_from_slice(&(dec.n_classes() as u32).to_le_bytes());
                for &c in &head.classes {
                    out.extend_from_slice(&c.to_le_bytes());
                }
                out.extend_from_slice(&(dec.dropout as f32).to_le_bytes());
                for &x in dec.weight.as_slice().iter().chain(dec.bias.as_slice()) {
                    out.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad magic, expected \"DKVC\""));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let heads = r.u32("C")? as usize;
        let codebook_size = r.u32("K")? as usize;
        let d_key = r.u32("d_key")? as usize;
        let d_value = r.u32("d_value")? as usize;
        let ema_decay = r.f32("ema decay")?;
        let init_epochs = r.u32("init epochs")?;
        let frozen = match r.take(1, "frozen")?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::format(32, format!("frozen byte {b} is not 0/1"))),
        };
        let key_hash = u64::from_le_bytes(r.take(8, "key hash")?.try_into().unwrap());
        debug_assert_eq!(r.pos, HEADER_LEN);

        let key_bytes = heads * codebook_size * d_key * 4;
        let payload_start = r.pos;
        let payload = Reader { bytes, pos: payload_start }.take(key_bytes, "key table")?;
        if fnv1a(payload) != key_hash {
            return Err(Error::format(payload_start as u64, "key table hash mismatch"));
        }
        let mut keys = Vec::with_capacity(heads);
        for _ in 0..heads {
            keys.push(r.matrix(codebook_size, d_key, "keys")?);
        }
        let mut values = Vec::with_capacity(heads);
        for _ in 0..heads {
            values.push(r.matrix(codebook_size, d_value, "values")?);
        }

        let mut decoders = Vec::new();
        if r.pos < bytes.len() {
            let at = r.pos;
            if r.take(4, "decoder magic")? != DECODER_MAGIC {
                return Err(Error::format(at as u64, "bad decoder trailer magic"));
            }
            let count = r.u32("decoder count")?;
            for _ in 0..count {
                let task = r.u32("task")?;
                let in_dim = r.u32("in_dim")? as usize;
                let n_out = r.u32("n_out")? as usize;
                let classes = (0..n_out).map(|_| r.u32("class")).collect::<Result<Vec<_>>>()?;
                let dropout = r.f32("dropout")? as f64;
                let weight = r.matrix(in_dim, n_out, "decoder weight")?;
                let bias = r.matrix(1, n_out, "decoder bias")?;
                decoders.push((
                    (task != SHARED_TASK).then_some(task),
                    TaskHead {
                        classes,
                        decoder: Some(ParametricDecoder {
                            weight,
                            bias,
                            dropout,
                        }),
                    },
                ));
            }
            if r.pos != bytes.len() {
                return Err(Error::format(r.pos as u64, "trailing bytes after decoder trailer"));
            }
        }
        Ok(Checkpoint {
            heads,
            codebook_size,
            d_key,
            d_value,
            ema_decay,
            init_epochs,
            frozen,
            key_hash,
            keys,
            values,
            decoders,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        let at = self.pos;
        let raw = self.take(rows * cols * 4, what)?;
        let data: Vec<Float> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Float)
            .collect();
        Matrix::from_vec(rows, cols, data)
            .map_err(|_| Error::format(at as u64, format!("non-finite {what}")))
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
