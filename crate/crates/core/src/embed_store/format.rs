//! Binary embedding file.
//!
//! Little-endian throughout.
//!
//! ```text
//! header (29 bytes)
//!   0  magic "DKVB"
//!   4  u32 version = 1
//!   8  u32 dtype   = 0 (f32)
//!  12  u32 t
//!  16  u32 h
//!  20  u8  cls_flag
//!  21  u64 record count
//! record (24 + 4*t*h bytes)
//!   u64 id-hash, u32 label, u32 task_id, u32 domain_id, u32 valid_tokens,
//!   t*h f32 row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::{fnv1a, Matrix};
use crate::Float;

pub const MAGIC: &[u8; 4] = b"DKVB";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 29;
const DTYPE_F32: u32 = 0;
const RECORD_META_LEN: usize = 24;

/// Stable 64-bit identifier for a sample name.
pub fn sample_id(name: &str) -> u64 {
    fnv1a(name.as_bytes())
}

/// One sample's frozen encoding with its label and scenario metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    /// Hash of the sample name, see [`sample_id`].
    pub id: u64,
    /// Token-level encoding, `t x h`. Rows at and beyond `valid_tokens` are
    /// padding.
    pub z: Matrix,
    pub label: u32,
    pub task_id: u32,
    pub domain_id: u32,
    pub valid_tokens: u32,
}

impl EmbeddingRecord {
    pub fn valid(&self) -> usize {
        self.valid_tokens as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FileHeader {
    pub t: usize,
    pub h: usize,
    pub cls_flag: bool,
    pub count: u64,
}

impl FileHeader {
    fn record_len(&self) -> usize {
        RECORD_META_LEN + 4 * self.t * self.h
    }
}

/// Records sharing one `(t, h, cls_flag)` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordSet {
    pub t: usize,
    pub h: usize,
    pub cls_flag: bool,
    pub records: Vec<EmbeddingRecord>,
}

impl RecordSet {
    pub fn new(t: usize, h: usize, cls_flag: bool) -> Self {
        RecordSet {
            t,
            h,
            cls_flag,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.t == 0 || self.h == 0 {
            return Err(Error::InvalidInput("t and h must be positive".into()));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.z.shape() != (self.t, self.h) {
                return Err(Error::InvalidInput(format!(
                    "record {i} has shape {:?}, file layout is {}x{}",
                    r.z.shape(),
                    self.t,
                    self.h
                )));
            }
            if r.valid_tokens == 0 || r.valid() > self.t {
                return Err(Error::InvalidInput(format!(
                    "record {i} has valid_tokens {} outside 1..={}",
                    r.valid_tokens, self.t
                )));
            }
        }
        Ok(())
    }
}

pub fn records_to_bytes(set: &RecordSet) -> Result<Vec<u8>> {
    set.check()?;
    let header = FileHeader {
        t: set.t,
        h: set.h,
        cls_flag: set.cls_flag,
        count: set.records.len() as u64,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + set.records.len() * header.record_len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(set.t as u32).to_le_bytes());
    out.extend_from_slice(&(set.h as u32).to_le_bytes());
    out.push(set.cls_flag as u8);
    out.extend_from_slice(&header.count.to_le_bytes());
    for r in &set.records {
        out.extend_from_slice(&r.id.to_le_bytes());
        out.extend_from_slice(&r.label.to_le_bytes());
        out.extend_from_slice(&r.task_id.to_le_bytes());
        out.extend_from_slice(&r.domain_id.to_le_bytes());
        out.extend_from_slice(&r.valid_tokens.to_le_bytes());
        for &x in r.z.as_slice() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_records(path: impl AsRef<Path>, set: &RecordSet) -> Result<()> {
    let bytes = records_to_bytes(set)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    Ok(())
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

fn u64_at(bytes: &[u8], offset: usize) -> u64 {
    u64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap())
}

fn parse_header(bytes: &[u8]) -> Result<FileHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"DKVB\""));
    }
    let version = u32_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let dtype = u32_at(bytes, 8);
    if dtype != DTYPE_F32 {
        return Err(Error::format(8, format!("unsupported dtype code {dtype}")));
    }
    let t = u32_at(bytes, 12) as usize;
    if t == 0 {
        return Err(Error::format(12, "t must be positive"));
    }
    let h = u32_at(bytes, 16) as usize;
    if h == 0 {
        return Err(Error::format(16, "h must be positive"));
    }
    let cls_flag = match bytes[20] {
        0 => false,
        1 => true,
        other => return Err(Error::format(20, format!("cls_flag byte {other} is not 0/1"))),
    };
    let count = u64_at(bytes, 21);
    Ok(FileHeader {
        t,
        h,
        cls_flag,
        count,
    })
}

/// Parses a whole file image. The header and the total payload length are
/// validated before any record is decoded; on error nothing is returned.
pub fn records_from_bytes(bytes: &[u8]) -> Result<RecordSet> {
    let header = parse_header(bytes)?;
    let record_len = header
        .t
        .checked_mul(header.h)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(RECORD_META_LEN))
        .ok_or_else(|| Error::format(12, "t*h overflows"))?;
    let payload = bytes.len() - HEADER_LEN;
    let expected = (header.count as u128) * record_len as u128;
    if (payload as u128) < expected {
        let complete = payload / record_len;
        return Err(Error::format(
            (HEADER_LEN + complete * record_len) as u64,
            format!(
                "truncated payload: header declares {} records, {complete} complete",
                header.count
            ),
        ));
    }
    if payload as u128 > expected {
        return Err(Error::format(
            (HEADER_LEN as u128 + expected) as u64,
            "trailing bytes after last record",
        ));
    }

    let mut records = Vec::with_capacity(header.count as usize);
    for i in 0..header.count as usize {
        let base = HEADER_LEN + i * record_len;
        let valid_tokens = u32_at(bytes, base + 20);
        if valid_tokens == 0 || valid_tokens as usize > header.t {
            return Err(Error::format(
                (base + 20) as u64,
                format!("valid_tokens {valid_tokens} outside 1..={}", header.t),
            ));
        }
        let mut data = Vec::with_capacity(header.t * header.h);
        for k in 0..header.t * header.h {
            let off = base + RECORD_META_LEN + 4 * k;
            let x = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if !x.is_finite() {
                return Err(Error::format(off as u64, "non-finite payload value"));
            }
            data.push(x as Float);
        }
        records.push(EmbeddingRecord {
            id: u64_at(bytes, base),
            label: u32_at(bytes, base + 8),
            task_id: u32_at(bytes, base + 12),
            domain_id: u32_at(bytes, base + 16),
            valid_tokens,
            z: Matrix::from_vec(header.t, header.h, data)?,
        });
    }
    Ok(RecordSet {
        t: header.t,
        h: header.h,
        cls_flag: header.cls_flag,
        records,
    })
}

pub fn read_records(path: impl AsRef<Path>) -> Result<RecordSet> {
    records_from_bytes(&fs::read(path)?)
}

/// Reads and validates only the fixed-size header.
pub fn read_header(path: impl AsRef<Path>) -> Result<FileHeader> {
    use std::io::Read;
    let mut buf = Vec::with_capacity(HEADER_LEN);
    fs::File::open(path)?
        .take(HEADER_LEN as u64)
        .read_to_end(&mut buf)?;
    parse_header(&buf)
}
