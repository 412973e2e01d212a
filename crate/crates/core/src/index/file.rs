//! On-disk index format, little-endian.
//!
//! ```text
//! magic      4 bytes "RIDX"
//! format     u32     (1)
//! kind       u8      0 = exact, 1 = product-quantized
//! precision  u8      0 = float32, 1 = float16
//! version    u64     index version
//! dim        u32
//! shards     u32
//! N          u64
//! dump date  i32     days from 0001-01-01, i32::MIN when absent
//! ids        N × (u32 byte length, UTF-8 bytes)
//! exact:     N × dim scalars (f32, or IEEE half bits as u16)
//! pq:        m u32, kc u32, dim × kc f32 codebooks, N × m u16 codes
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use chrono::{Datelike, NaiveDate};
use half::f16;

use super::{EmbeddingIndex, PqCodec, PqIndex, Precision};
use crate::error::{Error, Result};

pub const INDEX_MAGIC: &[u8; 4] = b"RIDX";
const FORMAT_VERSION: u32 = 1;
const KIND_EXACT: u8 = 0;
const KIND_PQ: u8 = 1;
const NO_DATE: i32 = i32::MIN;

#[derive(Debug, Clone, PartialEq)]
pub enum StoredIndex {
    Exact(EmbeddingIndex),
    Pq(PqIndex),
}

impl StoredIndex {
    pub fn version(&self) -> u64 {
        match self {
            StoredIndex::Exact(i) => i.version(),
            StoredIndex::Pq(i) => i.version(),
        }
    }

    pub fn dump_date(&self) -> Option<NaiveDate> {
        match self {
            StoredIndex::Exact(i) => i.dump_date(),
            StoredIndex::Pq(i) => i.dump_date(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            StoredIndex::Exact(i) => i.dim(),
            StoredIndex::Pq(i) => i.dim(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            StoredIndex::Exact(i) => i.len(),
            StoredIndex::Pq(i) => i.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn search(&self, q: &[f32], k: usize) -> Result<Vec<super::Hit>> {
        match self {
            StoredIndex::Exact(i) => i.search(q, k),
            StoredIndex::Pq(i) => i.search(q, k),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_index_file(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_index_file(BufReader::new(File::open(path)?))
    }
}

struct Header {
    kind: u8,
    precision: Precision,
    version: u64,
    dim: usize,
    shards: usize,
    n: usize,
    dump_date: Option<NaiveDate>,
}

fn write_header<W: Write>(w: &mut W, h: &Header) -> Result<()> {
    w.write_all(INDEX_MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u8(h.kind)?;
    w.write_u8(match h.precision {
        Precision::F32 => 0,
        Precision::F16 => 1,
    })?;
    w.write_u64::<LittleEndian>(h.version)?;
    w.write_u32::<LittleEndian>(h.dim as u32)?;
    w.write_u32::<LittleEndian>(h.shards as u32)?;
    w.write_u64::<LittleEndian>(h.n as u64)?;
    w.write_i32::<LittleEndian>(h.dump_date.map_or(NO_DATE, |d| d.num_days_from_ce()))?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<Header> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != INDEX_MAGIC {
        return Err(Error::Format("not an index file (bad magic)".into()));
    }
    let format = r.read_u32::<LittleEndian>()?;
    if format != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported index format {format}")));
    }
    let kind = r.read_u8()?;
    let precision = match r.read_u8()? {
        0 => Precision::F32,
        1 => Precision::F16,
        p => return Err(Error::Format(format!("unknown precision tag {p}"))),
    };
    let version = r.read_u64::<LittleEndian>()?;
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let shards = r.read_u32::<LittleEndian>()? as usize;
    let n = r.read_u64::<LittleEndian>()? as usize;
    let date = r.read_i32::<LittleEndian>()?;
    let dump_date = if date == NO_DATE {
        None
    } else {
        Some(
            NaiveDate::from_num_days_from_ce_opt(date)
                .ok_or_else(|| Error::Format(format!("bad dump date {date}")))?,
        )
    };
    Ok(Header {
        kind,
        precision,
        version,
        dim,
        shards,
        n,
        dump_date,
    })
}

fn write_ids<W: Write>(w: &mut W, ids: &[String]) -> Result<()> {
    for id in ids {
        w.write_u32::<LittleEndian>(id.len() as u32)?;
        w.write_all(id.as_bytes())?;
    }
    Ok(())
}

fn read_ids<R: Read>(r: &mut R, n: usize) -> Result<Vec<String>> {
    (0..n)
        .map(|_| {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
        })
        .collect()
}

pub fn write_index_file<W: Write>(w: &mut W, index: &StoredIndex) -> Result<()> {
    match index {
        StoredIndex::Exact(idx) => {
            write_header(
                w,
                &Header {
                    kind: KIND_EXACT,
                    precision: idx.precision(),
                    version: idx.version(),
                    dim: idx.dim(),
                    shards: idx.shards(),
                    n: idx.len(),
                    dump_date: idx.dump_date(),
                },
            )?;
            write_ids(w, idx.ids())?;
            for v in idx.vectors() {
                match idx.precision() {
                    Precision::F32 => w.write_f32::<LittleEndian>(*v)?,
                    Precision::F16 => w.write_u16::<LittleEndian>(f16::from_f32(*v).to_bits())?,
                }
            }
        }
        StoredIndex::Pq(idx) => {
            let codec = idx.codec();
            write_header(
                w,
                &Header {
                    kind: KIND_PQ,
                    precision: Precision::F32,
                    version: idx.version(),
                    dim: idx.dim(),
                    shards: 1,
                    n: idx.len(),
                    dump_date: idx.dump_date(),
                },
            )?;
            write_ids(w, idx.ids())?;
            w.write_u32::<LittleEndian>(codec.m() as u32)?;
            w.write_u32::<LittleEndian>(codec.kc() as u32)?;
            for v in codec.codebooks() {
                w.write_f32::<LittleEndian>(*v)?;
            }
            for c in idx.all_codes() {
                w.write_u16::<LittleEndian>(*c)?;
            }
        }
    }
    Ok(())
}

pub fn read_index_file<R: Read>(mut r: R) -> Result<StoredIndex> {
    let h = read_header(&mut r)?;
    let ids = read_ids(&mut r, h.n)?;
    match h.kind {
        KIND_EXACT => {
            let mut vectors = vec![0f32; h.n * h.dim];
            match h.precision {
                Precision::F32 => r.read_f32_into::<LittleEndian>(&mut vectors)?,
                Precision::F16 => {
                    for v in vectors.iter_mut() {
                        *v = f16::from_bits(r.read_u16::<LittleEndian>()?).to_f32();
                    }
                }
            }
            Ok(StoredIndex::Exact(EmbeddingIndex::from_raw_parts(
                h.version,
                h.dim,
                ids,
                vectors,
                h.precision,
                h.shards.max(1),
                h.dump_date,
            )))
        }
        KIND_PQ => {
            let m = r.read_u32::<LittleEndian>()? as usize;
            let kc = r.read_u32::<LittleEndian>()? as usize;
            let mut codebooks = vec![0f32; h.dim * kc];
            r.read_f32_into::<LittleEndian>(&mut codebooks)?;
            let mut codes = vec![0u16; h.n * m];
            r.read_u16_into::<LittleEndian>(&mut codes)?;
            let codec = PqCodec::new(h.dim, m, kc, codebooks)?;
            Ok(StoredIndex::Pq(PqIndex::from_raw_parts(
                codec,
                ids,
                codes,
                h.version,
                h.dump_date,
            )?))
        }
        k => Err(Error::Format(format!("unknown index kind {k}"))),
    }
}
