//! Binary encoder checkpoint.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic      4 bytes  "RLAB"
//! version    u32
//! dim        u32
//! vocab      u32      number of rows
//! flags      u32      bit 0: projection present
//! tokens     vocab × (u32 byte length, UTF-8 bytes)
//! query      vocab × dim f32, row-major
//! doc        vocab × dim f32, row-major
//! projection dim × dim f32 for the query tower then the doc tower (if flagged)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{DualEncoder, Encoder, Vocab};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RLAB";
pub const CHECKPOINT_VERSION: u32 = 1;

const FLAG_PROJECTION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, enc: &DualEncoder) -> Result<()> {
    let dim = enc.dim();
    let has_projection = enc.query.projection.is_some();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(dim as u32)?;
    w.write_u32::<LittleEndian>(enc.vocab.len() as u32)?;
    w.write_u32::<LittleEndian>(if has_projection { FLAG_PROJECTION } else { 0 })?;
    for token in enc.vocab.tokens() {
        w.write_u32::<LittleEndian>(token.len() as u32)?;
        w.write_all(token.as_bytes())?;
    }
    for tower in [&enc.query, &enc.doc] {
        write_f32s(&mut w, &tower.table)?;
    }
    if has_projection {
        for tower in [&enc.query, &enc.doc] {
            write_f32s(&mut w, tower.projection.as_deref().unwrap_or_default())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<DualEncoder> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(
            "not an encoder checkpoint (bad magic)".into(),
        ));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let rows = r.read_u32::<LittleEndian>()? as usize;
    let flags = r.read_u32::<LittleEndian>()?;
    let mut tokens = Vec::with_capacity(rows);
    for _ in 0..rows {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        tokens.push(String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?);
    }
    let query_table = read_f32s(&mut r, rows * dim)?;
    let doc_table = read_f32s(&mut r, rows * dim)?;
    let (query_proj, doc_proj) = if flags & FLAG_PROJECTION != 0 {
        (
            Some(read_f32s(&mut r, dim * dim)?),
            Some(read_f32s(&mut r, dim * dim)?),
        )
    } else {
        (None, None)
    };
    DualEncoder::from_parts(
        Vocab::from_tokens(tokens),
        Encoder::new(dim, query_table, query_proj)?,
        Encoder::new(dim, doc_table, doc_proj)?,
    )
}

impl DualEncoder {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(BufWriter::new(File::create(path)?), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_checkpoint(BufReader::new(File::open(path)?))
    }

    /// Rounds every parameter through `f32`, the checkpoint storage precision.
    pub fn rounded_to_f32(&self) -> Self {
        let round = |v: &Vec<f64>| v.iter().map(|x| *x as f32 as f64).collect::<Vec<_>>();
        let tower = |e: &Encoder| Encoder {
            dim: e.dim,
            table: round(&e.table),
            projection: e.projection.as_ref().map(round),
        };
        DualEncoder {
            vocab: self.vocab.clone(),
            query: tower(&self.query),
            doc: tower(&self.doc),
        }
    }
}

fn write_f32s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_f32::<LittleEndian>(*v as f32)?;
    }
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut buf)?;
    Ok(buf.into_iter().map(f64::from).collect())
}
