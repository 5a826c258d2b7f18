//! Model and extractor persistence.
//!
//! The binary layout is little-endian throughout:
//!
//! ```text
//! model:     "BCRK" u32 version, u8 kind, u32 layers, u64 dim, u64 users,
//!            u64 items, f64 x (users*dim), f64 x (items*dim),
//!            u64 meta_len, meta_len bytes of JSON metadata
//! extractor: "BCPX" u32 version, u64 dim, u64 nu, u64 x nu keys,
//!            u64 ni, u64 x ni keys, f64 x (nu*dim), f64 x (ni*dim)
//! ```
//!
//! Floats are stored as raw bit patterns so loading is bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bias_extractor::PopularityEmbeddings;
use crate::encoders::{EmbeddingTable, EncoderKind};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const MODEL_MAGIC: &[u8; 4] = b"BCRK";
const EXTRACTOR_MAGIC: &[u8; 4] = b"BCPX";
const VERSION: u32 = 1;

/// Saved CF model plus free-form training metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub kind: EncoderKind,
    pub table: EmbeddingTable,
    pub metadata: serde_json::Value,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        for x in xs {
            self.0.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("size {v} overflows usize")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint("matrix size overflows".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }
    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint("matrix size overflows".into()))?;
        let data = self.f64s(n)?;
        Matrix::from_vec(rows, cols, data).ok_or_else(|| Error::Checkpoint("bad matrix shape".into()))
    }
    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::Checkpoint(format!(
                "bad magic, expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {v}")));
        }
        Ok(())
    }
    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

impl ModelCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MODEL_MAGIC);
        w.u32(VERSION);
        match self.kind {
            EncoderKind::Mf => {
                w.u8(0);
                w.u32(0);
            }
            EncoderKind::LightGcn { layers } => {
                w.u8(1);
                w.u32(u32::try_from(layers).map_err(|_| Error::Checkpoint("too many layers".into()))?);
            }
        }
        w.u64(self.table.dim());
        w.u64(self.table.num_users());
        w.u64(self.table.num_items());
        w.f64s(self.table.users.as_slice());
        w.f64s(self.table.items.as_slice());
        let meta = serde_json::to_vec(&self.metadata)?;
        w.u64(meta.len());
        w.0.extend_from_slice(&meta);
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        r.header(MODEL_MAGIC)?;
        let tag = r.u8()?;
        let layers = r.u32()? as usize;
        let kind = match tag {
            0 => EncoderKind::Mf,
            1 => EncoderKind::LightGcn { layers },
            t => return Err(Error::Checkpoint(format!("unknown encoder tag {t}"))),
        };
        let dim = r.u64()?;
        let nu = r.u64()?;
        let ni = r.u64()?;
        let users = r.matrix(nu, dim)?;
        let items = r.matrix(ni, dim)?;
        let meta_len = r.u64()?;
        let metadata = serde_json::from_slice(r.take(meta_len)?)?;
        r.finish()?;
        Ok(ModelCheckpoint {
            kind,
            table: EmbeddingTable::new(users, items)?,
            metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }

    /// Human-readable dump. Decimal round-tripping is exact for finite
    /// values but the binary form is the canonical one.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: ModelCheckpoint = serde_json::from_str(s)?;
        EmbeddingTable::new(ck.table.users.clone(), ck.table.items.clone())?;
        Ok(ck)
    }
}

pub fn extractor_to_bytes(pe: &PopularityEmbeddings) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(EXTRACTOR_MAGIC);
    w.u32(VERSION);
    w.u64(pe.dim());
    for keys in [&pe.user_keys, &pe.item_keys] {
        w.u64(keys.len());
        keys.iter().for_each(|&k| w.u64(k));
    }
    w.f64s(pe.user_vecs.as_slice());
    w.f64s(pe.item_vecs.as_slice());
    w.0
}

pub fn extractor_from_bytes(buf: &[u8]) -> Result<PopularityEmbeddings> {
    let mut r = Reader { buf, pos: 0 };
    r.header(EXTRACTOR_MAGIC)?;
    let dim = r.u64()?;
    let mut keys = Vec::with_capacity(2);
    for _ in 0..2 {
        let n = r.u64()?;
        if n > buf.len() / 8 {
            return Err(Error::Checkpoint(format!("implausible key count {n}")));
        }
        keys.push((0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?);
    }
    let item_keys = keys.pop().expect("two key sets");
    let user_keys = keys.pop().expect("two key sets");
    let user_vecs = r.matrix(user_keys.len(), dim)?;
    let item_vecs = r.matrix(item_keys.len(), dim)?;
    r.finish()?;
    PopularityEmbeddings::new(user_keys, user_vecs, item_keys, item_vecs)
}

pub fn save_extractor(pe: &PopularityEmbeddings, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &extractor_to_bytes(pe))
}

pub fn load_extractor(path: impl AsRef<Path>) -> Result<PopularityEmbeddings> {
    extractor_from_bytes(&read_file(path.as_ref())?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table() -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = EmbeddingTable::random(5, 7, 4, &mut rng);
        // awkward values must survive too
        t.users.row_mut(0)[0] = -0.0;
        t.users.row_mut(0)[1] = f64::MIN_POSITIVE / 3.0;
        t.items.row_mut(6)[3] = 1.0 / 3.0;
        t
    }

    fn bits(m: &Matrix) -> Vec<u64> {
        m.as_slice().iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        for kind in [EncoderKind::Mf, EncoderKind::LightGcn { layers: 3 }] {
            let ck = ModelCheckpoint {
                kind,
                table: table(),
                metadata: serde_json::json!({"loss": "bc", "epoch": 7}),
            };
            let back = ModelCheckpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            assert_eq!(back.kind, kind);
            assert_eq!(bits(&back.table.users), bits(&ck.table.users));
            assert_eq!(bits(&back.table.items), bits(&ck.table.items));
            assert_eq!(back.metadata, ck.metadata);
        }
    }

    #[test]
    fn json_round_trip() {
        let ck = ModelCheckpoint {
            kind: EncoderKind::LightGcn { layers: 2 },
            table: table(),
            metadata: serde_json::Value::Null,
        };
        let back = ModelCheckpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn extractor_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pe = PopularityEmbeddings::new(
            vec![1, 4, 9],
            Matrix::random_normal(3, 2, 1.0, &mut rng),
            vec![2, 3],
            Matrix::random_normal(2, 2, 1.0, &mut rng),
        )
        .unwrap();
        let back = extractor_from_bytes(&extractor_to_bytes(&pe)).unwrap();
        assert_eq!(back.user_keys, pe.user_keys);
        assert_eq!(back.item_keys, pe.item_keys);
        assert_eq!(bits(&back.user_vecs), bits(&pe.user_vecs));
        assert_eq!(bits(&back.item_vecs), bits(&pe.item_vecs));
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let ck = ModelCheckpoint {
            kind: EncoderKind::Mf,
            table: table(),
            metadata: serde_json::Value::Null,
        };
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_)) | Err(Error::Json(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelCheckpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(ModelCheckpoint::from_bytes(&long), Err(Error::Checkpoint(_))));
        assert!(extractor_from_bytes(b"BCRK").is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ck = ModelCheckpoint {
            kind: EncoderKind::Mf,
            table: table(),
            metadata: serde_json::json!([1, 2]),
        };
        let p = dir.path().join("m.bin");
        ck.save(&p).unwrap();
        assert_eq!(ModelCheckpoint::load(&p).unwrap(), ck);
        assert!(matches!(ModelCheckpoint::load(dir.path().join("nope")), Err(Error::Io { .. })));
    }
}
