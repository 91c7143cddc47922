//! Binary formats.
//!
//! EMB1 (embeddings): `"EMB1"`, version `u8 = 1`, then `u32` visual dim,
//! `u32` text dim, `u32` record count. Each record: `u16` qa_id byte length,
//! UTF-8 qa_id, visual `f32`s, text `f32`s, `u8` has_target and, when set,
//! four `f32` corners `x1 y1 x2 y2`.
//!
//! DXV0 (checkpoints): `"DXV0"`, version `u8`, `u32` JSON header length,
//! JSON header, then every matrix in header order as row-major `f32`.
//!
//! All integers and floats are little-endian.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Dims, Linear, RegressorParams};
use super::train::Checkpoint;
use super::{EmbeddingRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::geometry::NormBox;

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB_VERSION: u8 = 1;
pub const CKPT_MAGIC: &[u8; 4] = b"DXV0";
pub const CKPT_VERSION: u8 = 1;

const LAYER_NAMES: [&str; 5] = ["visual", "text", "fuse1", "fuse2", "head"];

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::validation(format!("unexpected end of file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::validation("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn put_f32s(out: &mut Vec<u8>, vals: impl IntoIterator<Item = f32>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFile {
    pub visual_dim: usize,
    pub text_dim: usize,
    pub records: Vec<EmbeddingRecord>,
}

impl EmbeddingFile {
    pub fn get(&self, qa_id: &str) -> Option<&EmbeddingRecord> {
        self.records.iter().find(|r| r.qa_id == qa_id)
    }
}

pub fn encode_embeddings(file: &EmbeddingFile) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(EMB_MAGIC);
    out.push(EMB_VERSION);
    let u32_of = |n: usize, what: &str| {
        u32::try_from(n).map_err(|_| Error::validation(format!("{what} {n} does not fit in u32")))
    };
    out.extend_from_slice(&u32_of(file.visual_dim, "visual dim")?.to_le_bytes());
    out.extend_from_slice(&u32_of(file.text_dim, "text dim")?.to_le_bytes());
    out.extend_from_slice(&u32_of(file.records.len(), "record count")?.to_le_bytes());
    for r in &file.records {
        if r.visual.len() != file.visual_dim || r.text.len() != file.text_dim {
            return Err(Error::validation(format!("record {} does not match header dims", r.qa_id)));
        }
        let id = r.qa_id.as_bytes();
        let len = u16::try_from(id.len())
            .map_err(|_| Error::validation(format!("qa_id {} longer than 65535 bytes", r.qa_id)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id);
        put_f32s(&mut out, r.visual.iter().copied());
        put_f32s(&mut out, r.text.iter().copied());
        match &r.target {
            Some(b) => {
                out.push(1);
                put_f32s(&mut out, b.to_array().map(|v| v as f32));
            }
            None => out.push(0),
        }
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingFile> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != EMB_MAGIC {
        return Err(Error::validation("not an EMB1 file (bad magic)"));
    }
    let version = r.u8()?;
    if version != EMB_VERSION {
        return Err(Error::validation(format!("unsupported EMB1 version {version}")));
    }
    let visual_dim = r.u32()? as usize;
    let text_dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    let mut seen = HashSet::new();
    for _ in 0..count {
        let n = r.u16()? as usize;
        let qa_id = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::validation("qa_id is not UTF-8"))?
            .to_string();
        let visual = r.f32s(visual_dim)?;
        let text = r.f32s(text_dim)?;
        if visual.iter().chain(&text).any(|v| !v.is_finite()) {
            return Err(Error::validation(format!("record {qa_id} has non-finite embedding values")));
        }
        let target = match r.u8()? {
            0 => None,
            1 => {
                let c = r.f32s(4)?;
                Some(NormBox::new(c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64).map_err(|e| {
                    Error::validation(format!("record {qa_id}: {e}"))
                })?)
            }
            other => return Err(Error::validation(format!("record {qa_id}: bad has_target byte {other}"))),
        };
        if !seen.insert(qa_id.clone()) {
            return Err(Error::validation(format!("duplicate qa_id {qa_id} in embedding file")));
        }
        records.push(EmbeddingRecord {
            qa_id,
            visual,
            text,
            target,
        });
    }
    if !r.done() {
        return Err(Error::validation("trailing bytes after last embedding record"));
    }
    Ok(EmbeddingFile {
        visual_dim,
        text_dim,
        records,
    })
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes).map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn write_embeddings(path: &Path, file: &EmbeddingFile) -> Result<()> {
    fs::write(path, encode_embeddings(file)?).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct Metrics {
    val_mean_iou: f64,
    train_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct Shape {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    metrics: Metrics,
    dims: Dims,
    shapes: Vec<Shape>,
}

fn shapes(p: &RegressorParams) -> Vec<Shape> {
    p.layers()
        .iter()
        .zip(LAYER_NAMES)
        .flat_map(|(l, name)| {
            [
                Shape {
                    name: format!("{name}.weight"),
                    rows: l.n_in,
                    cols: l.n_out,
                },
                Shape {
                    name: format!("{name}.bias"),
                    rows: 1,
                    cols: l.n_out,
                },
            ]
        })
        .collect()
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let header = Header {
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        metrics: Metrics {
            val_mean_iou: ckpt.val_mean_iou,
            train_loss: ckpt.train_loss,
        },
        dims: ckpt.params.dims(),
        shapes: shapes(&ckpt.params),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(9 + json.len() + 4 * ckpt.params.len());
    out.extend_from_slice(CKPT_MAGIC);
    out.push(CKPT_VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for l in ckpt.params.layers() {
        put_f32s(&mut out, l.w.iter().map(|&v| v as f32));
        put_f32s(&mut out, l.b.iter().map(|&v| v as f32));
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::validation("not a DXV0 checkpoint (bad magic)"));
    }
    let version = r.u8()?;
    if version != CKPT_VERSION {
        return Err(Error::validation(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::validation(format!("bad checkpoint header: {e}")))?;
    let mut params = RegressorParams::zeros(header.dims);
    let expected = shapes(&params);
    let matches = expected.len() == header.shapes.len()
        && expected
            .iter()
            .zip(&header.shapes)
            .all(|(a, b)| a.name == b.name && a.rows == b.rows && a.cols == b.cols);
    if !matches {
        return Err(Error::validation("checkpoint shapes do not match its declared dims"));
    }
    for l in params.layers_mut() {
        let Linear { w, b, .. } = l;
        for dst in [w, b] {
            let vals = r.f32s(dst.len())?;
            for (d, s) in dst.iter_mut().zip(vals) {
                *d = s as f64;
            }
        }
    }
    if !r.done() {
        return Err(Error::validation("trailing bytes after checkpoint matrices"));
    }
    if !params.all_finite() {
        return Err(Error::validation("checkpoint contains non-finite parameters"));
    }
    if !(0.0..=1.0).contains(&header.metrics.val_mean_iou) {
        return Err(Error::validation("checkpoint val_mean_iou outside [0, 1]"));
    }
    Ok(Checkpoint {
        params,
        config: header.config,
        epoch: header.epoch,
        val_mean_iou: header.metrics.val_mean_iou,
        train_loss: header.metrics.train_loss,
    })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_file() -> EmbeddingFile {
        EmbeddingFile {
            visual_dim: 3,
            text_dim: 2,
            records: vec![
                EmbeddingRecord {
                    qa_id: "a".into(),
                    visual: vec![0.5, -1.0, 2.0],
                    text: vec![0.25, 0.0],
                    target: Some(NormBox::new(0.125, 0.25, 0.5, 0.75).unwrap()),
                },
                EmbeddingRecord {
                    qa_id: "bé".into(),
                    visual: vec![1.0, 1.0, 1.0],
                    text: vec![-0.5, 3.0],
                    target: None,
                },
            ],
        }
    }

    #[test]
    fn emb1_layout() {
        let bytes = encode_embeddings(&sample_file()).unwrap();
        assert_eq!(&bytes[..4], b"EMB1");
        assert_eq!(bytes[4], 1);
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(bytes[17..19].try_into().unwrap()), 1);
        assert_eq!(bytes[19], b'a');
        // header 17 + (2 + 1 + 20 + 1 + 16) + (2 + 3 + 20 + 1)
        assert_eq!(bytes.len(), 17 + 40 + 26);
        assert_eq!(decode_embeddings(&bytes).unwrap(), sample_file());
    }

    #[test]
    fn emb1_rejects_corruption() {
        let mut bytes = encode_embeddings(&sample_file()).unwrap();
        assert!(decode_embeddings(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(decode_embeddings(&bytes).is_err());
        let mut bad_magic = encode_embeddings(&sample_file()).unwrap();
        bad_magic[0] = b'X';
        assert!(decode_embeddings(&bad_magic).is_err());
    }

    fn checkpoint(seed: u64) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = Dims {
            visual: 5,
            text: 3,
            latent: 4,
            hidden: 2,
        };
        Checkpoint {
            params: RegressorParams::init(dims, &mut rng),
            config: TrainConfig {
                latent: 4,
                hidden: 2,
                ..Default::default()
            },
            epoch: 7,
            val_mean_iou: 0.25,
            train_loss: 0.125,
        }
    }

    #[test]
    fn dxv0_round_trip_at_f32_precision() {
        let ck = checkpoint(1);
        let bytes = encode_checkpoint(&ck);
        assert_eq!(&bytes[..4], b"DXV0");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.epoch, 7);
        assert_eq!(back.config, ck.config);
        for (a, b) in ck.params.values().zip(back.params.values()) {
            assert_eq!(*a as f32 as f64, *b);
        }
        // re-encoding a decoded checkpoint is byte-stable
        assert_eq!(encode_checkpoint(&back), bytes);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 4]).is_err());
    }

    proptest! {
        #[test]
        fn emb1_round_trip(
            dims in (0usize..6, 0usize..6),
            recs in prop::collection::vec(("[a-z0-9]{1,8}", any::<bool>(), prop::collection::vec(-10.0f32..10.0, 12)), 0..6)
        ) {
            let (dv, dt) = dims;
            let mut seen = HashSet::new();
            let records: Vec<EmbeddingRecord> = recs
                .into_iter()
                .filter(|(id, _, _)| seen.insert(id.clone()))
                .map(|(id, has, vals)| EmbeddingRecord {
                    qa_id: id,
                    visual: vals[..dv].to_vec(),
                    text: vals[6..6 + dt].to_vec(),
                    target: has.then(|| NormBox::new(0.25, 0.5, 0.75, 1.0).unwrap()),
                })
                .collect();
            let f = EmbeddingFile { visual_dim: dv, text_dim: dt, records };
            prop_assert_eq!(decode_embeddings(&encode_embeddings(&f).unwrap()).unwrap(), f);
        }
    }
}
