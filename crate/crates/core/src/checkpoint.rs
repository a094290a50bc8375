//! Parameter files.
//!
//! Layout:
//!
//! ```text
//! FSCTX-CKPT v1\n
//! {"kind": ..., "config": {...}, "tensors": [...], "payload_len": N}\n
//! N little-endian f64 values
//! ```
//!
//! The header line is JSON; `tensors` is the shape table (name, shape,
//! offset into the payload).

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, EncoderShape};
use crate::error::{Error, Result};
use crate::mimic::{MimicConfig, MimicModel};
use crate::params::{ParamLayout, TensorSpec};

pub const MAGIC: &str = "FSCTX-CKPT v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Mimic,
    Encoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: Kind,
    config: serde_json::Value,
    tensors: Vec<TensorSpec>,
    payload_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: Kind,
    pub config: serde_json::Value,
    pub layout: ParamLayout,
    pub data: Vec<f64>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            kind: self.kind,
            config: self.config.clone(),
            tensors: self.layout.tensors.clone(),
            payload_len: self.data.len(),
        };
        writeln!(w, "{MAGIC}")?;
        serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Checkpoint> {
        let corrupt = |m: String| Error::CorruptCheckpoint(m);
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(corrupt("missing magic line".into()));
        }
        line.clear();
        r.read_line(&mut line)?;
        if !line.ends_with('\n') {
            return Err(corrupt("header truncated".into()));
        }
        let header: Header = serde_json::from_str(&line).map_err(|e| corrupt(format!("header: {e}")))?;
        let layout = ParamLayout {
            tensors: header.tensors,
        };
        if layout.len() != header.payload_len {
            return Err(corrupt(format!(
                "shape table covers {} values, payload_len is {}",
                layout.len(),
                header.payload_len
            )));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != header.payload_len * 8 {
            return Err(corrupt(format!(
                "payload has {} bytes, expected {}",
                bytes.len(),
                header.payload_len * 8
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Checkpoint {
            kind: header.kind,
            config: header.config,
            layout,
            data,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Checkpoint::read_from(fs::File::open(path)?)
    }

    fn expect_kind(&self, kind: Kind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Shape(format!(
                "checkpoint holds {:?} parameters, expected {kind:?}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Model described by the checkpoint's own config.
    pub fn into_mimic(self) -> Result<MimicModel> {
        self.expect_kind(Kind::Mimic)?;
        let config: MimicConfig = serde_json::from_value(self.config.clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("mimic config: {e}")))?;
        MimicModel::from_parts(config, &self.layout, self.data)
    }

    /// Load into a caller-chosen config; fails with a shape error when the
    /// stored parameters do not fit it.
    pub fn into_mimic_as(self, config: MimicConfig) -> Result<MimicModel> {
        self.expect_kind(Kind::Mimic)?;
        MimicModel::from_parts(config, &self.layout, self.data)
    }

    pub fn into_encoder(self) -> Result<EncoderParams> {
        self.expect_kind(Kind::Encoder)?;
        let shape: EncoderShape = serde_json::from_value(self.config.clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("encoder shape: {e}")))?;
        EncoderParams::from_parts(shape, &self.layout, self.data)
    }
}

impl From<&MimicModel> for Checkpoint {
    fn from(m: &MimicModel) -> Checkpoint {
        Checkpoint {
            kind: Kind::Mimic,
            config: serde_json::to_value(m.config).expect("config serializes"),
            layout: m.layout.clone(),
            data: m.data.clone(),
        }
    }
}

impl From<&EncoderParams> for Checkpoint {
    fn from(p: &EncoderParams) -> Checkpoint {
        Checkpoint {
            kind: Kind::Encoder,
            config: serde_json::to_value(p.shape).expect("shape serializes"),
            layout: p.layout.clone(),
            data: p.data.clone(),
        }
    }
}

pub fn save_mimic(model: &MimicModel, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from(model).save(path)
}

pub fn load_mimic(path: impl AsRef<Path>) -> Result<MimicModel> {
    Checkpoint::load(path)?.into_mimic()
}
