//! Single-file parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "OSCK" version:u32
//! config_len:u32 config:utf8        (key = value echo)
//! seed:u64
//! tensors:u32
//!   per tensor: name_len:u32 name:utf8 ndim:u32 dims:u32*ndim values:f32*
//! ```
//!
//! Values are row-major 32-bit reals.

use std::fs;
use std::io::{self, Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::params::TensorView;

pub const MAGIC: &[u8; 4] = b"OSCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub seed: u64,
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn from_views(config: String, seed: u64, views: &[TensorView<'_>]) -> Self {
        let tensors = views
            .iter()
            .map(|t| StoredTensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                values: t.data.iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Self {
            config,
            seed,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        let write = |w: &mut Vec<u8>| -> io::Result<()> {
            w.write_all(MAGIC)?;
            w.write_u32::<LittleEndian>(VERSION)?;
            w.write_u32::<LittleEndian>(self.config.len() as u32)?;
            w.write_all(self.config.as_bytes())?;
            w.write_u64::<LittleEndian>(self.seed)?;
            w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
            for t in &self.tensors {
                w.write_u32::<LittleEndian>(t.name.len() as u32)?;
                w.write_all(t.name.as_bytes())?;
                w.write_u32::<LittleEndian>(t.shape.len() as u32)?;
                for &d in &t.shape {
                    w.write_u32::<LittleEndian>(d as u32)?;
                }
                for &v in &t.values {
                    w.write_f32::<LittleEndian>(v)?;
                }
            }
            Ok(())
        };
        write(&mut w).expect("writing to memory");
        w
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if !bytes.starts_with(MAGIC) {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Cursor::new(&bytes[4..]);
        let parsed = read_body(&mut r).map_err(|e| match e {
            CheckpointError::Io(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                CheckpointError::Corrupt("truncated file".into())
            }
            other => other,
        })?;
        if r.position() as usize != bytes.len() - 4 {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(parsed)
    }
}

fn read_string(r: &mut Cursor<&[u8]>) -> Result<String, CheckpointError> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > r.get_ref().len() {
        return Err(CheckpointError::Corrupt("string length exceeds file".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| CheckpointError::Corrupt("string is not UTF-8".into()))
}

fn read_body(r: &mut Cursor<&[u8]>) -> Result<Checkpoint, CheckpointError> {
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let config = read_string(r)?;
    let seed = r.read_u64::<LittleEndian>()?;
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name = read_string(r)?;
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        let shape = (0..ndim)
            .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
            .collect::<io::Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        if len * 4 > r.get_ref().len() {
            return Err(CheckpointError::Corrupt(format!("tensor {name} larger than file")));
        }
        let mut values = vec![0f32; len];
        r.read_f32_into::<LittleEndian>(&mut values)?;
        tensors.push(StoredTensor {
            name,
            shape,
            values,
        });
    }
    Ok(Checkpoint {
        config,
        seed,
        tensors,
    })
}
