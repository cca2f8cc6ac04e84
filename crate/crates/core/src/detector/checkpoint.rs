//! Flat container of named f32 arrays.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! magic     8 bytes  b"CCALCKPT"
//! version   u32      1
//! hash_len  u32, then hash_len bytes of UTF-8 config hash
//! cycle     u64
//! count     u32      number of arrays
//! per array:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, then ndim x u32 dims
//!   data     prod(dims) x f32
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::detector::{Detector, DetectorConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CCALCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub cycle: u64,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_detector(det: &Detector, config_hash: &str, cycle: u64) -> Self {
        let mut arrays = Vec::new();
        for (name, conv) in det.layer_names().into_iter().zip(det.convs()) {
            arrays.push(NamedArray {
                name: format!("{name}.weight"),
                dims: vec![conv.out_channels, conv.in_channels, conv.kernel, conv.kernel],
                data: conv.weight.clone(),
            });
            arrays.push(NamedArray {
                name: format!("{name}.bias"),
                dims: vec![conv.out_channels],
                data: conv.bias.clone(),
            });
        }
        Self {
            config_hash: config_hash.to_string(),
            cycle,
            arrays,
        }
    }

    /// Rebuilds a detector of the given architecture and loads every array,
    /// checking names and shapes.
    pub fn to_detector(&self, config: &DetectorConfig) -> Result<Detector> {
        let mut det = Detector::new(config, 0)?;
        let names = det.layer_names();
        if self.arrays.len() != 2 * names.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} arrays, architecture needs {}",
                self.arrays.len(),
                2 * names.len()
            )));
        }
        for ((name, conv), pair) in names.iter().zip(det.convs_mut()).zip(self.arrays.chunks_exact(2)) {
            let (w, b) = (&pair[0], &pair[1]);
            let expected_w = vec![conv.out_channels, conv.in_channels, conv.kernel, conv.kernel];
            if w.name != format!("{name}.weight") || w.dims != expected_w {
                return Err(Error::Config(format!("array {} does not fit layer {name}", w.name)));
            }
            if b.name != format!("{name}.bias") || b.dims != vec![conv.out_channels] {
                return Err(Error::Config(format!("array {} does not fit layer {name}", b.name)));
            }
            conv.weight.clone_from(&w.data);
            conv.bias.clone_from(&b.data);
        }
        Ok(det)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_hash.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_hash.as_bytes());
        out.extend_from_slice(&self.cycle.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.dims.len() as u32).to_le_bytes());
            for d in &a.dims {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(8)? != MAGIC {
            return Err(Error::format(origin, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(origin, format!("unsupported version {version}")));
        }
        let hash_len = r.u32()? as usize;
        let config_hash = r.string(hash_len)?;
        let cycle = r.u64()?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let data = r
                .take(len * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            arrays.push(NamedArray { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(origin, "trailing bytes after last array"));
        }
        Ok(Self {
            config_hash,
            cycle,
            arrays,
        })
    }

    /// Writes to a temporary sibling and renames, so a crash never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.origin, "unexpected end of checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.origin, "invalid UTF-8"))
    }
}
