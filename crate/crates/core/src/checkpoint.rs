//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic   4 bytes  "BREC"
//! version u32      currently 1
//! flags   u32      bit 0: optimizer moments present
//! layers  u32      propagation depth the tables were trained with
//! M,N,O,d u64 x 4  table shapes
//! epoch   u64      training epoch the snapshot was taken at
//! user    M*d f64  row-major
//! bundle  N*d f64
//! item    O*d f64
//! -- when flags bit 0 is set --
//! t       u64      optimizer step counter
//! m,v     6 tables f64, first/second moments in (user, bundle, item) order
//! ```
//!
//! All values round-trip bit-exactly; a reloaded checkpoint evaluates to
//! the same metrics as the in-memory state it was saved from.

use std::fs;
use std::path::Path;

use crate::encoder::EmbeddingState;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::trainer::AdamState;

const MAGIC: &[u8; 4] = b"BREC";
const VERSION: u32 = 1;
const FLAG_ADAM: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: EmbeddingState,
    pub epoch: u64,
    pub num_layers: u32,
    pub adam: Option<AdamState>,
}

fn push_mat(buf: &mut Vec<u8>, mat: &Mat) {
    for v in mat.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn mat(&mut self, rows: usize, cols: usize) -> Result<Mat> {
        let raw = self.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Mat::from_vec(rows, cols, data))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let (m, n, o, d) = (s.num_users(), s.num_bundles(), s.num_items(), s.dim());
        let mut buf = Vec::with_capacity(48 + (m + n + o) * d * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let flags = if self.adam.is_some() { FLAG_ADAM } else { 0 };
        buf.extend_from_slice(&flags.to_le_bytes());
        buf.extend_from_slice(&self.num_layers.to_le_bytes());
        for dim in [m, n, o, d] {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        buf.extend_from_slice(&self.epoch.to_le_bytes());
        push_mat(&mut buf, &s.user);
        push_mat(&mut buf, &s.bundle);
        push_mat(&mut buf, &s.item);
        if let Some(adam) = &self.adam {
            buf.extend_from_slice(&adam.t.to_le_bytes());
            for mat in [
                &adam.m_user,
                &adam.v_user,
                &adam.m_bundle,
                &adam.v_bundle,
                &adam.m_item,
                &adam.v_item,
            ] {
                push_mat(&mut buf, mat);
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let flags = r.u32()?;
        let num_layers = r.u32()?;
        let m = r.u64()? as usize;
        let n = r.u64()? as usize;
        let o = r.u64()? as usize;
        let d = r.u64()? as usize;
        let epoch = r.u64()?;
        let state = EmbeddingState {
            user: r.mat(m, d)?,
            bundle: r.mat(n, d)?,
            item: r.mat(o, d)?,
        };
        let adam = if flags & FLAG_ADAM != 0 {
            let t = r.u64()?;
            Some(AdamState {
                m_user: r.mat(m, d)?,
                v_user: r.mat(m, d)?,
                m_bundle: r.mat(n, d)?,
                v_bundle: r.mat(n, d)?,
                m_item: r.mat(o, d)?,
                v_item: r.mat(o, d)?,
                t,
            })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            state,
            epoch,
            num_layers,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_embeddings;
    use crate::trainer::AdamState;

    #[test]
    fn roundtrip_is_bit_exact() {
        let state = init_embeddings(3, 4, 5, 2, 1.0, 77);
        let adam = AdamState::zeros(&state);
        let ckpt = Checkpoint {
            state,
            epoch: 12,
            num_layers: 2,
            adam: Some(adam),
        };
        let bytes = ckpt.to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ckpt, loaded);
        assert_eq!(bytes, loaded.to_bytes());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let state = init_embeddings(1, 1, 1, 2, 1.0, 0);
        let ckpt = Checkpoint {
            state,
            epoch: 0,
            num_layers: 1,
            adam: None,
        };
        let mut bytes = ckpt.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }
}
