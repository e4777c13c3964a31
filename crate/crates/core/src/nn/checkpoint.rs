//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic          8 bytes   b"DEBIASCK"
//! version        u32       currently 1
//! header_len     u32
//! header         header_len bytes of UTF-8 JSON (CheckpointHeader)
//! array_count    u32
//! repeated array_count times:
//!   name_len     u16
//!   name         name_len bytes UTF-8
//!   rows         u32
//!   cols         u32
//!   values       rows*cols f32, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::Params;
use super::tensor::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DEBIASCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Which component this is, e.g. `style_classifier` or `eval_classifier`.
    pub role: String,
    pub config: serde_json::Value,
    pub vocab_hash: String,
    pub seed: u64,
    pub step: u64,
    /// Role-specific metadata: data fingerprints, mask rate, final losses.
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub arrays: Vec<(String, Matrix<f32>)>,
}

impl Checkpoint {
    pub fn from_params<P: Params<f32>>(header: CheckpointHeader, params: &P) -> Self {
        let arrays = params
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        Self { header, arrays }
    }

    /// Copies arrays into `params` by name, checking shapes. Every tensor of
    /// `params` must be present.
    pub fn load_into<P: Params<f32>>(&self, params: &mut P) -> Result<()> {
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        let by_name: BTreeMap<&str, &Matrix<f32>> =
            self.arrays.iter().map(|(n, m)| (n.as_str(), m)).collect();
        for (name, dst) in names.iter().zip(params.tensors_mut()) {
            let src = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "array `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&u32_len(header.len())?.to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&u32_len(self.arrays.len())?.to_le_bytes())?;
        for (name, m) in &self.arrays {
            let nb = name.as_bytes();
            let nl = u16::try_from(nb.len())
                .map_err(|_| Error::Checkpoint(format!("array name too long: {name}")))?;
            w.write_all(&nl.to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&u32_len(m.rows)?.to_le_bytes())?;
            w.write_all(&u32_len(m.cols)?.to_le_bytes())?;
            let mut buf = Vec::with_capacity(m.data.len() * 4);
            for x in &m.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hl = read_u32(&mut r)? as usize;
        let mut hb = vec![0u8; hl];
        r.read_exact(&mut hb)?;
        let header: CheckpointHeader = serde_json::from_slice(&hb)?;
        let count = read_u32(&mut r)? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let mut nl = [0u8; 2];
            r.read_exact(&mut nl)?;
            let mut nb = vec![0u8; u16::from_le_bytes(nl) as usize];
            r.read_exact(&mut nb)?;
            let name = String::from_utf8(nb).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut raw = vec![0u8; rows * cols * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            arrays.push((name, Matrix::from_vec(rows, cols, data)));
        }
        Ok(Self { header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::encoder::{Encoder, EncoderConfig};
    use rand::SeedableRng;

    #[test]
    fn round_trip_is_bit_stable() {
        let cfg = EncoderConfig {
            d: 8,
            layers: 1,
            heads: 2,
            ffn_width: 16,
            max_len: 6,
            dropout: 0.1,
        };
        let enc = Encoder::<f32>::new(&cfg, 13, &mut rand_chacha::ChaCha8Rng::seed_from_u64(4)).unwrap();
        let header = CheckpointHeader {
            role: "test".into(),
            config: serde_json::to_value(&cfg).unwrap(),
            vocab_hash: "abc".into(),
            seed: 4,
            step: 17,
            extra: BTreeMap::new(),
        };
        let ck = Checkpoint::from_params(header, &enc);
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, ck);

        let mut fresh = Encoder::<f32>::new(&cfg, 13, &mut rand_chacha::ChaCha8Rng::seed_from_u64(99)).unwrap();
        back.load_into(&mut fresh).unwrap();
        assert_eq!(fresh, enc);
        assert_eq!(fresh.checksum(), enc.checksum());

        let mut again = Vec::new();
        Checkpoint::from_params(back.header.clone(), &fresh).write_to(&mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn rejects_garbage_and_shape_mismatch() {
        assert!(Checkpoint::read_from(&b"NOTACKPT\x01\0\0\0"[..]).is_err());
        let cfg = EncoderConfig {
            d: 8,
            layers: 1,
            heads: 2,
            ffn_width: 16,
            max_len: 6,
            dropout: 0.0,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let small = Encoder::<f32>::new(&cfg, 13, &mut rng).unwrap();
        let mut big = Encoder::<f32>::new(&cfg, 14, &mut rng).unwrap();
        let ck = Checkpoint::from_params(CheckpointHeader::default(), &small);
        assert!(matches!(ck.load_into(&mut big), Err(Error::Checkpoint(_))));
    }
}
