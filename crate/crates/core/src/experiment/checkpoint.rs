//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"FLICCKPT"
//! u32    format version (1)
//! u32    entry count
//! entry* u16 name length, UTF-8 name,
//!        u8 rank, u64 extent per axis,
//!        f64 values (product of extents), matrices stored column-major
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::anchors::AnchorSet;
use crate::error::{FlicError, Result};
use crate::federation::GlobalState;
use crate::neural::{Activation, Dense, MlpParams};

pub const MAGIC: &[u8; 8] = b"FLICCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn matrix(m: &DMatrix<f64>) -> Self {
        Self {
            shape: vec![m.nrows(), m.ncols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn vector(v: &DVector<f64>) -> Self {
        Self {
            shape: vec![v.len()],
            data: v.as_slice().to_vec(),
        }
    }
}

/// Named tensors, kept in name order so files are byte-stable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub entries: BTreeMap<String, Tensor>,
}

fn format_err(path: &Path, message: impl Into<String>) -> FlicError {
    FlicError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format_err(self.path, "truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl TensorFile {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(format_err(path, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(path, format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| format_err(path, "entry name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= buf.len() / 8)
                .ok_or_else(|| format_err(path, format!("entry {name} has an impossible shape")))?;
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if entries.insert(name.clone(), Tensor { shape, data }).is_some() {
                return Err(format_err(path, format!("duplicate entry {name}")));
            }
        }
        if r.pos != buf.len() {
            return Err(format_err(path, "trailing bytes"));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| FlicError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| FlicError::io(path, e))?;
        Self::from_bytes(&buf, path)
    }

    fn get(&self, name: &str, path: &Path) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| format_err(path, format!("missing entry {name}")))
    }

    fn get_matrix(&self, name: &str, path: &Path) -> Result<DMatrix<f64>> {
        let t = self.get(name, path)?;
        match t.shape[..] {
            [r, c] => Ok(DMatrix::from_column_slice(r, c, &t.data)),
            _ => Err(format_err(path, format!("{name} is not a matrix"))),
        }
    }

    fn get_vector(&self, name: &str, path: &Path) -> Result<DVector<f64>> {
        let t = self.get(name, path)?;
        match t.shape[..] {
            [n] => Ok(DVector::from_column_slice(&t.data[..n])),
            _ => Err(format_err(path, format!("{name} is not a vector"))),
        }
    }

    fn get_scalar(&self, name: &str, path: &Path) -> Result<f64> {
        let t = self.get(name, path)?;
        if t.shape.is_empty() {
            Ok(t.data[0])
        } else {
            Err(format_err(path, format!("{name} is not a scalar")))
        }
    }

    pub fn put_mlp(&mut self, prefix: &str, p: &MlpParams) {
        self.insert(format!("{prefix}/depth"), Tensor::scalar(p.layers.len() as f64));
        for (j, l) in p.layers.iter().enumerate() {
            self.insert(format!("{prefix}/{j}/weight"), Tensor::matrix(&l.weight));
            self.insert(format!("{prefix}/{j}/bias"), Tensor::vector(&l.bias));
            self.insert(format!("{prefix}/{j}/activation"), Tensor::scalar(l.activation.code() as f64));
        }
    }

    pub fn get_mlp(&self, prefix: &str, path: &Path) -> Result<MlpParams> {
        let depth = self.get_scalar(&format!("{prefix}/depth"), path)? as usize;
        let layers = (0..depth)
            .map(|j| {
                let code = self.get_scalar(&format!("{prefix}/{j}/activation"), path)?;
                let activation = Activation::from_code(code as u8)
                    .filter(|_| code.fract() == 0.0)
                    .ok_or_else(|| format_err(path, format!("{prefix}/{j}: unknown activation code {code}")))?;
                Ok(Dense {
                    weight: self.get_matrix(&format!("{prefix}/{j}/weight"), path)?,
                    bias: self.get_vector(&format!("{prefix}/{j}/bias"), path)?,
                    activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MlpParams::new(layers).map_err(|e| format_err(path, format!("{prefix}: {e}")))
    }
}

/// Server state plus every client's personal parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub global: GlobalState,
    pub phis: Vec<MlpParams>,
    pub betas: Vec<MlpParams>,
    /// Per-client representations, for runs without a shared one.
    pub alphas: Option<Vec<MlpParams>>,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";

impl Checkpoint {
    pub fn to_tensors(&self) -> TensorFile {
        let mut f = TensorFile::default();
        f.insert("round", Tensor::scalar(self.global.round as f64));
        f.put_mlp("alpha", &self.global.alpha);
        let a = &self.global.anchors;
        f.insert("anchors/cov_learnable", Tensor::scalar(if a.cov_learnable { 1.0 } else { 0.0 }));
        f.insert("anchors/count", Tensor::scalar(a.num_classes() as f64));
        for c in 0..a.num_classes() {
            f.insert(format!("anchors/{c:04}/mean"), Tensor::vector(&a.means[c]));
            f.insert(format!("anchors/{c:04}/factor"), Tensor::matrix(&a.factors[c]));
        }
        f.insert("clients/count", Tensor::scalar(self.phis.len() as f64));
        for (i, (phi, beta)) in self.phis.iter().zip(&self.betas).enumerate() {
            f.put_mlp(&format!("clients/{i:05}/phi"), phi);
            f.put_mlp(&format!("clients/{i:05}/beta"), beta);
        }
        if let Some(alphas) = &self.alphas {
            for (i, a) in alphas.iter().enumerate() {
                f.put_mlp(&format!("clients/{i:05}/alpha"), a);
            }
        }
        f
    }

    pub fn from_tensors(f: &TensorFile, path: &Path) -> Result<Self> {
        let round = f.get_scalar("round", path)? as usize;
        let alpha = f.get_mlp("alpha", path)?;
        let classes = f.get_scalar("anchors/count", path)? as usize;
        let cov_learnable = f.get_scalar("anchors/cov_learnable", path)? != 0.0;
        let means = (0..classes)
            .map(|c| f.get_vector(&format!("anchors/{c:04}/mean"), path))
            .collect::<Result<_>>()?;
        let factors = (0..classes)
            .map(|c| f.get_matrix(&format!("anchors/{c:04}/factor"), path))
            .collect::<Result<_>>()?;
        let anchors = AnchorSet::new(means, factors, cov_learnable).map_err(|e| format_err(path, e.to_string()))?;
        let clients = f.get_scalar("clients/count", path)? as usize;
        let mut phis = Vec::with_capacity(clients);
        let mut betas = Vec::with_capacity(clients);
        for i in 0..clients {
            phis.push(f.get_mlp(&format!("clients/{i:05}/phi"), path)?);
            betas.push(f.get_mlp(&format!("clients/{i:05}/beta"), path)?);
        }
        let alphas = if f.entries.contains_key("clients/00000/alpha/depth") {
            Some((0..clients).map(|i| f.get_mlp(&format!("clients/{i:05}/alpha"), path)).collect::<Result<_>>()?)
        } else {
            None
        };
        Ok(Self {
            global: GlobalState { alpha, anchors, round },
            phis,
            betas,
            alphas,
        })
    }

    /// Writes `dir/model.ckpt`, creating `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| FlicError::io(dir, e))?;
        self.to_tensors().save(&dir.join(CHECKPOINT_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_FILE);
        Self::from_tensors(&TensorFile::load(&path)?, &path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_exactly() {
        let mut f = TensorFile::default();
        f.insert("a", Tensor::scalar(-0.0));
        f.insert("b", Tensor::matrix(&DMatrix::from_fn(2, 3, |r, c| (r * 3 + c) as f64 / 7.0)));
        f.insert("c", Tensor::vector(&DVector::from_vec(vec![f64::MIN_POSITIVE, 1e300])));
        let path = Path::new("mem");
        let back = TensorFile::from_bytes(&f.to_bytes(), path).unwrap();
        assert_eq!(back.to_bytes(), f.to_bytes());
    }

    #[test]
    fn corrupt_input_rejected() {
        let path = Path::new("mem");
        assert!(TensorFile::from_bytes(b"NOTACKPT", path).is_err());
        let mut f = TensorFile::default();
        f.insert("x", Tensor::vector(&DVector::from_vec(vec![1.0, 2.0])));
        let bytes = f.to_bytes();
        assert!(TensorFile::from_bytes(&bytes[..bytes.len() - 3], path).is_err());
        let mut huge = bytes.clone();
        // claim an absurd extent
        let at = 8 + 4 + 4 + 2 + 1 + 1;
        huge[at..at + 8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(TensorFile::from_bytes(&huge, path).is_err());
    }
}
