//! Binary parameter checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    4 bytes   "HTMC"
//! version  u32       FORMAT_VERSION
//! kind     4 bytes   model tag, e.g. "CVAE", "CPCE", "SPTM", "INVM"
//! n_dims   u32, then n_dims × u32        architecture integers
//! n_scal   u32, then n_scal × f64        architecture scalars
//! n_mats   u32, then per matrix:
//!          rows u32, cols u32, rows·cols × f64 in row-major order
//! ```
//!
//! Matrices appear in the owning model's parameter order (for an MLP:
//! layer 0 weight, layer 0 bias, layer 1 weight, ...).

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::matrix::Matrix;
use crate::mlp::{Activation, Dense, Mlp};

pub const MAGIC: [u8; 4] = *b"HTMC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: [u8; 4],
    pub dims: Vec<u32>,
    pub scalars: Vec<f64>,
    pub tensors: Vec<Matrix>,
}

impl Checkpoint {
    pub fn new(kind: [u8; 4]) -> Self {
        Self {
            kind,
            dims: Vec::new(),
            scalars: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.kind)?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for d in &self.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&(self.scalars.len() as u32).to_le_bytes())?;
        for s in &self.scalars {
            w.write_all(&s.to_le_bytes())?;
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for m in &self.tensors {
            w.write_all(&(m.rows() as u32).to_le_bytes())?;
            w.write_all(&(m.cols() as u32).to_le_bytes())?;
            for v in m.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads a checkpoint, rejecting bad magic, unknown versions and a kind
    /// other than `expected_kind`.
    pub fn read_from<R: Read>(mut r: R, expected_kind: [u8; 4]) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(TensorError::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(TensorError::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let mut kind = [0u8; 4];
        r.read_exact(&mut kind)?;
        if kind != expected_kind {
            return Err(TensorError::Checkpoint(format!(
                "expected model kind {:?}, found {:?}",
                String::from_utf8_lossy(&expected_kind),
                String::from_utf8_lossy(&kind)
            )));
        }
        let n = read_u32(&mut r)? as usize;
        let dims = (0..n).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
        let n = read_u32(&mut r)? as usize;
        let scalars = (0..n).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let n = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let data = (0..rows * cols)
                .map(|_| read_f64(&mut r))
                .collect::<Result<Vec<_>>>()?;
            tensors.push(Matrix::from_vec(rows, cols, data)?);
        }
        Ok(Self {
            kind,
            dims,
            scalars,
            tensors,
        })
    }

    /// Appends an MLP: its layer sizes and activations go to `dims`
    /// (`n_layers+1`, sizes..., hidden tag, output tag), its parameters to
    /// `tensors`.
    pub fn push_mlp(&mut self, mlp: &Mlp) {
        let sizes = mlp.sizes();
        self.dims.push(sizes.len() as u32);
        self.dims.extend(sizes.iter().map(|&s| s as u32));
        self.dims.push(mlp.hidden.tag());
        self.dims.push(mlp.output.tag());
        self.tensors.extend(mlp.params().into_iter().cloned());
    }
}

/// Sequential decoder over a checkpoint's sections.
pub struct CheckpointReader<'a> {
    ckpt: &'a Checkpoint,
    dim: usize,
    scalar: usize,
    tensor: usize,
}

impl<'a> CheckpointReader<'a> {
    pub fn new(ckpt: &'a Checkpoint) -> Self {
        Self {
            ckpt,
            dim: 0,
            scalar: 0,
            tensor: 0,
        }
    }

    pub fn dim(&mut self) -> Result<u32> {
        let v = *self
            .ckpt
            .dims
            .get(self.dim)
            .ok_or_else(|| TensorError::Checkpoint("truncated dims section".into()))?;
        self.dim += 1;
        Ok(v)
    }

    pub fn scalar(&mut self) -> Result<f64> {
        let v = *self
            .ckpt
            .scalars
            .get(self.scalar)
            .ok_or_else(|| TensorError::Checkpoint("truncated scalar section".into()))?;
        self.scalar += 1;
        Ok(v)
    }

    pub fn tensor(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let m = self
            .ckpt
            .tensors
            .get(self.tensor)
            .ok_or_else(|| TensorError::Checkpoint("truncated tensor section".into()))?;
        if m.shape() != (rows, cols) {
            return Err(TensorError::Checkpoint(format!(
                "tensor {} is {}x{}, expected {rows}x{cols}",
                self.tensor,
                m.rows(),
                m.cols()
            )));
        }
        self.tensor += 1;
        Ok(m.clone())
    }

    /// Counterpart of [`Checkpoint::push_mlp`].
    pub fn mlp(&mut self) -> Result<Mlp> {
        let n = self.dim()? as usize;
        if !(2..=64).contains(&n) {
            return Err(TensorError::Checkpoint(format!("implausible layer count {n}")));
        }
        let sizes = (0..n).map(|_| self.dim().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let hidden = Activation::from_tag(self.dim()?)
            .ok_or_else(|| TensorError::Checkpoint("unknown activation tag".into()))?;
        let output = Activation::from_tag(self.dim()?)
            .ok_or_else(|| TensorError::Checkpoint("unknown activation tag".into()))?;
        let mut layers = Vec::with_capacity(n - 1);
        for w in sizes.windows(2) {
            let weight = self.tensor(w[0], w[1])?;
            let bias = self.tensor(1, w[1])?;
            layers.push(Dense { weight, bias });
        }
        Mlp::from_layers(layers, hidden, output)
    }

    /// Fails unless every section was consumed.
    pub fn finish(self) -> Result<()> {
        if self.dim != self.ckpt.dims.len()
            || self.scalar != self.ckpt.scalars.len()
            || self.tensor != self.ckpt.tensors.len()
        {
            return Err(TensorError::Checkpoint("trailing checkpoint content".into()));
        }
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&[3, 4, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let mut c = Checkpoint::new(*b"TEST");
        c.push_mlp(&mlp);
        c.scalars.push(0.125);
        c
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[0..4], b"HTMC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(&bytes[8..12], b"TEST");
        // dims: count 6, then [3, 3, 4, 2, tanh, identity]
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 6);
    }

    #[test]
    fn round_trip_and_mlp_decode() {
        let c = sample();
        let back = Checkpoint::read_from(c.to_bytes().as_slice(), *b"TEST").unwrap();
        assert_eq!(back, c);
        let mut rd = CheckpointReader::new(&back);
        let mlp = rd.mlp().unwrap();
        assert_eq!(mlp.sizes(), vec![3, 4, 2]);
        assert_eq!(rd.scalar().unwrap(), 0.125);
        rd.finish().unwrap();
    }

    #[test]
    fn loader_rejects_bad_headers() {
        let good = sample().to_bytes();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(Checkpoint::read_from(bad_magic.as_slice(), *b"TEST").is_err());
        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(Checkpoint::read_from(bad_version.as_slice(), *b"TEST").is_err());
        assert!(Checkpoint::read_from(good.as_slice(), *b"CVAE").is_err());
        assert!(Checkpoint::read_from(&good[..good.len() - 3], *b"TEST").is_err());
    }

    #[test]
    fn reader_rejects_wrong_dims() {
        let c = sample();
        let mut rd = CheckpointReader::new(&c);
        assert!(rd.tensor(5, 5).is_err());
    }
}
