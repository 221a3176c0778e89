//! Binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "PESGCKPT"
//! version    u32      (currently 1)
//! step       u64
//! lr         f64
//! eps        f64
//! count      u32      number of parameter tensors
//! tensors    count x tensor   parameter values
//! tensors    count x tensor   Adagrad accumulators, same names and order
//!
//! tensor:    name_len u32, name (utf-8), ndim u32, dims u64 x ndim,
//!            values f64 x product(dims), row-major
//! ```
//!
//! Values are always stored as 64-bit floats, so `f32` models round-trip
//! exactly too.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::optim::Adagrad;
use super::params::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PESGCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint: bad magic bytes {0:?}")]
    BadMagic([u8; 8]),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match model registry: {0}")]
    RegistryMismatch(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

/// Decoded checkpoint contents, independent of the model scalar type.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub lr: f64,
    pub eps: f64,
    pub params: Vec<StoredTensor>,
    pub accumulators: Vec<StoredTensor>,
}

fn stored<T: Scalar>(name: &str, t: &Tensor<T>) -> StoredTensor {
    StoredTensor {
        name: name.to_string(),
        dims: t.shape().to_vec(),
        values: t.to_f64_vec(),
    }
}

impl Checkpoint {
    pub fn capture<T: Scalar>(store: &ParamStore<T>, opt: &Adagrad<T>, step: u64) -> Self {
        let params = store.entries().iter().map(|e| stored(&e.name, &e.value)).collect();
        let accumulators = store
            .entries()
            .iter()
            .zip(opt.accumulators())
            .map(|(e, a)| stored(&e.name, a))
            .collect();
        Self {
            step,
            lr: opt.lr.as_f64(),
            eps: opt.eps.as_f64(),
            params,
            accumulators,
        }
    }

    /// Writes values and accumulators into a model with the same registry.
    pub fn restore<T: Scalar>(&self, store: &mut ParamStore<T>, opt: &mut Adagrad<T>) -> Result<(), CheckpointError> {
        self.restore_params(store)?;
        let accum = self
            .accumulators
            .iter()
            .map(to_tensor)
            .collect::<Result<Vec<_>, _>>()?;
        opt.set_accumulators(accum);
        opt.lr = T::lit(self.lr);
        opt.eps = T::lit(self.eps);
        Ok(())
    }

    /// Writes parameter values only (inference).
    pub fn restore_params<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<(), CheckpointError> {
        self.check_registry(store)?;
        for (id, st) in store.ids().collect::<Vec<_>>().into_iter().zip(&self.params) {
            *store.value_mut(id) = to_tensor(st)?;
        }
        Ok(())
    }

    fn check_registry<T: Scalar>(&self, store: &ParamStore<T>) -> Result<(), CheckpointError> {
        let registry = store.shape_registry();
        let mut problems = Vec::new();
        for (i, (name, shape)) in registry.iter().enumerate() {
            match self.params.get(i) {
                Some(st) if st.name == *name && st.dims == shape.to_vec() => {}
                Some(st) if st.name == *name => problems.push(format!(
                    "{name}: model shape {:?}, checkpoint shape {:?}",
                    shape, st.dims
                )),
                Some(st) => problems.push(format!("{name}: checkpoint has `{}` in its place", st.name)),
                None => problems.push(format!("{name}: missing from checkpoint")),
            }
        }
        for st in self.params.iter().skip(registry.len()) {
            problems.push(format!("{}: not in model", st.name));
        }
        if self.accumulators.len() != self.params.len() {
            problems.push(format!(
                "{} accumulators for {} parameters",
                self.accumulators.len(),
                self.params.len()
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CheckpointError::RegistryMismatch(problems.join("; ")))
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.lr.to_le_bytes())?;
        w.write_all(&self.eps.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for t in self.params.iter().chain(&self.accumulators) {
            write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        let step = read_u64(r)?;
        let lr = read_f64(r)?;
        let eps = read_f64(r)?;
        let count = read_u32(r)? as usize;
        let params = (0..count).map(|_| read_tensor(r)).collect::<Result<Vec<_>, _>>()?;
        let accumulators = (0..count).map(|_| read_tensor(r)).collect::<Result<Vec<_>, _>>()?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Self {
            step,
            lr,
            eps,
            params,
            accumulators,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn to_tensor<T: Scalar>(st: &StoredTensor) -> Result<Tensor<T>, CheckpointError> {
    let (rows, cols) = match st.dims[..] {
        [r, c] => (r, c),
        [n] => (1, n),
        _ => {
            return Err(CheckpointError::Malformed(format!(
                "{}: expected 1 or 2 dims, got {:?}",
                st.name, st.dims
            )))
        }
    };
    Tensor::new(rows, cols, st.values.iter().map(|&v| T::lit(v)).collect())
        .map_err(|e| CheckpointError::Malformed(format!("{}: {e}", st.name)))
}

fn write_tensor(w: &mut impl Write, t: &StoredTensor) -> io::Result<()> {
    w.write_all(&(t.name.len() as u32).to_le_bytes())?;
    w.write_all(t.name.as_bytes())?;
    w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
    for &d in &t.dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in &t.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<StoredTensor, CheckpointError> {
    let name_len = read_u32(r)? as usize;
    if name_len > 4096 {
        return Err(CheckpointError::Malformed(format!("tensor name length {name_len}")));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| CheckpointError::Malformed("tensor name is not utf-8".into()))?;
    let ndim = read_u32(r)? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(CheckpointError::Malformed(format!("{name}: {ndim} dims")));
    }
    let dims = (0..ndim).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n < (1 << 32))
        .ok_or_else(|| CheckpointError::Malformed(format!("{name}: absurd dims {dims:?}")))?;
    let values = (0..n).map(|_| read_f64(r)).collect::<Result<Vec<_>, _>>()?;
    Ok(StoredTensor { name, dims, values })
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(dim: usize) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::new();
        s.register_gaussian("enc.w", dim, 3, 0.1, &mut rng).unwrap();
        s.register_gaussian("enc.b", 1, 3, 0.1, &mut rng).unwrap();
        s
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let s = store(2);
        let opt = Adagrad::new(&s, 0.15, 1e-8, (-5.0, 5.0), 0.1);
        let ck = Checkpoint::capture(&s, &opt, 42);
        let bytes = ck.to_bytes();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_magic_is_reported() {
        let s = store(2);
        let opt = Adagrad::new(&s, 0.15, 1e-8, (-5.0, 5.0), 0.1);
        let mut bytes = Checkpoint::capture(&s, &opt, 0).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::read_from(&mut bytes.as_slice()),
            Err(CheckpointError::BadMagic(_))
        ));
        let mut bytes = Checkpoint::capture(&s, &opt, 0).to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::read_from(&mut bytes.as_slice()),
            Err(CheckpointError::UnsupportedVersion { found: 9, .. })
        ));
    }

    #[test]
    fn larger_model_names_first_mismatched_tensor() {
        let small = store(2);
        let opt = Adagrad::new(&small, 0.15, 1e-8, (-5.0, 5.0), 0.1);
        let ck = Checkpoint::capture(&small, &opt, 0);
        let mut big = store(4);
        let err = ck.restore_params(&mut big).unwrap_err().to_string();
        let first = err.split(';').next().unwrap();
        assert!(first.contains("enc.w"), "{err}");
        assert!(!err.contains("enc.b"), "{err}");
    }
}
