use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::binio::{put_string, ByteReader};
use crate::error::{Error, Result};

/// First 12 bytes of every checkpoint; a little-endian `u32` version follows.
pub const CHECKPOINT_MAGIC: &[u8; 12] = b"LPDNET-PARAM";
const CHECKPOINT_VERSION: u32 = 1;

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, PartialEq)]
struct Param {
    value: Tensor,
    grad: Tensor,
}

/// Named parameters with paired gradient buffers.
///
/// Iteration is always in name order, which keeps checkpoints and gradient
/// reductions reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    seed: u64,
    params: BTreeMap<String, Param>,
}

/// FNV-1a, used to give every parameter its own initializer stream.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter {name:?}"
            )));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name.to_string(), Param { value, grad });
        Ok(())
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))` for a `fan_in × fan_out` weight.
    pub fn insert_glorot(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data)?)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))
    }

    pub fn grad_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.grad)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `grads` into the gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads {
            let buf = self.grad_mut(name)?;
            if !buf.same_shape(g) {
                return Err(Error::Shape(format!(
                    "gradient for {name:?} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    buf.shape()
                )));
            }
            buf.add_assign(g);
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.params
            .iter()
            .map(|(n, p)| (n.as_str(), &p.value, &p.grad))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &Tensor)> {
        self.params
            .iter_mut()
            .map(|(n, p)| (n.as_str(), &mut p.value, &p.grad))
    }

    /// Bytes of the checkpoint file for this store.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for (name, p) in &self.params {
            put_string(&mut out, name);
            let shape = p.value.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(12)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a parameter checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = r.u64()? as usize;
        let mut store = ParamStore::new(r.u64()?);
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("non-finite value in {name:?}")));
            }
            store.insert(&name, Tensor::new(shape, data)?)?;
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(store)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, store.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ParamStore::from_checkpoint_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_bounds_and_determinism() {
        let mut a = ParamStore::new(42);
        a.insert_glorot("w", 30, 20).unwrap();
        let bound = (6.0f64 / 50.0).sqrt();
        assert!(a.get("w").unwrap().data().iter().all(|v| v.abs() <= bound));
        let mut b = ParamStore::new(42);
        b.insert_zeros("first", &[3]).unwrap();
        b.insert_glorot("w", 30, 20).unwrap();
        assert_eq!(a.get("w").unwrap(), b.get("w").unwrap());
        assert!(a.insert_zeros("w", &[1]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_stable() {
        let mut s = ParamStore::new(7);
        s.insert_glorot("b.w", 4, 3).unwrap();
        s.insert_zeros("a.bias", &[1, 3]).unwrap();
        let bytes = s.to_checkpoint_bytes();
        assert_eq!(&bytes[..12], CHECKPOINT_MAGIC);
        let back = ParamStore::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_checkpoint_bytes(), bytes);
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["a.bias", "b.w"]);

        assert!(ParamStore::from_checkpoint_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParamStore::from_checkpoint_bytes(&bad).is_err());
    }

    #[test]
    fn accumulate_checks_shapes() {
        let mut s = ParamStore::new(1);
        s.insert_zeros("w", &[2, 2]).unwrap();
        let mut g = Gradients::new();
        g.insert("w".into(), Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        s.accumulate(&g).unwrap();
        s.accumulate(&g).unwrap();
        assert_eq!(s.grad("w").unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
        s.zero_grad();
        assert!(s.grad("w").unwrap().data().iter().all(|&v| v == 0.0));
        g.insert("w".into(), Tensor::zeros(&[4]));
        assert!(s.accumulate(&g).is_err());
    }
}
