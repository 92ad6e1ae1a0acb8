//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian `u32`, values little-endian `f32`):
//!
//! ```text
//! magic  b"TMCK"
//! version 1
//! count
//! repeated `count` times:
//!     name_len, name (utf-8), rows, cols, rows*cols values (row-major)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::Mat;

const MAGIC: &[u8; 4] = b"TMCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.params.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.params.insert(name.into(), value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|m| m.len()).sum()
    }

    /// Glorot-uniform weight of shape `(fan_in, fan_out)`.
    pub fn init_weight<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Mat::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-limit..limit));
        self.insert(name, w);
    }

    pub fn init_normal<R: Rng>(&mut self, name: &str, shape: (usize, usize), std: f64, rng: &mut R) {
        let normal = Normal::new(0.0, std).expect("std must be positive");
        let w = Mat::from_shape_fn(shape, |_| normal.sample(rng));
        self.insert(name, w);
    }

    pub fn init_zeros(&mut self, name: &str, shape: (usize, usize)) {
        self.insert(name, Mat::zeros(shape));
    }

    pub fn init_ones(&mut self, name: &str, shape: (usize, usize)) {
        self.insert(name, Mat::ones(shape));
    }

    /// Copies every parameter of `other` whose name passes `keep` and whose shape
    /// matches the local one. Returns the names that were copied.
    pub fn load_matching(&mut self, other: &ParamStore, keep: impl Fn(&str) -> bool) -> Result<Vec<String>> {
        let mut copied = Vec::new();
        for (name, value) in other.iter() {
            if !keep(name) {
                continue;
            }
            match self.params.get_mut(name) {
                Some(local) if local.dim() == value.dim() => {
                    local.assign(value);
                    copied.push(name.clone());
                }
                Some(local) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?} in checkpoint but {:?} in model",
                        value.dim(),
                        local.dim()
                    )))
                }
                None => {}
            }
        }
        Ok(copied)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, value) in &self.params {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            let (r, c) = value.dim();
            w.write_all(&(r as u32).to_le_bytes())?;
            w.write_all(&(c as u32).to_le_bytes())?;
            for v in value.iter() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut buf = vec![0u8; rows * cols * 4];
            r.read_exact(&mut buf)?;
            let data: Vec<f64> = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let m = Mat::from_shape_vec((rows, cols), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            params.insert(name, m);
        }
        Ok(Self { params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_roundtrip_is_f32_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.init_weight("enc.w", 4, 3, &mut rng);
        store.init_zeros("enc.b", (1, 3));
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();
        let back = ParamStore::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        for (name, v) in store.iter() {
            let w = back.get(name).unwrap();
            for (a, b) in v.iter().zip(w.iter()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(ParamStore::read_from(&b"NOPE\x01\x00\x00\x00"[..]).is_err());
    }

    #[test]
    fn load_matching_filters_and_checks_shapes() {
        let mut a = ParamStore::new();
        a.init_ones("cls.w", (2, 2));
        a.init_ones("enc.w", (2, 2));
        let mut b = ParamStore::new();
        b.init_zeros("cls.w", (2, 2));
        b.init_zeros("enc.w", (2, 2));
        let copied = b.load_matching(&a, |n| !n.starts_with("cls.")).unwrap();
        assert_eq!(copied, vec!["enc.w".to_string()]);
        assert_eq!(b.get("enc.w").unwrap()[[0, 0]], 1.0);
        assert_eq!(b.get("cls.w").unwrap()[[0, 0]], 0.0);

        let mut c = ParamStore::new();
        c.init_zeros("enc.w", (3, 2));
        assert!(c.load_matching(&a, |_| true).is_err());
    }
}
