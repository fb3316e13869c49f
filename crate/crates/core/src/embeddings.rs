//! Event embedding providers: a deterministic hash-seeded embedder and a
//! binary store of precomputed unit vectors.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::events::Trajectory;

pub const MAGIC: &[u8; 8] = b"MATAEMB1";

/// Rows whose norm deviates by at least this much are rejected on load.
pub const NORM_REJECT: f64 = 1e-3;
/// Deviations above this (and below [`NORM_REJECT`]) are repaired with a warning.
const NORM_WARN: f64 = 1e-6;

fn seed_for(text: &str, seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(text.as_bytes());
    h.finalize().into()
}

/// Deterministic unit vector for `text`: standard normals drawn from a
/// stream seeded by a hash of `(seed, text)`, then L2-normalised.
pub fn embed_synthetic(text: &str, dim: usize, seed: u64) -> Result<Vec<f64>> {
    ensure!(dim >= 2, InvalidArgument, "embedding dim must be at least 2, got {dim}");
    let mut rng = ChaCha8Rng::from_seed(seed_for(text, seed));
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    Ok(v)
}

pub(crate) fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Unit vectors keyed by event key.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingStore {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
    repaired: Vec<String>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self { dim, vectors: BTreeMap::new(), repaired: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.vectors.get(key).map(Vec::as_slice)
    }

    /// Keys whose vectors were re-normalised while loading.
    pub fn repaired(&self) -> &[String] {
        &self.repaired
    }

    pub fn insert(&mut self, key: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        ensure!(vector.len() == self.dim, Data, "vector of length {} in a store of dim {}", vector.len(), self.dim);
        let n = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        ensure!((n - 1.0).abs() <= 1e-6, Data, "vector norm {n} is not unit");
        self.vectors.insert(key.into(), vector);
        Ok(())
    }

    /// Attaches vectors to every event of `traj`.
    pub fn attach(&self, traj: &mut Trajectory) -> Result<()> {
        let vectors = (0..traj.len())
            .map(|i| {
                let key = traj.event_key(i);
                self.get(&key).map(<[f64]>::to_vec).ok_or_else(|| Error::Data(format!("no embedding for event {key}")))
            })
            .collect::<Result<Vec<_>>>()?;
        traj.set_embeddings(vectors)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(self.dim as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.vectors.len() as u64).to_le_bytes()).map_err(io)?;
        for (key, v) in &self.vectors {
            w.write_all(&(key.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(key.as_bytes()).map_err(io)?;
            for &x in v {
                w.write_all(&(x as f32).to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Data(format!("{}: truncated while reading {what}", path.display()))
        } else {
            Error::io(path, e)
        }
    })
}

/// Loads a binary embedding file, repairing rows whose norm is off by less
/// than [`NORM_REJECT`].
pub fn load_precomputed(path: &Path) -> Result<EmbeddingStore> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path, "magic")?;
    ensure!(&magic == MAGIC, Data, "{}: bad magic {:?}", path.display(), magic);
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    read_exact(&mut r, &mut b4, path, "dim")?;
    let dim = u32::from_le_bytes(b4) as usize;
    read_exact(&mut r, &mut b8, path, "count")?;
    let count = u64::from_le_bytes(b8);
    let mut store = EmbeddingStore::new(dim);
    let mut row = vec![0u8; dim * 4];
    for i in 0..count {
        read_exact(&mut r, &mut b4, path, "key length")?;
        let mut key = vec![0u8; u32::from_le_bytes(b4) as usize];
        read_exact(&mut r, &mut key, path, "key")?;
        let key =
            String::from_utf8(key).map_err(|_| Error::Data(format!("{}: row {i} key is not UTF-8", path.display())))?;
        read_exact(&mut r, &mut row, path, "vector")?;
        let mut v: Vec<f64> =
            row.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let dev = (n - 1.0).abs();
        ensure!(dev < NORM_REJECT, Data, "{}: row {key} has norm {n}, beyond repair tolerance", path.display());
        normalize(&mut v);
        if dev > NORM_WARN {
            log::warn!("re-normalised embedding {key} (norm {n})");
            store.repaired.push(key.clone());
        }
        store.vectors.insert(key, v);
    }
    Ok(store)
}
