//! Named parameter store with gradient accumulators and binary checkpoints.
//!
//! Parameter values live on the float32 grid (every write rounds through
//! `f32`) while all computation runs in `f64`. That makes checkpoint
//! round-trips exact: the on-disk payload is float32 and loading loses
//! nothing.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"CAMELCKPT1";

fn snap32(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Debug, Clone)]
struct Entry {
    value: Tensor,
    grad: Tensor,
}

/// Map from hierarchical dot-separated names to tensors, each with a
/// same-shaped gradient accumulator. Iteration order is lexicographic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

/// Checkpoint header fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub config_hash: u64,
    pub epoch: u32,
    pub dev_loss: f64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert (or replace) a parameter; values are rounded to the f32 grid.
    pub fn insert(&mut self, name: &str, mut value: Tensor) {
        for v in value.data_mut() {
            *v = snap32(*v);
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.insert(name.to_string(), Entry { value, grad });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Overwrite one element; used by the finite-difference harness.
    pub fn set_element(&mut self, name: &str, index: usize, v: f64) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        entry.value.data_mut()[index] = snap32(v);
        Ok(())
    }

    /// Names in lexicographic order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// `grad[name] += scale * delta`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor, scale: f64) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if entry.grad.shape() != delta.shape() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: entry.grad.shape().to_vec(),
                rhs: delta.shape().to_vec(),
            });
        }
        for (g, d) in entry.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += scale * d;
        }
        Ok(())
    }

    /// Apply `f(value, grad)` elementwise to one parameter, rounding the new
    /// value to the f32 grid. Single-writer update path for optimizers.
    pub fn update_param(&mut self, name: &str, mut f: impl FnMut(f64, f64) -> f64) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let grads: Vec<f64> = entry.grad.data().to_vec();
        for (v, g) in entry.value.data_mut().iter_mut().zip(grads) {
            *v = snap32(f(*v, g));
        }
        Ok(())
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    /// Serialize to the binary checkpoint format: magic, metadata, then
    /// per-tensor records in lexicographic name order with float32 payloads.
    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&meta.config_hash.to_le_bytes());
        buf.extend_from_slice(&meta.epoch.to_le_bytes());
        buf.extend_from_slice(&meta.dev_loss.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            let shape = entry.value.shape();
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in entry.value.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = ByteReader::new(&bytes, path);
        let magic = r.take(CHECKPOINT_MAGIC.len(), "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.format_err_at(0, "bad magic, not a checkpoint file"));
        }
        let config_hash = u64::from_le_bytes(r.take(8, "config hash")?.try_into().unwrap());
        let epoch = u32::from_le_bytes(r.take(4, "epoch")?.try_into().unwrap());
        let dev_loss = f64::from_le_bytes(r.take(8, "dev loss")?.try_into().unwrap());
        let n_tensors = u32::from_le_bytes(r.take(4, "tensor count")?.try_into().unwrap());
        let mut store = ParamStore::new();
        let mut prev_name: Option<String> = None;
        for _ in 0..n_tensors {
            let name_len = u32::from_le_bytes(r.take(4, "name length")?.try_into().unwrap());
            let name_bytes = r.take(name_len as usize, "name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| r.format_err("name is not UTF-8"))?
                .to_string();
            if let Some(prev) = &prev_name {
                if *prev >= name {
                    return Err(r.format_err("tensor names not strictly lexicographic"));
                }
            }
            let rank = u32::from_le_bytes(r.take(4, "rank")?.try_into().unwrap());
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(r.take(4, "dim")?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * 4, "tensor payload")?;
            let data: Vec<f64> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            let value = Tensor::new(shape, data).map_err(|e| r.format_err(&e.to_string()))?;
            store.insert(&name, value);
            prev_name = Some(name);
        }
        if !r.at_end() {
            return Err(r.format_err("trailing bytes after last tensor"));
        }
        Ok((
            store,
            CheckpointMeta {
                config_hash,
                epoch,
                dev_loss,
            },
        ))
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8], path: &Path) -> Self {
        Self {
            bytes,
            pos: 0,
            path: path.display().to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.clone(),
                offset: self.pos as u64,
                detail: format!(
                    "truncated reading {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn format_err(&self, detail: &str) -> Error {
        self.format_err_at(self.pos as u64, detail)
    }

    fn format_err_at(&self, offset: u64, detail: &str) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset,
            detail: detail.to_string(),
        }
    }
}

/// FNV-1a over arbitrary bytes; used for config hashes in checkpoint headers.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seeded parameter initializers. Each parameter draws from its own RNG
/// derived from (seed, name), so init is independent of creation order.
pub struct ParamInit {
    seed: u64,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn rng(&self, name: &str) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()))
    }

    /// Uniform in +-sqrt(1/fan_in), the default for projection matrices.
    pub fn matrix(&self, store: &mut ParamStore, name: &str, rows: usize, cols: usize) {
        let bound = (1.0 / rows as f64).sqrt();
        let mut rng = self.rng(name);
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        store.insert(name, Tensor::new(vec![rows, cols], data).unwrap());
    }

    /// Matrix with an explicit fan-in (convolution kernels flattened to 2-D).
    pub fn matrix_with_fan_in(
        &self,
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
    ) {
        let bound = (1.0 / fan_in as f64).sqrt();
        let mut rng = self.rng(name);
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        store.insert(name, Tensor::new(vec![rows, cols], data).unwrap());
    }

    pub fn zeros(&self, store: &mut ParamStore, name: &str, shape: Vec<usize>) {
        store.insert(name, Tensor::zeros(shape));
    }

    pub fn ones(&self, store: &mut ParamStore, name: &str, len: usize) {
        store.insert(name, Tensor::new(vec![len], vec![1.0; len]).unwrap());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("b.mat", Tensor::from_rows(&[vec![1.5, -2.25], vec![0.0, 4.0]]).unwrap());
        s.insert("a.vec", Tensor::new(vec![3], vec![0.25, -0.5, 1.0]).unwrap());
        s
    }

    #[test]
    fn names_iterate_lexicographically() {
        let s = sample_store();
        let names: Vec<&str> = s.names().collect();
        assert_eq!(names, vec!["a.vec", "b.mat"]);
    }

    #[test]
    fn checkpoint_roundtrip_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let store = sample_store();
        let meta = CheckpointMeta {
            config_hash: 0xDEADBEEF,
            epoch: 7,
            dev_loss: 0.125,
        };
        store.save(&path, &meta).unwrap();
        let (loaded, got_meta) = ParamStore::load(&path).unwrap();
        assert_eq!(got_meta, meta);
        for name in store.names() {
            assert_eq!(store.value(name).unwrap(), loaded.value(name).unwrap());
        }
        // Save of the loaded store is byte-identical.
        let path2 = dir.path().join("b.ckpt");
        loaded.save(&path2, &meta).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_checkpoint_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        sample_store()
            .save(&path, &CheckpointMeta { config_hash: 1, epoch: 1, dev_loss: 0.0 })
            .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match ParamStore::load(&path) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, b"NOTACKPT__everything else").unwrap();
        assert!(matches!(ParamStore::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn init_is_order_independent() {
        let init = ParamInit::new(42);
        let mut s1 = ParamStore::new();
        init.matrix(&mut s1, "x", 4, 4);
        init.matrix(&mut s1, "y", 4, 4);
        let mut s2 = ParamStore::new();
        init.matrix(&mut s2, "y", 4, 4);
        init.matrix(&mut s2, "x", 4, 4);
        assert_eq!(s1.value("x").unwrap(), s2.value("x").unwrap());
        assert_eq!(s1.value("y").unwrap(), s2.value("y").unwrap());
    }

    #[test]
    fn values_snap_to_f32_grid() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(0.1));
        assert_eq!(s.value("p").unwrap().data()[0], 0.1f32 as f64);
    }
}
