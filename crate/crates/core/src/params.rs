//! Named parameter store with gradient slots, plus the checkpoint archive.
//!
//! Entries iterate in name order, so optimizer sweeps and serialization are
//! deterministic. Frozen entries (the detector stub after stage 1) enter
//! forward passes as constants and never receive gradients.

use crate::error::{CoreError, Result};
use crate::tape::{NodeId, Tape, Value};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub value: Value,
    pub grad: Value,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn insert(&mut self, name: &str, value: Value) {
        assert!(!self.entries.contains_key(name), "duplicate parameter name {name}");
        let grad = ArrayD::zeros(value.raw_dim());
        self.entries.insert(name.to_string(), ParamEntry { value, grad, frozen: false });
    }

    /// Uniform fan-in init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound));
        self.insert(name, value);
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, ArrayD::zeros(IxDyn(shape)));
    }

    pub fn get(&self, name: &str) -> &ParamEntry {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ParamEntry {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn set_value(&mut self, name: &str, value: Value) {
        let e = self.get_mut(name);
        assert_eq!(e.value.shape(), value.shape(), "shape mismatch for {name}");
        e.value = value;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    /// Freeze every entry whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                e.frozen = true;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(0.0);
        }
    }

    /// Bind a parameter onto a tape. Frozen entries become constants so no
    /// gradient is ever recorded for them.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> NodeId {
        let e = self.get(name);
        if e.frozen {
            tape.constant(e.value.clone())
        } else {
            tape.bind_param(name, e.value.clone())
        }
    }

    /// Route gradients from a finished backward pass into the store.
    pub fn accumulate(&mut self, tape: &Tape, grads: &crate::tape::Gradients) {
        for (name, id) in tape.param_bindings() {
            if let Some(g) = grads.get(*id) {
                let e = self.get_mut(name);
                e.grad += g;
            }
        }
    }

    pub fn global_grad_norm(&self) -> f64 {
        let mut acc = 0.0;
        for e in self.entries.values() {
            for g in e.grad.iter() {
                acc += g * g;
            }
        }
        acc.sqrt()
    }
}

const ARCHIVE_MAGIC: &[u8; 8] = b"RFARCH01";

/// FNV-1a over the canonical config string; stable across platforms.
pub fn fingerprint(config_text: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in config_text.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Write a named-array archive: shapes plus little-endian f32 payloads and a
/// config fingerprint.
pub fn save_archive(path: &Path, store: &ParamStore, config_fingerprint: u64) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(ARCHIVE_MAGIC);
    buf.extend_from_slice(&config_fingerprint.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, e) in store.iter() {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(e.frozen as u8);
        buf.push(e.value.ndim() as u8);
        for d in e.value.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in e.value.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read an archive back. When `expect_fingerprint` is set, a mismatch is a
/// checkpoint error.
pub fn load_archive(path: &Path, expect_fingerprint: Option<u64>) -> Result<(ParamStore, u64)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = 0usize;
    fn take<'a>(bytes: &'a [u8], cur: &mut usize, n: usize) -> Result<&'a [u8]> {
        if *cur + n > bytes.len() {
            return Err(CoreError::Format("archive truncated".into()));
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Ok(s)
    }
    if take(&bytes, &mut cur, 8)? != ARCHIVE_MAGIC {
        return Err(CoreError::Format("bad archive magic".into()));
    }
    let fp = u64::from_le_bytes(take(&bytes, &mut cur, 8)?.try_into().unwrap());
    if let Some(expect) = expect_fingerprint {
        if expect != fp {
            return Err(CoreError::Checkpoint(format!(
                "config fingerprint mismatch: archive {fp:016x}, expected {expect:016x}"
            )));
        }
    }
    let count = u32::from_le_bytes(take(&bytes, &mut cur, 4)?.try_into().unwrap()) as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len =
            u16::from_le_bytes(take(&bytes, &mut cur, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&bytes, &mut cur, name_len)?)
            .map_err(|_| CoreError::Format("archive entry name is not utf-8".into()))?
            .to_string();
        let frozen = take(&bytes, &mut cur, 1)?[0] != 0;
        let ndim = take(&bytes, &mut cur, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&bytes, &mut cur, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = f32::from_le_bytes(take(&bytes, &mut cur, 4)?.try_into().unwrap());
            data.push(v as f64);
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|_| CoreError::Format("archive entry shape mismatch".into()))?;
        store.insert(&name, value);
        store.get_mut(&name).frozen = frozen;
    }
    if cur != bytes.len() {
        return Err(CoreError::Format("trailing bytes after archive payload".into()));
    }
    Ok((store, fp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn store_roundtrip_and_fingerprint_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.insert_uniform("a.w", &[3, 4], 3, &mut rng);
        store.insert_zeros("a.b", &[4]);
        store.insert_uniform("od.k", &[2, 2], 4, &mut rng);
        store.freeze_prefix("od.");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        save_archive(&path, &store, 42).unwrap();
        let (loaded, fp) = load_archive(&path, Some(42)).unwrap();
        assert_eq!(fp, 42);
        assert_eq!(loaded.len(), 3);
        assert!(loaded.get("od.k").frozen);
        assert!(!loaded.get("a.w").frozen);
        // values round-trip at f32 precision
        for (name, e) in store.iter() {
            let l = loaded.get(name);
            for (a, b) in e.value.iter().zip(l.value.iter()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
        assert!(load_archive(&path, Some(43)).is_err());
    }

    #[test]
    fn corrupted_archive_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        let mut store = ParamStore::new();
        store.insert_zeros("x", &[2]);
        save_archive(&path, &store, 7).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_archive(&path, None), Err(CoreError::Format(_))));
    }

    #[test]
    fn frozen_params_receive_no_gradients() {
        let mut store = ParamStore::new();
        store.insert(
            "w",
            ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn(),
        );
        store.insert("od.w", ndarray::arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn());
        store.freeze_prefix("od.");

        let mut tape = Tape::new();
        let a = store.bind(&mut tape, "w");
        let b = store.bind(&mut tape, "od.w");
        let y = tape.mul(a, b);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        store.accumulate(&tape, &grads);
        assert!(store.get("w").grad.iter().any(|g| *g != 0.0));
        assert!(store.get("od.w").grad.iter().all(|g| *g == 0.0));
    }
}
