//! Named parameter tensors, seeded initialization, checksums and the
//! checkpoint container.
//!
//! Initialization is derived from `(seed, parameter name)` alone, so a model
//! that instantiates any subset of parameter tensors draws identical values
//! for the shared ones. That is what makes an `alpha = 1` joint run
//! reproduce a single-task trajectory bitwise.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Real, Tape, TensorData, Var};
use crate::error::{Error, Result};
use crate::seeding::rng_for;

/// Ordered map of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<F: Real> {
    tensors: BTreeMap<String, TensorData<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: TensorData<F>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> &TensorData<F> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&TensorData<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut TensorData<F> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorData<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut TensorData<F>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Uniform init scaled by fan-in: U(-1/sqrt(fan), 1/sqrt(fan)), rng
    /// derived from (seed, name).
    pub fn init_uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, seed: u64) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = rng_for(seed, &format!("init:{name}"), 0);
        let n: usize = shape.iter().product();
        let data: Vec<F> =
            (0..n).map(|_| F::from_f64(rng.gen_range(-bound..bound))).collect();
        self.insert(name, TensorData::new(shape, data));
    }

    pub fn init_zeros(&mut self, name: &str, shape: Vec<usize>) {
        self.insert(name, TensorData::zeros(shape));
    }

    /// Orthogonal-style init: Gram-Schmidt over seeded Gaussian rows (or
    /// columns when cols < rows), scaled by `gain`.
    pub fn init_orthogonal(&mut self, name: &str, rows: usize, cols: usize, gain: f64, seed: u64) {
        let mut rng = rng_for(seed, &format!("init:{name}"), 0);
        let mut gauss = || {
            // Box-Muller
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let mut m: Vec<f64> = (0..rows * cols).map(|_| gauss()).collect();
        // Orthonormalize along the shorter axis.
        if rows <= cols {
            gram_schmidt_rows(&mut m, rows, cols);
        } else {
            let mut t = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    t[c * rows + r] = m[r * cols + c];
                }
            }
            gram_schmidt_rows(&mut t, cols, rows);
            for r in 0..rows {
                for c in 0..cols {
                    m[r * cols + c] = t[c * rows + r];
                }
            }
        }
        let data: Vec<F> = m.into_iter().map(|x| F::from_f64(gain * x)).collect();
        self.insert(name, TensorData::new(vec![rows, cols], data));
    }

    /// SHA-256 over names, shapes and exact value bits; used for the
    /// freeze/finetune contract.
    pub fn checksum_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            if !name.starts_with(prefix) {
                continue;
            }
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn checksum(&self) -> String {
        self.checksum_prefix("")
    }

    pub fn to_f32_map(&self) -> BTreeMap<String, TensorData<f32>> {
        self.tensors
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    TensorData::new(
                        t.shape().to_vec(),
                        t.data().iter().map(|&v| v.as_f32()).collect(),
                    ),
                )
            })
            .collect()
    }

    pub fn from_f32_map(map: &BTreeMap<String, TensorData<f32>>) -> Self {
        let tensors = map
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    TensorData::new(
                        t.shape().to_vec(),
                        t.data().iter().map(|&v| F::from_f32(v)).collect(),
                    ),
                )
            })
            .collect();
        Self { tensors }
    }
}

fn gram_schmidt_rows(m: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        for p in 0..r {
            let proj: f64 = (0..cols).map(|c| m[r * cols + c] * m[p * cols + c]).sum();
            for c in 0..cols {
                m[r * cols + c] -= proj * m[p * cols + c];
            }
        }
        let norm: f64 = (0..cols).map(|c| m[r * cols + c].powi(2)).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for c in 0..cols {
                m[r * cols + c] /= norm;
            }
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 hex of a config's canonical JSON; stamped into run outputs.
pub fn config_hash<T: serde::Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).unwrap_or_default();
    hex(&Sha256::digest(json.as_bytes()))
}

/// Parameter names bound onto a tape as leaves/constants.
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Loads every parameter onto the tape; `trainable(name)` decides between a
/// gradient-carrying leaf and a constant.
pub fn bind<F: Real>(
    tape: &mut Tape<F>,
    params: &ParamSet<F>,
    trainable: impl Fn(&str) -> bool,
) -> Binding {
    let mut vars = BTreeMap::new();
    for (name, tensor) in params.iter() {
        let var = if trainable(name) {
            tape.leaf(tensor.clone())
        } else {
            tape.constant(tensor.clone())
        };
        vars.insert(name.clone(), var);
    }
    Binding { vars }
}

/// Pulls gradients for every trainable bound parameter, zero-filled where a
/// parameter did not influence the loss.
pub fn collect_grads<F: Real>(
    grads: &mut crate::autograd::Grads<F>,
    binding: &Binding,
    params: &ParamSet<F>,
    trainable: impl Fn(&str) -> bool,
) -> BTreeMap<String, TensorData<F>> {
    let mut out = BTreeMap::new();
    for (name, var) in binding.iter() {
        if !trainable(name) {
            continue;
        }
        let shape = params.get(name).shape().to_vec();
        out.insert(name.clone(), grads.take(*var, &shape));
    }
    out
}

// --- checkpoint container ---------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"TSCK";
const CKPT_VERSION: u32 = 1;

/// Writes a versioned binary container of named f32 tensors with a JSON
/// metadata block and a trailing SHA-256 manifest hash.
pub fn save_checkpoint(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &BTreeMap<String, TensorData<f32>>,
) -> Result<()> {
    let mut body: Vec<u8> = Vec::new();
    body.extend_from_slice(CKPT_MAGIC);
    body.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let meta_bytes = serde_json::to_vec(meta)?;
    body.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    body.extend_from_slice(&meta_bytes);
    body.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("tensor name too long: {name}")));
        }
        body.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        body.extend_from_slice(nb);
        body.push(t.shape().len() as u8);
        for &d in t.shape() {
            body.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&body);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&body)?;
    w.write_all(&digest)?;
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint container, verifying magic, version and manifest hash.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(serde_json::Value, BTreeMap<String, TensorData<f32>>)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 44 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let expect = Sha256::digest(body);
    if digest != expect.as_slice() {
        return Err(Error::Checkpoint("manifest hash mismatch (corrupt file)".into()));
    }
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(Error::Checkpoint("truncated container".into()));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic (want TSCK)".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let meta: serde_json::Value = serde_json::from_slice(take(&mut pos, meta_len)?)?;
    let n_tensors = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n_tensors {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 tensor name".into()))?;
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, n * 4)?;
        let data: Vec<f32> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.insert(name, TensorData::new(shape, data));
    }
    Ok((meta, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_name_init_is_subset_stable() {
        let mut a = ParamSet::<f32>::new();
        a.init_uniform("enc.w", vec![4, 4], 4, 7);
        a.init_uniform("head_a.w", vec![2, 2], 2, 7);
        let mut b = ParamSet::<f32>::new();
        b.init_uniform("head_b.w", vec![3, 3], 3, 7);
        b.init_uniform("enc.w", vec![4, 4], 4, 7);
        assert_eq!(a.get("enc.w"), b.get("enc.w"));
    }

    #[test]
    fn checksum_changes_with_values() {
        let mut p = ParamSet::<f64>::new();
        p.init_uniform("upstream.w", vec![3, 3], 3, 1);
        p.init_uniform("head.w", vec![2], 2, 1);
        let before = p.checksum_prefix("upstream.");
        p.get_mut("head.w").data_mut()[0] += 1.0;
        assert_eq!(p.checksum_prefix("upstream."), before);
        p.get_mut("upstream.w").data_mut()[0] += 1.0;
        assert_ne!(p.checksum_prefix("upstream."), before);
    }

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut p = ParamSet::<f64>::new();
        p.init_orthogonal("w", 4, 8, 1.0, 3);
        let t = p.get("w");
        for r in 0..4 {
            for s in 0..4 {
                let d: f64 = (0..8).map(|c| t.data()[r * 8 + c] * t.data()[s * 8 + c]).sum();
                let want = if r == s { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-9, "({r},{s}) -> {d}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption_detection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut p = ParamSet::<f32>::new();
        p.init_uniform("enc.w", vec![3, 5], 5, 9);
        p.init_zeros("enc.b", vec![5]);
        let meta = serde_json::json!({"task": "tse", "step": 12});
        save_checkpoint(&path, &meta, &p.to_f32_map()).unwrap();
        let (meta2, tensors) = load_checkpoint(&path).unwrap();
        assert_eq!(meta2["task"], "tse");
        let q = ParamSet::<f32>::from_f32_map(&tensors);
        assert_eq!(q.get("enc.w"), p.get("enc.w"));
        assert_eq!(q.get("enc.b"), p.get("enc.b"));
        // bit-exact reload
        assert_eq!(q.checksum(), p.checksum());

        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
