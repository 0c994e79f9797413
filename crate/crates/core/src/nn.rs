//! Parameter store, optimizer, and the flat-map checkpoint format shared by
//! the backbone and the action expert.

use crate::tensor::{Grads, Mat};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("unknown parameter: {0}")]
    UnknownParam(String),
    #[error("non-finite loss at step {0}")]
    Diverged(usize),
}

/// Named f64 matrices with deterministic (sorted) iteration order.
#[derive(Clone, Debug, Default)]
pub struct Params {
    map: BTreeMap<String, Mat>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Mat) {
        self.map.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &Mat {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Mat> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.map.retain(|k, _| !k.starts_with(prefix));
    }

    /// Zero-mean uniform init scaled by fan-in, the default for projections.
    pub fn init_linear(&mut self, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let w = Mat::from_shape_fn((d_in, d_out), |_| rng.gen_range(-bound..bound));
        self.insert(&format!("{name}.w"), w);
        self.insert(&format!("{name}.b"), Mat::zeros((1, d_out)));
    }

    pub fn init_zeros(&mut self, name: &str, r: usize, c: usize) {
        self.insert(name, Mat::zeros((r, c)));
    }

    pub fn init_normal(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: &str,
        r: usize,
        c: usize,
        std: f64,
    ) {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, std).unwrap();
        let w = Mat::from_shape_fn((r, c), |_| dist.sample(rng));
        self.insert(name, w);
    }

    pub fn init_layer_norm(&mut self, name: &str, d: usize) {
        self.insert(&format!("{name}.g"), Mat::ones((1, d)));
        self.insert(&format!("{name}.b"), Mat::zeros((1, d)));
    }

    /// SHA-256 of a parameter's little-endian bytes.
    pub fn hash_param(&self, name: &str) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for v in self.get(name).iter() {
            hasher.update(v.to_le_bytes());
        }
        hasher.finalize().into()
    }

    /// Per-parameter content hashes, used by the freezing audits.
    pub fn hash_all(&self) -> BTreeMap<String, [u8; 32]> {
        self.map
            .keys()
            .map(|k| (k.clone(), self.hash_param(k)))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut body: Vec<u8> = Vec::new();
        body.extend_from_slice(&(self.map.len() as u64).to_le_bytes());
        for (name, value) in &self.map {
            let nb = name.as_bytes();
            body.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            body.extend_from_slice(nb);
            // dtype tag: 0 = f64 little-endian
            body.push(0u8);
            body.extend_from_slice(&(value.nrows() as u64).to_le_bytes());
            body.extend_from_slice(&(value.ncols() as u64).to_le_bytes());
            for v in value.iter() {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        let checksum: [u8; 32] = Sha256::digest(&body).into();
        let mut f = std::fs::File::create(path)?;
        f.write_all(CKPT_MAGIC)?;
        f.write_all(&CKPT_VERSION.to_le_bytes())?;
        f.write_all(&checksum)?;
        f.write_all(&body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let mut f = std::fs::File::open(path)?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)?;
        if buf.len() < CKPT_MAGIC.len() + 4 + 32 || &buf[..CKPT_MAGIC.len()] != CKPT_MAGIC {
            return Err(NnError::BadCheckpoint("bad magic".into()));
        }
        let mut off = CKPT_MAGIC.len();
        let version = u32::from_le_bytes(buf[off..off + 4].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(NnError::BadCheckpoint(format!(
                "unsupported version {version}"
            )));
        }
        off += 4;
        let stored: [u8; 32] = buf[off..off + 32].try_into().unwrap();
        off += 32;
        let body = &buf[off..];
        let actual: [u8; 32] = Sha256::digest(body).into();
        if stored != actual {
            return Err(NnError::BadCheckpoint("checksum mismatch".into()));
        }
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], NnError> {
            if *pos + n > body.len() {
                return Err(NnError::BadCheckpoint("truncated body".into()));
            }
            let s = &body[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let nlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, nlen)?.to_vec())
                .map_err(|_| NnError::BadCheckpoint("bad name".into()))?;
            let dtype = take(&mut pos, 1)?[0];
            if dtype != 0 {
                return Err(NnError::BadCheckpoint(format!("unknown dtype {dtype}")));
            }
            let rows = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let cols = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let raw = take(&mut pos, rows * cols * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let m = Mat::from_shape_vec((rows, cols), data)
                .map_err(|e| NnError::BadCheckpoint(e.to_string()))?;
            map.insert(name, m);
        }
        Ok(Self { map })
    }
}

const CKPT_MAGIC: &[u8] = b"MVLACKPT";
const CKPT_VERSION: u32 = 1;

/// Decoupled-weight-decay Adam with global-norm gradient clipping and a
/// constant learning rate.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    step: usize,
    m: HashMap<String, Mat>,
    v: HashMap<String, Mat>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Applies one update over `trainable` only; other gradients are dropped.
    pub fn apply<F>(&mut self, params: &mut Params, grads: &Grads, trainable: F)
    where
        F: Fn(&str) -> bool,
    {
        self.step += 1;
        let mut names: Vec<&String> = grads
            .by_name
            .keys()
            .filter(|n| trainable(n) && params.contains(n))
            .collect();
        names.sort();
        let total_sq: f64 = names
            .iter()
            .map(|n| grads.by_name[*n].iter().map(|v| v * v).sum::<f64>())
            .sum();
        let norm = total_sq.sqrt();
        let clip = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for name in names {
            let g = &grads.by_name[name] * clip;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.raw_dim()));
            *m = &*m * self.beta1 + &g * (1.0 - self.beta1);
            *v = &*v * self.beta2 + &g.mapv(|x| x * x) * (1.0 - self.beta2);
            let p = params.get_mut(name);
            if self.weight_decay > 0.0 {
                *p *= 1.0 - self.lr * self.weight_decay;
            }
            for ((pv, mv), vv) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Deterministic per-stream RNG derivation (splitmix-style mixing).
pub fn derive_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut z = master_seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}
