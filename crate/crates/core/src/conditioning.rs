//! Text-conditioning signals: per-token local embeddings, global embeddings
//! (supplied by a provider or pooled from the local ones), and the
//! classifier-free-guidance condition dropout.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{dot, softmax_masked};
use crate::error::{Error, Result};
use crate::formats::{self, EMB_MAGIC, FLAG_GLOBAL};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-token embedding matrix `[M, d_F]` with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalEmbeddings<T> {
    rows: Tensor<T>,
    mask: Vec<bool>,
}

impl<T: Scalar> LocalEmbeddings<T> {
    pub fn new(rows: Tensor<T>, mask: Vec<bool>) -> Result<Self> {
        let s = rows.shape();
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(Error::shape(format!("local embeddings must be [M>0, d>0], got {s:?}")));
        }
        if mask.len() != s[0] {
            return Err(Error::shape(format!("mask length {} for {} rows", mask.len(), s[0])));
        }
        if !rows.is_finite() {
            return Err(Error::NonFinite("local embeddings".into()));
        }
        Ok(LocalEmbeddings { rows, mask })
    }

    /// All rows valid.
    pub fn dense(rows: Tensor<T>) -> Result<Self> {
        let m = rows.shape().first().copied().unwrap_or(0);
        Self::new(rows, vec![true; m])
    }

    pub fn num_tokens(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn rows(&self) -> &Tensor<T> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.rows.data()[i * d..(i + 1) * d]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn num_valid(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalEmbedding<T> {
    values: Vec<T>,
}

impl<T: Scalar> GlobalEmbedding<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::shape("global embedding must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("global embedding".into()));
        }
        Ok(GlobalEmbedding { values })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Trainable self-attention pooling vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SapWeights<T> {
    pub w: Vec<T>,
}

impl<T: Scalar> SapWeights<T> {
    /// Zero weights: pooling starts exactly at the masked mean.
    pub fn zeros(dim: usize) -> Self {
        SapWeights {
            w: vec![T::zero(); dim],
        }
    }
}

/// Where the global half of a condition comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum GlobalCond<T> {
    /// Dropped: the model substitutes its learned null vector.
    Null,
    /// Supplied by an external provider.
    Given(GlobalEmbedding<T>),
    /// Pooled inside the model from the local embeddings.
    FromLocal,
}

/// A (possibly dropped) text condition. `local: None` is the null marker.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition<T> {
    pub global: GlobalCond<T>,
    pub local: Option<LocalEmbeddings<T>>,
}

impl<T: Scalar> Condition<T> {
    pub fn null() -> Self {
        Condition {
            global: GlobalCond::Null,
            local: None,
        }
    }

    pub fn is_null(&self) -> bool {
        self.local.is_none() && matches!(self.global, GlobalCond::Null)
    }
}

/// Masked mean of the valid rows.
pub fn mean_pool<T: Scalar>(f: &LocalEmbeddings<T>) -> Result<GlobalEmbedding<T>> {
    let n = f.num_valid();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let mut out = vec![T::zero(); f.dim()];
    for i in (0..f.num_tokens()).filter(|&i| f.mask[i]) {
        for (o, &x) in out.iter_mut().zip(f.row(i)) {
            *o = *o + x;
        }
    }
    let inv = T::one() / T::of_usize(n);
    GlobalEmbedding::new(out.into_iter().map(|v| v * inv).collect())
}

/// Softmax attention weights of the pooling, zero on masked rows.
pub fn sap_weights_of<T: Scalar>(f: &LocalEmbeddings<T>, w: &SapWeights<T>) -> Result<Vec<T>> {
    if w.w.len() != f.dim() {
        return Err(Error::shape(format!("SAP vector {} vs d_F {}", w.w.len(), f.dim())));
    }
    if f.num_valid() == 0 {
        return Err(Error::EmptyMask);
    }
    let mut p = vec![T::zero(); f.num_tokens()];
    softmax_masked((0..f.num_tokens()).map(|i| dot(f.row(i), &w.w)), &f.mask, &mut p);
    Ok(p)
}

/// `softmax(F·w)ᵀ F` over the valid rows.
pub fn self_attention_pool<T: Scalar>(f: &LocalEmbeddings<T>, w: &SapWeights<T>) -> Result<GlobalEmbedding<T>> {
    let p = sap_weights_of(f, w)?;
    let mut out = vec![T::zero(); f.dim()];
    for (i, &pi) in p.iter().enumerate().filter(|(i, _)| f.mask[*i]) {
        for (o, &x) in out.iter_mut().zip(f.row(i)) {
            *o = *o + pi * x;
        }
    }
    GlobalEmbedding::new(out)
}

/// Condition dropout for classifier-free guidance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutConfig {
    pub p: f64,
    /// Draw separately for the global and local halves.
    #[serde(default)]
    pub independent: bool,
}

/// Replaces the condition by its null markers with probability `p`.
///
/// Consumes one uniform draw per call (two when `independent`).
pub fn cfg_dropout<T: Scalar, R: Rng + ?Sized>(c: Condition<T>, cfg: DropoutConfig, rng: &mut R) -> Result<Condition<T>> {
    if !(0.0..=1.0).contains(&cfg.p) {
        return Err(Error::invalid(format!("dropout probability {} not in [0,1]", cfg.p)));
    }
    if cfg.independent {
        let drop_g = rng.random::<f64>() < cfg.p;
        let drop_l = rng.random::<f64>() < cfg.p;
        Ok(Condition {
            global: if drop_g { GlobalCond::Null } else { c.global },
            local: if drop_l { None } else { c.local },
        })
    } else if rng.random::<f64>() < cfg.p {
        Ok(Condition::null())
    } else {
        Ok(c)
    }
}

/// Splits a prompt into lowercase word tokens.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

fn token_vector<T: Scalar>(token: &str, dim: usize, seed: u64) -> Vec<T> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(token.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| T::of(x / norm)).collect()
}

/// Deterministic stand-in encoder: each token maps to a fixed pseudo-random
/// unit vector derived from `(token, seed)`.
pub fn hash_embed<T: Scalar, S: AsRef<str>>(tokens: &[S], dim: usize, seed: u64) -> Result<LocalEmbeddings<T>> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty prompt"));
    }
    if dim == 0 {
        return Err(Error::invalid("embedding dimension must be positive"));
    }
    let mut data = Vec::with_capacity(tokens.len() * dim);
    for t in tokens {
        data.extend(token_vector::<T>(t.as_ref(), dim, seed));
    }
    LocalEmbeddings::dense(Tensor::from_vec(&[tokens.len(), dim], data)?)
}

/// Source of embeddings for a prompt.
pub trait EmbeddingProvider<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn local_dim(&self) -> usize;
    /// `None` when the provider has no global encoder.
    fn global_dim(&self) -> Option<usize>;
    fn deterministic(&self) -> bool;
    fn local(&self, prompt: &str) -> Result<LocalEmbeddings<T>>;
    fn global(&self, prompt: &str) -> Result<Option<GlobalEmbedding<T>>>;
}

/// Hash-based provider. The global encoder is a separately seeded bag of
/// token vectors, normalized to unit length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashProvider {
    pub local_dim: usize,
    pub global_dim: Option<usize>,
    pub seed: u64,
}

const GLOBAL_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

impl<T: Scalar> EmbeddingProvider<T> for HashProvider {
    fn name(&self) -> &str {
        "hash"
    }

    fn local_dim(&self) -> usize {
        self.local_dim
    }

    fn global_dim(&self) -> Option<usize> {
        self.global_dim
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn local(&self, prompt: &str) -> Result<LocalEmbeddings<T>> {
        hash_embed(&tokenize(prompt), self.local_dim, self.seed)
    }

    fn global(&self, prompt: &str) -> Result<Option<GlobalEmbedding<T>>> {
        let Some(dim) = self.global_dim else {
            return Ok(None);
        };
        let tokens = tokenize(prompt);
        if tokens.is_empty() {
            return Err(Error::invalid("empty prompt"));
        }
        let mut acc = vec![0.0f64; dim];
        for t in &tokens {
            for (a, v) in acc.iter_mut().zip(token_vector::<f64>(t, dim, self.seed ^ GLOBAL_SALT)) {
                *a += v;
            }
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        GlobalEmbedding::new(acc.into_iter().map(|x| T::of(x / norm)).collect()).map(Some)
    }
}

/// Embeddings read from interchange files: `<dir>/<key>.local.emb` and,
/// optionally, `<dir>/<key>.global.emb`, where `key` is the prompt's tokens
/// joined by `_`.
#[derive(Clone, Debug)]
pub struct FileProvider {
    pub dir: PathBuf,
    pub local_dim: usize,
    pub global_dim: Option<usize>,
}

impl FileProvider {
    pub fn key(prompt: &str) -> String {
        tokenize(prompt).join("_")
    }

    pub fn local_path(&self, prompt: &str) -> PathBuf {
        self.dir.join(format!("{}.local.emb", Self::key(prompt)))
    }

    pub fn global_path(&self, prompt: &str) -> PathBuf {
        self.dir.join(format!("{}.global.emb", Self::key(prompt)))
    }
}

impl<T: Scalar> EmbeddingProvider<T> for FileProvider {
    fn name(&self) -> &str {
        "file"
    }

    fn local_dim(&self) -> usize {
        self.local_dim
    }

    fn global_dim(&self) -> Option<usize> {
        self.global_dim
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn local(&self, prompt: &str) -> Result<LocalEmbeddings<T>> {
        match load_embeddings(&self.local_path(prompt), Some(self.local_dim))? {
            Embeddings::Local(l) => Ok(l),
            Embeddings::Global(_) => Err(Error::format(self.local_path(prompt), "expected local embeddings")),
        }
    }

    fn global(&self, prompt: &str) -> Result<Option<GlobalEmbedding<T>>> {
        let Some(dim) = self.global_dim else {
            return Ok(None);
        };
        match load_embeddings(&self.global_path(prompt), Some(dim))? {
            Embeddings::Global(g) => Ok(Some(g)),
            Embeddings::Local(_) => Err(Error::format(self.global_path(prompt), "expected a global embedding")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Embeddings<T> {
    Local(LocalEmbeddings<T>),
    Global(GlobalEmbedding<T>),
}

fn to_f32<T: Scalar>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.to_f64_lossy() as f32).collect()
}

pub fn encode_embeddings<T: Scalar>(e: &Embeddings<T>) -> Vec<u8> {
    match e {
        Embeddings::Local(l) => formats::encode(
            EMB_MAGIC,
            [l.num_tokens() as u32, l.dim() as u32, 0],
            &to_f32(l.rows.data()),
        ),
        Embeddings::Global(g) => formats::encode(EMB_MAGIC, [1, g.dim() as u32, FLAG_GLOBAL], &to_f32(&g.values)),
    }
}

pub fn write_embeddings<T: Scalar>(path: &Path, e: &Embeddings<T>) -> Result<()> {
    formats::write_atomic(path, &encode_embeddings(e))
}

pub fn decode_embeddings<T: Scalar>(path: &Path, bytes: &[u8], expected_dim: Option<usize>) -> Result<Embeddings<T>> {
    let raw = formats::decode(path, bytes, EMB_MAGIC, |[m, d, flags]| {
        if m == 0 || d == 0 {
            return Err(Error::format(path, "zero-sized embedding header"));
        }
        if flags & !FLAG_GLOBAL != 0 {
            return Err(Error::format(path, format!("unknown flags {flags:#x}")));
        }
        if flags & FLAG_GLOBAL != 0 && m != 1 {
            return Err(Error::format(path, "global embedding must have one row"));
        }
        Ok(m as usize * d as usize)
    })?;
    let [m, d, flags] = raw.header;
    if let Some(want) = expected_dim {
        if want != d as usize {
            return Err(Error::shape(format!(
                "{}: embedding width {d}, model expects {want}",
                path.display()
            )));
        }
    }
    let vals: Vec<T> = raw.values.iter().map(|&v| T::of(v as f64)).collect();
    if flags & FLAG_GLOBAL != 0 {
        Ok(Embeddings::Global(GlobalEmbedding::new(vals)?))
    } else {
        Ok(Embeddings::Local(LocalEmbeddings::dense(Tensor::from_vec(
            &[m as usize, d as usize],
            vals,
        )?)?))
    }
}

/// Reads an `EMB1` file, checking its width against `expected_dim`.
pub fn load_embeddings<T: Scalar>(path: &Path, expected_dim: Option<usize>) -> Result<Embeddings<T>> {
    decode_embeddings(path, &fs::read(path)?, expected_dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn local(rows: &[&[f64]], mask: &[bool]) -> LocalEmbeddings<f64> {
        let d = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        LocalEmbeddings::new(Tensor::from_vec(&[rows.len(), d], data).unwrap(), mask.to_vec()).unwrap()
    }

    #[test]
    fn mean_pool_examples() {
        let f = local(&[&[1.0, 2.0], &[3.0, 4.0]], &[true, true]);
        assert_eq!(mean_pool(&f).unwrap().values(), &[2.0, 3.0]);
        let f = local(&[&[5.0, -1.0]], &[true]);
        assert_eq!(mean_pool(&f).unwrap().values(), &[5.0, -1.0]);
        let f = local(&[&[1.0, 0.0], &[0.0, 1.0], &[9.0, 9.0]], &[true, true, false]);
        assert_eq!(mean_pool(&f).unwrap().values(), &[0.5, 0.5]);
        let f = local(&[&[1.0, 0.0]], &[false]);
        assert!(matches!(mean_pool(&f), Err(Error::EmptyMask)));
    }

    #[test]
    fn sap_examples() {
        let f = local(&[&[1.0, 0.0], &[0.0, 1.0]], &[true, true]);
        let g = self_attention_pool(&f, &SapWeights { w: vec![1.0, 0.0] }).unwrap();
        let e = std::f64::consts::E;
        assert!((g.values()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((g.values()[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((g.values()[0] - 0.7311).abs() < 1e-4);

        let single = local(&[&[2.0, 3.0], &[7.0, 7.0]], &[true, false]);
        let g = self_attention_pool(&single, &SapWeights { w: vec![0.3, -2.0] }).unwrap();
        assert_eq!(g.values(), &[2.0, 3.0]);

        let f = local(&[&[1.0, 0.0]], &[false]);
        assert!(matches!(self_attention_pool(&f, &SapWeights::zeros(2)), Err(Error::EmptyMask)));
        assert!(self_attention_pool(&f, &SapWeights::zeros(3)).is_err());
    }

    #[test]
    fn dropout_boundaries_and_reproducibility() {
        let c = Condition {
            global: GlobalCond::FromLocal,
            local: Some(local(&[&[1.0]], &[true])),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let keep = cfg_dropout(c.clone(), DropoutConfig { p: 0.0, independent: false }, &mut rng).unwrap();
            assert_eq!(keep, c);
            let gone = cfg_dropout(c.clone(), DropoutConfig { p: 1.0, independent: false }, &mut rng).unwrap();
            assert!(gone.is_null());
        }
        assert!(cfg_dropout(c.clone(), DropoutConfig { p: 1.5, independent: false }, &mut rng).is_err());
        let run = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..200)
                .map(|_| cfg_dropout(c.clone(), DropoutConfig { p: 0.3, independent: true }, &mut r).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(5), run(5));
    }

    #[test]
    fn hash_embed_contracts() {
        let a = hash_embed::<f64, _>(&["soft", "piano", "loop"], 16, 3).unwrap();
        let b = hash_embed::<f64, _>(&["soft", "piano", "loop"], 16, 3).unwrap();
        assert_eq!(a, b);
        let c = hash_embed::<f64, _>(&["soft", "guitar", "loop"], 16, 3).unwrap();
        assert_eq!(a.row(0), c.row(0));
        assert_ne!(a.row(1), c.row(1));
        assert_eq!(a.row(2), c.row(2));
        for i in 0..3 {
            let n: f64 = a.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert!(hash_embed::<f64, &str>(&[], 16, 3).is_err());
    }

    #[test]
    fn embedding_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.emb");
        let l = hash_embed::<f32, _>(&["a", "b", "c", "d"], 16, 0).unwrap();
        write_embeddings(&p, &Embeddings::Local(l.clone())).unwrap();
        assert_eq!(load_embeddings::<f32>(&p, Some(16)).unwrap(), Embeddings::Local(l));
        assert!(load_embeddings::<f32>(&p, Some(8)).is_err());

        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_embeddings::<f32>(&p, None).is_err());

        let bad_global = formats::encode(EMB_MAGIC, [2, 2, FLAG_GLOBAL], &[0.0; 4]);
        assert!(decode_embeddings::<f32>(&p, &bad_global, None).is_err());
    }

    #[test]
    fn file_provider_reads_written_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let prov = FileProvider {
            dir: dir.path().to_path_buf(),
            local_dim: 8,
            global_dim: Some(4),
        };
        let prompt = "Calm Piano";
        let l = hash_embed::<f32, _>(&tokenize(prompt), 8, 1).unwrap();
        let g = GlobalEmbedding::new(vec![1.0f32, 0.0, 0.5, 0.25]).unwrap();
        write_embeddings(&prov.local_path(prompt), &Embeddings::Local(l.clone())).unwrap();
        write_embeddings(&prov.global_path(prompt), &Embeddings::Global(g.clone())).unwrap();
        assert_eq!(EmbeddingProvider::<f32>::local(&prov, prompt).unwrap(), l);
        assert_eq!(EmbeddingProvider::<f32>::global(&prov, prompt).unwrap(), Some(g));
        assert!(EmbeddingProvider::<f32>::local(&prov, "missing").is_err());
    }

    fn arb_local() -> impl Strategy<Value = (LocalEmbeddings<f64>, Vec<f64>)> {
        (1usize..6, 1usize..5).prop_flat_map(|(m, d)| {
            (
                proptest::collection::vec(-3.0f64..3.0, m * d),
                proptest::collection::vec(any::<bool>(), m),
                proptest::collection::vec(-2.0f64..2.0, d),
            )
                .prop_map(move |(vals, mut mask, w)| {
                    mask[0] = true;
                    (LocalEmbeddings::new(Tensor::from_vec(&[m, d], vals).unwrap(), mask).unwrap(), w)
                })
        })
    }

    fn permuted(f: &LocalEmbeddings<f64>, shift: usize) -> LocalEmbeddings<f64> {
        let m = f.num_tokens();
        let order: Vec<usize> = (0..m).map(|i| (i + shift) % m).collect();
        let data = order.iter().flat_map(|&i| f.row(i).to_vec()).collect();
        let mask = order.iter().map(|&i| f.mask()[i]).collect();
        LocalEmbeddings::new(Tensor::from_vec(&[m, f.dim()], data).unwrap(), mask).unwrap()
    }

    proptest! {
        #[test]
        fn pools_are_permutation_invariant((f, w) in arb_local(), shift in 0usize..6) {
            let p = permuted(&f, shift);
            let w = SapWeights { w };
            let (a, b) = (mean_pool(&f).unwrap(), mean_pool(&p).unwrap());
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let (a, b) = (self_attention_pool(&f, &w).unwrap(), self_attention_pool(&p, &w).unwrap());
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn sap_zero_weights_is_mean((f, _) in arb_local()) {
            let a = self_attention_pool(&f, &SapWeights::zeros(f.dim())).unwrap();
            let b = mean_pool(&f).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn sap_weights_form_a_simplex((f, w) in arb_local()) {
            let p = sap_weights_of(&f, &SapWeights { w }).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (pi, &valid) in p.iter().zip(f.mask()) {
                prop_assert!(*pi >= 0.0);
                if !valid { prop_assert_eq!(*pi, 0.0); }
            }
        }
    }
}
