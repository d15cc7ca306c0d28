//! Distribution-level metrics over generated latents: a Fréchet distance
//! between Gaussian fits of toy features, and a KL score between label
//! distributions from a frozen linear probe.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Latent;

/// Eigenvalues in `[-PSD_TOLERANCE·scale, 0)` are clipped to zero, where
/// `scale = max(1, largest |eigenvalue|)`; anything more negative is an error.
pub const PSD_TOLERANCE: f64 = 1e-8;
pub const PROBABILITY_FLOOR: f64 = 1e-10;

const EXTRACTOR_SEED: u64 = 0x7474_6d5f_6665_6174;
const PROJECTIONS: usize = 32;

fn short_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

/// Fixed random projection + `tanh`, followed by per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyFeatureExtractor {
    shape: [usize; 3],
    proj: DMatrix<f64>,
    bias: DVector<f64>,
}

impl ToyFeatureExtractor {
    pub fn new(shape: [usize; 3]) -> Self {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(EXTRACTOR_SEED);
        let scale = 1.0 / (n as f64).sqrt();
        let proj = DMatrix::from_fn(PROJECTIONS, n, |_, _| rng.sample::<f64, _>(StandardNormal) * scale);
        let bias = DVector::from_fn(PROJECTIONS, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
        ToyFeatureExtractor { shape, proj, bias }
    }

    /// The extractor for the default `4×16×16` latent.
    pub fn standard() -> Self {
        Self::new([4, 16, 16])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn dim(&self) -> usize {
        PROJECTIONS + 2 * self.shape[0]
    }

    /// Content hash of the projection weights and bias.
    pub fn version(&self) -> String {
        let mut bytes = Vec::new();
        for s in self.shape {
            bytes.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for v in self.proj.iter().chain(self.bias.iter()) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        short_hash(&bytes)
    }

    pub fn features<T: Scalar>(&self, latent: &Latent<T>) -> Result<Vec<f64>> {
        if latent.shape() != self.shape {
            return Err(Error::shape(format!(
                "feature extractor expects {:?}, got {:?}",
                self.shape,
                latent.shape()
            )));
        }
        let x = DVector::from_iterator(latent.numel(), latent.data().iter().map(|v| v.to_f64_lossy()));
        let mut out: Vec<f64> = (&self.proj * &x + &self.bias).iter().map(|v| v.tanh()).collect();
        let per = self.shape[1] * self.shape[2];
        for ch in x.as_slice().chunks(per) {
            let mean = ch.iter().sum::<f64>() / per as f64;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
            out.push(mean);
            out.push(var.sqrt());
        }
        Ok(out)
    }

    pub fn feature_set<T: Scalar>(&self, latents: &[Latent<T>]) -> Result<FeatureSet> {
        let rows = latents.iter().map(|l| self.features(l)).collect::<Result<Vec<_>>>()?;
        feature_set(&rows)
    }
}

/// `N×D`, one row per sample.
pub type FeatureSet = DMatrix<f64>;

pub fn feature_set(rows: &[Vec<f64>]) -> Result<FeatureSet> {
    let d = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape("feature rows have different lengths"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature values".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::shape(format!("mean of length {d} with covariance {:?}", cov.shape())));
        }
        let asym = (&cov - cov.transpose()).amax();
        if asym > 1e-9 || cov.diagonal().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("covariance must be symmetric with a non-negative diagonal"));
        }
        Ok(GaussianStats { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased sample covariance.
pub fn gaussian_stats(features: &FeatureSet) -> Result<GaussianStats> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 samples, got {n}")));
    }
    let mean = features.row_mean().transpose();
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    cov = (&cov + cov.transpose()) * 0.5;
    GaussianStats::new(mean, cov)
}

/// Square root of a symmetric PSD matrix by eigendecomposition.
///
/// Eigenvalues below the numerical-rank cutoff `d·ε·λ_max` count as zero, so
/// rounding noise in singular matrices is not amplified by the root.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let largest = eig.eigenvalues.amax();
    let scale = largest.max(1.0);
    let cutoff = m.nrows() as f64 * f64::EPSILON * largest;
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -PSD_TOLERANCE * scale {
            return Err(Error::invalid(format!("matrix is not positive semi-definite (eigenvalue {v:e})")));
        }
        *v = if *v <= cutoff { 0.0 } else { v.sqrt() };
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// The symmetrized product `Σ_a^{1/2} Σ_b Σ_a^{1/2}` (which shares its
/// spectrum with `Σ_a Σ_b`) and its square root.
pub fn symmetrized_product_sqrt(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let ra = psd_sqrt(a)?;
    let m = &ra * b * &ra;
    let m = (&m + m.transpose()) * 0.5;
    let s = psd_sqrt(&m)?;
    Ok((m, s))
}

/// Fréchet distance between two Gaussians.
///
/// `tr((Σ_a Σ_b)^{1/2})` is taken as the sum of singular values of
/// `Σ_b^{1/2} Σ_a^{1/2}`. This equals the trace of the root of the
/// symmetrized product, but it avoids a square root of near-zero eigenvalues
/// and is symmetric in its arguments to rounding.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("dimensions {} and {}", a.dim(), b.dim())));
    }
    let cross = (psd_sqrt(&b.cov)? * psd_sqrt(&a.cov)?).singular_values().sum();
    let d = (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("not a probability vector (sum {sum})")));
        }
        Ok(LabelDistribution { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(reference ‖ generated)`.
    #[default]
    RefGen,
    /// `KL(generated ‖ reference)`.
    GenRef,
}

pub fn kl_divergence(p: &LabelDistribution, q: &LabelDistribution) -> Result<f64> {
    if p.probs.len() != q.probs.len() {
        return Err(Error::shape(format!("{} vs {} classes", p.probs.len(), q.probs.len())));
    }
    Ok(p.probs
        .iter()
        .zip(&q.probs)
        .map(|(&pi, &qi)| {
            let (pi, qi) = (pi.max(PROBABILITY_FLOOR), qi.max(PROBABILITY_FLOOR));
            pi * (pi / qi).ln()
        })
        .sum())
}

/// Mean KL over pairs `(gen[i], reference[i])`.
pub fn kl_score(gen: &[LabelDistribution], reference: &[LabelDistribution], direction: KlDirection) -> Result<f64> {
    if gen.len() != reference.len() || gen.is_empty() {
        return Err(Error::invalid(format!(
            "unmatched pairing: {} generated vs {} reference",
            gen.len(),
            reference.len()
        )));
    }
    let mut total = 0.0;
    for (g, r) in gen.iter().zip(reference) {
        total += match direction {
            KlDirection::RefGen => kl_divergence(r, g)?,
            KlDirection::GenRef => kl_divergence(g, r)?,
        };
    }
    Ok(total / gen.len() as f64)
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Per-slot multinomial logistic regression over toy features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearProbe {
    pub extractor_version: String,
    pub slot_sizes: Vec<usize>,
    /// One row of `feature_dim` weights per class, slots concatenated.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

const STANDARD_PROBE: &str = include_str!("../assets/probe_v1.json");

impl LinearProbe {
    /// The committed probe for [`ToyFeatureExtractor::standard`].
    pub fn standard() -> Result<Self> {
        serde_json::from_str(STANDARD_PROBE).map_err(|e| Error::Parse(format!("committed probe: {e}")))
    }

    /// Content hash of the serialized probe.
    pub fn version(&self) -> String {
        short_hash(serde_json::to_string(self).expect("probe serializes").as_bytes())
    }

    pub fn num_classes(&self) -> usize {
        self.slot_sizes.iter().sum()
    }

    fn logits(&self, f: &[f64]) -> Result<Vec<f64>> {
        if self.weights.first().is_some_and(|w| w.len() != f.len()) {
            return Err(Error::shape(format!("probe expects {} features, got {}", self.weights[0].len(), f.len())));
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(f).map(|(a, x)| a * x).sum::<f64>())
            .collect())
    }

    /// Per-slot softmax distributions, each scaled by `1 / slots`, concatenated.
    pub fn distribution(&self, features: &[f64]) -> Result<LabelDistribution> {
        let z = self.logits(features)?;
        let k = self.slot_sizes.len() as f64;
        let mut probs = Vec::with_capacity(z.len());
        let mut off = 0;
        for &s in &self.slot_sizes {
            probs.extend(softmax(&z[off..off + s]).into_iter().map(|p| p / k));
            off += s;
        }
        LabelDistribution::new(probs)
    }

    /// Most likely value per slot.
    pub fn predict(&self, features: &[f64]) -> Result<Vec<usize>> {
        let z = self.logits(features)?;
        let mut off = 0;
        let mut out = Vec::new();
        for &s in &self.slot_sizes {
            let slot = &z[off..off + s];
            out.push((0..s).max_by(|&a, &b| slot[a].total_cmp(&slot[b])).unwrap_or(0));
            off += s;
        }
        Ok(out)
    }

    /// Full-batch gradient descent on the per-slot cross-entropy with L2 penalty.
    pub fn fit(
        extractor_version: &str,
        features: &[Vec<f64>],
        labels: &[Vec<usize>],
        slot_sizes: &[usize],
        iterations: usize,
        lr: f64,
        l2: f64,
    ) -> Result<Self> {
        if features.len() != labels.len() || features.is_empty() {
            return Err(Error::invalid("features and labels must be non-empty and aligned"));
        }
        let d = features[0].len();
        let c: usize = slot_sizes.iter().sum();
        let mut probe = LinearProbe {
            extractor_version: extractor_version.to_string(),
            slot_sizes: slot_sizes.to_vec(),
            weights: vec![vec![0.0; d]; c],
            bias: vec![0.0; c],
        };
        let n = features.len() as f64;
        for _ in 0..iterations {
            let mut gw = vec![vec![0.0; d]; c];
            let mut gb = vec![0.0; c];
            for (f, y) in features.iter().zip(labels) {
                let z = probe.logits(f)?;
                let mut off = 0;
                for (slot, &s) in slot_sizes.iter().enumerate() {
                    let p = softmax(&z[off..off + s]);
                    for k in 0..s {
                        let err = p[k] - (y[slot] == k) as u8 as f64;
                        gb[off + k] += err / n;
                        for (g, x) in gw[off + k].iter_mut().zip(f) {
                            *g += err * x / n;
                        }
                    }
                    off += s;
                }
            }
            for k in 0..c {
                probe.bias[k] -= lr * gb[k];
                for j in 0..d {
                    probe.weights[k][j] -= lr * (gw[k][j] + l2 * probe.weights[k][j]);
                }
            }
        }
        Ok(probe)
    }
}

/// Summary written after evaluating a generated set against a reference set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_generated: usize,
    pub n_reference: usize,
    pub fad: f64,
    /// Absent when no pairing was supplied.
    pub kl: Option<f64>,
    pub extractor_version: String,
    pub classifier_version: Option<String>,
    pub kl_direction: KlDirection,
    /// How `kl` is aggregated.
    pub kl_variant: String,
}

pub const KL_VARIANT: &str = "mean over prompt-matched pairs; per-slot softmax of a linear probe, slots weighted equally; probability floor 1e-10";

/// What the KL term needs: the frozen probe and, for each generated sample
/// `i`, the index of its reference partner.
#[derive(Clone, Copy, Debug)]
pub struct KlRequest<'a> {
    pub probe: &'a LinearProbe,
    pub pairs: &'a [usize],
    pub direction: KlDirection,
}

/// Scores generated latents against references; KL is computed only when requested.
pub fn evaluate<T: Scalar>(
    extractor: &ToyFeatureExtractor,
    generated: &[Latent<T>],
    reference: &[Latent<T>],
    kl: Option<KlRequest<'_>>,
) -> Result<EvalReport> {
    let fg = extractor.feature_set(generated)?;
    let fr = extractor.feature_set(reference)?;
    let fad = frechet_distance(&gaussian_stats(&fg)?, &gaussian_stats(&fr)?)?;
    let mut report = EvalReport {
        n_generated: generated.len(),
        n_reference: reference.len(),
        fad,
        kl: None,
        extractor_version: extractor.version(),
        classifier_version: None,
        kl_direction: KlDirection::default(),
        kl_variant: KL_VARIANT.into(),
    };
    if let Some(req) = kl {
        if req.pairs.len() != generated.len() || req.pairs.iter().any(|&j| j >= reference.len()) {
            return Err(Error::invalid("every generated sample needs a reference partner"));
        }
        if req.probe.extractor_version != report.extractor_version {
            return Err(Error::invalid("label probe was fitted on a different feature extractor"));
        }
        let dist = |m: &FeatureSet, i: usize| req.probe.distribution(&m.row(i).iter().cloned().collect::<Vec<_>>());
        let gen_d = (0..fg.nrows()).map(|i| dist(&fg, i)).collect::<Result<Vec<_>>>()?;
        let ref_d = req.pairs.iter().map(|&j| dist(&fr, j)).collect::<Result<Vec<_>>>()?;
        report.kl = Some(kl_score(&gen_d, &ref_d, req.direction)?);
        report.classifier_version = Some(req.probe.version());
        report.kl_direction = req.direction;
    }
    Ok(report)
}
