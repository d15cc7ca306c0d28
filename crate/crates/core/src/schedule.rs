//! Variance-preserving noise schedule and the v-parameterization algebra.
//!
//! Timesteps are discrete integers `0..=T`; index 0 is the clean end. All
//! operations are pure and work elementwise on equally shaped tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Latent, Tensor};

/// Offset `s` of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;

/// Parameters sufficient to rebuild a schedule; persisted in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub num_steps: usize,
    pub offset: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            num_steps: 1000,
            offset: COSINE_OFFSET,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<T> {
    alpha: Vec<T>,
    sigma: Vec<T>,
    offset: f64,
}

/// Cosine signal coefficient `cos((t/T + s)/(1 + s) · π/2)`, normalized so
/// that `t = 0` maps to exactly 1.
fn cosine_alpha(t: usize, num_steps: usize, s: f64) -> f64 {
    let f = |u: f64| ((u + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos();
    (f(t as f64 / num_steps as f64) / f(0.0)).clamp(0.0, 1.0)
}

/// Cosine variance-preserving schedule with `T` steps and offset 0.008.
pub fn make_cosine_schedule<T: Scalar>(num_steps: usize) -> Result<NoiseSchedule<T>> {
    NoiseSchedule::from_spec(ScheduleSpec {
        num_steps,
        offset: COSINE_OFFSET,
    })
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn from_spec(spec: ScheduleSpec) -> Result<Self> {
        if spec.num_steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(spec.offset >= 0.0 && spec.offset.is_finite()) {
            return Err(Error::invalid("cosine offset must be finite and non-negative"));
        }
        let alphas: Vec<f64> = (0..=spec.num_steps)
            .map(|t| cosine_alpha(t, spec.num_steps, spec.offset))
            .collect();
        let mut s = Self::from_alphas(&alphas)?;
        s.offset = spec.offset;
        Ok(s)
    }

    /// Builds a schedule from signal coefficients; `sigma = sqrt(1 - alpha²)`.
    /// Coefficients must lie in `[0, 1]` and be non-increasing.
    pub fn from_alphas(alphas: &[f64]) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(Error::invalid("schedule needs at least two entries"));
        }
        if alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("alpha must lie in [0, 1]"));
        }
        if alphas.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid("alpha must be non-increasing"));
        }
        Ok(NoiseSchedule {
            alpha: alphas.iter().map(|&a| T::of(a)).collect(),
            sigma: alphas.iter().map(|&a| T::of((1.0 - a * a).max(0.0).sqrt())).collect(),
            offset: f64::NAN,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            num_steps: self.num_steps(),
            offset: self.offset,
        }
    }

    pub fn alphas(&self) -> &[T] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[T] {
        &self.sigma
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.num_steps() {
            return Err(Error::Timestep {
                t,
                max: self.num_steps(),
            });
        }
        Ok(())
    }

    /// `(alpha_t, sigma_t)`.
    pub fn coeffs(&self, t: usize) -> Result<(T, T)> {
        self.check_t(t)?;
        Ok((self.alpha[t], self.sigma[t]))
    }

    /// Evenly spaced descending timesteps `T = τ_0 > … > τ_S = 0`.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.num_steps();
        if steps == 0 || steps > total {
            return Err(Error::invalid(format!(
                "sampling steps must be in 1..={total}, got {steps}"
            )));
        }
        let mut ts: Vec<usize> = (0..=steps)
            .map(|i| ((steps - i) as f64 * total as f64 / steps as f64).round() as usize)
            .collect();
        ts.dedup();
        Ok(ts)
    }
}

/// `a·x + b·y` elementwise.
fn affine<T: Scalar>(a: T, x: &Latent<T>, b: T, y: &Latent<T>) -> Result<Latent<T>> {
    x.zip_with(y, |xv, yv| a * xv + b * yv)
}

/// Forward noising `α_t·z0 + σ_t·ε`.
pub fn q_sample<T: Scalar>(z0: &Latent<T>, eps: &Latent<T>, t: usize, s: &NoiseSchedule<T>) -> Result<Latent<T>> {
    let (a, sg) = s.coeffs(t)?;
    affine(a, z0, sg, eps)
}

/// v-target `α_t·ε − σ_t·z0`.
pub fn v_target<T: Scalar>(z0: &Latent<T>, eps: &Latent<T>, t: usize, s: &NoiseSchedule<T>) -> Result<Latent<T>> {
    let (a, sg) = s.coeffs(t)?;
    affine(a, eps, -sg, z0)
}

/// Clean-latent estimate `α_t·z_t − σ_t·v`.
pub fn z0_from_v<T: Scalar>(z_t: &Latent<T>, v: &Latent<T>, t: usize, s: &NoiseSchedule<T>) -> Result<Latent<T>> {
    let (a, sg) = s.coeffs(t)?;
    affine(a, z_t, -sg, v)
}

/// Noise estimate `σ_t·z_t + α_t·v`.
pub fn eps_from_v<T: Scalar>(z_t: &Latent<T>, v: &Latent<T>, t: usize, s: &NoiseSchedule<T>) -> Result<Latent<T>> {
    let (a, sg) = s.coeffs(t)?;
    affine(sg, z_t, a, v)
}

/// Deterministic (η = 0) DDIM update from `t` to `t_prev < t`.
pub fn ddim_step<T: Scalar>(
    z_t: &Latent<T>,
    v_hat: &Latent<T>,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule<T>,
) -> Result<Latent<T>> {
    if t_prev >= t {
        return Err(Error::invalid(format!(
            "ddim_step needs t_prev < t, got t_prev={t_prev}, t={t}"
        )));
    }
    s.check_t(t)?;
    let z0 = z0_from_v(z_t, v_hat, t, s)?;
    let eps = eps_from_v(z_t, v_hat, t, s)?;
    let (a, sg) = s.coeffs(t_prev)?;
    affine(a, &z0, sg, &eps)
}

/// Applies a per-example timestep to a batch `[B, ...]`.
pub(crate) fn per_example<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ts: &[usize],
    f: impl Fn(&Latent<T>, &Latent<T>, usize) -> Result<Latent<T>>,
) -> Result<Tensor<T>> {
    a.check_same_shape(b)?;
    if a.shape().first() != Some(&ts.len()) {
        return Err(Error::shape(format!(
            "batch of {:?} with {} timesteps",
            a.shape(),
            ts.len()
        )));
    }
    let items = ts
        .iter()
        .enumerate()
        .map(|(i, &t)| f(&a.index_axis0(i), &b.index_axis0(i), t))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lat(v: &[f64]) -> Latent<f64> {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    fn half_schedule() -> NoiseSchedule<f64> {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        NoiseSchedule::from_alphas(&[1.0, h, 0.0]).unwrap()
    }

    #[test]
    fn rejects_zero_steps() {
        assert!(make_cosine_schedule::<f64>(0).is_err());
    }

    #[test]
    fn endpoints() {
        let s = make_cosine_schedule::<f64>(1000).unwrap();
        assert_eq!(s.alphas()[0] * s.alphas()[0] + s.sigmas()[0] * s.sigmas()[0], 1.0);
        let s10 = make_cosine_schedule::<f64>(10).unwrap();
        assert!(s10.alphas()[10] <= 0.02);
    }

    #[test]
    fn midpoint_matches_direct_formula() {
        // Independent transcription of the cosine formula.
        let s = 0.008f64;
        let f = |u: f64| ((u + s) / (1.0 + s) * std::f64::consts::PI / 2.0).cos();
        let want = f(0.5) / f(0.0);
        let sched = make_cosine_schedule::<f64>(1000).unwrap();
        assert!((sched.alphas()[500] - want).abs() <= 1e-12);
    }

    #[test]
    fn q_sample_endpoints_and_affine_example() {
        let s = half_schedule();
        let z0 = lat(&[2.0, 0.0]);
        let eps = lat(&[0.0, 2.0]);
        assert_eq!(q_sample(&z0, &eps, 0, &s).unwrap(), z0);
        assert_eq!(q_sample(&z0, &eps, 2, &s).unwrap(), eps);
        let mid = q_sample(&z0, &eps, 1, &s).unwrap();
        for v in mid.data() {
            assert!((v - 2f64.sqrt()).abs() < 1e-12);
        }
        assert!(q_sample(&z0, &lat(&[1.0]), 1, &s).is_err());
        assert!(q_sample(&z0, &eps, 3, &s).is_err());
    }

    #[test]
    fn v_target_examples() {
        let s = half_schedule();
        let z0 = lat(&[1.0]);
        let eps = lat(&[0.0]);
        assert_eq!(v_target(&z0, &lat(&[3.0]), 0, &s).unwrap(), lat(&[3.0]));
        assert_eq!(v_target(&z0, &eps, 2, &s).unwrap(), lat(&[-1.0]));
        let v = v_target(&z0, &eps, 1, &s).unwrap();
        assert!((v.data()[0] + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(v_target(&z0, &lat(&[1.0, 2.0]), 1, &s).is_err());
    }

    #[test]
    fn z0_from_v_clean_case() {
        let s = half_schedule();
        let zt = lat(&[0.3, -1.2]);
        let v = lat(&[5.0, 7.0]);
        assert_eq!(z0_from_v(&zt, &v, 0, &s).unwrap(), zt);
    }

    #[test]
    fn ddim_single_step_recovers_clean_latent() {
        let s = make_cosine_schedule::<f64>(1000).unwrap();
        let z0 = lat(&[0.5, -1.5, 2.0]);
        let eps = lat(&[1.0, 0.2, -0.7]);
        let zt = q_sample(&z0, &eps, 1000, &s).unwrap();
        let v = v_target(&z0, &eps, 1000, &s).unwrap();
        let out = ddim_step(&zt, &v, 1000, 0, &s).unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-12);
        assert!(ddim_step(&zt, &v, 10, 10, &s).is_err());
        assert!(ddim_step(&zt, &v, 10, 11, &s).is_err());
    }

    #[test]
    fn sampling_timesteps_descend_to_zero() {
        let s = make_cosine_schedule::<f64>(1000).unwrap();
        let ts = s.sampling_timesteps(200).unwrap();
        assert_eq!(ts.len(), 201);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 0);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.sampling_timesteps(1).unwrap(), vec![1000, 0]);
        assert!(s.sampling_timesteps(0).is_err());
    }

    proptest! {
        #[test]
        fn schedule_invariants(t in 1usize..2000) {
            let s = make_cosine_schedule::<f64>(t).unwrap();
            for (a, sg) in s.alphas().iter().zip(s.sigmas()) {
                prop_assert!((a * a + sg * sg - 1.0).abs() <= 1e-9);
            }
            prop_assert!(s.alphas().windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(s.sigmas().windows(2).all(|w| w[1] >= w[0]));
            prop_assert!(s.alphas()[0] >= 0.999);
            prop_assert!(s.alphas()[t] <= 0.02);
        }

        #[test]
        fn q_sample_is_linear(a in -3.0f64..3.0, x in -2.0f64..2.0, e in -2.0f64..2.0, t in 0usize..=100) {
            let s = make_cosine_schedule::<f64>(100).unwrap();
            let lhs = q_sample(&lat(&[a * x]), &lat(&[a * e]), t, &s).unwrap();
            let rhs = q_sample(&lat(&[x]), &lat(&[e]), t, &s).unwrap().scale(a);
            prop_assert!((lhs.data()[0] - rhs.data()[0]).abs() <= 1e-12 * (1.0 + rhs.data()[0].abs()));
        }
    }
}
