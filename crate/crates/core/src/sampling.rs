//! Classifier-free-guided DDIM sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::Condition;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::{ddim_step, NoiseSchedule};
use crate::tensor::{Latent, Tensor};
use crate::unet::VelocityModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CfgFormula {
    /// `v_uncond + ω·(v_cond − v_uncond)`.
    #[default]
    Standard,
    /// `ω·v_uncond + (1 − ω)·v_cond`.
    PaperLiteral,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub num_sampling_steps: usize,
    pub guidance_scale: f64,
    pub cfg_formula: CfgFormula,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_sampling_steps: 200,
            guidance_scale: 9.0,
            cfg_formula: CfgFormula::Standard,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_sampling_steps == 0 {
            return Err(Error::Config("num_sampling_steps must be at least 1".into()));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::Config(format!(
                "guidance_scale must be finite and non-negative, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

pub fn cfg_combine<T: Scalar>(
    v_cond: &Tensor<T>,
    v_uncond: &Tensor<T>,
    omega: f64,
    formula: CfgFormula,
) -> Result<Tensor<T>> {
    let w = T::of(omega);
    match formula {
        CfgFormula::Standard => v_cond.zip_with(v_uncond, |c, u| u + w * (c - u)),
        CfgFormula::PaperLiteral => v_cond.zip_with(v_uncond, |c, u| w * u + (T::one() - w) * c),
    }
}

/// Unit Gaussian starting latent for a seed.
pub fn initial_noise<T: Scalar>(shape: &[usize], seed: u64) -> Latent<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::of(rng.sample::<f64, _>(StandardNormal)))
}

/// Samples one latent per condition; example `i` starts from
/// `initial_noise(shape, seeds[i])`. Returns `[B, C, H, W]`.
pub fn sample_batch<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule<T>,
    config: &SamplerConfig,
    conds: &[Condition<T>],
    latent_shape: &[usize],
    seeds: &[u64],
) -> Result<Tensor<T>> {
    config.validate()?;
    if conds.len() != seeds.len() || conds.is_empty() {
        return Err(Error::invalid(format!(
            "{} conditions for {} seeds",
            conds.len(),
            seeds.len()
        )));
    }
    let taus = schedule.sampling_timesteps(config.num_sampling_steps)?;
    let noise: Vec<_> = seeds.iter().map(|&s| initial_noise(latent_shape, s)).collect();
    let mut z = Tensor::stack(&noise)?;
    let nulls = vec![Condition::null(); conds.len()];
    for pair in taus.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        let ts = vec![t; conds.len()];
        let v_cond = model.predict(&z, &ts, conds)?;
        let v_uncond = model.predict(&z, &ts, &nulls)?;
        let v = cfg_combine(&v_cond, &v_uncond, config.guidance_scale, config.cfg_formula)?;
        z = ddim_step(&z, &v, t, t_prev, schedule)?;
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("latent after step t={t}")));
        }
    }
    Ok(z)
}

/// Samples a single latent `[C, H, W]` seeded by `config.seed`.
pub fn sample<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule<T>,
    config: &SamplerConfig,
    cond: &Condition<T>,
    latent_shape: &[usize],
) -> Result<Latent<T>> {
    let z = sample_batch(model, schedule, config, std::slice::from_ref(cond), latent_shape, &[config.seed])?;
    Ok(z.index_axis0(0))
}

/// Sidecar describing how a latent file was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub prompt: String,
    pub seed: u64,
    pub num_sampling_steps: usize,
    pub guidance_scale: f64,
    pub cfg_formula: CfgFormula,
    pub checkpoint_id: String,
    pub latent_file: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{hash_embed, GlobalCond};
    use crate::schedule::make_cosine_schedule;
    use std::cell::Cell;

    fn rand_tensor(seed: u64, n: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n], |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn combine_boundaries() {
        let c = rand_tensor(1, 5);
        let u = rand_tensor(2, 5);
        assert_eq!(cfg_combine(&c, &u, 1.0, CfgFormula::Standard).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0, CfgFormula::Standard).unwrap(), u);
        let one = Tensor::from_vec(&[1], vec![1.0f64]).unwrap();
        let zero = Tensor::from_vec(&[1], vec![0.0f64]).unwrap();
        assert_eq!(cfg_combine(&one, &zero, 9.0, CfgFormula::Standard).unwrap().data(), &[9.0]);
        assert!(cfg_combine(&c, &rand_tensor(3, 4), 1.0, CfgFormula::Standard).is_err());
    }

    #[test]
    fn combine_is_affine_and_conventions_relate() {
        for seed in 0..20u64 {
            let c = rand_tensor(seed, 7);
            let u = rand_tensor(seed + 100, 7);
            let w = seed as f64 * 0.7 - 3.0;
            let k = 1.7;
            let lhs = cfg_combine(&c.scale(k), &u.scale(k), w, CfgFormula::Standard).unwrap();
            let rhs = cfg_combine(&c, &u, w, CfgFormula::Standard).unwrap().scale(k);
            assert!(lhs.max_abs_diff(&rhs) < 1e-12);
            let std = cfg_combine(&c, &u, 1.0 - w, CfgFormula::Standard).unwrap();
            let lit = cfg_combine(&c, &u, w, CfgFormula::PaperLiteral).unwrap();
            assert!(std.max_abs_diff(&lit) < 1e-12);
        }
    }

    /// The exact velocity field of a point-mass data distribution at `z0`.
    struct PointMass {
        z0: Tensor<f64>,
        schedule: NoiseSchedule<f64>,
        calls: Cell<usize>,
    }

    impl VelocityModel<f64> for PointMass {
        fn predict(&self, z_t: &Tensor<f64>, ts: &[usize], _c: &[Condition<f64>]) -> Result<Tensor<f64>> {
            self.calls.set(self.calls.get() + 1);
            let (a, s) = self.schedule.coeffs(ts[0])?;
            let n = self.z0.numel();
            Ok(Tensor::from_fn(z_t.shape(), |i| {
                let x0 = self.z0.data()[i % n];
                let eps = (z_t.data()[i] - a * x0) / s;
                a * eps - s * x0
            }))
        }
    }

    fn cond() -> Condition<f64> {
        Condition {
            global: GlobalCond::FromLocal,
            local: Some(hash_embed(&["x"], 4, 0).unwrap()),
        }
    }

    #[test]
    fn exact_velocity_recovers_the_data_point() {
        let sched = make_cosine_schedule(1000).unwrap();
        let oracle = PointMass {
            z0: rand_tensor(9, 2 * 3 * 3).reshape(&[2, 3, 3]).unwrap(),
            schedule: sched.clone(),
            calls: Cell::new(0),
        };
        let cfg = SamplerConfig {
            guidance_scale: 1.0,
            ..Default::default()
        };
        let z = sample(&oracle, &sched, &cfg, &cond(), &[2, 3, 3]).unwrap();
        assert!(z.max_abs_diff(&oracle.z0) < 1e-5);
        assert_eq!(oracle.calls.get(), 2 * 200);
    }

    #[test]
    fn call_count_matches_steps() {
        let sched = make_cosine_schedule(100).unwrap();
        for steps in [1, 7, 100] {
            let oracle = PointMass {
                z0: Tensor::zeros(&[1, 2, 2]),
                schedule: sched.clone(),
                calls: Cell::new(0),
            };
            let cfg = SamplerConfig {
                num_sampling_steps: steps,
                ..Default::default()
            };
            sample_batch(&oracle, &sched, &cfg, &[cond(), cond()], &[1, 2, 2], &[1, 2]).unwrap();
            assert_eq!(oracle.calls.get(), 2 * steps);
        }
    }

    #[test]
    fn config_validation() {
        let bad = SamplerConfig {
            num_sampling_steps: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let neg = SamplerConfig {
            guidance_scale: -1.0,
            ..Default::default()
        };
        assert!(neg.validate().is_err());
    }
}
