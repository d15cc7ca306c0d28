//! v-objective training: loss and gradients, AdamW with linear warmup,
//! validation-driven checkpoint selection.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::conditioning::{cfg_dropout, Condition, DropoutConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::{per_example, q_sample, v_target, NoiseSchedule};
use crate::tensor::{Latent, Tensor};
use crate::unet::{Checkpoint, OptimizerSnapshot, UNet, VelocityModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub cfg_dropout: DropoutConfig,
    pub validate_every: u64,
    pub seed: u64,
    pub precision: Precision,
    pub adam: AdamConfig,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            warmup_steps: 2000,
            batch_size: 8,
            total_steps: 5000,
            cfg_dropout: DropoutConfig {
                p: 0.1,
                independent: false,
            },
            validate_every: 500,
            seed: 0,
            precision: Precision::F32,
            adam: AdamConfig::default(),
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            p.push("learning_rate must be positive".into());
        }
        if self.batch_size == 0 {
            p.push("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout.p) {
            p.push("cfg_dropout.p must lie in [0, 1]".into());
        }
        if self.validate_every == 0 {
            p.push("validate_every must be positive".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            p.push("adam betas must lie in [0, 1)".into());
        }
        if !(a.eps > 0.0) || a.weight_decay < 0.0 {
            p.push("adam eps must be positive and weight_decay non-negative".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                p.push("grad_clip must be positive".into());
            }
        }
        p
    }
}

/// Linear warmup from 0 to `learning_rate` over `warmup_steps`, then constant.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        cfg.learning_rate
    } else {
        cfg.learning_rate * step as f64 / cfg.warmup_steps as f64
    }
}

/// Per-parameter AdamW moments.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for OptimizerState<T> {
    fn default() -> Self {
        OptimizerState {
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> OptimizerState<T> {
    pub fn snapshot(&self) -> OptimizerSnapshot<T> {
        OptimizerSnapshot {
            step: self.step,
            first: self.first.clone(),
            second: self.second.clone(),
        }
    }

    pub fn from_snapshot(s: OptimizerSnapshot<T>) -> Self {
        OptimizerState {
            step: s.step,
            first: s.first,
            second: s.second,
        }
    }
}

/// One decoupled-weight-decay Adam update over named parameters.
///
/// Parameters without a gradient entry are left untouched.
pub fn adamw_step<'a, T: Scalar + 'a>(
    params: impl IntoIterator<Item = (&'a String, &'a mut Tensor<T>)>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let params: Vec<(&String, &mut Tensor<T>)> = params.into_iter().collect();
    for (name, p) in &params {
        if let Some(g) = grads.get(*name) {
            if g.shape() != p.shape() {
                return Err(Error::shape(format!("gradient for {name}: {:?} vs {:?}", g.shape(), p.shape())));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let bc1 = T::of(1.0 - cfg.beta1.powi(t));
    let bc2 = T::of(1.0 - cfg.beta2.powi(t));
    let lr_t = T::of(lr);
    let decay = T::of(1.0 - lr * cfg.weight_decay);
    let eps = T::of(cfg.eps);
    for (name, p) in params {
        let Some(g) = grads.get(name) else { continue };
        let m = state.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        if m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::shape(format!("optimizer moments for {name} have the wrong shape")));
        }
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w = *w * decay - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .map(|g| g.norm_sq().to_f64_lossy())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / (norm + 1e-12));
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

/// Per-example timesteps (uniform in `1..=T`) and unit Gaussian noise.
pub fn sample_noise<T: Scalar, R: Rng + ?Sized>(
    batch: usize,
    latent_shape: &[usize],
    num_timesteps: usize,
    rng: &mut R,
) -> (Vec<usize>, Tensor<T>) {
    let ts = (0..batch).map(|_| rng.random_range(1..=num_timesteps)).collect();
    let mut shape = vec![batch];
    shape.extend_from_slice(latent_shape);
    let eps = Tensor::from_fn(&shape, |_| T::of(rng.sample::<f64, _>(StandardNormal)));
    (ts, eps)
}

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor<T>>,
}

/// Mean squared error between the v-target and the model prediction, with
/// exact gradients, for given timesteps and noise.
pub fn ldm_loss_with<T: Scalar>(
    model: &UNet<T>,
    z0: &Tensor<T>,
    conds: &[Condition<T>],
    ts: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule<T>,
) -> Result<LossOutput<T>> {
    if conds.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let z_t = per_example(z0, eps, ts, |a, b, t| q_sample(a, b, t, schedule))?;
    let target = per_example(z0, eps, ts, |a, b, t| v_target(a, b, t, schedule))?;
    let mut g = Graph::new();
    let pred = model.forward_graph(&mut g, &z_t, ts, conds)?;
    let loss = g.mse(pred, target);
    let value = g.value(loss).data()[0].to_f64_lossy();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss = {value}")));
    }
    let grads = g.param_grads(&g.backward(loss));
    Ok(LossOutput { loss: value, grads })
}

/// Samples timesteps and noise from `rng`, then evaluates [`ldm_loss_with`].
pub fn ldm_loss<T: Scalar, R: Rng + ?Sized>(
    model: &UNet<T>,
    z0: &Tensor<T>,
    conds: &[Condition<T>],
    schedule: &NoiseSchedule<T>,
    rng: &mut R,
) -> Result<LossOutput<T>> {
    let (ts, eps) = sample_noise(conds.len(), &z0.shape()[1..], schedule.num_steps(), rng);
    ldm_loss_with(model, z0, conds, &ts, &eps, schedule)
}

/// Loss of [`ldm_loss_with`] by a forward pass only.
pub fn ldm_loss_value<T: Scalar>(
    model: &UNet<T>,
    z0: &Tensor<T>,
    conds: &[Condition<T>],
    ts: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule<T>,
) -> Result<f64> {
    let z_t = per_example(z0, eps, ts, |a, b, t| q_sample(a, b, t, schedule))?;
    let target = per_example(z0, eps, ts, |a, b, t| v_target(a, b, t, schedule))?;
    let pred = model.predict(&z_t, ts, conds)?;
    let diff = pred.sub(&target)?;
    Ok(diff.norm_sq().to_f64_lossy() / diff.numel() as f64)
}

/// Agreement between analytic and central-difference gradients for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGradientError {
    pub name: String,
    pub numel: usize,
    /// `‖g_fd − g_analytic‖ / max(‖g_fd‖, ‖g_analytic‖)`; zero when both vanish.
    pub relative_error: f64,
    pub fd_norm: f64,
}

/// Central finite differences with step `h` for every element of every parameter.
pub fn gradient_check<T: Scalar>(
    model: &UNet<T>,
    z0: &Tensor<T>,
    conds: &[Condition<T>],
    ts: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule<T>,
    h: f64,
) -> Result<Vec<BlockGradientError>> {
    let analytic = ldm_loss_with(model, z0, conds, ts, eps, schedule)?.grads;
    let mut probe = model.clone();
    let names: Vec<String> = model.weights().iter().map(|(n, _)| n.clone()).collect();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let n = model.weights().get(&name).map_or(0, |t| t.numel());
        let mut fd = Vec::with_capacity(n);
        for j in 0..n {
            let orig = probe.weights().get(&name).expect("named parameter").data()[j];
            let mut at = |delta: f64| -> Result<f64> {
                probe.weights_mut().get_mut(&name).expect("named parameter").data_mut()[j] = orig + T::of(delta);
                ldm_loss_value(&probe, z0, conds, ts, eps, schedule)
            };
            let (lp, lm) = (at(h)?, at(-h)?);
            probe.weights_mut().get_mut(&name).expect("named parameter").data_mut()[j] = orig;
            fd.push((lp - lm) / (2.0 * h));
        }
        let an: Vec<f64> = analytic
            .get(&name)
            .map(|g| g.data().iter().map(|v| v.to_f64_lossy()).collect())
            .unwrap_or_else(|| vec![0.0; n]);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = fd.iter().zip(&an).map(|(a, b)| a - b).collect();
        let scale = norm(&fd).max(norm(&an));
        out.push(BlockGradientError {
            name,
            numel: n,
            relative_error: if scale == 0.0 { 0.0 } else { norm(&diff) / scale },
            fd_norm: norm(&fd),
        });
    }
    Ok(out)
}

/// A training pair; the condition is pre-dropout.
#[derive(Clone, Debug)]
pub struct TrainExample<T> {
    pub latent: Latent<T>,
    pub condition: Condition<T>,
}

/// One validation record. Serialized one JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    /// Mean training loss since the previous record.
    pub loss: f64,
    /// Absent without a validator.
    pub fad: Option<f64>,
    /// Absent without a validator or label probe.
    pub kl: Option<f64>,
    pub checkpoint_id: String,
}

/// Missing values rank after present ones.
fn metric_order(a: Option<f64>, b: Option<f64>) -> std::cmp::Ordering {
    match (a, b) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    }
}

/// Index of the best record: lowest FAD, ties broken by KL, then by order.
pub fn select_best(log: &[MetricRecord]) -> Option<usize> {
    (0..log.len()).min_by(|&a, &b| {
        let (ra, rb) = (&log[a], &log[b]);
        metric_order(ra.fad, rb.fad)
            .then(metric_order(ra.kl, rb.kl))
            .then(a.cmp(&b))
    })
}

/// Computes (FAD, KL) for the model at a validation point.
pub trait Validator<T: Scalar> {
    fn validate(&mut self, model: &UNet<T>, step: u64) -> Result<(f64, Option<f64>)>;
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// Non-finite loss at this step; the returned weights are the last good ones.
    Diverged { step: u64 },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub status: TrainStatus,
    pub last: Checkpoint<T>,
    pub best: Option<Checkpoint<T>>,
    pub metric_log: Vec<MetricRecord>,
    pub loss_history: Vec<f64>,
    pub examples_seen: u64,
    pub null_conditions: u64,
}

impl<T> TrainOutcome<T> {
    pub fn null_fraction(&self) -> f64 {
        self.null_conditions as f64 / self.examples_seen.max(1) as f64
    }
}

/// Mean of the first and last `window` entries.
pub fn smoothed_endpoints(history: &[f64], window: usize) -> Option<(f64, f64)> {
    let w = window.min(history.len());
    if w == 0 {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&history[..w]), mean(&history[history.len() - w..])))
}

/// Runs the training loop from `model` (and optional resumed optimizer state)
/// until `config.total_steps` updates have been applied.
///
/// Randomness for step `k` comes from a stream keyed by `(seed, k)`, so a run
/// resumed from a checkpoint replays the same batches as an uninterrupted one.
/// `on_checkpoint` sees every validation record with its checkpoint.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    dataset: &[TrainExample<T>],
    mut model: UNet<T>,
    schedule: &NoiseSchedule<T>,
    resume: Option<OptimizerState<T>>,
    mut validator: Option<&mut dyn Validator<T>>,
    on_checkpoint: &mut dyn FnMut(&MetricRecord, &Checkpoint<T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let mut opt = resume.unwrap_or_default();
    let snapshot = |model: &UNet<T>, opt: &OptimizerState<T>| Checkpoint {
        config: model.config().clone(),
        schedule: schedule.spec(),
        step: opt.step,
        weights: model.weights().clone(),
        optimizer: Some(opt.snapshot()),
    };
    let mut outcome = TrainOutcome {
        status: TrainStatus::Completed,
        last: snapshot(&model, &opt),
        best: None,
        metric_log: Vec::new(),
        loss_history: Vec::new(),
        examples_seen: 0,
        null_conditions: 0,
    };
    let mut since_record = Vec::new();
    while opt.step < config.total_steps {
        let step = opt.step;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(step);
        let mut z0 = Vec::with_capacity(config.batch_size);
        let mut conds = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let ex = &dataset[rng.random_range(0..dataset.len())];
            let c = cfg_dropout(ex.condition.clone(), config.cfg_dropout, &mut rng)?;
            outcome.null_conditions += c.is_null() as u64;
            z0.push(ex.latent.clone());
            conds.push(c);
        }
        outcome.examples_seen += config.batch_size as u64;
        let z0 = Tensor::stack(&z0)?;
        let mut out = match ldm_loss(&model, &z0, &conds, schedule, &mut rng) {
            Ok(o) => o,
            Err(Error::NonFinite(_)) => {
                outcome.status = TrainStatus::Diverged { step: step + 1 };
                break;
            }
            Err(e) => return Err(e),
        };
        if let Some(c) = config.grad_clip {
            clip_grad_norm(&mut out.grads, c);
        }
        let lr = lr_at(step + 1, config);
        let before = model.weights().clone();
        adamw_step(model.weights_mut().iter_mut(), &out.grads, &mut opt, lr, &config.adam)?;
        if model.weights().iter().any(|(_, t)| !t.is_finite()) {
            *model.weights_mut() = before;
            opt.step -= 1;
            outcome.status = TrainStatus::Diverged { step: step + 1 };
            break;
        }
        outcome.loss_history.push(out.loss);
        since_record.push(out.loss);
        if opt.step.is_multiple_of(config.validate_every) || opt.step == config.total_steps {
            let ck = snapshot(&model, &opt);
            let (fad, kl) = match validator.as_deref_mut() {
                Some(v) => {
                    let (f, k) = v.validate(&model, opt.step)?;
                    (Some(f), k)
                }
                None => (None, None),
            };
            let record = MetricRecord {
                step: opt.step,
                loss: since_record.iter().sum::<f64>() / since_record.len().max(1) as f64,
                fad,
                kl,
                checkpoint_id: ck.id(),
            };
            since_record.clear();
            on_checkpoint(&record, &ck)?;
            outcome.metric_log.push(record);
            if select_best(&outcome.metric_log) == Some(outcome.metric_log.len() - 1) {
                outcome.best = Some(ck);
            }
        }
    }
    outcome.last = snapshot(&model, &opt);
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{hash_embed, GlobalCond};
    use crate::schedule::make_cosine_schedule;
    use crate::unet::{GlobalMode, UNetConfig};

    fn params(w: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::from_vec(&[1], vec![w]).unwrap())])
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(1000, &c), 5e-5);
        assert_eq!(lr_at(2000, &c), 1e-4);
        assert_eq!(lr_at(4000, &c), 1e-4);
    }

    #[test]
    fn adamw_zero_gradient_fixed_point() {
        let mut p = params(0.7);
        let g = params(0.0);
        let mut st = OptimizerState::default();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(p.iter_mut(), &g, &mut st, 0.1, &cfg).unwrap();
        assert_eq!(p["w"].data()[0], 0.7);
    }

    #[test]
    fn adamw_first_step_matches_hand_computation() {
        let mut p = params(1.0);
        let g = params(1.0);
        let mut st = OptimizerState::default();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(p.iter_mut(), &g, &mut st, 0.1, &cfg).unwrap();
        // m = 0.1, v = 0.001; bias-corrected m̂ = 1, v̂ = 1.
        let m_hat = (0.1f64 * 1.0) / (1.0 - 0.9);
        let v_hat = (0.001f64 * 1.0) / (1.0 - 0.999);
        let want = 1.0 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p["w"].data()[0] - want).abs() < 1e-15);
        assert!((p["w"].data()[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn adamw_decoupled_decay() {
        let mut p = params(2.0);
        let g = params(0.0);
        let mut st = OptimizerState::default();
        let cfg = AdamConfig {
            weight_decay: 0.01,
            ..Default::default()
        };
        adamw_step(p.iter_mut(), &g, &mut st, 0.1, &cfg).unwrap();
        assert!((p["w"].data()[0] - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn adamw_rejects_shape_mismatch() {
        let mut p = params(1.0);
        let g = BTreeMap::from([("w".to_string(), Tensor::<f64>::zeros(&[2]))]);
        let mut st = OptimizerState::default();
        assert!(adamw_step(p.iter_mut(), &g, &mut st, 0.1, &AdamConfig::default()).is_err());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = BTreeMap::from([
            ("a".to_string(), Tensor::from_vec(&[2], vec![3.0f64, 4.0]).unwrap()),
            ("b".to_string(), Tensor::from_vec(&[1], vec![12.0]).unwrap()),
        ]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 13.0);
        let n: f64 = g.values().map(|t| t.norm_sq()).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn best_selection_orders_by_fad_then_kl() {
        let rec = |step, fad: Option<f64>, kl: Option<f64>| MetricRecord {
            step,
            loss: 0.0,
            fad,
            kl,
            checkpoint_id: String::new(),
        };
        let log = vec![
            rec(1, Some(3.0), Some(1.0)),
            rec(2, Some(2.0), Some(0.9)),
            rec(3, Some(2.0), Some(0.5)),
            rec(4, Some(2.0), Some(0.5)),
            rec(5, None, Some(0.1)),
            rec(6, Some(2.0), None),
        ];
        assert_eq!(select_best(&log), Some(2));
        assert_eq!(select_best(&log[4..]), Some(1));
        assert_eq!(select_best(&[]), None);
    }

    fn tiny() -> (UNet<f64>, NoiseSchedule<f64>, Vec<TrainExample<f64>>) {
        let cfg = UNetConfig {
            in_channels: 1,
            out_channels: 1,
            latent_height: 4,
            latent_width: 4,
            base_channels: 4,
            channel_multipliers: vec![1],
            attention_levels: vec![0],
            mid_attention: false,
            num_heads: 1,
            head_dim: 4,
            ff_mult: 1,
            local_dim: 4,
            global_mode: GlobalMode::Mean,
            provider_global_dim: 0,
            time_embed_dim: 4,
            groupnorm_groups: 2,
        };
        let model = UNet::init(cfg, 0).unwrap();
        let sched = make_cosine_schedule(50).unwrap();
        let data = (0..4)
            .map(|i| TrainExample {
                latent: Tensor::from_fn(&[1, 4, 4], |j| ((i * 16 + j) as f64 * 0.3).sin()),
                condition: Condition {
                    global: GlobalCond::FromLocal,
                    local: Some(hash_embed(&[format!("w{i}")], 4, 0).unwrap()),
                },
            })
            .collect();
        (model, sched, data)
    }

    #[test]
    fn zero_steps_is_a_no_op() {
        let (model, sched, data) = tiny();
        let cfg = TrainConfig {
            total_steps: 0,
            ..Default::default()
        };
        let out = train(&cfg, &data, model.clone(), &sched, None, None, &mut |_, _| Ok(())).unwrap();
        assert_eq!(&out.last.weights, model.weights());
        assert!(out.metric_log.is_empty());
        assert!(train(&cfg, &[], model, &sched, None, None, &mut |_, _| Ok(())).is_err());
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let (model, sched, data) = tiny();
        let cfg = TrainConfig {
            total_steps: 6,
            validate_every: 3,
            batch_size: 2,
            learning_rate: 1e-3,
            warmup_steps: 2,
            ..Default::default()
        };
        let run = |m: UNet<f64>| train(&cfg, &data, m, &sched, None, None, &mut |_, _| Ok(())).unwrap();
        let a = run(model.clone());
        let b = run(model.clone());
        assert_eq!(a.metric_log, b.metric_log);
        assert_eq!(a.last, b.last);
        assert_eq!(a.metric_log.len(), 2);
        assert_eq!(a.last.step, 6);

        let half = TrainConfig {
            total_steps: 3,
            ..cfg.clone()
        };
        let first = train(&half, &data, model.clone(), &sched, None, None, &mut |_, _| Ok(())).unwrap();
        let resumed_model = UNet::new(first.last.config.clone(), first.last.weights.clone()).unwrap();
        let resume = OptimizerState::from_snapshot(first.last.optimizer.clone().unwrap());
        let second = train(&cfg, &data, resumed_model, &sched, Some(resume), None, &mut |_, _| Ok(())).unwrap();
        assert_eq!(second.last.step, 6);
        assert_eq!(second.last.weights, a.last.weights);
    }

    #[test]
    fn divergence_keeps_last_good_weights() {
        let (model, sched, data) = tiny();
        let cfg = TrainConfig {
            total_steps: 5,
            learning_rate: 1e300,
            warmup_steps: 0,
            grad_clip: None,
            ..Default::default()
        };
        let out = train(&cfg, &data, model, &sched, None, None, &mut |_, _| Ok(())).unwrap();
        let TrainStatus::Diverged { step } = out.status else {
            panic!("expected divergence");
        };
        assert!(out.last.weights.iter().all(|(_, t)| t.is_finite()));
        assert_eq!(out.last.step, step - 1);
    }
}
