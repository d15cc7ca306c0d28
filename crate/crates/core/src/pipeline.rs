//! Glue between sampling and evaluation: chunked generation over a prompt
//! set and a validator that scores a model by sampling.

use crate::conditioning::Condition;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport, KlDirection, KlRequest, LinearProbe, ToyFeatureExtractor};
use crate::sampling::{sample_batch, SamplerConfig};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::Latent;
use crate::training::Validator;
use crate::unet::{UNet, VelocityModel};

/// Samples one latent per condition in batches of at most `chunk`.
pub fn generate<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule<T>,
    sampler: &SamplerConfig,
    conds: &[Condition<T>],
    seeds: &[u64],
    latent_shape: &[usize],
    chunk: usize,
) -> Result<Vec<Latent<T>>> {
    let mut out = Vec::with_capacity(conds.len());
    for (c, s) in conds.chunks(chunk.max(1)).zip(seeds.chunks(chunk.max(1))) {
        let z = sample_batch(model, schedule, sampler, c, latent_shape, s)?;
        out.extend((0..c.len()).map(|i| z.index_axis0(i)));
    }
    Ok(out)
}

/// Prompts with their reference latents; generated sample `i` is paired with `references[i]`.
#[derive(Clone, Debug)]
pub struct PromptSet<T> {
    pub conditions: Vec<Condition<T>>,
    pub references: Vec<Latent<T>>,
    pub seeds: Vec<u64>,
}

impl<T: Scalar> PromptSet<T> {
    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    /// Samples the prompt set with `model` and scores it against the
    /// references; KL is included when a probe is supplied.
    pub fn evaluate_model<M: VelocityModel<T> + ?Sized>(
        &self,
        model: &M,
        schedule: &NoiseSchedule<T>,
        sampler: &SamplerConfig,
        extractor: &ToyFeatureExtractor,
        probe: Option<&LinearProbe>,
        chunk: usize,
    ) -> Result<(Vec<Latent<T>>, EvalReport)> {
        let Some(first) = self.references.first() else {
            return Err(Error::invalid("empty prompt set"));
        };
        let shape = first.shape().to_vec();
        let gen = generate(model, schedule, sampler, &self.conditions, &self.seeds, &shape, chunk)?;
        let pairs: Vec<usize> = (0..gen.len()).collect();
        let kl = probe.map(|probe| KlRequest {
            probe,
            pairs: &pairs,
            direction: KlDirection::RefGen,
        });
        let report = evaluate(extractor, &gen, &self.references, kl)?;
        Ok((gen, report))
    }
}

/// Scores checkpoints during training by sampling a fixed prompt set.
pub struct SampleValidator<T> {
    pub prompts: PromptSet<T>,
    pub schedule: NoiseSchedule<T>,
    pub sampler: SamplerConfig,
    pub extractor: ToyFeatureExtractor,
    pub probe: Option<LinearProbe>,
    pub chunk: usize,
}

impl<T: Scalar> Validator<T> for SampleValidator<T> {
    fn validate(&mut self, model: &UNet<T>, _step: u64) -> Result<(f64, Option<f64>)> {
        let (_, r) = self.prompts.evaluate_model(
            model,
            &self.schedule,
            &self.sampler,
            &self.extractor,
            self.probe.as_ref(),
            self.chunk,
        )?;
        Ok((r.fad, r.kl))
    }
}
