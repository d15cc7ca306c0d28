//! A tiny run through training, sampling and evaluation.

use ttm_core::conditioning::{EmbeddingProvider, HashProvider};
use ttm_core::evaluation::{LinearProbe, ToyFeatureExtractor};
use ttm_core::pipeline::PromptSet;
use ttm_core::sampling::SamplerConfig;
use ttm_core::schedule::make_cosine_schedule;
use ttm_core::synthdata::{generate_dataset, DatasetSpec, Split};
use ttm_core::training::{train, TrainConfig, TrainExample, TrainStatus};
use ttm_core::unet::{condition_for, GlobalMode, UNet, UNetConfig};

fn config() -> UNetConfig {
    UNetConfig {
        in_channels: 4,
        out_channels: 4,
        latent_height: 16,
        latent_width: 16,
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        attention_levels: vec![1],
        mid_attention: false,
        num_heads: 1,
        head_dim: 8,
        ff_mult: 2,
        local_dim: 16,
        global_mode: GlobalMode::Mean,
        provider_global_dim: 0,
        time_embed_dim: 16,
        groupnorm_groups: 4,
    }
}

#[test]
fn train_sample_evaluate() {
    let ds = generate_dataset(&DatasetSpec::new(1, 64, 8, 8)).unwrap();
    let provider = HashProvider {
        local_dim: 16,
        global_dim: None,
        seed: 0,
    };
    let p: &dyn EmbeddingProvider<f32> = &provider;
    let model_cfg = config();
    let examples: Vec<TrainExample<f32>> = ds
        .split(Split::Train)
        .map(|e| TrainExample {
            latent: e.latent.clone(),
            condition: condition_for(&model_cfg, p, &e.caption).unwrap(),
        })
        .collect();
    let schedule = make_cosine_schedule::<f32>(1000).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        warmup_steps: 10,
        batch_size: 4,
        total_steps: 150,
        validate_every: 150,
        ..Default::default()
    };
    let mut saved = Vec::new();
    let net = UNet::init(model_cfg.clone(), 0).unwrap();
    let out = train(&cfg, &examples, net, &schedule, None, None, &mut |rec, ck| {
        saved.push((rec.step, ck.step));
        Ok(())
    })
    .unwrap();
    assert_eq!(out.status, TrainStatus::Completed);
    assert_eq!(saved, vec![(150, 150)]);
    let h = &out.loss_history;
    let head = h[..20].iter().sum::<f64>() / 20.0;
    let tail = h[h.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "loss {head} -> {tail}");

    let test: Vec<_> = ds.split(Split::Test).collect();
    let prompts = PromptSet {
        conditions: test.iter().map(|e| condition_for(&model_cfg, p, &e.caption).unwrap()).collect(),
        references: test.iter().map(|e| e.latent.clone()).collect(),
        seeds: (0..test.len() as u64).collect(),
    };
    let sampler = SamplerConfig {
        num_sampling_steps: 5,
        guidance_scale: 3.0,
        ..Default::default()
    };
    let probe = LinearProbe::standard().unwrap();
    let model = UNet::new(out.last.config.clone(), out.last.weights.clone()).unwrap();
    let (gen, report) = prompts
        .evaluate_model(&model, &schedule, &sampler, &ToyFeatureExtractor::standard(), Some(&probe), 4)
        .unwrap();
    assert_eq!(gen.len(), 8);
    assert!(gen.iter().all(|g| g.is_finite() && g.shape() == [4, 16, 16]));
    assert!(report.fad.is_finite() && report.fad >= 0.0);
    assert!(report.kl.unwrap() >= 0.0);
    assert_eq!(report.n_generated, 8);
}
