//! Whole-network gradient check of the v-objective in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttm_core::conditioning::{hash_embed, Condition, GlobalCond, GlobalEmbedding, LocalEmbeddings};
use ttm_core::schedule::make_cosine_schedule;
use ttm_core::training::{gradient_check, sample_noise};
use ttm_core::unet::{GlobalMode, UNet, UNetConfig};
use ttm_core::Tensor;

fn config(mode: GlobalMode) -> UNetConfig {
    UNetConfig {
        in_channels: 2,
        out_channels: 2,
        latent_height: 4,
        latent_width: 4,
        base_channels: 4,
        channel_multipliers: vec![1, 2],
        attention_levels: vec![1],
        mid_attention: true,
        num_heads: 2,
        head_dim: 2,
        ff_mult: 2,
        local_dim: 3,
        global_mode: mode,
        provider_global_dim: if mode == GlobalMode::Provider { 3 } else { 0 },
        time_embed_dim: 4,
        groupnorm_groups: 2,
    }
}

/// Initialized weights plus a perturbation, so zero-initialized paths carry gradient.
fn perturbed(cfg: UNetConfig, seed: u64) -> UNet<f64> {
    let mut net = UNet::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in net.weights_mut().iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    net
}

fn padded(tokens: &[&str]) -> LocalEmbeddings<f64> {
    let dense = hash_embed(tokens, 3, 1).unwrap();
    let mut mask = vec![true; tokens.len()];
    *mask.last_mut().unwrap() = false;
    LocalEmbeddings::new(dense.rows().clone(), mask).unwrap()
}

fn check(mode: GlobalMode) {
    let cfg = config(mode);
    assert!(cfg.parameter_count() <= 50_000);
    let net = perturbed(cfg, 11);
    let pooled = || match mode {
        GlobalMode::Provider => GlobalCond::Given(GlobalEmbedding::new(vec![0.3, -0.5, 0.8]).unwrap()),
        GlobalMode::None => GlobalCond::Null,
        _ => GlobalCond::FromLocal,
    };
    let conds = vec![
        Condition {
            global: pooled(),
            local: Some(padded(&["soft", "piano", "pad"])),
        },
        Condition::null(),
        Condition {
            global: GlobalCond::Null,
            local: Some(hash_embed(&["fast", "drums"], 3, 1).unwrap()),
        },
    ];
    let sched = make_cosine_schedule::<f64>(100).unwrap();
    let z0 = Tensor::from_fn(&[3, 2, 4, 4], |i| (i * 37 % 17) as f64 / 8.0 - 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (ts, eps) = sample_noise::<f64, _>(3, &[2, 4, 4], 100, &mut rng);
    let report = gradient_check(&net, &z0, &conds, &ts, &eps, &sched, 1e-4).unwrap();
    assert_eq!(report.len(), net.weights().len());
    for b in &report {
        assert!(b.relative_error < 1e-3, "{mode:?} {}: {:e}", b.name, b.relative_error);
    }
    let silent: Vec<&str> = report.iter().filter(|b| b.fd_norm == 0.0).map(|b| b.name.as_str()).collect();
    assert!(silent.is_empty(), "{mode:?}: parameters without gradient signal: {silent:?}");
}

#[test]
fn sap_mode_gradients_match_finite_differences() {
    check(GlobalMode::Sap);
}

#[test]
fn provider_mode_gradients_match_finite_differences() {
    check(GlobalMode::Provider);
}
