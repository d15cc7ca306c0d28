//! The denoiser `v̂ = model(z_t, t, global, local)`.
//!
//! An encoder–decoder UNet: ResNet blocks whose second normalization is
//! FiLM-modulated by the time embedding concatenated with a projected global
//! embedding, and spatial-transformer blocks that cross-attend from spatial
//! positions to the local token embeddings.

mod checkpoint;
mod config;
mod weights;

use std::collections::{BTreeMap, HashMap};

pub use checkpoint::{Checkpoint, OptimizerSnapshot, CHECKPOINT_VERSION};
pub use config::{GlobalMode, UNetConfig};
pub use weights::{schema, Init, ParamSpec, UNetWeights};

use crate::autograd::{Graph, Var};
use crate::conditioning::{Condition, EmbeddingProvider, GlobalCond, LocalEmbeddings};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Latent, Tensor};

/// Per-channel FiLM modulation `h·gamma + beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct FiLMParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// The condition a model with `config` expects for `prompt`.
pub fn condition_for<T: Scalar>(
    config: &UNetConfig,
    provider: &dyn EmbeddingProvider<T>,
    prompt: &str,
) -> Result<Condition<T>> {
    if provider.local_dim() != config.local_dim {
        return Err(Error::Config(format!(
            "provider {:?} gives {}-wide local embeddings, model expects {}",
            provider.name(),
            provider.local_dim(),
            config.local_dim
        )));
    }
    let local = provider.local(prompt)?;
    let global = match config.global_mode {
        GlobalMode::None => GlobalCond::Null,
        GlobalMode::Mean | GlobalMode::Sap => GlobalCond::FromLocal,
        GlobalMode::Provider => {
            let g = provider.global(prompt)?.ok_or_else(|| {
                Error::Config(format!("provider {:?} has no global encoder", provider.name()))
            })?;
            if g.dim() != config.provider_global_dim {
                return Err(Error::Config(format!(
                    "provider global width {} vs model {}",
                    g.dim(),
                    config.provider_global_dim
                )));
            }
            GlobalCond::Given(g)
        }
    };
    Ok(Condition {
        global,
        local: Some(local),
    })
}

/// Sinusoidal features of a timestep: `dim/2` sines followed by `dim/2`
/// cosines at geometrically spaced frequencies.
pub fn time_embedding<T: Scalar>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = T::of(arg.sin());
        out[half + i] = T::of(arg.cos());
    }
    out
}

/// Inserts parameters into a graph on first use.
struct Params<'w, T> {
    weights: &'w UNetWeights<T>,
    vars: HashMap<String, Var>,
}

impl<'w, T: Scalar> Params<'w, T> {
    fn new(weights: &'w UNetWeights<T>) -> Self {
        Params {
            weights,
            vars: HashMap::new(),
        }
    }

    fn get(&mut self, g: &mut Graph<T>, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let t = self
            .weights
            .get(name)
            .unwrap_or_else(|e| panic!("schema-checked weights lack {name}: {e}"))
            .clone();
        let v = g.param(name, t);
        self.vars.insert(name.to_string(), v);
        v
    }

    fn linear(&mut self, g: &mut Graph<T>, x: Var, p: &str, bias: bool) -> Var {
        let w = self.get(g, &format!("{p}.weight"));
        let b = bias.then(|| self.get(g, &format!("{p}.bias")));
        g.linear(x, w, b)
    }

    fn conv(&mut self, g: &mut Graph<T>, x: Var, p: &str, stride: usize, pad: usize) -> Var {
        let w = self.get(g, &format!("{p}.weight"));
        let b = self.get(g, &format!("{p}.bias"));
        g.conv2d(x, w, Some(b), stride, pad)
    }

    fn norm(&mut self, g: &mut Graph<T>, x: Var, p: &str, groups: usize) -> Var {
        let n = g.group_norm(x, groups);
        let s = self.get(g, &format!("{p}.scale"));
        let b = self.get(g, &format!("{p}.shift"));
        g.channel_affine(n, s, Some(b), false)
    }
}

/// Batched conditioning inputs as graph nodes.
struct CondVars {
    /// `[B, M, d_F]` local embeddings (null rows substituted).
    local: Option<Var>,
    mask: Vec<bool>,
    /// `[B, cond_dim]` input of every FiLM projection (after SiLU).
    film_in: Var,
}

/// The denoiser: configuration plus weights.
#[derive(Clone, Debug)]
pub struct UNet<T> {
    config: UNetConfig,
    weights: UNetWeights<T>,
}

/// Anything that predicts `v` for a batch of noisy latents.
pub trait VelocityModel<T: Scalar> {
    /// `z_t` is `[B, C, H, W]`; `ts` and `conds` have `B` entries.
    fn predict(&self, z_t: &Tensor<T>, ts: &[usize], conds: &[Condition<T>]) -> Result<Tensor<T>>;
}

impl<T: Scalar> VelocityModel<T> for UNet<T> {
    fn predict(&self, z_t: &Tensor<T>, ts: &[usize], conds: &[Condition<T>]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, z_t, ts, conds)?;
        Ok(g.value(out).clone())
    }
}

/// Output of a standalone cross-attention evaluation.
#[derive(Clone, Debug)]
pub struct CrossAttentionOutput<T> {
    /// Input plus attention output, `[C, H, W]`.
    pub output: Tensor<T>,
    /// Attention weights `[heads, H·W, M]`.
    pub probs: Vec<T>,
}

impl<T: Scalar> UNet<T> {
    pub fn new(config: UNetConfig, weights: UNetWeights<T>) -> Result<Self> {
        config.validate()?;
        weights.check_schema(&config)?;
        Ok(UNet { config, weights })
    }

    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        let weights = UNetWeights::init(&config, seed)?;
        Ok(UNet { config, weights })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn weights(&self) -> &UNetWeights<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut UNetWeights<T> {
        &mut self.weights
    }

    pub fn into_weights(self) -> UNetWeights<T> {
        self.weights
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.numel()
    }

    fn check_inputs(&self, z_t: &Tensor<T>, ts: &[usize], conds: &[Condition<T>]) -> Result<()> {
        let c = &self.config;
        let want = [c.in_channels, c.latent_height, c.latent_width];
        let s = z_t.shape();
        if s.len() != 4 || s[1..] != want {
            return Err(Error::shape(format!("z_t {s:?}, model expects [B, {want:?}]")));
        }
        if s[0] == 0 || ts.len() != s[0] || conds.len() != s[0] {
            return Err(Error::shape(format!(
                "batch {} with {} timesteps and {} conditions",
                s[0],
                ts.len(),
                conds.len()
            )));
        }
        for (i, cond) in conds.iter().enumerate() {
            if let Some(l) = &cond.local {
                if l.dim() != c.local_dim {
                    return Err(Error::shape(format!(
                        "condition {i}: local width {} vs d_F {}",
                        l.dim(),
                        c.local_dim
                    )));
                }
                if l.num_valid() == 0 {
                    return Err(Error::EmptyMask);
                }
            }
            match (&cond.global, c.global_mode) {
                (GlobalCond::Given(gl), GlobalMode::Provider) if gl.dim() != c.provider_global_dim => {
                    return Err(Error::shape(format!(
                        "condition {i}: global width {} vs d_G {}",
                        gl.dim(),
                        c.provider_global_dim
                    )))
                }
                (GlobalCond::Given(_), m) if m != GlobalMode::Provider && m != GlobalMode::None => {
                    return Err(Error::invalid(format!(
                        "condition {i}: provider global given to a {m:?}-pooling model"
                    )))
                }
                (GlobalCond::FromLocal, GlobalMode::Provider) => {
                    return Err(Error::invalid(format!(
                        "condition {i}: provider-mode model needs a given global embedding"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn condition_vars(&self, g: &mut Graph<T>, p: &mut Params<'_, T>, ts: &[usize], conds: &[Condition<T>]) -> CondVars {
        let c = &self.config;
        let bsz = conds.len();
        let te = c.time_embed_dim;

        let sin: Vec<T> = ts.iter().flat_map(|&t| time_embedding::<T>(t, te)).collect();
        let sin = g.constant(Tensor::from_vec(&[bsz, te], sin).unwrap());
        let h = p.linear(g, sin, "time.lin1", true);
        let h = g.silu(h);
        let temb = p.linear(g, h, "time.lin2", true);

        // Raw local rows before null substitution; dropped entries hold a
        // single zero row so pooling stays well defined.
        let m = conds
            .iter()
            .filter_map(|cd| cd.local.as_ref().map(LocalEmbeddings::num_tokens))
            .max()
            .unwrap_or(1);
        let d = c.local_dim;
        let mut rows = vec![T::zero(); bsz * m * d];
        let mut mask = vec![false; bsz * m];
        let mut drop_local = vec![false; bsz];
        for (bi, cd) in conds.iter().enumerate() {
            match &cd.local {
                Some(l) => {
                    rows[bi * m * d..][..l.num_tokens() * d].copy_from_slice(l.rows().data());
                    mask[bi * m..][..l.num_tokens()].copy_from_slice(l.mask());
                }
                None => {
                    drop_local[bi] = true;
                    mask[bi * m] = true;
                }
            }
        }
        let raw_local = g.constant(Tensor::from_vec(&[bsz, m, d], rows).unwrap());

        let local = c.uses_local().then(|| {
            let null = p.get(g, "local.null");
            g.replace_rows(raw_local, null, &drop_local)
        });

        let cond = match c.global_mode {
            GlobalMode::None => temb,
            mode => {
                let dg = c.global_dim().unwrap();
                let mut drop_global = vec![false; bsz];
                let raw_global = if mode == GlobalMode::Provider {
                    let mut vals = vec![T::zero(); bsz * dg];
                    for (bi, cd) in conds.iter().enumerate() {
                        match &cd.global {
                            GlobalCond::Given(gl) => vals[bi * dg..][..dg].copy_from_slice(gl.values()),
                            _ => drop_global[bi] = true,
                        }
                    }
                    g.constant(Tensor::from_vec(&[bsz, dg], vals).unwrap())
                } else {
                    for (bi, cd) in conds.iter().enumerate() {
                        drop_global[bi] = matches!(cd.global, GlobalCond::Null) || cd.local.is_none();
                    }
                    if mode == GlobalMode::Mean {
                        g.mean_pool(raw_local, &mask)
                    } else {
                        let w = p.get(g, "sap.w");
                        g.sap_pool(raw_local, w, &mask)
                    }
                };
                let null = p.get(g, "global.null");
                let gsel = g.replace_rows(raw_global, null, &drop_global);
                let gproj = p.linear(g, gsel, "global.proj", true);
                g.concat(temb, gproj)
            }
        };
        let film_in = g.silu(cond);
        CondVars { local, mask, film_in }
    }

    fn res_block(&self, g: &mut Graph<T>, p: &mut Params<'_, T>, x: Var, prefix: &str, cv: &CondVars) -> Var {
        let groups = self.config.groupnorm_groups;
        let h = p.norm(g, x, &format!("{prefix}.norm1"), groups);
        let h = g.silu(h);
        let h = p.conv(g, h, &format!("{prefix}.conv1"), 1, 1);
        let h = g.group_norm(h, groups);
        let gamma = p.linear(g, cv.film_in, &format!("{prefix}.film.gamma"), true);
        let beta = p.linear(g, cv.film_in, &format!("{prefix}.film.beta"), true);
        let h = g.channel_affine(h, gamma, Some(beta), true);
        let h = g.silu(h);
        let h = p.conv(g, h, &format!("{prefix}.conv2"), 1, 1);
        let cin = g.value(x).shape()[1];
        let cout = g.value(h).shape()[1];
        let skip = if cin == cout {
            x
        } else {
            p.conv(g, x, &format!("{prefix}.skip"), 1, 0)
        };
        g.add(h, skip)
    }

    /// Attention sub-layer on tokens `[B, N, C]`: `tokens + W_O·Attn(Q, K, V)`.
    fn cross_attention_tokens(
        &self,
        g: &mut Graph<T>,
        p: &mut Params<'_, T>,
        tokens: Var,
        queries: Var,
        local: Var,
        mask: &[bool],
        prefix: &str,
    ) -> (Var, Var) {
        let q = p.linear(g, queries, &format!("{prefix}.attn.q"), false);
        let k = p.linear(g, local, &format!("{prefix}.attn.k"), false);
        let v = p.linear(g, local, &format!("{prefix}.attn.v"), false);
        let a = g.attention(q, k, v, mask, self.config.num_heads);
        let o = p.linear(g, a, &format!("{prefix}.attn.out"), true);
        (g.add(tokens, o), a)
    }

    fn transformer(&self, g: &mut Graph<T>, p: &mut Params<'_, T>, x: Var, prefix: &str, cv: &CondVars) -> Var {
        let s = g.value(x).shape().to_vec();
        let local = cv.local.expect("transformer without local embeddings");
        let t = g.to_tokens(x);
        let g1 = p.get(g, &format!("{prefix}.ln1.gamma"));
        let b1 = p.get(g, &format!("{prefix}.ln1.beta"));
        let n1 = g.layer_norm(t, g1, b1);
        let (t, _) = self.cross_attention_tokens(g, p, t, n1, local, &cv.mask, prefix);
        let g2 = p.get(g, &format!("{prefix}.ln2.gamma"));
        let b2 = p.get(g, &format!("{prefix}.ln2.beta"));
        let n2 = g.layer_norm(t, g2, b2);
        let f = p.linear(g, n2, &format!("{prefix}.ff.lin1"), true);
        let f = g.silu(f);
        let f = p.linear(g, f, &format!("{prefix}.ff.lin2"), true);
        let t = g.add(t, f);
        g.from_tokens(t, s[2], s[3])
    }

    /// Appends the full forward pass to `g` and returns the `v̂` node.
    pub fn forward_graph(&self, g: &mut Graph<T>, z_t: &Tensor<T>, ts: &[usize], conds: &[Condition<T>]) -> Result<Var> {
        self.check_inputs(z_t, ts, conds)?;
        let c = &self.config;
        let mut p = Params::new(&self.weights);
        let cv = self.condition_vars(g, &mut p, ts, conds);

        let x = g.constant(z_t.clone());
        let mut h = p.conv(g, x, "conv_in", 1, 1);
        let levels = c.num_levels();
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            h = self.res_block(g, &mut p, h, &format!("enc.{l}.res"), &cv);
            if c.has_attention(l) {
                h = self.transformer(g, &mut p, h, &format!("enc.{l}.attn"), &cv);
            }
            skips.push(h);
            if l + 1 < levels {
                h = p.conv(g, h, &format!("enc.{l}.down"), 2, 1);
            }
        }
        h = self.res_block(g, &mut p, h, "mid.res1", &cv);
        if c.mid_attention {
            h = self.transformer(g, &mut p, h, "mid.attn", &cv);
        }
        h = self.res_block(g, &mut p, h, "mid.res2", &cv);
        for l in (0..levels).rev() {
            let skip = skips.pop().unwrap();
            h = g.concat(h, skip);
            h = self.res_block(g, &mut p, h, &format!("dec.{l}.res"), &cv);
            if c.has_attention(l) {
                h = self.transformer(g, &mut p, h, &format!("dec.{l}.attn"), &cv);
            }
            if l > 0 {
                h = g.upsample2x(h);
                h = p.conv(g, h, &format!("dec.{l}.up"), 1, 1);
            }
        }
        h = p.norm(g, h, "out.norm", c.groupnorm_groups);
        h = g.silu(h);
        Ok(p.conv(g, h, "out.conv", 1, 1))
    }

    /// Single-example forward pass: `z_t` is `[C, H, W]`.
    pub fn forward(&self, z_t: &Latent<T>, t: usize, cond: &Condition<T>) -> Result<Latent<T>> {
        let batched = Tensor::stack(std::slice::from_ref(z_t))?;
        let out = self.predict(&batched, &[t], std::slice::from_ref(cond))?;
        Ok(out.index_axis0(0))
    }

    /// Per-block FiLM parameters for one example, keyed by block prefix.
    pub fn film_from_condition(&self, t: usize, cond: &Condition<T>) -> Result<BTreeMap<String, FiLMParams<T>>> {
        let c = &self.config;
        let z = Tensor::zeros(&[1, c.in_channels, c.latent_height, c.latent_width]);
        self.check_inputs(&z, &[t], std::slice::from_ref(cond))?;
        let mut g = Graph::new();
        let mut p = Params::new(&self.weights);
        let cv = self.condition_vars(&mut g, &mut p, &[t], std::slice::from_ref(cond));
        let mut out = BTreeMap::new();
        for spec in schema(c) {
            if let Some(prefix) = spec.name.strip_suffix(".film.gamma.weight") {
                let gamma = p.linear(&mut g, cv.film_in, &format!("{prefix}.film.gamma"), true);
                let beta = p.linear(&mut g, cv.film_in, &format!("{prefix}.film.beta"), true);
                out.insert(
                    prefix.to_string(),
                    FiLMParams {
                        gamma: g.value(gamma).data().iter().map(|&d| d + T::one()).collect(),
                        beta: g.value(beta).data().to_vec(),
                    },
                );
            }
        }
        Ok(out)
    }

    /// Evaluates the attention sub-layer of transformer `prefix` on a single
    /// feature map `h: [C, H, W]` without its pre-norm.
    pub fn cross_attention(&self, prefix: &str, h: &Tensor<T>, f: &LocalEmbeddings<T>) -> Result<CrossAttentionOutput<T>> {
        let s = h.shape();
        if s.len() != 3 {
            return Err(Error::shape(format!("feature map must be [C,H,W], got {s:?}")));
        }
        let wq = self.weights.get(&format!("{prefix}.attn.q.weight"))?;
        if wq.shape()[0] != s[0] {
            return Err(Error::shape(format!("{prefix} expects {} channels, got {}", wq.shape()[0], s[0])));
        }
        if f.dim() != self.config.local_dim {
            return Err(Error::shape(format!("local width {} vs d_F {}", f.dim(), self.config.local_dim)));
        }
        if f.num_valid() == 0 {
            return Err(Error::EmptyMask);
        }
        let mut g = Graph::new();
        let mut p = Params::new(&self.weights);
        let x = g.constant(Tensor::stack(std::slice::from_ref(h))?);
        let tokens = g.to_tokens(x);
        let local = g.constant(f.rows().clone().reshape(&[1, f.num_tokens(), f.dim()])?);
        let (out, attn) = self.cross_attention_tokens(&mut g, &mut p, tokens, tokens, local, f.mask(), prefix);
        let out = g.from_tokens(out, s[1], s[2]);
        Ok(CrossAttentionOutput {
            output: g.value(out).index_axis0(0),
            probs: g.attention_probs(attn).unwrap().to_vec(),
        })
    }
}
