use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{GlobalMode, UNetConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Projection init for attention, global and FiLM-adjacent linears.
const PROJ_STD: f64 = 0.02;

struct SchemaBuilder {
    specs: Vec<ParamSpec>,
}

impl SchemaBuilder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
    }

    fn conv(&mut self, p: &str, cin: usize, cout: usize, k: usize, zero: bool) {
        let init = if zero {
            Init::Zeros
        } else {
            Init::Normal((1.0 / (cin * k * k) as f64).sqrt())
        };
        self.add(format!("{p}.weight"), &[cout, cin, k, k], init);
        self.add(format!("{p}.bias"), &[cout], Init::Zeros);
    }

    fn linear(&mut self, p: &str, cin: usize, cout: usize, init: Init, bias: bool) {
        self.add(format!("{p}.weight"), &[cin, cout], init);
        if bias {
            self.add(format!("{p}.bias"), &[cout], Init::Zeros);
        }
    }

    fn norm(&mut self, p: &str, c: usize) {
        self.add(format!("{p}.scale"), &[c], Init::Ones);
        self.add(format!("{p}.shift"), &[c], Init::Zeros);
    }

    fn res(&mut self, p: &str, cin: usize, cout: usize, cond: usize) {
        self.norm(&format!("{p}.norm1"), cin);
        self.conv(&format!("{p}.conv1"), cin, cout, 3, false);
        self.linear(&format!("{p}.film.gamma"), cond, cout, Init::Zeros, true);
        self.linear(&format!("{p}.film.beta"), cond, cout, Init::Zeros, true);
        self.conv(&format!("{p}.conv2"), cout, cout, 3, false);
        if cin != cout {
            self.conv(&format!("{p}.skip"), cin, cout, 1, false);
        }
    }

    fn transformer(&mut self, p: &str, c: usize, cfg: &UNetConfig) {
        let inner = cfg.inner_dim();
        let ff = cfg.ff_mult * c;
        let proj = Init::Normal(PROJ_STD);
        self.add(format!("{p}.ln1.gamma"), &[c], Init::Ones);
        self.add(format!("{p}.ln1.beta"), &[c], Init::Zeros);
        self.linear(&format!("{p}.attn.q"), c, inner, proj, false);
        self.linear(&format!("{p}.attn.k"), cfg.local_dim, inner, proj, false);
        self.linear(&format!("{p}.attn.v"), cfg.local_dim, inner, proj, false);
        self.linear(&format!("{p}.attn.out"), inner, c, proj, true);
        self.add(format!("{p}.ln2.gamma"), &[c], Init::Ones);
        self.add(format!("{p}.ln2.beta"), &[c], Init::Zeros);
        self.linear(&format!("{p}.ff.lin1"), c, ff, Init::Normal((1.0 / c as f64).sqrt()), true);
        self.linear(&format!("{p}.ff.lin2"), ff, c, proj, true);
    }
}

/// Every parameter of the denoiser, in forward order.
pub fn schema(cfg: &UNetConfig) -> Vec<ParamSpec> {
    let mut b = SchemaBuilder { specs: Vec::new() };
    let te = cfg.time_embed_dim;
    let cd = cfg.cond_dim();
    let lecun = |fan: usize| Init::Normal((1.0 / fan as f64).sqrt());
    b.linear("time.lin1", te, te, lecun(te), true);
    b.linear("time.lin2", te, te, lecun(te), true);
    if let Some(dg) = cfg.global_dim() {
        b.linear("global.proj", dg, te, Init::Normal(PROJ_STD), true);
        b.add("global.null".into(), &[dg], Init::Zeros);
    }
    if cfg.global_mode == GlobalMode::Sap {
        b.add("sap.w".into(), &[cfg.local_dim], Init::Zeros);
    }
    if cfg.uses_local() {
        b.add("local.null".into(), &[cfg.local_dim], Init::Zeros);
    }
    b.conv("conv_in", cfg.in_channels, cfg.base_channels, 3, false);
    let levels = cfg.num_levels();
    let mut ch = cfg.base_channels;
    for l in 0..levels {
        let c = cfg.level_channels(l);
        b.res(&format!("enc.{l}.res"), ch, c, cd);
        if cfg.has_attention(l) {
            b.transformer(&format!("enc.{l}.attn"), c, cfg);
        }
        if l + 1 < levels {
            b.conv(&format!("enc.{l}.down"), c, c, 3, false);
        }
        ch = c;
    }
    b.res("mid.res1", ch, ch, cd);
    if cfg.mid_attention {
        b.transformer("mid.attn", ch, cfg);
    }
    b.res("mid.res2", ch, ch, cd);
    for l in (0..levels).rev() {
        let c = cfg.level_channels(l);
        b.res(&format!("dec.{l}.res"), ch + c, c, cd);
        if cfg.has_attention(l) {
            b.transformer(&format!("dec.{l}.attn"), c, cfg);
        }
        if l > 0 {
            b.conv(&format!("dec.{l}.up"), c, c, 3, false);
        }
        ch = c;
    }
    b.norm("out.norm", ch);
    b.conv("out.conv", ch, cfg.out_channels, 3, true);
    b.specs
}

/// Learnable parameters keyed by hierarchical name.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetWeights<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> UNetWeights<T> {
    /// Initializes every parameter from its schema rule with a seeded RNG.
    pub fn init(cfg: &UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = schema(cfg)
            .into_iter()
            .map(|spec| {
                let t = match spec.init {
                    Init::Zeros => Tensor::zeros(&spec.shape),
                    Init::Ones => Tensor::full(&spec.shape, T::one()),
                    Init::Normal(std) => Tensor::from_fn(&spec.shape, |_| {
                        T::of(std * rng.sample::<f64, _>(StandardNormal))
                    }),
                };
                (spec.name, t)
            })
            .collect();
        Ok(UNetWeights { tensors })
    }

    /// Wraps an existing map after checking it against the schema.
    pub fn from_map(cfg: &UNetConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let w = UNetWeights { tensors };
        w.check_schema(cfg)?;
        Ok(w)
    }

    /// Every schema name present exactly once with the right shape, nothing
    /// extra, all values finite.
    pub fn check_schema(&self, cfg: &UNetConfig) -> Result<()> {
        let specs = schema(cfg);
        let mut problems = Vec::new();
        for spec in &specs {
            match self.tensors.get(&spec.name) {
                None => problems.push(format!("missing {}", spec.name)),
                Some(t) if t.shape() != spec.shape.as_slice() => problems.push(format!(
                    "{}: shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )),
                Some(t) if !t.is_finite() => problems.push(format!("{}: non-finite values", spec.name)),
                _ => {}
            }
        }
        if self.tensors.len() != specs.len() {
            for name in self.tensors.keys() {
                if !specs.iter().any(|s| &s.name == name) {
                    problems.push(format!("unexpected {name}"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::shape(problems.join("; ")))
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> UNetWeights<U> {
        UNetWeights {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Zeroes every FiLM projection (per-block gamma/beta linears).
    pub fn zero_film(&mut self) {
        for (name, t) in self.tensors.iter_mut() {
            if name.contains(".film.") {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}
