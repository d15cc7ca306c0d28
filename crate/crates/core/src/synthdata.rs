//! Procedural caption → latent dataset with a small closed grammar.
//!
//! Each attribute value owns a cosine pattern with its own spatial frequency
//! and orientation; the clean latent is their sum, normalized to unit RMS,
//! and every example adds seeded Gaussian noise on top.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::tokenize;
use crate::error::{Error, Result};
use crate::formats::{read_latent, write_atomic, write_latent};
use crate::scalar::Scalar;
use crate::tensor::{Latent, Tensor};

pub type Attributes = Vec<usize>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub values: Vec<String>,
}

/// Slots plus a template such as `"a {mood} {instrument} track"`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionGrammar {
    pub slots: Vec<Slot>,
    pub template: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Part {
    Word(String),
    Slot(usize),
}

impl Default for CaptionGrammar {
    fn default() -> Self {
        let slot = |name: &str, values: [&str; 4]| Slot {
            name: name.into(),
            values: values.iter().map(|v| v.to_string()).collect(),
        };
        CaptionGrammar {
            slots: vec![
                slot("instrument", ["piano", "guitar", "violin", "drums"]),
                slot("tempo", ["slow", "steady", "fast", "frantic"]),
                slot("mood", ["calm", "bright", "dark", "epic"]),
            ],
            template: "a {mood} {instrument} track with a {tempo} tempo".into(),
        }
    }
}

impl CaptionGrammar {
    fn parts(&self) -> Result<Vec<Part>> {
        let mut parts = Vec::new();
        let mut seen = vec![false; self.slots.len()];
        for word in self.template.split_whitespace() {
            if let Some(name) = word.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
                let i = self
                    .slots
                    .iter()
                    .position(|s| s.name == name)
                    .ok_or_else(|| Error::Config(format!("template names unknown slot {name:?}")))?;
                if seen[i] {
                    return Err(Error::Config(format!("slot {name:?} appears twice")));
                }
                seen[i] = true;
                parts.push(Part::Slot(i));
            } else {
                for t in tokenize(word) {
                    parts.push(Part::Word(t));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("slot {:?} missing from template", self.slots[i].name)));
        }
        Ok(parts)
    }

    /// Checks that every value is a single token and that captions parse back uniquely.
    pub fn validate(&self) -> Result<()> {
        let parts = self.parts()?;
        let words: Vec<&String> = parts
            .iter()
            .filter_map(|p| match p {
                Part::Word(w) => Some(w),
                Part::Slot(_) => None,
            })
            .collect();
        for s in &self.slots {
            if s.values.is_empty() {
                return Err(Error::Config(format!("slot {:?} has no values", s.name)));
            }
            for (i, v) in s.values.iter().enumerate() {
                if tokenize(v) != [v.clone()] {
                    return Err(Error::Config(format!("value {v:?} is not a single lowercase token")));
                }
                if s.values[..i].contains(v) || words.contains(&v) {
                    return Err(Error::Config(format!("value {v:?} is ambiguous")));
                }
            }
        }
        Ok(())
    }

    pub fn num_tuples(&self) -> usize {
        self.slots.iter().map(|s| s.values.len()).product()
    }

    /// Every attribute tuple, in lexicographic order.
    pub fn all_tuples(&self) -> Vec<Attributes> {
        let mut out = vec![vec![]];
        for s in &self.slots {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..s.values.len()).map(move |v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        out
    }

    pub fn caption(&self, attrs: &[usize]) -> Result<String> {
        self.check(attrs)?;
        let words: Vec<String> = self
            .parts()?
            .into_iter()
            .map(|p| match p {
                Part::Word(w) => w,
                Part::Slot(i) => self.slots[i].values[attrs[i]].clone(),
            })
            .collect();
        Ok(words.join(" "))
    }

    fn check(&self, attrs: &[usize]) -> Result<()> {
        if attrs.len() != self.slots.len() || attrs.iter().zip(&self.slots).any(|(&a, s)| a >= s.values.len()) {
            return Err(Error::invalid(format!("attribute tuple {attrs:?} outside the grammar")));
        }
        Ok(())
    }
}

pub fn caption_to_attributes(grammar: &CaptionGrammar, caption: &str) -> Result<Attributes> {
    let parts = grammar.parts()?;
    let tokens = tokenize(caption);
    let bad = |why: String| Error::Parse(format!("caption {caption:?}: {why}"));
    if tokens.len() != parts.len() {
        return Err(bad(format!("expected {} tokens, found {}", parts.len(), tokens.len())));
    }
    let mut attrs = vec![usize::MAX; grammar.slots.len()];
    for (tok, part) in tokens.iter().zip(&parts) {
        match part {
            Part::Word(w) if w == tok => {}
            Part::Word(w) => return Err(bad(format!("expected {w:?}, found {tok:?}"))),
            Part::Slot(i) => {
                let slot = &grammar.slots[*i];
                attrs[*i] = slot
                    .values
                    .iter()
                    .position(|v| v == tok)
                    .ok_or_else(|| bad(format!("unknown {} {tok:?}", slot.name)))?;
            }
        }
    }
    Ok(attrs)
}

/// Train and validation draw from all tuples except these; test draws from all.
///
/// Each value of each slot appears exactly twice, so training marginals stay uniform.
pub fn default_held_out() -> Vec<Attributes> {
    [(0, 0), (1, 1), (2, 2), (3, 3), (0, 1), (1, 2), (2, 3), (3, 0)]
        .iter()
        .map(|&(a, b)| vec![a, b, (a + 2 * b) % 4])
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// `[C, H, W]`.
    pub latent_shape: [usize; 3],
    pub noise_amplitude: f64,
    pub grammar: CaptionGrammar,
    pub held_out: Vec<Attributes>,
}

impl DatasetSpec {
    pub fn new(seed: u64, n_train: usize, n_val: usize, n_test: usize) -> Self {
        DatasetSpec {
            seed,
            n_train,
            n_val,
            n_test,
            latent_shape: [4, 16, 16],
            noise_amplitude: 0.1,
            grammar: CaptionGrammar::default(),
            held_out: default_held_out(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grammar.validate()?;
        let [c, h, w] = self.latent_shape;
        let slots = &self.grammar.slots;
        if c < slots.len() {
            return Err(Error::Config(format!("{} slots need at least as many channels, got {c}", slots.len())));
        }
        let max_vals = slots.iter().map(|s| s.values.len()).max().unwrap_or(0);
        if 2 * max_vals > h.min(w) {
            return Err(Error::Config(format!("latent {h}x{w} too small for {max_vals} frequencies")));
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude.is_finite()) {
            return Err(Error::Config("noise_amplitude must be finite and non-negative".into()));
        }
        for t in &self.held_out {
            self.grammar.check(t)?;
        }
        if self.held_out.len() >= self.grammar.num_tuples() && self.n_train + self.n_val > 0 {
            return Err(Error::Config("held-out set leaves no training tuples".into()));
        }
        Ok(())
    }
}

/// Noise-free latent for an attribute tuple.
///
/// Slot `s` draws a cosine on channel `s`; slot orientation cycles through
/// horizontal, vertical and diagonal, with frequency `value + 1`. Remaining
/// channels carry the normalized sum of all slot patterns.
pub fn clean_latent<T: Scalar>(attrs: &[usize], shape: [usize; 3]) -> Latent<T> {
    let [c, h, w] = shape;
    let pattern = |s: usize, y: usize, x: usize| -> f64 {
        let k = (attrs[s] + 1) as f64;
        let (fx, fy) = (x as f64 / w as f64, y as f64 / h as f64);
        match s % 3 {
            0 => (2.0 * PI * k * fx).cos(),
            1 => (2.0 * PI * k * fy).cos(),
            _ => (2.0 * PI * k * (fx + fy)).cos(),
        }
    };
    let mut v: Vec<f64> = (0..c * h * w)
        .map(|i| {
            let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
            if ch < attrs.len() {
                pattern(ch, y, x)
            } else {
                (0..attrs.len()).map(|s| pattern(s, y, x)).sum::<f64>() / (attrs.len() as f64).sqrt()
            }
        })
        .collect();
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    v.iter_mut().for_each(|x| *x /= rms);
    Tensor::from_vec(&[c, h, w], v.into_iter().map(T::of).collect()).expect("shape matches length")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthExample {
    pub id: usize,
    pub caption: String,
    pub attributes: Attributes,
    pub seed: u64,
    pub split: Split,
    pub latent: Latent<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub examples: Vec<SynthExample>,
}

fn example_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1 << 32).wrapping_add(index as u64)
}

pub fn generate_example(spec: &DatasetSpec, id: usize, split: Split, pool: &[Attributes]) -> Result<SynthExample> {
    let seed = example_seed(spec.seed, id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attributes = pool[rng.random_range(0..pool.len())].clone();
    let clean: Latent<f64> = clean_latent(&attributes, spec.latent_shape);
    let a = spec.noise_amplitude;
    let noisy = clean
        .data()
        .iter()
        .map(|&v| (v + a * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect();
    let latent = Tensor::from_vec(clean.shape(), noisy)?;
    Ok(SynthExample {
        id,
        caption: spec.grammar.caption(&attributes)?,
        attributes,
        seed,
        split,
        latent,
    })
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let all = spec.grammar.all_tuples();
    let seen: Vec<Attributes> = all.iter().filter(|t| !spec.held_out.contains(t)).cloned().collect();
    let plan = [
        (Split::Train, spec.n_train, &seen),
        (Split::Val, spec.n_val, &seen),
        (Split::Test, spec.n_test, &all),
    ];
    let mut examples = Vec::with_capacity(spec.n_train + spec.n_val + spec.n_test);
    for (split, n, pool) in plan {
        for _ in 0..n {
            examples.push(generate_example(spec, examples.len(), split, pool)?);
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        examples,
    })
}

pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    spec: DatasetSpec,
    examples: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: usize,
    split: Split,
    seed: u64,
    caption: String,
    attributes: Attributes,
    file: String,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SynthExample> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn counts(&self) -> BTreeMap<Split, usize> {
        let mut m = BTreeMap::new();
        for e in &self.examples {
            *m.entry(e.split).or_default() += 1;
        }
        m
    }

    /// Writes `manifest.toml` and `latents/<id>.lat` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let lat_dir = dir.join("latents");
        fs::create_dir_all(&lat_dir)?;
        let mut entries = Vec::with_capacity(self.examples.len());
        for e in &self.examples {
            let file = format!("latents/{:05}.lat", e.id);
            write_latent(&dir.join(&file), &e.latent)?;
            entries.push(ManifestEntry {
                id: e.id,
                split: e.split,
                seed: e.seed,
                caption: e.caption.clone(),
                attributes: e.attributes.clone(),
                file,
            });
        }
        let manifest = Manifest {
            version: DATASET_VERSION,
            spec: self.spec.clone(),
            examples: entries,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::invalid(e.to_string()))?;
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let path: PathBuf = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if m.version != DATASET_VERSION {
            return Err(Error::format(&path, format!("unsupported dataset version {}", m.version)));
        }
        m.spec.validate()?;
        let mut examples = Vec::with_capacity(m.examples.len());
        for e in m.examples {
            let parsed = caption_to_attributes(&m.spec.grammar, &e.caption)?;
            if parsed != e.attributes {
                return Err(Error::format(&path, format!("example {}: caption/attribute mismatch", e.id)));
            }
            let lat_path = dir.join(&e.file);
            let latent = read_latent::<f32>(&lat_path)?;
            if latent.shape() != m.spec.latent_shape {
                return Err(Error::format(&lat_path, format!("latent shape {:?}", latent.shape())));
            }
            examples.push(SynthExample {
                id: e.id,
                caption: e.caption,
                attributes: e.attributes,
                seed: e.seed,
                split: e.split,
                latent,
            });
        }
        Ok(Dataset { spec: m.spec, examples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn every_tuple_round_trips() {
        let g = CaptionGrammar::default();
        g.validate().unwrap();
        let all = g.all_tuples();
        assert_eq!(all.len(), 64);
        let captions: HashSet<String> = all.iter().map(|t| g.caption(t).unwrap()).collect();
        assert_eq!(captions.len(), 64);
        for t in &all {
            assert_eq!(&caption_to_attributes(&g, &g.caption(t).unwrap()).unwrap(), t);
        }
        assert_eq!(g.caption(&[1, 2, 3]).unwrap(), "a epic guitar track with a fast tempo");
    }

    #[test]
    fn parse_errors() {
        let g = CaptionGrammar::default();
        for bad in [
            "a epic banjo track with a fast tempo",
            "a epic guitar track with a fast",
            "the epic guitar track with a fast tempo",
            "",
        ] {
            assert!(matches!(caption_to_attributes(&g, bad), Err(Error::Parse(_))), "{bad}");
        }
    }

    #[test]
    fn ambiguous_grammars_are_rejected() {
        let mut g = CaptionGrammar::default();
        g.slots[0].values[1] = "track".into();
        assert!(g.validate().is_err());
        let mut g = CaptionGrammar::default();
        g.template = "a {mood} track".into();
        assert!(g.validate().is_err());
    }

    #[test]
    fn held_out_set_is_balanced() {
        let h = default_held_out();
        assert_eq!(h.len(), 8);
        assert_eq!(h.iter().collect::<HashSet<_>>().len(), 8);
        for s in 0..3 {
            for v in 0..4 {
                assert_eq!(h.iter().filter(|t| t[s] == v).count(), 2);
            }
        }
    }

    #[test]
    fn clean_latent_is_unit_rms_and_distinct() {
        let g = CaptionGrammar::default();
        let lats: Vec<Latent<f64>> = g.all_tuples().iter().map(|t| clean_latent(t, [4, 16, 16])).collect();
        for l in &lats {
            let rms = (l.norm_sq() / l.numel() as f64).sqrt();
            assert!((rms - 1.0).abs() < 1e-12);
        }
        for i in 0..lats.len() {
            for j in 0..i {
                assert!(lats[i].max_abs_diff(&lats[j]) > 0.1);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_split_correctly() {
        let spec = DatasetSpec::new(3, 40, 10, 30);
        let a = generate_dataset(&spec).unwrap();
        assert_eq!(a, generate_dataset(&spec).unwrap());
        assert_ne!(a, generate_dataset(&DatasetSpec::new(4, 40, 10, 30)).unwrap());
        let counts = a.counts();
        assert_eq!((counts[&Split::Train], counts[&Split::Val], counts[&Split::Test]), (40, 10, 30));
        let seeds: HashSet<u64> = a.examples.iter().map(|e| e.seed).collect();
        assert_eq!(seeds.len(), 80);
        let held = default_held_out();
        assert!(a.split(Split::Train).chain(a.split(Split::Val)).all(|e| !held.contains(&e.attributes)));
    }

    #[test]
    fn empty_dataset() {
        let d = generate_dataset(&DatasetSpec::new(0, 0, 0, 0)).unwrap();
        assert!(d.examples.is_empty());
    }
}
