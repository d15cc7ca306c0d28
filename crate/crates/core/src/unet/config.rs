use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the denoiser obtains its global (FiLM) conditioning vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GlobalMode {
    /// No global path: local cross-attention only.
    None,
    /// Supplied by an external provider with its own width.
    Provider,
    /// Masked mean of the local embeddings.
    Mean,
    /// Self-attention pooling of the local embeddings.
    Sap,
}

impl GlobalMode {
    pub fn is_pooled(self) -> bool {
        matches!(self, GlobalMode::Mean | GlobalMode::Sap)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Encoder/decoder levels that carry a spatial transformer.
    pub attention_levels: Vec<usize>,
    pub mid_attention: bool,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ff_mult: usize,
    /// Width `d_F` of the local token embeddings.
    pub local_dim: usize,
    pub global_mode: GlobalMode,
    /// Width `d_G` of provider embeddings; ignored for other modes.
    #[serde(default)]
    pub provider_global_dim: usize,
    pub time_embed_dim: usize,
    pub groupnorm_groups: usize,
}

impl Default for UNetConfig {
    /// Toy model for `4×16×16` latents.
    fn default() -> Self {
        UNetConfig {
            in_channels: 4,
            out_channels: 4,
            latent_height: 16,
            latent_width: 16,
            base_channels: 32,
            channel_multipliers: vec![1, 2],
            attention_levels: vec![1],
            mid_attention: true,
            num_heads: 2,
            head_dim: 16,
            ff_mult: 2,
            local_dim: 32,
            global_mode: GlobalMode::Mean,
            provider_global_dim: 0,
            time_embed_dim: 64,
            groupnorm_groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn num_levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn has_attention(&self, level: usize) -> bool {
        self.attention_levels.contains(&level)
    }

    pub fn uses_local(&self) -> bool {
        !self.attention_levels.is_empty() || self.mid_attention
    }

    /// Width `d_G` of the global embedding, if the model has a global path.
    pub fn global_dim(&self) -> Option<usize> {
        match self.global_mode {
            GlobalMode::None => None,
            GlobalMode::Provider => Some(self.provider_global_dim),
            GlobalMode::Mean | GlobalMode::Sap => Some(self.local_dim),
        }
    }

    /// Width of the vector every FiLM projection reads.
    pub fn cond_dim(&self) -> usize {
        if self.global_mode == GlobalMode::None {
            self.time_embed_dim
        } else {
            2 * self.time_embed_dim
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    /// Collects every violated constraint.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let positive = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("latent_height", self.latent_height),
            ("latent_width", self.latent_width),
            ("base_channels", self.base_channels),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("ff_mult", self.ff_mult),
            ("local_dim", self.local_dim),
            ("time_embed_dim", self.time_embed_dim),
            ("groupnorm_groups", self.groupnorm_groups),
        ];
        for (name, v) in positive {
            if v == 0 {
                p.push(format!("{name} must be positive"));
            }
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            p.push("channel_multipliers must be non-empty and positive".into());
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            p.push("time_embed_dim must be even".into());
        }
        if self.global_mode == GlobalMode::Provider && self.provider_global_dim == 0 {
            p.push("provider_global_dim must be positive in provider mode".into());
        }
        if p.is_empty() {
            let levels = self.num_levels();
            let down = 1usize << (levels - 1);
            if !self.latent_height.is_multiple_of(down) || !self.latent_width.is_multiple_of(down) {
                p.push(format!("latent size must be divisible by {down}"));
            }
            for &l in &self.attention_levels {
                if l >= levels {
                    p.push(format!("attention level {l} does not exist"));
                }
            }
            let g = self.groupnorm_groups;
            let mut widths = vec![self.base_channels];
            for l in 0..levels {
                widths.push(self.level_channels(l));
                if l > 0 {
                    widths.push(self.level_channels(l) + self.level_channels(l - 1));
                }
                widths.push(2 * self.level_channels(l));
            }
            for w in widths {
                if w % g != 0 {
                    p.push(format!("width {w} not divisible by {g} groups"));
                }
            }
            let inner = self.inner_dim();
            let mut attn_widths: Vec<usize> = self.attention_levels.iter().filter(|&&l| l < levels).map(|&l| self.level_channels(l)).collect();
            if self.mid_attention {
                attn_widths.push(self.level_channels(levels - 1));
            }
            for w in attn_widths {
                if w % inner != 0 {
                    p.push(format!("heads·head_dim = {inner} does not divide attention width {w}"));
                }
            }
        }
        p.sort();
        p.dedup();
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    /// Closed-form parameter count, computed independently of the weight schema.
    pub fn parameter_count(&self) -> usize {
        let te = self.time_embed_dim;
        let cd = self.cond_dim();
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let res = |cin: usize, cout: usize| {
            2 * cin + conv(cin, cout, 3) + conv(cout, cout, 3) + 2 * (cd * cout + cout)
                + if cin != cout { conv(cin, cout, 1) } else { 0 }
        };
        let inner = self.inner_dim();
        let st = |c: usize| {
            let ff = self.ff_mult * c;
            4 * c + c * inner + 2 * self.local_dim * inner + inner * c + c + c * ff + ff + ff * c + c
        };
        let mut n = 2 * (te * te + te);
        if let Some(dg) = self.global_dim() {
            n += dg * te + te + dg;
        }
        if self.global_mode == GlobalMode::Sap {
            n += self.local_dim;
        }
        if self.uses_local() {
            n += self.local_dim;
        }
        n += conv(self.in_channels, self.base_channels, 3);
        let levels = self.num_levels();
        let mut ch = self.base_channels;
        for l in 0..levels {
            let c = self.level_channels(l);
            n += res(ch, c);
            if self.has_attention(l) {
                n += st(c);
            }
            if l + 1 < levels {
                n += conv(c, c, 3);
            }
            ch = c;
        }
        n += 2 * res(ch, ch);
        if self.mid_attention {
            n += st(ch);
        }
        for l in (0..levels).rev() {
            let c = self.level_channels(l);
            n += res(ch + c, c);
            if self.has_attention(l) {
                n += st(c);
            }
            if l > 0 {
                n += conv(c, c, 3);
            }
            ch = c;
        }
        n += 2 * ch + conv(ch, self.out_channels, 3);
        n
    }
}
