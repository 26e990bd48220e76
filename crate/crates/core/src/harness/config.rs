use std::fmt;
use std::str::FromStr;

use crate::error::{bail, NablaError, Result};
use crate::layout::TokenGrid;
use crate::masks::StaWindow;

/// How self-attention is evaluated inside every transformer block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttentionMode {
    Full,
    /// Attention replaced by its value projection; no token mixing.
    Identity,
    /// Adaptive mask recomputed from the current q and k on every forward.
    Nabla {
        thr: f64,
    },
    /// Adaptive mask joined with a static sliding-tile window
    /// `(w_t, w_h, w_w)` in block units.
    NablaSta {
        thr: f64,
        window: (usize, usize, usize),
    },
}

impl AttentionMode {
    pub fn is_sparse(&self) -> bool {
        matches!(self, Self::Nabla { .. } | Self::NablaSta { .. })
    }

    pub fn sta_window(&self, grid: TokenGrid) -> Result<Option<StaWindow>> {
        match *self {
            Self::NablaSta {
                window: (t, h, w), ..
            } => StaWindow::new(t, h, w, grid).map(Some),
            _ => Ok(None),
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Full => write!(f, "full"),
            Self::Identity => write!(f, "identity"),
            Self::Nabla { thr } => write!(f, "nabla({thr})"),
            Self::NablaSta {
                thr,
                window: (t, h, w),
            } => write!(f, "nabla({thr})+sta({t},{h},{w})"),
        }
    }
}

fn call_args<'a>(s: &'a str, name: &str) -> Option<&'a str> {
    s.strip_prefix(name)?.trim().strip_prefix('(')?.strip_suffix(')')
}

/// Parses `full`, `identity`, `nabla(thr)` or `nabla(thr)+sta(t,h,w)`.
impl FromStr for AttentionMode {
    type Err = NablaError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "full" => return Ok(Self::Full),
            "identity" => return Ok(Self::Identity),
            _ => {}
        }
        let (nabla, sta) = match s.split_once('+') {
            Some((a, b)) => (a.trim(), Some(b.trim())),
            None => (s, None),
        };
        let Some(thr) = call_args(nabla, "nabla") else {
            bail!(Param, "unknown attention mode '{s}'");
        };
        let thr: f64 = thr
            .trim()
            .parse()
            .map_err(|_| NablaError::Param(format!("bad threshold in '{s}'")))?;
        if !(0.0..=1.0).contains(&thr) {
            bail!(Param, "threshold {thr} outside [0, 1]");
        }
        match sta {
            None => Ok(Self::Nabla { thr }),
            Some(sta) => {
                let Some(args) = call_args(sta, "sta") else {
                    bail!(Param, "expected sta(t,h,w) after '+' in '{s}'");
                };
                let (t, h, w) = parse_triple(args)?;
                Ok(Self::NablaSta {
                    thr,
                    window: (t, h, w),
                })
            }
        }
    }
}

pub(crate) fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| NablaError::Param(format!("bad integer '{p}' in '{s}'")))
        })
        .collect()
}

fn parse_triple(s: &str) -> Result<(usize, usize, usize)> {
    match parse_list(s)?[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => bail!(Param, "expected three comma-separated integers, got '{s}'"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDiTConfig {
    pub grid: TokenGrid,
    /// Latent channels per token.
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    /// Per-head dimension.
    pub dim: usize,
    pub mlp_ratio: usize,
    pub train_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub attention_mode: AttentionMode,
    /// Apply the block-order token permutation at the model boundary.
    pub reorder: bool,
    pub train_samples: usize,
    pub val_samples: usize,
    /// Validation loss is recorded every `val_every` steps and on the last.
    pub val_every: usize,
}

impl Default for ToyDiTConfig {
    fn default() -> Self {
        Self {
            grid: TokenGrid {
                t_frames: 4,
                height: 8,
                width: 8,
                patch: 2,
            },
            channels: 4,
            depth: 2,
            heads: 2,
            dim: 16,
            mlp_ratio: 4,
            train_steps: 200,
            batch: 4,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            seed: 0,
            attention_mode: AttentionMode::Full,
            reorder: true,
            train_samples: 64,
            val_samples: 8,
            val_every: 20,
        }
    }
}

pub(crate) const KEYS: &[&str] = &[
    "grid",
    "channels",
    "depth",
    "heads",
    "dim",
    "mlp_ratio",
    "train_steps",
    "batch",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "seed",
    "mode",
    "reorder",
    "train_samples",
    "val_samples",
    "val_every",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| NablaError::Param(format!("invalid value '{value}' for '{key}'")))
}

impl ToyDiTConfig {
    pub fn width(&self) -> usize {
        self.heads * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        for (name, v) in [
            ("channels", self.channels),
            ("depth", self.depth),
            ("heads", self.heads),
            ("dim", self.dim),
            ("mlp_ratio", self.mlp_ratio),
            ("batch", self.batch),
            ("train_samples", self.train_samples),
            ("val_samples", self.val_samples),
            ("val_every", self.val_every),
        ] {
            if v == 0 {
                bail!(Param, "{name} must be positive");
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            bail!(Param, "learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bail!(Param, "betas must lie in [0, 1)");
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            bail!(Param, "eps must be positive");
        }
        self.attention_mode.sta_window(self.grid)?;
        Ok(())
    }

    /// Sets one `key = value` entry as it appears in a config file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "grid" => match parse_list(value)?[..] {
                [t, h, w, p] => self.grid = TokenGrid::new(t, h, w, p)?,
                _ => bail!(Param, "grid expects T,H,W,P, got '{value}'"),
            },
            "channels" => self.channels = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "mlp_ratio" => self.mlp_ratio = num(key, value)?,
            "train_steps" => self.train_steps = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "mode" => self.attention_mode = value.parse()?,
            "reorder" => self.reorder = num(key, value)?,
            "train_samples" => self.train_samples = num(key, value)?,
            "val_samples" => self.val_samples = num(key, value)?,
            "val_every" => self.val_every = num(key, value)?,
            other => bail!(Param, "unknown config key '{other}'"),
        }
        Ok(())
    }

    pub fn is_key(key: &str) -> bool {
        KEYS.contains(&key)
    }

    /// Flat `key = value` text that [`ToyDiTConfig::set`] reads back.
    pub fn to_kv_text(&self) -> String {
        let g = self.grid;
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        line(
            "grid",
            format!("{},{},{},{}", g.t_frames, g.height, g.width, g.patch),
        );
        line("channels", self.channels.to_string());
        line("depth", self.depth.to_string());
        line("heads", self.heads.to_string());
        line("dim", self.dim.to_string());
        line("mlp_ratio", self.mlp_ratio.to_string());
        line("train_steps", self.train_steps.to_string());
        line("batch", self.batch.to_string());
        line("lr", self.lr.to_string());
        line("beta1", self.beta1.to_string());
        line("beta2", self.beta2.to_string());
        line("eps", self.eps.to_string());
        line("seed", self.seed.to_string());
        line("mode", self.attention_mode.to_string());
        line("reorder", self.reorder.to_string());
        line("train_samples", self.train_samples.to_string());
        line("val_samples", self.val_samples.to_string());
        line("val_every", self.val_every.to_string());
        s
    }

    /// Applies every entry of a `key = value` text; `#` starts a comment.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_kv_text(text)? {
            self.set(&key, &value)?;
        }
        Ok(())
    }
}

/// Splits flat `key = value` text into ordered pairs.
pub fn parse_kv_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!(
                Param,
                "line {}: expected 'key = value', got '{}'",
                n + 1,
                raw.trim()
            );
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
