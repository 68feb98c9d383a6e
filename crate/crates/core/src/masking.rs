//! Future-context schedules, the samplers that draw them, attention masks and
//! latency accounting.
//!
//! A schedule assigns every audio-encoder self-attention layer a lookahead
//! `c_l`: a query at frame `t` may read keys `j <= t + c_l`. The past is
//! never restricted. Stacking `L` layers gives a total receptive future of
//! `sum(c_l)` encoder frames.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distribution over context schedules, in its canonical text form
/// `tied-uniform:0:2`, `tied-normal:0:1`, `untied-uniform:0:10`,
/// `untied-normal:0:0.5`, `constrained:12:2`, `fixed:1` or `full`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SamplerSpec {
    TiedUniform { lo: usize, hi: usize },
    TiedNormal { mu: f64, sigma: f64 },
    UntiedUniform { lo: usize, hi: usize },
    UntiedNormal { mu: f64, sigma: f64 },
    Constrained { c_max: usize, d: f64 },
    Fixed(usize),
    FullContext,
}

impl SamplerSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| {
            Err(Error::Spec {
                text: self.to_string(),
                msg: msg.into(),
            })
        };
        match *self {
            Self::TiedUniform { lo, hi } | Self::UntiedUniform { lo, hi } if lo > hi => bad("lo must not exceed hi"),
            Self::TiedNormal { mu, sigma } | Self::UntiedNormal { mu, sigma } if !(sigma > 0.0) || !mu.is_finite() => {
                bad("sigma must be positive and mu finite")
            }
            Self::Constrained { d, .. } if !(d > 0.0) || !d.is_finite() => bad("d must be positive"),
            _ => Ok(()),
        }
    }

    /// Whether `schedule` can be drawn from this distribution.
    pub fn supports(&self, schedule: &ContextSchedule) -> bool {
        let Some(cs) = schedule.per_layer() else {
            return matches!(self, Self::FullContext);
        };
        let tied = cs.windows(2).all(|w| w[0] == w[1]);
        match *self {
            Self::Fixed(c) => cs.iter().all(|&x| x == c),
            Self::FullContext => false,
            Self::TiedUniform { lo, hi } => tied && cs.iter().all(|&x| (lo..=hi).contains(&x)),
            Self::UntiedUniform { lo, hi } => cs.iter().all(|&x| (lo..=hi).contains(&x)),
            Self::TiedNormal { .. } => tied,
            Self::UntiedNormal { .. } => true,
            Self::Constrained { c_max, d } => {
                let mut remaining = c_max;
                for &c in cs {
                    if c > constrained_bound(remaining, d) {
                        return false;
                    }
                    remaining -= c;
                }
                true
            }
        }
    }
}

fn constrained_bound(remaining: usize, d: f64) -> usize {
    (remaining as f64 / d).floor() as usize
}

impl fmt::Display for SamplerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TiedUniform { lo, hi } => write!(f, "tied-uniform:{lo}:{hi}"),
            Self::TiedNormal { mu, sigma } => write!(f, "tied-normal:{mu}:{sigma}"),
            Self::UntiedUniform { lo, hi } => write!(f, "untied-uniform:{lo}:{hi}"),
            Self::UntiedNormal { mu, sigma } => write!(f, "untied-normal:{mu}:{sigma}"),
            Self::Constrained { c_max, d } => write!(f, "constrained:{c_max}:{d}"),
            Self::Fixed(c) => write!(f, "fixed:{c}"),
            Self::FullContext => f.write_str("full"),
        }
    }
}

impl FromStr for SamplerSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let err = |msg: &str| Error::Spec {
            text: text.to_owned(),
            msg: msg.to_owned(),
        };
        let parts: Vec<&str> = text.trim().split(':').collect();
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| err(&format!("`{s}` is not a non-negative integer")))
        };
        let float = |s: &str| s.parse::<f64>().map_err(|_| err(&format!("`{s}` is not a number")));
        let spec = match parts.as_slice() {
            ["full"] => Self::FullContext,
            ["fixed", c] => Self::Fixed(int(c)?),
            ["tied-uniform", lo, hi] => Self::TiedUniform {
                lo: int(lo)?,
                hi: int(hi)?,
            },
            ["untied-uniform", lo, hi] => Self::UntiedUniform {
                lo: int(lo)?,
                hi: int(hi)?,
            },
            ["tied-normal", mu, sigma] => Self::TiedNormal {
                mu: float(mu)?,
                sigma: float(sigma)?,
            },
            ["untied-normal", mu, sigma] => Self::UntiedNormal {
                mu: float(mu)?,
                sigma: float(sigma)?,
            },
            ["constrained", c, d] => Self::Constrained {
                c_max: int(c)?,
                d: float(d)?,
            },
            _ => return Err(err("unknown sampler form")),
        };
        spec.validate().map_err(|e| match e {
            Error::Spec { msg, .. } => err(&msg),
            other => other,
        })?;
        Ok(spec)
    }
}

impl TryFrom<String> for SamplerSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SamplerSpec> for String {
    fn from(s: SamplerSpec) -> String {
        s.to_string()
    }
}

/// Per-layer future-context sizes for the audio encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSchedule {
    layers: usize,
    /// `None` means every layer sees the whole utterance.
    per_layer: Option<Vec<usize>>,
    source: SamplerSpec,
}

impl ContextSchedule {
    pub fn full(layers: usize) -> Self {
        Self {
            layers,
            per_layer: None,
            source: SamplerSpec::FullContext,
        }
    }

    pub fn fixed(c: usize, layers: usize) -> Self {
        Self {
            layers,
            per_layer: Some(vec![c; layers]),
            source: SamplerSpec::Fixed(c),
        }
    }

    pub fn from_layers(per_layer: Vec<usize>, source: SamplerSpec) -> Self {
        Self {
            layers: per_layer.len(),
            per_layer: Some(per_layer),
            source,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers
    }

    pub fn per_layer(&self) -> Option<&[usize]> {
        self.per_layer.as_deref()
    }

    /// Lookahead of layer `l`, `None` for unbounded.
    pub fn layer(&self, l: usize) -> Option<usize> {
        self.per_layer.as_ref().map(|v| v[l])
    }

    pub fn source(&self) -> SamplerSpec {
        self.source
    }

    pub fn is_full(&self) -> bool {
        self.per_layer.is_none()
    }

    pub fn is_tied(&self) -> bool {
        self.per_layer
            .as_ref()
            .is_none_or(|v| v.windows(2).all(|w| w[0] == w[1]))
    }

    /// Total future context `C = sum(c_l)`; `None` when unbounded.
    pub fn total(&self) -> Option<usize> {
        self.per_layer.as_ref().map(|v| v.iter().sum())
    }

    /// Canonical text: `full`, `fixed:c` when all layers agree, otherwise
    /// `layers:c1/c2/...`.
    pub fn encode(&self) -> String {
        match &self.per_layer {
            None => "full".into(),
            Some(v) if !v.is_empty() && v.iter().all(|&c| c == v[0]) => format!("fixed:{}", v[0]),
            Some(v) => {
                let body: Vec<String> = v.iter().map(usize::to_string).collect();
                format!("layers:{}", body.join("/"))
            }
        }
    }

    /// Parses the canonical text for an encoder with `layers` layers.
    pub fn parse(text: &str, layers: usize) -> Result<Self> {
        let err = |msg: &str| Error::Spec {
            text: text.to_owned(),
            msg: msg.to_owned(),
        };
        let text_t = text.trim();
        if let Some(body) = text_t.strip_prefix("layers:") {
            let cs = body
                .split('/')
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|_| err(&format!("`{s}` is not a non-negative integer")))
                })
                .collect::<Result<Vec<_>>>()?;
            if cs.len() != layers {
                return Err(err(&format!("expected {layers} layers, got {}", cs.len())));
            }
            let per_layer = cs.clone();
            return Ok(Self {
                layers,
                per_layer: Some(per_layer),
                source: SamplerSpec::Fixed(cs[0]),
            });
        }
        match text_t.parse::<SamplerSpec>() {
            Ok(SamplerSpec::FullContext) => Ok(Self::full(layers)),
            Ok(SamplerSpec::Fixed(c)) => Ok(Self::fixed(c, layers)),
            _ => Err(err("expected `full`, `fixed:c` or `layers:c1/c2/...`")),
        }
    }
}

impl fmt::Display for ContextSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode())
    }
}

fn normal_draw<R: Rng + ?Sized>(mu: f64, sigma: f64, rng: &mut R) -> usize {
    let x: f64 = Normal::new(mu, sigma).expect("validated sigma").sample(rng);
    x.abs().floor() as usize
}

/// Draws one tied schedule: a single `c` shared by all layers.
pub fn tied_sample<R: Rng + ?Sized>(spec: SamplerSpec, layers: usize, rng: &mut R) -> ContextSchedule {
    let c = match spec {
        SamplerSpec::TiedUniform { lo, hi } | SamplerSpec::UntiedUniform { lo, hi } => rng.random_range(lo..=hi),
        SamplerSpec::TiedNormal { mu, sigma } | SamplerSpec::UntiedNormal { mu, sigma } => normal_draw(mu, sigma, rng),
        SamplerSpec::Fixed(c) => c,
        other => panic!("{other} is not a tied sampler"),
    };
    ContextSchedule::from_layers(vec![c; layers], spec)
}

/// Draws every layer independently with the same marginal as [`tied_sample`].
pub fn untied_sample<R: Rng + ?Sized>(spec: SamplerSpec, layers: usize, rng: &mut R) -> ContextSchedule {
    let cs = (0..layers)
        .map(|_| match spec {
            SamplerSpec::TiedUniform { lo, hi } | SamplerSpec::UntiedUniform { lo, hi } => rng.random_range(lo..=hi),
            SamplerSpec::TiedNormal { mu, sigma } | SamplerSpec::UntiedNormal { mu, sigma } => {
                normal_draw(mu, sigma, rng)
            }
            SamplerSpec::Fixed(c) => c,
            other => panic!("{other} is not an untied sampler"),
        })
        .collect();
    ContextSchedule::from_layers(cs, spec)
}

/// Budgeted untied draw, bottom layer first: with remaining budget `R`
/// (initially `c_max`) each layer takes `c ~ U{0..=floor(R/d)}`.
pub fn constrained_sample<R: Rng + ?Sized>(c_max: usize, d: f64, layers: usize, rng: &mut R) -> ContextSchedule {
    let mut remaining = c_max;
    let cs = (0..layers)
        .map(|_| {
            let c = rng.random_range(0..=constrained_bound(remaining, d));
            remaining -= c;
            c
        })
        .collect();
    ContextSchedule::from_layers(cs, SamplerSpec::Constrained { c_max, d })
}

/// Draws one schedule for an encoder with `layers` self-attention layers.
pub fn sample_schedule<R: Rng + ?Sized>(spec: SamplerSpec, layers: usize, rng: &mut R) -> ContextSchedule {
    match spec {
        SamplerSpec::Fixed(c) => ContextSchedule::fixed(c, layers),
        SamplerSpec::FullContext => ContextSchedule::full(layers),
        SamplerSpec::TiedUniform { .. } | SamplerSpec::TiedNormal { .. } => tied_sample(spec, layers, rng),
        SamplerSpec::UntiedUniform { .. } | SamplerSpec::UntiedNormal { .. } => untied_sample(spec, layers, rng),
        SamplerSpec::Constrained { c_max, d } => constrained_sample(c_max, d, layers, rng),
    }
}

/// Which keys each query frame may read in one self-attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionMask {
    pub frames: usize,
    /// `None` for full context.
    pub lookahead: Option<usize>,
}

impl AttentionMask {
    pub fn allowed(&self, t: usize, j: usize) -> bool {
        match self.lookahead {
            None => true,
            Some(c) => j <= t + c,
        }
    }

    /// Row-major `frames × frames` allowance flags.
    pub fn flags(&self) -> Vec<bool> {
        let n = self.frames;
        (0..n * n).map(|i| self.allowed(i / n, i % n)).collect()
    }

    pub fn allowed_count(&self) -> usize {
        self.flags().iter().filter(|&&b| b).count()
    }
}

pub fn build_mask(frames: usize, lookahead: Option<usize>) -> AttentionMask {
    AttentionMask { frames, lookahead }
}

/// Receptive future in encoder frames, or `None` when unbounded.
pub fn receptive_future(schedule: &ContextSchedule) -> Option<usize> {
    schedule.total()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Latency {
    Millis(f64),
    Unbounded,
}

impl fmt::Display for Latency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Millis(ms) => write!(f, "{ms:.1}"),
            Self::Unbounded => f.write_str("unbounded"),
        }
    }
}

/// Algorithmic latency `(C * downsample + frontend_frames) * frame_shift_ms`.
pub fn latency_ms(
    schedule: &ContextSchedule,
    frame_shift_ms: f64,
    downsample: usize,
    frontend_lookahead_frames: usize,
) -> Latency {
    match receptive_future(schedule) {
        None => Latency::Unbounded,
        Some(c) => Latency::Millis((c * downsample + frontend_lookahead_frames) as f64 * frame_shift_ms),
    }
}
