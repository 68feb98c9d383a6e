//! Transformer transducer: frame-stacking frontend, lookahead-masked audio
//! encoder, causal label encoder and the additive joint network.
//!
//! All functions append to a caller-owned [`Graph`] and read weights through
//! a [`Bound`] view of one [`ParamSet`], so every decoding mode shares the
//! same weights by construction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::masking::{build_mask, ContextSchedule};
use crate::params::{Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

pub const BLANK: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub audio_layers: usize,
    pub label_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub d_joint: usize,
    /// Output inventory including blank (id 0).
    pub vocab: usize,
    pub feat_dim: usize,
    pub downsample: usize,
    /// Earlier stacked frames the frontend reads alongside the current one.
    pub frontend_history: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            audio_layers: 4,
            label_layers: 1,
            d_model: 64,
            d_ff: 128,
            heads: 4,
            d_joint: 32,
            vocab: 8,
            feat_dim: 8,
            downsample: 4,
            frontend_history: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(contract(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab < 2 {
            return Err(contract("vocab must hold blank plus at least one label"));
        }
        if self.downsample == 0 || self.audio_layers == 0 || self.d_model == 0 || self.feat_dim == 0 {
            return Err(contract("model dimensions must be positive"));
        }
        Ok(())
    }

    pub fn header(&self) -> [u32; 10] {
        [
            self.audio_layers,
            self.label_layers,
            self.d_model,
            self.d_ff,
            self.heads,
            self.d_joint,
            self.vocab,
            self.feat_dim,
            self.downsample,
            self.frontend_history,
        ]
        .map(|v| v as u32)
    }

    pub fn from_header(h: &[u32]) -> Result<Self> {
        let [audio_layers, label_layers, d_model, d_ff, heads, d_joint, vocab, feat_dim, downsample, frontend_history] =
            h.iter()
                .map(|&v| v as usize)
                .collect::<Vec<_>>()
                .try_into()
                .map_err(|_| contract("checkpoint header must hold 10 config fields"))?;
        let cfg = Self {
            audio_layers,
            label_layers,
            d_model,
            d_ff,
            heads,
            d_joint,
            vocab,
            feat_dim,
            downsample,
            frontend_history,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sos_id(&self) -> usize {
        self.vocab
    }

    /// Encoder frames produced from `n` input frames.
    pub fn encoder_frames(&self, n: usize) -> usize {
        n / self.downsample
    }
}

fn uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::lit(rng.random_range(-limit..limit))).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn glorot<S: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<S> {
    uniform(rng, &[fan_in, fan_out], (6.0 / (fan_in + fan_out) as f64).sqrt())
}

fn insert_block<S: Scalar>(p: &mut ParamSet<S>, rng: &mut ChaCha8Rng, prefix: &str, cfg: &ModelConfig) {
    let d = cfg.d_model;
    p.insert(format!("{prefix}.ln1.g"), Tensor::filled(&[d], S::one()));
    p.insert(format!("{prefix}.ln1.b"), Tensor::zeros(&[d]));
    // q|k|v side by side, each initialized as its own d×d projection
    let wqkv = {
        let parts: Vec<Tensor<S>> = (0..3).map(|_| glorot(rng, d, d)).collect();
        let mut data = Vec::with_capacity(d * 3 * d);
        for i in 0..d {
            for part in &parts {
                data.extend_from_slice(part.row(i));
            }
        }
        Tensor::new(vec![d, 3 * d], data).unwrap()
    };
    p.insert(format!("{prefix}.attn.wqkv"), wqkv);
    p.insert(format!("{prefix}.attn.bqkv"), Tensor::zeros(&[3 * d]));
    p.insert(format!("{prefix}.attn.wo"), glorot(rng, d, d));
    p.insert(format!("{prefix}.attn.bo"), Tensor::zeros(&[d]));
    p.insert(format!("{prefix}.ln2.g"), Tensor::filled(&[d], S::one()));
    p.insert(format!("{prefix}.ln2.b"), Tensor::zeros(&[d]));
    p.insert(format!("{prefix}.ff.w1"), glorot(rng, d, cfg.d_ff));
    p.insert(format!("{prefix}.ff.b1"), Tensor::zeros(&[cfg.d_ff]));
    p.insert(format!("{prefix}.ff.w2"), glorot(rng, cfg.d_ff, d));
    p.insert(format!("{prefix}.ff.b2"), Tensor::zeros(&[d]));
}

/// Randomly initialized parameters for `cfg`.
pub fn init_params<S: Scalar>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamSet<S> {
    let d = cfg.d_model;
    let mut p = ParamSet::new();
    p.insert(
        "frontend.w",
        glorot(rng, cfg.feat_dim * cfg.downsample * (1 + cfg.frontend_history), d),
    );
    p.insert("frontend.b", Tensor::zeros(&[d]));
    for l in 0..cfg.audio_layers {
        insert_block(&mut p, rng, &format!("audio.{l}"), cfg);
    }
    p.insert("audio.ln.g", Tensor::filled(&[d], S::one()));
    p.insert("audio.ln.b", Tensor::zeros(&[d]));
    p.insert("label.embed", uniform(rng, &[cfg.vocab + 1, d], 1.0));
    for l in 0..cfg.label_layers {
        insert_block(&mut p, rng, &format!("label.{l}"), cfg);
    }
    p.insert("label.ln.g", Tensor::filled(&[d], S::one()));
    p.insert("label.ln.b", Tensor::zeros(&[d]));
    p.insert("joint.wa", glorot(rng, d, cfg.d_joint));
    p.insert("joint.ba", Tensor::zeros(&[cfg.d_joint]));
    p.insert("joint.wl", glorot(rng, d, cfg.d_joint));
    p.insert("joint.w", glorot(rng, cfg.d_joint, cfg.vocab));
    p.insert("joint.b", Tensor::zeros(&[cfg.vocab]));
    p
}

/// Attention-weight dropout. Evaluation mode never touches the generator.
pub struct Dropout<'a> {
    p: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn eval() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self { p, rng: Some(rng) }
    }

    fn apply<S: Scalar>(&mut self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.p <= 0.0 {
            return Ok(x);
        }
        let scale = S::lit(1.0 / (1.0 - self.p));
        let keep = (0..g.value(x).len())
            .map(|_| if rng.random::<f64>() < self.p { S::zero() } else { scale })
            .collect();
        g.dropout(x, keep)
    }
}

/// Sinusoidal absolute position table, `frames × d`.
pub fn position_table<S: Scalar>(frames: usize, d: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(frames * d);
    for t in 0..frames {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = t as f64 / rate;
            data.push(S::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![frames, d], data).unwrap()
}

fn linear<S: Scalar>(g: &mut Graph<S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn self_attention<S: Scalar>(
    g: &mut Graph<S>,
    b: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    lookahead: Option<usize>,
    drop: &mut Dropout,
) -> Result<Var> {
    let (frames, d) = g.value(x).rows_cols();
    let dh = d / heads;
    let qkv = linear(
        g,
        x,
        b.get(&format!("{prefix}.attn.wqkv")),
        b.get(&format!("{prefix}.attn.bqkv")),
    )?;
    let flags = lookahead.map(|c| build_mask(frames, Some(c)).flags());
    let scale = S::lit(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.slice_cols(qkv, h * dh, dh)?;
        let k = g.slice_cols(qkv, d + h * dh, dh)?;
        let v = g.slice_cols(qkv, 2 * d + h * dh, dh)?;
        let s = g.matmul_nt(q, k)?;
        let mut s = g.scale(s, scale);
        if let Some(f) = &flags {
            s = g.mask_fill(s, f.clone())?;
        }
        let a = g.softmax(s)?;
        let a = drop.apply(g, a)?;
        outs.push(g.matmul(a, v)?);
    }
    let o = g.concat_cols(&outs)?;
    linear(
        g,
        o,
        b.get(&format!("{prefix}.attn.wo")),
        b.get(&format!("{prefix}.attn.bo")),
    )
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
fn block<S: Scalar>(
    g: &mut Graph<S>,
    b: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    lookahead: Option<usize>,
    drop: &mut Dropout,
) -> Result<Var> {
    let n1 = g.layer_norm(x, b.get(&format!("{prefix}.ln1.g")), b.get(&format!("{prefix}.ln1.b")))?;
    let a = self_attention(g, b, prefix, n1, heads, lookahead, drop)?;
    let x = g.add(x, a)?;
    let n2 = g.layer_norm(x, b.get(&format!("{prefix}.ln2.g")), b.get(&format!("{prefix}.ln2.b")))?;
    let h = linear(
        g,
        n2,
        b.get(&format!("{prefix}.ff.w1")),
        b.get(&format!("{prefix}.ff.b1")),
    )?;
    let h = g.gelu(h);
    let f = linear(
        g,
        h,
        b.get(&format!("{prefix}.ff.w2")),
        b.get(&format!("{prefix}.ff.b2")),
    )?;
    g.add(x, f)
}

/// Stacks each run of `downsample` frames (dropping the ragged tail), prepends
/// the `frontend_history` previous stacks (zeros before the start) and
/// projects to `d_model`. Output frame `t` reads only input frames
/// `[(t-h)*ds, (t+1)*ds)`.
pub fn frontend<S: Scalar>(g: &mut Graph<S>, b: &Bound, cfg: &ModelConfig, features: &Tensor<S>) -> Result<Var> {
    let (n, f) = features.rows_cols();
    if f != cfg.feat_dim || features.shape().len() != 2 {
        return Err(Error::Shape {
            op: "frontend",
            lhs: features.shape().to_vec(),
            rhs: vec![cfg.feat_dim],
        });
    }
    let frames = cfg.encoder_frames(n);
    if frames == 0 {
        return Err(contract(format!(
            "empty input: {n} frames is fewer than the downsampling factor {}",
            cfg.downsample
        )));
    }
    let block = f * cfg.downsample;
    let hist = cfg.frontend_history;
    let width = block * (1 + hist);
    let src = features.data();
    let mut stacked = vec![S::zero(); frames * width];
    for t in 0..frames {
        for k in 0..=hist {
            if let Some(s) = (t + k).checked_sub(hist) {
                stacked[t * width + k * block..t * width + (k + 1) * block]
                    .copy_from_slice(&src[s * block..(s + 1) * block]);
            }
        }
    }
    let x = g.constant(Tensor::new(vec![frames, width], stacked)?);
    linear(g, x, b.get("frontend.w"), b.get("frontend.b"))
}

/// Audio encoder over frontend output `[T×D]`; layer `l` uses lookahead `c_l`.
pub fn encode_audio<S: Scalar>(
    g: &mut Graph<S>,
    b: &Bound,
    cfg: &ModelConfig,
    x: Var,
    schedule: &ContextSchedule,
    drop: &mut Dropout,
) -> Result<Var> {
    if schedule.num_layers() != cfg.audio_layers {
        return Err(contract(format!(
            "schedule has {} layers, encoder has {}",
            schedule.num_layers(),
            cfg.audio_layers
        )));
    }
    let (frames, d) = g.value(x).rows_cols();
    let pe = g.constant(position_table(frames, d));
    let mut h = g.add(x, pe)?;
    for l in 0..cfg.audio_layers {
        h = block(g, b, &format!("audio.{l}"), h, cfg.heads, schedule.layer(l), drop)?;
    }
    g.layer_norm(h, b.get("audio.ln.g"), b.get("audio.ln.b"))
}

/// Label encoder: row `u` summarizes `y_1..y_u` preceded by a start symbol,
/// so it depends on the first `u` tokens only.
pub fn encode_labels<S: Scalar>(
    g: &mut Graph<S>,
    b: &Bound,
    cfg: &ModelConfig,
    tokens: &[usize],
    drop: &mut Dropout,
) -> Result<Var> {
    if let Some(&bad) = tokens.iter().find(|&&y| y == BLANK || y >= cfg.vocab) {
        return Err(contract(format!("token id {bad} outside 1..{}", cfg.vocab)));
    }
    let mut idx = Vec::with_capacity(tokens.len() + 1);
    idx.push(cfg.sos_id());
    idx.extend_from_slice(tokens);
    let e = g.gather_rows(b.get("label.embed"), &idx)?;
    let pe = g.constant(position_table(idx.len(), cfg.d_model));
    let mut h = g.add(e, pe)?;
    for l in 0..cfg.label_layers {
        h = block(g, b, &format!("label.{l}"), h, cfg.heads, Some(0), drop)?;
    }
    g.layer_norm(h, b.get("label.ln.g"), b.get("label.ln.b"))
}

/// Joint network over every `(t, u)` pair:
/// `log_softmax(W tanh(Wa h_a[t] + ba + Wl h_l[u]) + b)`, shaped `[T, U+1, V]`.
pub fn joint<S: Scalar>(g: &mut Graph<S>, b: &Bound, h_audio: Var, h_label: Var) -> Result<Var> {
    let frames = g.value(h_audio).rows_cols().0;
    let rows = g.value(h_label).rows_cols().0;
    let pa = linear(g, h_audio, b.get("joint.wa"), b.get("joint.ba"))?;
    let pl = g.matmul(h_label, b.get("joint.wl"))?;
    let z = g.outer_add(pa, pl)?;
    let z = g.tanh(z);
    let logits = linear(g, z, b.get("joint.w"), b.get("joint.b"))?;
    let vocab = g.value(logits).rows_cols().1;
    let lp = g.log_softmax(logits)?;
    g.reshape(lp, vec![frames, rows, vocab])
}

/// Full forward pass to the `[T, U+1, V]` log-posterior lattice.
pub fn forward_lattice<S: Scalar>(
    g: &mut Graph<S>,
    b: &Bound,
    cfg: &ModelConfig,
    features: &Tensor<S>,
    tokens: &[usize],
    schedule: &ContextSchedule,
    drop: &mut Dropout,
) -> Result<Var> {
    let x = frontend(g, b, cfg, features)?;
    let ha = encode_audio(g, b, cfg, x, schedule, drop)?;
    let hl = encode_labels(g, b, cfg, tokens, drop)?;
    joint(g, b, ha, hl)
}

/// Plain-value view of a log-posterior lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorLattice<S> {
    pub frames: usize,
    pub label_rows: usize,
    pub vocab: usize,
    pub logp: Vec<S>,
}

impl<S: Scalar> PosteriorLattice<S> {
    pub fn from_tensor(t: &Tensor<S>) -> Result<Self> {
        match *t.shape() {
            [frames, label_rows, vocab] => Ok(Self {
                frames,
                label_rows,
                vocab,
                logp: t.data().to_vec(),
            }),
            _ => Err(contract(format!("lattice must be rank 3, got {:?}", t.shape()))),
        }
    }

    pub fn to_tensor(&self) -> Tensor<S> {
        Tensor::new(vec![self.frames, self.label_rows, self.vocab], self.logp.clone()).unwrap()
    }

    #[inline]
    pub fn at(&self, t: usize, u: usize, k: usize) -> S {
        self.logp[(t * self.label_rows + u) * self.vocab + k]
    }

    pub fn node(&self, t: usize, u: usize) -> &[S] {
        let o = (t * self.label_rows + u) * self.vocab;
        &self.logp[o..o + self.vocab]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::SamplerSpec;
    use crate::scalar::logsumexp;
    use rand::SeedableRng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            audio_layers: 2,
            label_layers: 1,
            d_model: 8,
            d_ff: 16,
            heads: 2,
            d_joint: 6,
            vocab: 5,
            feat_dim: 3,
            downsample: 2,
            frontend_history: 1,
        }
    }

    fn feats(rng: &mut ChaCha8Rng, n: usize, f: usize) -> Tensor<f64> {
        Tensor::new(vec![n, f], (0..n * f).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn encode(p: &ParamSet<f64>, cfg: &ModelConfig, x: &Tensor<f64>, s: &ContextSchedule) -> Tensor<f64> {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let f = frontend(&mut g, &b, cfg, x).unwrap();
        let h = encode_audio(&mut g, &b, cfg, f, s, &mut Dropout::eval()).unwrap();
        g.value(h).clone()
    }

    #[test]
    fn frontend_shapes_and_causal_grouping() {
        let cfg = ModelConfig {
            downsample: 4,
            frontend_history: 0,
            ..small_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = init_params::<f64>(&cfg, &mut rng);
        let run = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let b = p.bind(&mut g, false);
            let v = frontend(&mut g, &b, &cfg, x).unwrap();
            g.value(v).clone()
        };
        assert_eq!(run(&feats(&mut rng, 8, 3)).shape(), &[2, 8]);
        let x = feats(&mut rng, 9, 3);
        let base = run(&x);
        assert_eq!(base.shape(), &[2, 8]);
        let mut y = x.clone();
        y.data_mut()[5 * 3 + 1] += 1.0;
        let pert = run(&y);
        assert_eq!(base.row(0), pert.row(0));
        assert_ne!(base.row(1), pert.row(1));

        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        assert!(frontend(&mut g, &b, &cfg, &feats(&mut rng, 3, 3)).is_err());
    }

    #[test]
    fn causal_schedule_hides_future_frames() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = init_params::<f64>(&cfg, &mut rng);
        let x = feats(&mut rng, 16, 3);
        let s = ContextSchedule::fixed(0, 2);
        let base = encode(&p, &cfg, &x, &s);
        for t in 0..8 {
            let mut y = x.clone();
            // perturb every input frame belonging to encoder frames > t
            for v in &mut y.data_mut()[(t + 1) * 2 * 3..] {
                *v += 0.5;
            }
            let out = encode(&p, &cfg, &y, &s);
            for r in 0..=t {
                let diff = base
                    .row(r)
                    .iter()
                    .zip(out.row(r))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(diff < 1e-12, "frame {r} moved by {diff}");
            }
        }
    }

    #[test]
    fn full_context_equals_saturated_mask() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = init_params::<f64>(&cfg, &mut rng);
        let x = feats(&mut rng, 14, 3);
        let full = encode(&p, &cfg, &x, &ContextSchedule::full(2));
        let sat = encode(&p, &cfg, &x, &ContextSchedule::fixed(7, 2));
        assert_eq!(full, sat);
    }

    #[test]
    fn schedule_length_is_checked() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = init_params::<f64>(&cfg, &mut rng);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let f = frontend(&mut g, &b, &cfg, &feats(&mut rng, 6, 3)).unwrap();
        let bad = ContextSchedule::from_layers(vec![0; 3], SamplerSpec::Fixed(0));
        assert!(matches!(
            encode_audio(&mut g, &b, &cfg, f, &bad, &mut Dropout::eval()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn label_encoder_is_causal() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = init_params::<f64>(&cfg, &mut rng);
        let run = |toks: &[usize]| {
            let mut g = Graph::new();
            let b = p.bind(&mut g, false);
            let v = encode_labels(&mut g, &b, &cfg, toks, &mut Dropout::eval()).unwrap();
            g.value(v).clone()
        };
        let a = run(&[1, 2, 3, 4, 1]);
        assert_eq!(a.shape(), &[6, 8]);
        let b = run(&[4, 4, 2, 1, 3]);
        assert_eq!(a.row(0), b.row(0));
        // change y_3 (index 2): rows 0..=2 unchanged, row 3 onwards may change
        let c = run(&[1, 2, 4, 4, 1]);
        for r in 0..3 {
            assert_eq!(a.row(r), c.row(r));
        }
        assert_ne!(a.row(3), c.row(3));

        let mut g = Graph::new();
        let bd = p.bind(&mut g, false);
        assert!(encode_labels(&mut g, &bd, &cfg, &[0], &mut Dropout::eval()).is_err());
        assert!(encode_labels(&mut g, &bd, &cfg, &[5], &mut Dropout::eval()).is_err());
    }

    #[test]
    fn label_rows_get_no_gradient_from_later_tokens() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = init_params::<f64>(&cfg, &mut rng);
        let toks = [1, 2, 3, 4];
        for u in 0..=toks.len() {
            let mut g = Graph::new();
            let b = p.bind(&mut g, true);
            let h = encode_labels(&mut g, &b, &cfg, &toks, &mut Dropout::eval()).unwrap();
            let row = g.gather_rows(h, &[u]).unwrap();
            let s = g.sum(row);
            let s2 = g.mul(s, s).unwrap();
            g.backward(s2).unwrap();
            let ge = g.grad(b.get("label.embed")).unwrap();
            // y_k sits at input position k; row u may depend on y_1..y_u only
            for (k, &tok) in toks.iter().enumerate().map(|(i, t)| (i + 1, t)) {
                let used_elsewhere = toks[..u].contains(&tok);
                if k > u && !used_elsewhere {
                    assert!(ge[tok * 8..tok * 8 + 8].iter().all(|&v| v == 0.0), "row {u} token {k}");
                }
            }
        }
    }

    #[test]
    fn joint_normalizes_and_zero_weights_are_uniform() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = init_params::<f64>(&cfg, &mut rng);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let x = feats(&mut rng, 10, 3);
        let lat = forward_lattice(
            &mut g,
            &b,
            &cfg,
            &x,
            &[1, 3],
            &ContextSchedule::fixed(1, 2),
            &mut Dropout::eval(),
        )
        .unwrap();
        let lat = PosteriorLattice::from_tensor(g.value(lat)).unwrap();
        assert_eq!((lat.frames, lat.label_rows, lat.vocab), (5, 3, 5));
        for t in 0..5 {
            for u in 0..3 {
                assert!(logsumexp(lat.node(t, u)).abs() < 1e-12);
                let s: f64 = lat.node(t, u).iter().map(|v| v.exp()).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }

        // all-zero joint weights and biases, V=2, T=1, U=0
        let mut zp = ParamSet::<f64>::new();
        zp.insert("joint.wa", Tensor::zeros(&[4, 3]));
        zp.insert("joint.ba", Tensor::zeros(&[3]));
        zp.insert("joint.wl", Tensor::zeros(&[4, 3]));
        zp.insert("joint.w", Tensor::zeros(&[3, 2]));
        zp.insert("joint.b", Tensor::zeros(&[2]));
        let mut g = Graph::new();
        let b = zp.bind(&mut g, false);
        let ha = g.constant(Tensor::filled(&[1, 4], 0.3));
        let hl = g.constant(Tensor::filled(&[1, 4], -0.7));
        let l = joint(&mut g, &b, ha, hl).unwrap();
        let half = 0.5f64.ln();
        assert_eq!(g.value(l).data(), &[half, half]);
    }

    #[test]
    fn joint_is_independent_of_time_when_audio_projection_vanishes() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = init_params::<f64>(&cfg, &mut rng);
        p.insert("joint.wa", Tensor::zeros(&[8, 6]));
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let x = feats(&mut rng, 8, 3);
        let lat = forward_lattice(
            &mut g,
            &b,
            &cfg,
            &x,
            &[2],
            &ContextSchedule::full(2),
            &mut Dropout::eval(),
        )
        .unwrap();
        let lat = PosteriorLattice::from_tensor(g.value(lat)).unwrap();
        for t in 1..lat.frames {
            for u in 0..lat.label_rows {
                assert_eq!(lat.node(t, u), lat.node(0, u));
            }
        }
    }

    #[test]
    fn header_round_trip() {
        let cfg = ModelConfig::default();
        assert_eq!(ModelConfig::from_header(&cfg.header()).unwrap(), cfg);
        assert!(ModelConfig::from_header(&[1, 2]).is_err());
    }

    #[test]
    fn runs_in_single_precision() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = init_params::<f32>(&cfg, &mut rng);
        let mut g = Graph::<f32>::new();
        let b = p.bind(&mut g, false);
        let x = Tensor::new(vec![6, 3], (0..18).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let lat = forward_lattice(
            &mut g,
            &b,
            &cfg,
            &x,
            &[1],
            &ContextSchedule::fixed(0, 2),
            &mut Dropout::eval(),
        )
        .unwrap();
        let s: f32 = g.value(lat).data()[..5].iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
}
