//! Synthetic utterances whose labels are only fully determined by features
//! that arrive after the label's own span, and the dataset file format.
//!
//! Frame layout (feature dim `F >= 3`):
//!   - dims `0..F-2`: the class prototype over the token's `frames_per_token` span
//!   - dim `F-2`: onset marker on the first frame of every span
//!   - dim `F-1`: evidence channel; for the `lookahead_k` frames after a token's
//!     span it carries -1/+1 for the first/second member of an ambiguous pair
//!
//! Members of an ambiguous pair share one prototype, so a reader that stops
//! at the end of the span can only guess between them.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::params::Cursor;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub feat_dim: usize,
    /// Label inventory including blank.
    pub vocab: usize,
    pub lookahead_k: usize,
    pub frames_per_token: usize,
    pub noise_sigma: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Share of labels that are placed into look-alike pairs.
    pub ambiguous_fraction: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            feat_dim: 8,
            vocab: 8,
            lookahead_k: 4,
            frames_per_token: 8,
            noise_sigma: 0.3,
            min_tokens: 4,
            max_tokens: 12,
            ambiguous_fraction: 0.5,
        }
    }
}

/// Fixed seed for the class prototypes, shared by every split.
const PROTOTYPE_SEED: u64 = 0x5EED_C0DE;

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feat_dim < 3 {
            return Err(contract("feat_dim must be at least 3"));
        }
        if self.vocab < 2 || self.vocab > u16::MAX as usize {
            return Err(contract("vocab must be in 2..=65535"));
        }
        if self.frames_per_token == 0 {
            return Err(contract("frames_per_token must be positive"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(contract("noise_sigma must be non-negative"));
        }
        if self.min_tokens > self.max_tokens {
            return Err(contract("min_tokens exceeds max_tokens"));
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction) {
            return Err(contract("ambiguous_fraction must lie in [0, 1]"));
        }
        let proto_dims = self.feat_dim - 2;
        if self.vocab - 1 > 1usize.checked_shl(proto_dims as u32).unwrap_or(usize::MAX) {
            return Err(contract("too many labels for the prototype dimensions"));
        }
        Ok(())
    }

    /// Number of look-alike pairs; zero when there is no lookahead to
    /// disambiguate them.
    pub fn ambiguous_pairs(&self) -> usize {
        if self.lookahead_k == 0 {
            return 0;
        }
        let labels = self.vocab - 1;
        let pairs = (labels as f64 * self.ambiguous_fraction / 2.0).round() as usize;
        pairs.min(labels / 2)
    }

    /// `Some((partner, sign))` for members of an ambiguous pair. Pairs are
    /// `(1,2), (3,4), ...`; the first member signs -1, the second +1.
    pub fn pair_of(&self, label: usize) -> Option<(usize, f64)> {
        if label == 0 || label > 2 * self.ambiguous_pairs() {
            return None;
        }
        if label % 2 == 1 {
            Some((label + 1, -1.0))
        } else {
            Some((label - 1, 1.0))
        }
    }

    /// Prototype vectors over `feat_dim - 2` dims, indexed by label id
    /// (entry 0 unused).
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let dims = self.feat_dim - 2;
        let mut rng = ChaCha8Rng::seed_from_u64(PROTOTYPE_SEED);
        let mut codes: Vec<u64> = (0..1u64 << dims.min(20)).collect();
        codes.shuffle(&mut rng);
        let mut protos = vec![vec![0.0; dims]];
        let mut next = codes.into_iter();
        for label in 1..self.vocab {
            if let Some((partner, sign)) = self.pair_of(label) {
                if sign > 0.0 {
                    let shared = protos[partner].clone();
                    protos.push(shared);
                    continue;
                }
            }
            let code = next.next().expect("validated label count");
            protos.push((0..dims).map(|i| if code >> i & 1 == 1 { 1.0 } else { -1.0 }).collect());
        }
        protos
    }

    pub fn frames_for(&self, tokens: usize) -> usize {
        tokens * self.frames_per_token + self.lookahead_k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[N × F]`, values exactly representable in `f32`.
    pub features: Tensor<f64>,
    pub tokens: Vec<usize>,
}

/// Draws one utterance. Tokens are uniform over the labels.
pub fn gen_utterance<R: Rng + ?Sized>(spec: &TaskSpec, id: impl Into<String>, rng: &mut R) -> Result<Utterance> {
    spec.validate()?;
    let n_tokens = rng.random_range(spec.min_tokens..=spec.max_tokens);
    let tokens: Vec<usize> = (0..n_tokens).map(|_| rng.random_range(1..spec.vocab)).collect();
    let f = spec.feat_dim;
    let fpt = spec.frames_per_token;
    let n = spec.frames_for(n_tokens);
    let protos = spec.prototypes();
    let mut data = vec![0.0f64; n * f];
    for (u, &y) in tokens.iter().enumerate() {
        for frame in u * fpt..(u + 1) * fpt {
            data[frame * f..frame * f + f - 2].copy_from_slice(&protos[y]);
        }
        data[u * fpt * f + f - 2] = 1.0;
        if let Some((_, sign)) = spec.pair_of(y) {
            let start = (u + 1) * fpt;
            for frame in start..start + spec.lookahead_k {
                data[frame * f + f - 1] = sign;
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for v in &mut data {
            *v += noise.sample(rng);
        }
    }
    for v in &mut data {
        *v = *v as f32 as f64;
    }
    Ok(Utterance {
        id: id.into(),
        features: Tensor::new(vec![n, f], data)?,
        tokens,
    })
}

/// Split indices for [`split_seed`].
pub const SPLIT_TRAIN: u64 = 1;
pub const SPLIT_VALID: u64 = 2;
pub const SPLIT_TEST: u64 = 3;

/// Base seed of a data split. Utterance seeds `base ^ i` of different splits
/// never collide while the run seed and the counts stay below 2^32.
pub fn split_seed(run_seed: u64, split: u64) -> u64 {
    run_seed ^ (split << 32)
}

/// `count` utterances; utterance `i` uses its own generator seeded with
/// `base_seed ^ i`.
pub fn gen_dataset(spec: &TaskSpec, count: usize, base_seed: u64, prefix: &str) -> Result<Vec<Utterance>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed ^ i as u64);
            gen_utterance(spec, format!("{prefix}-{i:05}"), &mut rng)
        })
        .collect()
}

/// Nearest-prototype decoder with known segmentation. Without lookahead it
/// cannot separate pair members and always answers the first one.
pub fn oracle_decode(spec: &TaskSpec, utt: &Utterance, use_lookahead: bool) -> Vec<usize> {
    let f = spec.feat_dim;
    let fpt = spec.frames_per_token;
    let protos = spec.prototypes();
    let n_tokens = (utt.features.rows_cols().0 - spec.lookahead_k) / fpt;
    (0..n_tokens)
        .map(|u| {
            let mut mean = vec![0.0; f - 2];
            for frame in u * fpt..(u + 1) * fpt {
                for (m, &v) in mean.iter_mut().zip(&utt.features.row(frame)[..f - 2]) {
                    *m += v / fpt as f64;
                }
            }
            let dist = |p: &Vec<f64>| mean.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (1..spec.vocab)
                .min_by(|&a, &b| dist(&protos[a]).total_cmp(&dist(&protos[b])))
                .expect("at least one label");
            match spec.pair_of(best) {
                Some((partner, sign)) => {
                    let first = if sign < 0.0 { best } else { partner };
                    if !use_lookahead {
                        return first;
                    }
                    let start = (u + 1) * fpt;
                    let evidence: f64 = (start..start + spec.lookahead_k)
                        .map(|frame| utt.features.row(frame)[f - 1])
                        .sum();
                    if evidence >= 0.0 {
                        first + 1
                    } else {
                        first
                    }
                }
                None => best,
            }
        })
        .collect()
}

pub const DATASET_MAGIC: &[u8; 4] = b"MMDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub utterances: Vec<Utterance>,
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| contract(format!("{v} does not fit in 32 bits")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_dataset<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    let s = &ds.spec;
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    for v in [s.feat_dim, s.vocab, s.lookahead_k, s.frames_per_token] {
        put_u32(&mut w, v)?;
    }
    w.write_all(&s.noise_sigma.to_le_bytes())?;
    put_u32(&mut w, s.min_tokens)?;
    put_u32(&mut w, s.max_tokens)?;
    w.write_all(&s.ambiguous_fraction.to_le_bytes())?;
    put_u32(&mut w, ds.utterances.len())?;
    for u in &ds.utterances {
        put_u32(&mut w, u.id.len())?;
        w.write_all(u.id.as_bytes())?;
        put_u32(&mut w, u.tokens.len())?;
        for &t in &u.tokens {
            let t = u16::try_from(t).map_err(|_| contract(format!("token {t} exceeds 16 bits")))?;
            w.write_all(&t.to_le_bytes())?;
        }
        let (frames, f) = u.features.rows_cols();
        if f != s.feat_dim {
            return Err(contract(format!(
                "utterance {} has {f} dims, spec says {}",
                u.id, s.feat_dim
            )));
        }
        put_u32(&mut w, frames)?;
        for &v in u.features.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor::new(&buf);
    c.magic(DATASET_MAGIC)?;
    let at = c.offset();
    let version = c.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Parse {
            offset: at,
            msg: format!("unsupported dataset version {version}"),
        });
    }
    let spec = TaskSpec {
        feat_dim: c.u32("feat_dim")? as usize,
        vocab: c.u32("vocab")? as usize,
        lookahead_k: c.u32("lookahead_k")? as usize,
        frames_per_token: c.u32("frames_per_token")? as usize,
        noise_sigma: c.f64("noise_sigma")?,
        min_tokens: c.u32("min_tokens")? as usize,
        max_tokens: c.u32("max_tokens")? as usize,
        ambiguous_fraction: c.f64("ambiguous_fraction")?,
    };
    let count = c.u32("count")? as usize;
    let mut utterances = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = c.offset();
        let n = c.u32("id length")? as usize;
        let id = std::str::from_utf8(c.take(n, "id")?)
            .map_err(|_| Error::Parse {
                offset: at,
                msg: "utterance id is not UTF-8".into(),
            })?
            .to_owned();
        let nt = c.u32("token count")? as usize;
        let tokens = (0..nt)
            .map(|_| c.u16("token").map(usize::from))
            .collect::<Result<Vec<_>>>()?;
        let frames = c.u32("frame count")? as usize;
        let data = (0..frames * spec.feat_dim)
            .map(|_| c.f32("feature").map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        utterances.push(Utterance {
            id,
            features: Tensor::new(vec![frames, spec.feat_dim], data)?,
            tokens,
        });
    }
    if !c.at_end() {
        return Err(Error::Parse {
            offset: c.offset(),
            msg: "trailing bytes after last utterance".into(),
        });
    }
    Ok(Dataset { spec, utterances })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_dataset(std::io::BufWriter::new(std::fs::File::create(path)?), ds)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(std::fs::File::open(path)?)
}
