//! Greedy transducer search and Levenshtein scoring.

use crate::error::{contract, Result};
use crate::masking::ContextSchedule;
use crate::model::{encode_audio, encode_labels, frontend, Dropout, ModelConfig, BLANK};
use crate::params::ParamSet;
use crate::tensor::{Graph, Tensor};

pub const DEFAULT_MAX_SYMBOLS_PER_FRAME: usize = 4;

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy search over a lattice supplied node by node: `node(t, prefix)`
/// returns the scores over the vocabulary at frame `t` after emitting
/// `prefix`. Blank advances time; after `max_symbols` labels on one frame a
/// blank is forced.
pub fn greedy_search<F>(frames: usize, max_symbols: usize, mut node: F) -> Result<Vec<usize>>
where
    F: FnMut(usize, &[usize]) -> Result<Vec<f64>>,
{
    if max_symbols == 0 {
        return Err(contract("max_symbols_per_frame must be at least 1"));
    }
    let mut out = Vec::new();
    for t in 0..frames {
        let mut emitted = 0;
        while emitted < max_symbols {
            let k = argmax(&node(t, &out)?);
            if k == BLANK {
                break;
            }
            out.push(k);
            emitted += 1;
        }
    }
    Ok(out)
}

/// Greedy decoding of one utterance under `schedule`.
pub fn greedy_decode(
    params: &ParamSet<f64>,
    cfg: &ModelConfig,
    features: &Tensor<f64>,
    schedule: &ContextSchedule,
    max_symbols: usize,
) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let mut drop = Dropout::eval();
    let x = frontend(&mut g, &b, cfg, features)?;
    let ha = encode_audio(&mut g, &b, cfg, x, schedule, &mut drop)?;
    let pa = g.matmul(ha, b.get("joint.wa"))?;
    let pa = g.add_row(pa, b.get("joint.ba"))?;
    let audio_proj = g.value(pa).clone();
    let frames = audio_proj.rows_cols().0;

    let w = params.get("joint.w").expect("joint.w").clone();
    let bias = params.get("joint.b").expect("joint.b").clone();
    let (dj, vocab) = w.rows_cols();
    let mut cached: Option<(usize, Vec<f64>)> = None;

    greedy_search(frames, max_symbols, |t, prefix| {
        if cached.as_ref().is_none_or(|(n, _)| *n != prefix.len()) {
            let hl = encode_labels(&mut g, &b, cfg, prefix, &mut drop)?;
            let last = g.gather_rows(hl, &[prefix.len()])?;
            let pl = g.matmul(last, b.get("joint.wl"))?;
            cached = Some((prefix.len(), g.value(pl).data().to_vec()));
        }
        let pl = &cached.as_ref().unwrap().1;
        let hidden: Vec<f64> = audio_proj.row(t).iter().zip(pl).map(|(a, l)| (a + l).tanh()).collect();
        let mut logits = bias.data().to_vec();
        for (j, &h) in hidden.iter().enumerate().take(dj) {
            for (o, &wv) in logits.iter_mut().zip(&w.data()[j * vocab..(j + 1) * vocab]) {
                *o += h * wv;
            }
        }
        Ok(logits)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditCounts {
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.sub + self.ins + self.del
    }
}

/// `errors / ref_len`; infinite for an empty reference with a non-empty hypothesis.
pub fn error_rate(errors: usize, ref_len: usize) -> f64 {
    match (errors, ref_len) {
        (0, _) => 0.0,
        (_, 0) => f64::INFINITY,
        (e, n) => e as f64 / n as f64,
    }
}

/// Minimum unit-cost alignment of `hyp` against `reference`. Ties in the
/// backtrace prefer substitution, then insertion, then deletion.
pub fn edit_distance(hyp: &[usize], reference: &[usize]) -> EditCounts {
    let (n, m) = (hyp.len(), reference.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            d[i * w + j] = diag.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let mut c = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let mismatch = usize::from(hyp[i - 1] != reference[j - 1]);
            if d[(i - 1) * w + j - 1] + mismatch == here {
                c.sub += mismatch;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            c.ins += 1;
            i -= 1;
        } else {
            c.del += 1;
            j -= 1;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn blank_everywhere_decodes_to_nothing() {
        let out = greedy_search(5, 4, |_, _| Ok(vec![0.0, -1.0, -2.0])).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn label_then_blank_on_one_frame() {
        let out = greedy_search(1, 4, |_, prefix| {
            Ok(if prefix.is_empty() {
                vec![-2.0, -3.0, -0.1]
            } else {
                vec![-0.1, -3.0, -2.0]
            })
        })
        .unwrap();
        assert_eq!(out, vec![2]);
    }

    #[test]
    fn symbols_per_frame_are_capped() {
        let out = greedy_search(2, 3, |_, _| Ok(vec![-5.0, 0.0])).unwrap();
        assert_eq!(out, vec![1; 6]);
        assert!(greedy_search(2, 0, |_, _| Ok(vec![0.0])).is_err());
    }

    #[test]
    fn edit_distance_cases() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), EditCounts::default());
        assert_eq!(
            edit_distance(&[1, 9, 3], &[1, 2, 3]),
            EditCounts { sub: 1, ins: 0, del: 0 }
        );
        assert_eq!(edit_distance(&[1, 2, 3, 4], &[1, 2, 3]).ins, 1);
        assert_eq!(edit_distance(&[1, 3], &[1, 2, 3]).del, 1);
        assert_eq!(edit_distance(&[], &[1, 2]).del, 2);
        assert_eq!(error_rate(0, 0), 0.0);
        assert_eq!(error_rate(2, 0), f64::INFINITY);
        assert_eq!(error_rate(1, 4), 0.25);
    }

    /// Cheapest alignment by exhaustive recursion over edit choices.
    fn brute_cost(h: &[usize], r: &[usize]) -> usize {
        match (h.split_first(), r.split_first()) {
            (None, _) => r.len(),
            (_, None) => h.len(),
            (Some((a, hs)), Some((b, rs))) => {
                let diag = brute_cost(hs, rs) + usize::from(a != b);
                diag.min(brute_cost(hs, r) + 1).min(brute_cost(h, rs) + 1)
            }
        }
    }

    #[test]
    fn edit_distance_matches_exhaustive_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let h: Vec<usize> = (0..rng.random_range(0..=6)).map(|_| rng.random_range(1..4)).collect();
            let r: Vec<usize> = (0..rng.random_range(0..=6)).map(|_| rng.random_range(1..4)).collect();
            let c = edit_distance(&h, &r);
            assert_eq!(c.errors(), brute_cost(&h, &r), "{h:?} {r:?}");
            // the counts describe a consistent alignment
            assert_eq!(h.len() + c.del, r.len() + c.ins);
        }
    }
}
