//! Transducer negative log-likelihood, merged-posterior distillation and the
//! dual/multi-mode objectives built from them.

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::masking::{sample_schedule, ContextSchedule, SamplerSpec};
use crate::model::{forward_lattice, Dropout, ModelConfig, PosteriorLattice, BLANK};
use crate::params::Bound;
use crate::scalar::{log_add, Scalar};
use crate::tensor::{CustomBackward, Graph, Tensor, Var};

fn check_dims<S: Scalar>(lat: &PosteriorLattice<S>, tokens: &[usize]) -> Result<()> {
    if lat.frames == 0 {
        return Err(contract("lattice has no frames"));
    }
    if lat.label_rows != tokens.len() + 1 {
        return Err(Error::Shape {
            op: "transducer_loss",
            lhs: vec![lat.frames, lat.label_rows, lat.vocab],
            rhs: vec![tokens.len()],
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&y| y == BLANK || y >= lat.vocab) {
        return Err(contract(format!("token {bad} outside 1..{}", lat.vocab)));
    }
    Ok(())
}

/// Forward variables: `alpha[t][u]` is the log probability of reaching node
/// `(t, u)` having emitted `y_1..y_u`.
fn forward_vars<S: Scalar>(lat: &PosteriorLattice<S>, tokens: &[usize]) -> Vec<S> {
    let (nt, nu) = (lat.frames, lat.label_rows);
    let mut alpha = vec![S::neg_infinity(); nt * nu];
    alpha[0] = S::zero();
    for t in 0..nt {
        for u in 0..nu {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = S::neg_infinity();
            if t > 0 {
                a = alpha[(t - 1) * nu + u] + lat.at(t - 1, u, BLANK);
            }
            if u > 0 {
                a = log_add(a, alpha[t * nu + u - 1] + lat.at(t, u - 1, tokens[u - 1]));
            }
            alpha[t * nu + u] = a;
        }
    }
    alpha
}

/// Backward variables: `beta[t][u]` is the log probability of completing the
/// path from `(t, u)`, including the terminal blank.
fn backward_vars<S: Scalar>(lat: &PosteriorLattice<S>, tokens: &[usize]) -> Vec<S> {
    let (nt, nu) = (lat.frames, lat.label_rows);
    let mut beta = vec![S::neg_infinity(); nt * nu];
    for t in (0..nt).rev() {
        for u in (0..nu).rev() {
            let b = if t == nt - 1 && u == nu - 1 {
                lat.at(t, u, BLANK)
            } else {
                let mut b = S::neg_infinity();
                if t + 1 < nt {
                    b = beta[(t + 1) * nu + u] + lat.at(t, u, BLANK);
                }
                if u + 1 < nu {
                    b = log_add(b, beta[t * nu + u + 1] + lat.at(t, u, tokens[u]));
                }
                b
            };
            beta[t * nu + u] = b;
        }
    }
    beta
}

/// `-log P(y | x)` summed over all monotone alignments, by lattice recursion.
pub fn transducer_loss<S: Scalar>(lat: &PosteriorLattice<S>, tokens: &[usize]) -> Result<S> {
    check_dims(lat, tokens)?;
    let alpha = forward_vars(lat, tokens);
    let (nt, nu) = (lat.frames, lat.label_rows);
    Ok(-(alpha[nt * nu - 1] + lat.at(nt - 1, nu - 1, BLANK)))
}

/// Largest `T + U` accepted by [`brute_force_transducer_loss`].
pub const BRUTE_FORCE_LIMIT: usize = 14;

/// Reference value of [`transducer_loss`] by enumerating every alignment path.
pub fn brute_force_transducer_loss(lat: &PosteriorLattice<f64>, tokens: &[usize]) -> Result<f64> {
    check_dims(lat, tokens)?;
    let (nt, nu) = (lat.frames, tokens.len());
    if nt + nu > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(format!(
            "T={nt}, U={nu}: T+U exceeds {BRUTE_FORCE_LIMIT}"
        )));
    }
    let moves = nt - 1 + nu;
    let mut total = 0.0f64;
    // each bitmask with exactly `nu` label moves is one path
    for mask in 0u32..(1u32 << moves) {
        if mask.count_ones() as usize != nu {
            continue;
        }
        let (mut t, mut u) = (0, 0);
        let mut logp = 0.0;
        for step in 0..moves {
            if mask & (1 << step) != 0 {
                logp += lat.at(t, u, tokens[u]);
                u += 1;
            } else {
                logp += lat.at(t, u, BLANK);
                t += 1;
            }
        }
        logp += lat.at(t, u, BLANK);
        total += logp.exp();
    }
    Ok(-total.ln())
}

/// Number of alignment paths through a `T × (U+1)` lattice.
pub fn alignment_count(frames: usize, labels: usize) -> u64 {
    let n = (frames - 1 + labels) as u64;
    let k = labels.min(frames - 1) as u64;
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

struct TransducerRule {
    tokens: Vec<usize>,
}

impl<S: Scalar> CustomBackward<S> for TransducerRule {
    fn backward(&self, inputs: &[&Tensor<S>], output: &Tensor<S>, out_grad: &[S]) -> Vec<Option<Vec<S>>> {
        let lat = PosteriorLattice::from_tensor(inputs[0]).expect("checked in forward");
        let alpha = forward_vars(&lat, &self.tokens);
        let beta = backward_vars(&lat, &self.tokens);
        let log_total = -output.item();
        let (nt, nu, nv) = (lat.frames, lat.label_rows, lat.vocab);
        let g = out_grad[0];
        let mut grad = vec![S::zero(); nt * nu * nv];
        for t in 0..nt {
            for u in 0..nu {
                let a = alpha[t * nu + u];
                let base = (t * nu + u) * nv;
                let blank_tail = if t + 1 < nt {
                    Some(beta[(t + 1) * nu + u])
                } else if u + 1 == nu {
                    Some(S::zero())
                } else {
                    None
                };
                if let Some(bt) = blank_tail {
                    let occ = (a + lat.at(t, u, BLANK) + bt - log_total).exp();
                    grad[base + BLANK] = -g * occ;
                }
                if u + 1 < nu {
                    let y = self.tokens[u];
                    let occ = (a + lat.at(t, u, y) + beta[t * nu + u + 1] - log_total).exp();
                    grad[base + y] = -g * occ;
                }
            }
        }
        vec![Some(grad)]
    }
}

/// Differentiable transducer loss of a `[T, U+1, V]` log-posterior node.
pub fn transducer_loss_op<S: Scalar>(g: &mut Graph<S>, lattice: Var, tokens: &[usize]) -> Result<Var> {
    let lat = PosteriorLattice::from_tensor(g.value(lattice))?;
    let loss = transducer_loss(&lat, tokens)?;
    Ok(g.custom(
        &[lattice],
        Tensor::scalar(loss),
        Box::new(TransducerRule {
            tokens: tokens.to_vec(),
        }),
    ))
}

/// Three-way posteriors per lattice node: (blank, next correct label, rest).
#[derive(Debug, Clone, PartialEq)]
pub struct MergedLattice<S> {
    pub frames: usize,
    pub label_rows: usize,
    pub p3: Vec<[S; 3]>,
}

impl<S: Scalar> MergedLattice<S> {
    pub fn at(&self, t: usize, u: usize) -> [S; 3] {
        self.p3[t * self.label_rows + u]
    }
}

fn merge_node<S: Scalar>(blank_lp: S, label_lp: Option<S>) -> [S; 3] {
    let pb = blank_lp.exp();
    let py = label_lp.map_or(S::zero(), S::exp);
    [pb, py, (S::one() - pb - py).max(S::zero())]
}

/// Folds every node's distribution into (blank, `y_{u+1}`, remainder). The
/// last row has no next label, so its middle slot is zero.
pub fn merge_posteriors<S: Scalar>(lat: &PosteriorLattice<S>, tokens: &[usize]) -> Result<MergedLattice<S>> {
    check_dims(lat, tokens)?;
    let mut p3 = Vec::with_capacity(lat.frames * lat.label_rows);
    for t in 0..lat.frames {
        for u in 0..lat.label_rows {
            let label = tokens.get(u).map(|&y| lat.at(t, u, y));
            p3.push(merge_node(lat.at(t, u, BLANK), label));
        }
    }
    Ok(MergedLattice {
        frames: lat.frames,
        label_rows: lat.label_rows,
        p3,
    })
}

/// Probability floor inside the KL logarithms.
pub const KL_CLAMP: f64 = 1e-12;

fn check_shift<S>(student: &MergedLattice<S>, teacher: &MergedLattice<S>, shift: usize) -> Result<()> {
    if student.frames != teacher.frames || student.label_rows != teacher.label_rows {
        return Err(Error::Shape {
            op: "distill_kl",
            lhs: vec![student.frames, student.label_rows],
            rhs: vec![teacher.frames, teacher.label_rows],
        });
    }
    if shift >= student.frames {
        return Err(contract(format!("shift {shift} must be below T={}", student.frames)));
    }
    Ok(())
}

/// Mean over aligned nodes of `KL(student[t] || teacher[t - s])` for `t in s..T`.
pub fn distill_kl<S: Scalar>(student: &MergedLattice<S>, teacher: &MergedLattice<S>, shift: usize) -> Result<S> {
    check_shift(student, teacher, shift)?;
    let eps = S::lit(KL_CLAMP);
    let mut sum = S::zero();
    for t in shift..student.frames {
        for u in 0..student.label_rows {
            let q = student.at(t, u);
            let p = teacher.at(t - shift, u);
            for k in 0..3 {
                sum = sum + q[k] * (q[k].max(eps).ln() - p[k].max(eps).ln());
            }
        }
    }
    let n = (student.frames - shift) * student.label_rows;
    Ok(sum / S::from_usize(n).unwrap())
}

struct DistillRule<S> {
    tokens: Vec<usize>,
    teacher: MergedLattice<S>,
    shift: usize,
}

impl<S: Scalar> CustomBackward<S> for DistillRule<S> {
    fn backward(&self, inputs: &[&Tensor<S>], _: &Tensor<S>, out_grad: &[S]) -> Vec<Option<Vec<S>>> {
        let lat = PosteriorLattice::from_tensor(inputs[0]).expect("checked in forward");
        let (nt, nu, nv) = (lat.frames, lat.label_rows, lat.vocab);
        let eps = S::lit(KL_CLAMP);
        let n = S::from_usize((nt - self.shift) * nu).unwrap();
        let scale = out_grad[0] / n;
        let mut grad = vec![S::zero(); nt * nu * nv];
        for t in self.shift..nt {
            for u in 0..nu {
                let label = self.tokens.get(u).copied();
                let q = merge_node(lat.at(t, u, BLANK), label.map(|y| lat.at(t, u, y)));
                let p = self.teacher.at(t - self.shift, u);
                // d/dq_k of q_k (ln max(q_k, eps) - ln max(p_k, eps))
                let dq: Vec<S> = (0..3)
                    .map(|k| {
                        let own = if q[k] >= eps { S::one() } else { S::zero() };
                        scale * (q[k].max(eps).ln() - p[k].max(eps).ln() + own)
                    })
                    .collect();
                let rest_live = S::one() - q[0] - q[1] > S::zero();
                let d_rest = if rest_live { dq[2] } else { S::zero() };
                let base = (t * nu + u) * nv;
                grad[base + BLANK] = q[0] * (dq[0] - d_rest);
                if let Some(y) = label {
                    grad[base + y] = q[1] * (dq[1] - d_rest);
                }
            }
        }
        vec![Some(grad)]
    }
}

/// Differentiable [`distill_kl`] with respect to the student log-posteriors.
/// The teacher enters as a constant.
pub fn distill_kl_op<S: Scalar>(
    g: &mut Graph<S>,
    student: Var,
    teacher: &MergedLattice<S>,
    tokens: &[usize],
    shift: usize,
) -> Result<Var> {
    let lat = PosteriorLattice::from_tensor(g.value(student))?;
    let merged = merge_posteriors(&lat, tokens)?;
    let kl = distill_kl(&merged, teacher, shift)?;
    Ok(g.custom(
        &[student],
        Tensor::scalar(kl),
        Box::new(DistillRule {
            tokens: tokens.to_vec(),
            teacher: teacher.clone(),
            shift,
        }),
    ))
}

/// Multipliers of the three objective terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub stream: f64,
    pub full: f64,
    pub distill: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            stream: 1.0,
            full: 1.0,
            distill: 1.0,
        }
    }
}

impl LossWeights {
    /// Stand-alone streaming model: no full-context branch at all.
    pub fn stream_only() -> Self {
        Self {
            stream: 1.0,
            full: 0.0,
            distill: 0.0,
        }
    }

    pub fn uses_full_branch(&self) -> bool {
        self.full != 0.0 || self.distill != 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossOptions {
    pub weights: LossWeights,
    /// Frame shift `s` between student and teacher in the distillation term.
    pub shift: usize,
}

/// Loss terms of one step. When the full-context branch is disabled its two
/// terms are reported as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub l_stream: f64,
    pub l_full: f64,
    pub l_distill: f64,
    pub total: f64,
    pub schedule_used: ContextSchedule,
}

/// Streaming branch under `schedule` plus (optionally) the full-context
/// branch and the distillation from it, all on one set of weights.
#[allow(clippy::too_many_arguments)]
pub fn mode_pair_loss<S: Scalar>(
    g: &mut Graph<S>,
    b: &Bound,
    cfg: &ModelConfig,
    features: &Tensor<S>,
    tokens: &[usize],
    schedule: &ContextSchedule,
    opts: &LossOptions,
    drop: &mut Dropout,
) -> Result<(Var, LossBundle)> {
    let w = opts.weights;
    let stream = forward_lattice(g, b, cfg, features, tokens, schedule, drop)?;
    let l_stream = transducer_loss_op(g, stream, tokens)?;
    let mut total = g.scale(l_stream, S::lit(w.stream));
    let (mut lf, mut ld) = (0.0, 0.0);
    if w.uses_full_branch() {
        let full_sched = ContextSchedule::full(cfg.audio_layers);
        let full = forward_lattice(g, b, cfg, features, tokens, &full_sched, drop)?;
        let l_full = transducer_loss_op(g, full, tokens)?;
        let teacher = merge_posteriors(&PosteriorLattice::from_tensor(g.value(full))?, tokens)?;
        let l_distill = distill_kl_op(g, stream, &teacher, tokens, opts.shift)?;
        lf = g.value(l_full).item().as_f64();
        ld = g.value(l_distill).item().as_f64();
        let a = g.scale(l_full, S::lit(w.full));
        let c = g.scale(l_distill, S::lit(w.distill));
        total = g.add(total, a)?;
        total = g.add(total, c)?;
    }
    let bundle = LossBundle {
        l_stream: g.value(l_stream).item().as_f64(),
        l_full: lf,
        l_distill: ld,
        total: g.value(total).item().as_f64(),
        schedule_used: schedule.clone(),
    };
    Ok((total, bundle))
}

/// Dual-mode objective with a fixed per-layer lookahead `c_fixed`.
#[allow(clippy::too_many_arguments)]
pub fn dual_mode_loss<S: Scalar>(
    g: &mut Graph<S>,
    b: &Bound,
    cfg: &ModelConfig,
    features: &Tensor<S>,
    tokens: &[usize],
    c_fixed: usize,
    opts: &LossOptions,
    drop: &mut Dropout,
) -> Result<(Var, LossBundle)> {
    let schedule = ContextSchedule::fixed(c_fixed, cfg.audio_layers);
    mode_pair_loss(g, b, cfg, features, tokens, &schedule, opts, drop)
}

/// Multi-mode objective: one schedule drawn from `spec`, then the dual-mode
/// structure with that schedule as the streaming branch.
#[allow(clippy::too_many_arguments)]
pub fn multi_mode_loss<S: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<S>,
    b: &Bound,
    cfg: &ModelConfig,
    features: &Tensor<S>,
    tokens: &[usize],
    spec: SamplerSpec,
    rng: &mut R,
    opts: &LossOptions,
    drop: &mut Dropout,
) -> Result<(Var, LossBundle)> {
    let schedule = sample_schedule(spec, cfg.audio_layers, rng);
    mode_pair_loss(g, b, cfg, features, tokens, &schedule, opts, drop)
}
