//! Context sweeps: one set of weights decoded under several inference schedules.

use std::fmt::{self, Write as _};

use crate::data::Utterance;
use crate::decode::{edit_distance, error_rate, greedy_decode};
use crate::error::{contract, Result};
use crate::masking::{ContextSchedule, SamplerSpec};
use crate::model::ModelConfig;
use crate::params::ParamSet;

/// How a model was trained, for labelling report rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainTag {
    pub sampler: SamplerSpec,
    /// Whether the full-context branch contributed to training.
    pub full_branch: bool,
}

impl TrainTag {
    /// Whether `schedule` lies inside the training distribution's support.
    pub fn matches(&self, schedule: &ContextSchedule) -> bool {
        if schedule.is_full() {
            self.full_branch || self.sampler == SamplerSpec::FullContext
        } else {
            self.sampler.supports(schedule)
        }
    }
}

impl fmt::Display for TrainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let regime = match (self.full_branch, self.sampler) {
            (false, _) => "single",
            (true, SamplerSpec::Fixed(_)) => "dual",
            (true, _) => "multi",
        };
        write!(f, "{regime}/{}", self.sampler)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub train_tag: String,
    pub schedule: String,
    /// Total lookahead C; `None` for full context.
    pub total_context: Option<usize>,
    pub errors: usize,
    pub ref_tokens: usize,
    pub error_rate: f64,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportMeta {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub metadata: ReportMeta,
}

impl EvalReport {
    pub fn row(&self, train_tag: &str, schedule: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.train_tag == train_tag && r.schedule == schedule)
    }

    pub fn error_at(&self, schedule: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.schedule == schedule).map(|r| r.error_rate)
    }

    /// Appends the rows of another sweep, keeping this report's metadata.
    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
    }

    /// One `key=value` record per cell after two metadata lines.
    pub fn render_records(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# seed={}", self.metadata.seed).unwrap();
        writeln!(s, "# config_hash={}", self.metadata.config_hash).unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "cell train={} schedule={} C={} errors={} ref_tokens={} error_rate={:.6} matched={}",
                r.train_tag,
                r.schedule,
                r.total_context.map_or("inf".into(), |c| c.to_string()),
                r.errors,
                r.ref_tokens,
                r.error_rate,
                r.matched
            )
            .unwrap();
        }
        s
    }

    /// Aligned matrix of error rates (percent), training regimes down and
    /// schedules across. Mismatched cells carry a trailing `*`.
    pub fn render_table(&self) -> String {
        let mut tags: Vec<&str> = Vec::new();
        let mut scheds: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !tags.contains(&r.train_tag.as_str()) {
                tags.push(&r.train_tag);
            }
            if !scheds.contains(&r.schedule.as_str()) {
                scheds.push(&r.schedule);
            }
        }
        let mut grid: Vec<Vec<String>> = vec![std::iter::once("train \\ infer")
            .chain(scheds.iter().copied())
            .map(String::from)
            .collect()];
        for tag in &tags {
            let mut line = vec![tag.to_string()];
            for sched in &scheds {
                line.push(match self.row(tag, sched) {
                    Some(r) => format!("{:.2}{}", 100.0 * r.error_rate, if r.matched { " " } else { "*" }),
                    None => "-".into(),
                });
            }
            grid.push(line);
        }
        let cols = scheds.len() + 1;
        let widths: Vec<usize> = (0..cols)
            .map(|c| grid.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for line in &grid {
            let cells: Vec<String> = line
                .iter()
                .enumerate()
                .map(|(c, v)| {
                    if c == 0 {
                        format!("{v:<w$}", w = widths[c])
                    } else {
                        format!("{v:>w$}", w = widths[c])
                    }
                })
                .collect();
            writeln!(s, "{}", cells.join("  ").trim_end()).unwrap();
        }
        writeln!(
            s,
            "error rate in %, * = mismatched (schedule outside the training support)"
        )
        .unwrap();
        s
    }

    /// `train_tag,schedule,C,error_rate,matched`; full context has an empty C.
    pub fn render_csv(&self) -> String {
        let mut s = format!(
            "# seed={} config_hash={}\ntrain_tag,schedule,C,error_rate,matched\n",
            self.metadata.seed, self.metadata.config_hash
        );
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{:.6},{}",
                r.train_tag,
                r.schedule,
                r.total_context.map_or(String::new(), |c| c.to_string()),
                r.error_rate,
                r.matched
            )
            .unwrap();
        }
        s
    }
}

/// Default inference schedules: fixed 0, 1, 2 per layer, then full context.
pub fn default_schedules(layers: usize) -> Vec<ContextSchedule> {
    let mut v: Vec<_> = (0..=2).map(|c| ContextSchedule::fixed(c, layers)).collect();
    v.push(ContextSchedule::full(layers));
    v
}

/// Greedy-decodes every utterance under every schedule with the same
/// read-only weights and scores corpus-level error rates.
pub fn context_sweep(
    params: &ParamSet<f64>,
    cfg: &ModelConfig,
    data: &[Utterance],
    schedules: &[ContextSchedule],
    tag: &TrainTag,
    max_symbols: usize,
) -> Result<EvalReport> {
    if schedules.is_empty() {
        return Err(contract("context sweep needs at least one schedule"));
    }
    let mut order: Vec<&Utterance> = data.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let tag_text = tag.to_string();
    let mut rows = Vec::with_capacity(schedules.len());
    for sched in schedules {
        let (mut errors, mut ref_tokens) = (0, 0);
        for u in &order {
            let hyp = greedy_decode(params, cfg, &u.features, sched, max_symbols)?;
            errors += edit_distance(&hyp, &u.tokens).errors();
            ref_tokens += u.tokens.len();
        }
        rows.push(ReportRow {
            train_tag: tag_text.clone(),
            schedule: sched.encode(),
            total_context: sched.total(),
            errors,
            ref_tokens,
            error_rate: error_rate(errors, ref_tokens),
            matched: tag.matches(sched),
        });
    }
    Ok(EvalReport {
        rows,
        metadata: ReportMeta::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, TaskSpec};
    use crate::model::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matched_flags_follow_support() {
        let l = 4;
        let multi = TrainTag {
            sampler: SamplerSpec::TiedUniform { lo: 0, hi: 2 },
            full_branch: true,
        };
        let base = TrainTag {
            sampler: SamplerSpec::Fixed(1),
            full_branch: false,
        };
        let flags = |t: &TrainTag| default_schedules(l).iter().map(|s| t.matches(s)).collect::<Vec<_>>();
        assert_eq!(flags(&multi), [true, true, true, true]);
        assert_eq!(flags(&base), [false, true, false, false]);
        assert_eq!(multi.to_string(), "multi/tied-uniform:0:2");
        assert_eq!(base.to_string(), "single/fixed:1");
    }

    #[test]
    fn sweep_shape_purity_and_rendering() {
        let task = TaskSpec {
            max_tokens: 5,
            ..TaskSpec::default()
        };
        let cfg = ModelConfig {
            audio_layers: 2,
            ..ModelConfig::default()
        };
        let params: ParamSet<f64> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let before = params.clone();
        let data = gen_dataset(&task, 3, 9, "s").unwrap();
        let tag = TrainTag {
            sampler: SamplerSpec::Fixed(1),
            full_branch: false,
        };
        let scheds = default_schedules(cfg.audio_layers);
        let a = context_sweep(&params, &cfg, &data, &scheds, &tag, 4).unwrap();
        let b = context_sweep(&params, &cfg, &data, &scheds, &tag, 4).unwrap();
        assert_eq!(params, before);
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 4);
        assert_eq!(a.rows[3].total_context, None);
        assert!(a.rows.iter().all(|r| r.error_rate >= 0.0));
        let only_full = context_sweep(&params, &cfg, &data, &scheds[3..], &tag, 4).unwrap();
        assert_eq!(only_full.rows.len(), 1);

        let table = a.render_table();
        assert_eq!(table.lines().count(), 3);
        assert!(table.contains('*'));
        let csv = a.render_csv();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.lines().last().unwrap().starts_with("single/fixed:1,full,,"));
        assert_eq!(a.render_records().lines().filter(|l| l.starts_with("cell ")).count(), 4);
    }

    #[test]
    fn empty_schedule_list_is_rejected() {
        let cfg = ModelConfig::default();
        let params: ParamSet<f64> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let tag = TrainTag {
            sampler: SamplerSpec::FullContext,
            full_branch: true,
        };
        assert!(context_sweep(&params, &cfg, &[], &[], &tag, 4).is_err());
    }
}
