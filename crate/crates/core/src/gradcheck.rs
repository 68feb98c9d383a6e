//! Central finite-difference gradient checks against the tape.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Bound, ParamSet};
use crate::tensor::{Graph, Tensor, Var};

/// Options for [`finite_difference_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many coordinates (uniformly sampled, seeded).
    pub max_coords: usize,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is zero are judged on absolute error near round-off.
    pub rel_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 400,
            rel_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `f` with respect to `params` against central
/// differences. `f` must be deterministic.
pub fn finite_difference_check<F>(mut f: F, params: &ParamSet<f64>, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let loss = f(&mut g, &bound)?;
    g.backward(loss)?;
    let analytic: Vec<(String, Vec<f64>)> = params
        .iter()
        .map(|(name, t)| {
            let grad = g
                .grad(bound.get(name))
                .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec);
            (name.to_owned(), grad)
        })
        .collect();

    let coords: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(ti, (_, gr))| (0..gr.len()).map(move |j| (ti, j)))
        .collect();
    let chosen: Vec<usize> = if coords.len() <= opts.max_coords {
        (0..coords.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut idx = sample(&mut rng, coords.len(), opts.max_coords).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let l = f(&mut g, &b)?;
        Ok(g.value(l).item())
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for ci in chosen {
        let (ti, j) = coords[ci];
        let name = analytic[ti].0.clone();
        let orig = params.get(&name).unwrap().data()[j];
        work.get_mut(&name).unwrap().data_mut()[j] = orig + opts.step;
        let up = eval(&work)?;
        work.get_mut(&name).unwrap().data_mut()[j] = orig - opts.step;
        let down = eval(&work)?;
        work.get_mut(&name).unwrap().data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * opts.step);
        let a = analytic[ti].1[j];
        let err = relative_error(a, numeric, opts.rel_floor);
        report.coords_checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((name, j, a, numeric));
        }
    }
    Ok(report)
}

/// Convenience wrapper for checking a function of a few plain tensors.
pub fn check_tensors<F>(inputs: &[Tensor<f64>], mut f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut p = ParamSet::new();
    for (i, t) in inputs.iter().enumerate() {
        p.insert(format!("x{i}"), t.clone());
    }
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("x{i}")).collect();
    finite_difference_check(
        |g, b| {
            let vars: Vec<Var> = names.iter().map(|n| b.get(n)).collect();
            f(g, &vars)
        },
        &p,
        opts,
    )
}
