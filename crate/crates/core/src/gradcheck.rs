// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite-difference gradient checks against the tape.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates; more are subsampled at random.
    pub max_coords: usize,
    /// A coordinate whose one-sided slopes differ by more than this is
    /// treated as sitting on a kink and excluded.
    pub kink_threshold: f64,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: 200,
            kink_threshold: 1e-2,
            seed: 0,
        }
    }
}

/// Location of one scalar parameter entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coord {
    pub param: usize,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub checked: usize,
    /// Coordinates excluded because a kink lies within `±step`.
    pub kinks: Vec<Coord>,
    pub max_error: f64,
    pub worst: Option<Coord>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

impl std::fmt::Display for FdReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "checked {} coords ({} kinks excluded), max rel error {:.3e} (tol {:.1e})",
            self.checked,
            self.kinks.len(),
            self.max_error,
            self.tolerance
        )?;
        if let Some(w) = self.worst {
            write!(
                f,
                ", worst at param {} index {}: analytic {:.9e} vs numeric {:.9e}",
                w.param, w.index, self.worst_analytic, self.worst_numeric
            )?;
        }
        Ok(())
    }
}

/// Compares tape gradients of `loss` with central differences.
///
/// `loss` builds a scalar on the supplied tape from parameter leaves, one per
/// entry of `params`. It must be deterministic. The relative error per
/// coordinate is `|analytic − numeric| / max(1, |analytic|)`.
pub fn finite_difference_check<F>(
    params: &[DenseMatrix],
    loss: F,
    cfg: FdConfig,
) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(cfg.step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step must be > 0, got {}",
            cfg.step
        )));
    }
    let eval = |values: &[DenseMatrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.param(p.clone())).collect();
        let root = loss(&mut tape, &vars)?;
        tape.value(root)
            .item()
            .ok_or_else(|| Error::shape("finite_difference_check", "loss is not 1x1"))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = loss(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let base = tape.value(root).item().unwrap_or(f64::NAN);

    let all: Vec<Coord> = params
        .iter()
        .enumerate()
        .flat_map(|(p, m)| (0..m.len()).map(move |index| Coord { param: p, index }))
        .collect();
    let coords: Vec<Coord> = if all.len() > cfg.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut picked: Vec<usize> = sample(&mut rng, all.len(), cfg.max_coords).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| all[i]).collect()
    } else {
        all
    };

    let mut report = FdReport {
        checked: 0,
        kinks: Vec::new(),
        max_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        tolerance: cfg.tolerance,
    };
    let mut work: Vec<DenseMatrix> = params.to_vec();
    for coord in coords {
        let original = work[coord.param].data()[coord.index];
        work[coord.param].data_mut()[coord.index] = original + cfg.step;
        let plus = eval(&work)?;
        work[coord.param].data_mut()[coord.index] = original - cfg.step;
        let minus = eval(&work)?;
        work[coord.param].data_mut()[coord.index] = original;

        let forward = (plus - base) / cfg.step;
        let backward = (base - minus) / cfg.step;
        if (forward - backward).abs()
            > cfg.kink_threshold * forward.abs().max(backward.abs()).max(1.0)
        {
            report.kinks.push(coord);
            continue;
        }
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let analytic = grads
            .get(vars[coord.param])
            .map_or(0.0, |g| g.data()[coord.index]);
        let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_error {
            report.max_error = err;
            report.worst = Some(coord);
            report.worst_analytic = analytic;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_tightly() {
        let x = DenseMatrix::from_rows(&[vec![0.3, -1.7, 2.2]]).unwrap();
        let cfg = FdConfig {
            tolerance: 1e-6,
            ..FdConfig::default()
        };
        let r = finite_difference_check(
            &[x],
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let s = t.scale(sq, 1.5)?;
                t.sum(s)
            },
            cfg,
        )
        .unwrap();
        assert!(r.passed(), "{r}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn relu_kink_is_flagged_and_excluded() {
        let x = DenseMatrix::from_rows(&[vec![0.0, 0.5, -0.5]]).unwrap();
        let r = finite_difference_check(
            &[x],
            |t, v| {
                let r = t.relu(v[0])?;
                t.sum(r)
            },
            FdConfig::default(),
        )
        .unwrap();
        assert_eq!(r.kinks, vec![Coord { param: 0, index: 0 }]);
        assert_eq!(r.checked, 2);
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn wrong_gradient_is_reported() {
        // x ⊙ stopgrad(x): value x², tape gradient x instead of 2x.
        let x = DenseMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let r = finite_difference_check(
            &[x],
            |t, v| {
                let detached = t.constant(t.value(v[0]).clone());
                let m = t.mul(v[0], detached)?;
                t.sum(m)
            },
            FdConfig::default(),
        )
        .unwrap();
        assert!(!r.passed(), "{r}");
        assert!((r.max_error - 1.0).abs() < 1e-6, "{r}");
    }

    #[test]
    fn rejects_nonpositive_step() {
        let cfg = FdConfig {
            step: 0.0,
            ..FdConfig::default()
        };
        assert!(
            finite_difference_check(&[DenseMatrix::scalar(1.0)], |t, v| t.sum(v[0]), cfg).is_err()
        );
    }
}
