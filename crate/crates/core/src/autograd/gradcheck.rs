//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Finite-difference settings. Relative error per coordinate is
/// `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    pub tol: f64,
    pub floor: f64,
    /// Check at most this many randomly chosen coordinates.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub tol: f64,
    pub pass: bool,
}

impl GradCheck {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }

    /// `f` maps a point to `(value, gradient)`. It is evaluated twice at
    /// `point` first; differing values mean the check cannot be trusted.
    pub fn run<Func>(&self, point: &[f64], mut f: Func) -> Result<GradCheckReport>
    where
        Func: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let (v0, analytic) = f(point)?;
        let (v1, _) = f(point)?;
        if v0.to_bits() != v1.to_bits() {
            return Err(Error::NonDeterministic(format!(
                "two evaluations at the same point gave {v0} and {v1}"
            )));
        }
        if analytic.len() != point.len() {
            return Err(Error::shape(
                "grad_check",
                format!("{} gradient entries for {} coordinates", analytic.len(), point.len()),
            ));
        }

        let coords: Vec<usize> = match self.max_coords {
            Some(k) if k < point.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut c = sample(&mut rng, point.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..point.len()).collect(),
        };

        let mut x = point.to_vec();
        let mut worst = (0.0_f64, 0usize);
        for &i in &coords {
            let orig = x[i];
            x[i] = orig + self.step;
            let (up, _) = f(&x)?;
            x[i] = orig - self.step;
            let (down, _) = f(&x)?;
            x[i] = orig;
            let numeric = (up - down) / (2.0 * self.step);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
            if !rel.is_finite() {
                return Err(Error::NonFinite { op: "grad_check" });
            }
            if rel > worst.0 {
                worst = (rel, i);
            }
        }
        Ok(GradCheckReport {
            coords_checked: coords.len(),
            max_rel_error: worst.0,
            worst_coord: worst.1,
            tol: self.tol,
            pass: worst.0 <= self.tol,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_at_zero() {
        let r = GradCheck::with_tol(1e-4)
            .run(&[0.0], |x| Ok((x[0].exp(), vec![x[0].exp()])))
            .unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.coords_checked, 1);
    }

    #[test]
    fn wrong_gradient_fails() {
        let r = GradCheck::default()
            .run(&[1.0, 2.0], |x| Ok((x[0] * x[1], vec![x[1], 0.0])))
            .unwrap();
        assert!(!r.pass);
        assert_eq!(r.worst_coord, 1);
    }

    #[test]
    fn nondeterministic_objective_is_an_error() {
        let mut calls = 0.0;
        let err = GradCheck::default()
            .run(&[1.0], |x| {
                calls += 1.0;
                Ok((x[0] + calls, vec![1.0]))
            })
            .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic(_)));
    }

    #[test]
    fn coordinate_subsampling() {
        let p = vec![0.5; 50];
        let check = GradCheck {
            max_coords: Some(7),
            ..GradCheck::default()
        };
        let r = check
            .run(&p, |x| Ok((x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.0 * v).collect())))
            .unwrap();
        assert_eq!(r.coords_checked, 7);
        assert!(r.pass);
    }
}
