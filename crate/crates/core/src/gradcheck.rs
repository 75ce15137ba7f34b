//! Central-difference verification of analytic gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::param::HasParams;
use crate::real::Real;
use crate::rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per parameter tensor; tensors smaller than this
    /// are checked exhaustively.
    pub coords_per_param: usize,
    pub seed: u64,
    /// Fourth-order five-point central stencil instead of the two-point one.
    pub five_point: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            coords_per_param: 6,
            seed: 0,
            five_point: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst: Option<CoordinateCheck>,
    pub checked: usize,
    /// Coordinates where the loss was not finite at a perturbed point.
    pub non_finite: Vec<(String, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.non_finite.is_empty() && self.checked > 0 && self.max_relative_error < tolerance
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.non_finite.extend(other.non_finite);
        if other.max_relative_error > self.max_relative_error || self.worst.is_none() {
            self.max_relative_error = self.max_relative_error.max(other.max_relative_error);
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape's gradient of `loss` with central differences over a
/// sample of every trainable coordinate of `model`.
pub fn grad_check<T, M, F>(model: &mut M, mut loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    T: Real,
    M: HasParams<T>,
    F: for<'a> FnMut(&'a M, &mut Graph<'a, T>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new();
        let l = loss(model, &mut g)?;
        g.backward(l)?
    };

    let mut eval = |m: &M| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(m, &mut g)?;
        Ok(g.scalar(l).to_f64())
    };

    let mut rng = rng::seeded(opts.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = model.params().ids().collect();
    let h = T::from_f64(opts.step);
    for id in ids {
        let p = model.params().get(id);
        if !p.requires_grad {
            continue;
        }
        let name = p.name.clone();
        let numel = p.value.numel();
        let analytic = grads.param(model.params().param_ref(id)).map(|t| t.data().to_vec());
        let coords: Vec<usize> = if numel <= opts.coords_per_param {
            (0..numel).collect()
        } else {
            index::sample(&mut rng, numel, opts.coords_per_param).into_vec()
        };
        for i in coords {
            let original = model.params().value(id).data()[i];
            let mut at = |m: &mut M, offset: T| -> Result<f64> {
                m.params_mut().get_mut(id).value.data_mut()[i] = original + offset;
                let v = eval(m);
                m.params_mut().get_mut(id).value.data_mut()[i] = original;
                v
            };
            let (plus, minus) = (at(model, h)?, at(model, -h)?);
            let (plus2, minus2) = if opts.five_point {
                (at(model, h + h)?, at(model, -(h + h))?)
            } else {
                (0.0, 0.0)
            };
            if [plus, minus, plus2, minus2].iter().any(|v| !v.is_finite()) {
                report.non_finite.push((name.clone(), i));
                continue;
            }
            let numeric = if opts.five_point {
                (8.0 * (plus - minus) - (plus2 - minus2)) / (12.0 * opts.step)
            } else {
                // perturbation actually applied, after rounding to T
                let step = ((original + h) - (original - h)).to_f64();
                (plus - minus) / step
            };
            let a = analytic.as_ref().map_or(0.0, |g| g[i].to_f64());
            let rel = relative_error(a, numeric);
            report.checked += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(rel);
                report.worst = Some(CoordinateCheck {
                    param: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    relative_error: rel,
                });
            }
        }
    }
    Ok(report)
}
