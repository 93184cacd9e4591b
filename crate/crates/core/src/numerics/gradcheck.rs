//! Central finite-difference verification of tape gradients.
//!
//! The analytic side runs at the caller's precision `T`; the numeric side
//! always runs in `f64` at the same (rounded) point, so a 32-bit check
//! measures only the error of the 32-bit backward pass.

use rand::seq::index::sample;

use super::{rng, Element, Result, Tape, Tensor, Var};

/// A scalar-valued function of tape inputs, evaluable at any precision.
pub trait ScalarFn {
    fn eval<T: Element>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a − n| / max(|a|, |n|, floor)` over checked coordinates,
    /// where `floor` is the larger of the absolute floor and the scale floor
    /// times the largest gradient magnitude (all analytic components plus
    /// the sampled numeric ones).
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords_checked: usize,
    /// (input index, flat element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    /// Set when evaluation failed or produced non-finite values.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.failure.is_none() && self.max_rel_err < tol
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub eps: f64,
    /// Magnitude below which errors are measured absolutely.
    pub abs_floor: f64,
    /// Fraction of the largest gradient component below which errors are
    /// measured absolutely.
    pub scale_floor: f64,
    /// Check at most this many coordinates, sampled uniformly.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            abs_floor: 1e-8,
            scale_floor: 1e-3,
            max_coords: None,
            seed: 0,
        }
    }
}

fn eval_value<F: ScalarFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f.eval(&mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

impl GradCheck {
    pub fn run<T: Element, F: ScalarFn>(&self, f: &F, inputs: &[Tensor<f64>]) -> GradCheckReport {
        match self.try_run::<T, F>(f, inputs) {
            Ok(r) => r,
            Err(e) => GradCheckReport {
                max_rel_err: f64::INFINITY,
                max_abs_err: f64::INFINITY,
                coords_checked: 0,
                worst: None,
                failure: Some(e.to_string()),
            },
        }
    }

    fn try_run<T: Element, F: ScalarFn>(
        &self,
        f: &F,
        inputs: &[Tensor<f64>],
    ) -> Result<GradCheckReport> {
        // Round the evaluation point to T so both sides see the same inputs.
        let point: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast::<T>().cast::<f64>()).collect();

        let mut tape = Tape::<T>::new();
        let vars: Vec<Var> = point
            .iter()
            .map(|t| tape.leaf(t.cast::<T>().with_grad()))
            .collect();
        let out = f.eval(&mut tape, &vars)?;
        let value = tape.value(out).data()[0].to_f64();
        let grads = tape.backward(out)?;

        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            coords_checked: 0,
            worst: None,
            failure: None,
        };
        if !value.is_finite() {
            report.failure = Some("non-finite function value".into());
            return Ok(report);
        }

        let mut coords: Vec<(usize, usize)> = point
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
            .collect();
        if let Some(limit) = self.max_coords {
            if coords.len() > limit {
                let mut r = rng::seeded(self.seed);
                let mut picked: Vec<usize> = sample(&mut r, coords.len(), limit).into_vec();
                picked.sort_unstable();
                coords = picked.into_iter().map(|k| coords[k]).collect();
            }
        }

        let mut work = point.clone();
        let mut pairs = Vec::with_capacity(coords.len());
        for (input, idx) in coords {
            let analytic = grads.get(vars[input]).map_or(0.0, |g| g[idx].to_f64());
            let base = work[input].data()[idx];
            work[input].data_mut()[idx] = base + self.eps;
            let plus = eval_value(f, &work)?;
            work[input].data_mut()[idx] = base - self.eps;
            let minus = eval_value(f, &work)?;
            work[input].data_mut()[idx] = base;
            let numeric = (plus - minus) / (2.0 * self.eps);
            pairs.push(((input, idx), analytic, numeric));
        }
        // Scale over every analytic component, not only the sampled ones, so
        // sampling mostly-zero coordinates does not shrink the floor.
        let full_scale = vars
            .iter()
            .filter_map(|&v| grads.get(v))
            .flat_map(|g| g.iter().map(|x| x.to_f64().abs()))
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max);
        let scale = pairs
            .iter()
            .map(|(_, a, n)| a.abs().max(n.abs()))
            .filter(|v| v.is_finite())
            .fold(full_scale, f64::max);
        let floor = self.abs_floor.max(self.scale_floor * scale);
        for (coord, analytic, numeric) in pairs {
            report.coords_checked += 1;
            if !numeric.is_finite() || !analytic.is_finite() {
                report.failure = Some(format!("non-finite gradient at {coord:?}"));
                report.max_rel_err = f64::INFINITY;
                report.worst = Some(coord);
                continue;
            }
            let abs = (analytic - numeric).abs();
            let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some(coord);
            }
        }
        Ok(report)
    }
}

/// Checks every coordinate of `inputs` with step `eps` and analytic
/// gradients computed at precision `T`.
pub fn finite_diff_check<T: Element, F: ScalarFn>(
    f: &F,
    inputs: &[Tensor<f64>],
    eps: f64,
) -> GradCheckReport {
    GradCheck {
        eps,
        ..GradCheck::default()
    }
    .run::<T, F>(f, inputs)
}
