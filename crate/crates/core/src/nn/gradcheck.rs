//! Central finite-difference gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Check at most this many coordinates per parameter (sampled with
    /// `seed`); `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Smallest denominator used for the relative error.
    pub floor: f64,
}

impl GradCheckOptions {
    pub fn new(h: f64, tol: f64) -> Self {
        Self {
            h,
            tol,
            max_coords: None,
            seed: 0,
            floor: 1e-6,
        }
    }

    /// Raises the denominator floor. Gradients that vanish identically (a
    /// key bias under softmax, say) leave only roundoff in the numeric
    /// estimate, which a tiny floor turns into a large relative error.
    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn sampled(mut self, max_coords: usize, seed: u64) -> Self {
        self.max_coords = Some(max_coords);
        self.seed = seed;
        self
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    /// Coordinates left out because the loss has a kink within `h`.
    pub kinks: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub worst: String,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }

    pub fn coords(&self) -> usize {
        self.params.iter().map(|p| p.coords).sum()
    }

    pub fn kinks(&self) -> usize {
        self.params.iter().map(|p| p.kinks).sum()
    }
}

/// Relative error of an analytic gradient component against its numeric
/// estimate. The denominator is the numeric value, floored at 1e-3 of the
/// largest numeric component of the same parameter (and at `floor`) so that
/// near-zero components do not dominate.
fn rel_error(analytic: f64, numeric: f64, scale: f64, floor: f64) -> f64 {
    let denom = numeric.abs().max(1e-3 * scale).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares the gradients accumulated by `loss(module, true)` with central
/// differences of `loss(module, false)` for every non-frozen parameter.
///
/// The closure must run the forward pass and, when its flag is set, the
/// backward pass that accumulates into parameter gradients.
///
/// A coordinate that fails at `h` is retried with the step halved, up to
/// four times. If a finer step agrees with the analytic value the coordinate
/// passes: a non-differentiable point (a ReLU input near zero) was within `h`
/// but not within the finer step. If it still fails, it is counted in `kinks`
/// and left out of the error only when the gap between its one-sided
/// differences did not shrink with the step and is large enough to explain
/// the error. On a smooth loss that gap is proportional to the step, so a
/// wrong gradient there is always reported.
pub fn grad_check<S, M, F>(module: &mut M, mut loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    S: Scalar,
    M: Module<S>,
    F: FnMut(&mut M, bool) -> Result<S>,
{
    if !(1e-6..=1e-3).contains(&opts.h) {
        return Err(Error::InvalidHyper(format!("grad check step {} outside [1e-6, 1e-3]", opts.h)));
    }
    module.zero_grad();
    let base = loss(module, true)?.f64();
    let analytic: Vec<Vec<f64>> = module.params().iter().map(|p| p.grad.to_f64_vec()).collect();
    let frozen: Vec<bool> = module.params().iter().map(|p| p.frozen).collect();
    let names: Vec<String> = module.params().iter().map(|p| p.name.clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        params: Vec::new(),
        max_rel_error: 0.0,
        worst: String::new(),
        tol: opts.tol,
    };
    for (pi, grads) in analytic.iter().enumerate() {
        if frozen[pi] {
            continue;
        }
        let n = grads.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => rand::seq::index::sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            numeric.push(central(module, &mut loss, pi, c, opts.h, base)?);
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.0.abs()));
        let mut kinks = 0;
        let mut worst = 0.0f64;
        for (&c, &(num, gap)) in coords.iter().zip(&numeric) {
            let mut err = rel_error(grads[c], num, scale, opts.floor);
            if err >= opts.tol {
                let mut step = opts.h;
                let mut last_gap = gap;
                for _ in 0..4 {
                    step /= 2.0;
                    let (n2, g2) = central(module, &mut loss, pi, c, step, base)?;
                    last_gap = g2;
                    err = err.min(rel_error(grads[c], n2, scale, opts.floor));
                    if err < opts.tol {
                        break;
                    }
                }
                // 16x smaller step: a smooth gap shrinks 16x, a kink's barely.
                // At a kink the central difference is off by about half the gap.
                if err >= opts.tol && last_gap > gap / 4.0 && gap >= (grads[c] - num).abs() {
                    kinks += 1;
                    continue;
                }
            }
            worst = worst.max(err);
        }
        if worst > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(worst);
            if worst >= report.max_rel_error {
                report.worst = names[pi].clone();
            }
        }
        report.params.push(ParamCheck {
            name: names[pi].clone(),
            coords: coords.len(),
            kinks,
            max_rel_error: worst,
        });
    }
    module.zero_grad();
    Ok(report)
}

/// Central difference of one coordinate, plus the gap between its one-sided
/// differences.
fn central<S, M, F>(module: &mut M, loss: &mut F, pi: usize, c: usize, h: f64, base: f64) -> Result<(f64, f64)>
where
    S: Scalar,
    M: Module<S>,
    F: FnMut(&mut M, bool) -> Result<S>,
{
    let orig = module.params_mut()[pi].value.data()[c];
    module.params_mut()[pi].value.data_mut()[c] = orig + S::of(h);
    let plus = loss(module, false)?.f64();
    module.params_mut()[pi].value.data_mut()[c] = orig - S::of(h);
    let minus = loss(module, false)?.f64();
    module.params_mut()[pi].value.data_mut()[c] = orig;
    Ok(((plus - minus) / (2.0 * h), ((plus - base) / h - (base - minus) / h).abs()))
}
