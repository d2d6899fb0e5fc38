//! Two-parameter saturating fits `y = 1 - V u / (K + u)` by damped Gauss-Newton.

use super::MmParams;
use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 200;
pub const STEP_TOLERANCE: f64 = 1e-10;
/// Bounds on `V / K` and `1 / K`. The lower bound on `1 / K` stands in for the linear
/// limit `V, K -> inf`, which the data may favor.
const PARAM_BOUNDS: [f64; 2] = [1e-12, 1e12];

const START_V: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
const START_K: [f64; 5] = [0.01, 0.1, 0.5, 2.0, 10.0];

/// Outcome of one fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmFit {
    pub params: MmParams,
    pub sse: f64,
    pub iterations: usize,
    pub converged: bool,
}

// Internally the model is `1 - s u / (1 + c u)` with `s = V / K`, `c = 1 / K`, which
// keeps the linear limit at a finite point.
fn residuals(theta: [f64; 2], u: &[f64], y: &[f64]) -> (Vec<f64>, Vec<[f64; 2]>) {
    let [s, c] = theta;
    u.iter()
        .zip(y)
        .map(|(&u, &y)| {
            let d = 1.0 + c * u;
            (1.0 - s * u / d - y, [-u / d, s * u * u / (d * d)])
        })
        .unzip()
}

fn sse(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn to_params(theta: [f64; 2]) -> MmParams {
    MmParams { v: theta[0] / theta[1], k: 1.0 / theta[1] }
}

fn lm(start: MmParams, u: &[f64], y: &[f64]) -> MmFit {
    let clamp = |t: f64| t.clamp(PARAM_BOUNDS[0], PARAM_BOUNDS[1]);
    let mut theta = [clamp(start.v / start.k), clamp(1.0 / start.k)];
    let (mut r, mut j) = residuals(theta, u, y);
    let mut cost = sse(&r);
    let mut mu = 1e-3;
    for it in 1..=MAX_ITERATIONS {
        let mut a = [[0.0; 2]; 2];
        let mut g = [0.0; 2];
        for (ri, ji) in r.iter().zip(&j) {
            for p in 0..2 {
                g[p] += ji[p] * ri;
                for q in 0..2 {
                    a[p][q] += ji[p] * ji[q];
                }
            }
        }
        // Parameters pinned at a bound with the descent direction pointing outward.
        let active = [0, 1].map(|p| {
            (theta[p] <= PARAM_BOUNDS[0] && g[p] > 0.0) || (theta[p] >= PARAM_BOUNDS[1] && g[p] < 0.0)
        });
        let mut moved = None;
        for _ in 0..40 {
            let m00 = a[0][0] * (1.0 + mu) + 1e-300;
            let m11 = a[1][1] * (1.0 + mu) + 1e-300;
            let det = m00 * m11 - a[0][1] * a[1][0];
            if !(det.is_finite() && det > 0.0) {
                mu *= 10.0;
                continue;
            }
            let (d0, d1) = match active {
                [false, false] => (-(m11 * g[0] - a[0][1] * g[1]) / det, -(m00 * g[1] - a[1][0] * g[0]) / det),
                [true, false] => (0.0, -g[1] / m11),
                [false, true] => (-g[0] / m00, 0.0),
                [true, true] => (0.0, 0.0),
            };
            let cand = [clamp(theta[0] + d0), clamp(theta[1] + d1)];
            let (rc, jc) = residuals(cand, u, y);
            let cc = sse(&rc);
            if cc.is_finite() && cc <= cost {
                let scale = theta[0].abs().max(theta[1].abs()).max(1.0);
                moved = Some((cand[0] - theta[0]).hypot(cand[1] - theta[1]) / scale);
                theta = cand;
                r = rc;
                j = jc;
                cost = cc;
                mu = (mu / 3.0).max(1e-15);
                break;
            }
            mu *= 4.0;
        }
        match moved {
            Some(step) if step >= STEP_TOLERANCE && cost > 0.0 => {}
            _ => return MmFit { params: to_params(theta), sse: cost, iterations: it, converged: true },
        }
    }
    MmFit { params: to_params(theta), sse: cost, iterations: MAX_ITERATIONS, converged: false }
}

/// Fits `y = 1 - V u / (K + u)` over a grid of starting points and keeps the best
/// converged result.
pub fn fit_mm(u: &[f64], y: &[f64]) -> Result<MmFit> {
    if u.len() != y.len() || u.len() < 3 {
        return Err(Error::Invalid("saturating fit needs at least 3 points".into()));
    }
    if !u.iter().chain(y).all(|v| v.is_finite()) || u.iter().any(|&v| v < 0.0) {
        return Err(Error::Invalid("fit data must be finite with non-negative abscissae".into()));
    }
    let mut best: Option<MmFit> = None;
    let mut best_any: Option<MmFit> = None;
    for &v in &START_V {
        for &k in &START_K {
            let fit = lm(MmParams { v, k }, u, y);
            let better = |b: &Option<MmFit>| b.is_none_or(|b| fit.sse < b.sse);
            if better(&best_any) {
                best_any = Some(fit);
            }
            if fit.converged && better(&best) {
                best = Some(fit);
            }
        }
    }
    match best {
        Some(fit) => Ok(fit),
        None => {
            let b = best_any.expect("at least one start");
            Err(Error::FitFailed {
                message: format!("no start converged in {MAX_ITERATIONS} iterations (sse {:.3e})", b.sse),
                best: Box::new((b.params, b.params)),
            })
        }
    }
}
