//! Least-squares fit of `y = a * exp(b * x) + c`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const MAX_ITERATIONS: usize = 200;
const STEP_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub rmse: f64,
    pub points: usize,
    pub iterations: usize,
    pub converged: bool,
}

impl TrendFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.a * (self.b * x).exp() + self.c
    }
}

struct Lm {
    theta: [f64; 3],
    sse: f64,
    iterations: usize,
    converged: bool,
}

fn sse(theta: &[f64; 3], xs: &[f64], ys: &[f64]) -> f64 {
    xs.iter().zip(ys).map(|(&x, &y)| (y - theta[0] * (theta[1] * x).exp() - theta[2]).powi(2)).sum()
}

fn solve3(mut m: [[f64; 3]; 3], mut v: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        v.swap(col, piv);
        for r in col + 1..3 {
            let f = m[r][col] / m[col][col];
            let pivot = m[col];
            for (a, b) in m[r][col..].iter_mut().zip(&pivot[col..]) {
                *a -= f * b;
            }
            v[r] -= f * v[col];
        }
    }
    let mut out = [0.0; 3];
    for r in (0..3).rev() {
        let s: f64 = (r + 1..3).map(|k| m[r][k] * out[k]).sum();
        out[r] = (v[r] - s) / m[r][r];
    }
    out.iter().all(|x| x.is_finite()).then_some(out)
}

fn levenberg_marquardt(start: [f64; 3], xs: &[f64], ys: &[f64]) -> Lm {
    let mut theta = start;
    let mut cur = sse(&theta, xs, ys);
    let mut lambda = 1e-3;
    for it in 1..=MAX_ITERATIONS {
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for (&x, &y) in xs.iter().zip(ys) {
            let e = (theta[1] * x).exp();
            let j = [e, theta[0] * x * e, 1.0];
            let r = y - theta[0] * e - theta[2];
            for p in 0..3 {
                jtr[p] += j[p] * r;
                for q in 0..3 {
                    jtj[p][q] += j[p] * j[q];
                }
            }
        }
        loop {
            let mut m = jtj;
            for (p, row) in m.iter_mut().enumerate() {
                row[p] += lambda * jtj[p][p].max(1e-12);
            }
            let Some(step) = solve3(m, jtr) else {
                lambda *= 10.0;
                if lambda > 1e16 {
                    return Lm { theta, sse: cur, iterations: it, converged: false };
                }
                continue;
            };
            let next = [theta[0] + step[0], theta[1] + step[1], theta[2] + step[2]];
            let s = sse(&next, xs, ys);
            if s.is_finite() && s <= cur {
                let norm = step.iter().map(|d| d * d).sum::<f64>().sqrt();
                let scale = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
                theta = next;
                cur = s;
                lambda = (lambda / 10.0).max(1e-12);
                if norm < STEP_TOL * (1.0 + scale) {
                    return Lm { theta, sse: cur, iterations: it, converged: true };
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                // no descent direction left: a stationary point
                return Lm { theta, sse: cur, iterations: it, converged: true };
            }
        }
    }
    Lm { theta, sse: cur, iterations: MAX_ITERATIONS, converged: false }
}

/// Log-linear start for the branch `sign(a) = sign`.
fn initial(xs: &[f64], ys: &[f64], sign: f64) -> Option<[f64; 3]> {
    let (lo, hi) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &y| (l.min(y), h.max(y)));
    let pad = 0.1 * (hi - lo);
    let c = if sign > 0.0 { lo - pad } else { hi + pad };
    let ls: Vec<f64> = ys.iter().map(|&y| (sign * (y - c)).ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let ml = ls.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxl: f64 = xs.iter().zip(&ls).map(|(x, l)| (x - mx) * (l - ml)).sum();
    let b = sxl / sxx;
    let a = sign * (ml - b * mx).exp();
    [a, b, c].iter().all(|v| v.is_finite()).then_some([a, b, c])
}

/// Fits `y = a * exp(b * x) + c` by damped Gauss-Newton from two
/// log-linear starts (one per sign of `a`), keeping the better one.
pub fn fit_exponential(points: &[(f64, f64)]) -> Result<TrendFit> {
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::NonFinite("trend points"));
    }
    if points.len() < 4 {
        return Err(invalid(format!("an exponential trend needs at least four points, got {}", points.len())));
    }
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(invalid("an exponential trend needs at least three distinct x values"));
    }
    let n = points.len();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let (lo, hi) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &y| (l.min(y), h.max(y)));
    if hi == lo {
        return Ok(TrendFit { a: 0.0, b: 0.0, c: lo, rmse: 0.0, points: n, iterations: 0, converged: true });
    }
    // centre and scale x for conditioning; undone below
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let sx = points.iter().map(|p| (p.0 - mx).abs()).fold(0.0, f64::max);
    let xs: Vec<f64> = points.iter().map(|p| (p.0 - mx) / sx).collect();

    let best = [1.0, -1.0]
        .into_iter()
        .filter_map(|sign| initial(&xs, &ys, sign))
        .map(|start| levenberg_marquardt(start, &xs, &ys))
        .reduce(|a, b| if b.sse < a.sse { b } else { a })
        .ok_or_else(|| invalid("no usable starting point for the exponential fit"))?;
    let [a, b, c] = best.theta;
    let fit = TrendFit {
        a: a * (-b * mx / sx).exp(),
        b: b / sx,
        c,
        rmse: (best.sse / n as f64).sqrt(),
        points: n,
        iterations: best.iterations,
        converged: best.converged,
    };
    if ![fit.a, fit.b, fit.c].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("exponential fit"));
    }
    Ok(fit)
}
