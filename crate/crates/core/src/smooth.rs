//! Soft-max regularized dual objectives and a damped Newton minimizer.
//!
//! Every atom `x` with weight `w(x)` picks among options
//! `a_i(x) = theta_i(x) + P_i . zeta(x)` (and optionally the outside option
//! `0`). The hard objective is `sum_x w(x) max_i a_i(x)`; its smoothing
//! replaces the maximum by `eps ln sum exp(a_i / eps)`.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Atoms, utilities and features of a dual problem.
#[derive(Debug, Clone)]
pub(crate) struct OptionField {
    pub w: Vec<f64>,
    /// `theta[x * n + i]`.
    pub theta: Vec<f64>,
    /// `zeta[x * j + k]`; empty means `j = 1` and `zeta = 1`.
    pub zeta: Vec<f64>,
    pub n: usize,
    pub j: usize,
    pub opt_out: bool,
}

impl OptionField {
    pub fn scalar(w: Vec<f64>, theta: Vec<f64>, n: usize, opt_out: bool) -> Self {
        OptionField { w, theta, zeta: Vec::new(), n, j: 1, opt_out }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn zeta_at(&self, x: usize) -> &[f64] {
        if self.zeta.is_empty() {
            &ONE
        } else {
            &self.zeta[x * self.j..(x + 1) * self.j]
        }
    }

    /// Option values at atom `x`.
    pub fn options(&self, p: &[f64], x: usize, out: &mut [f64]) {
        let z = self.zeta_at(x);
        for i in 0..self.n {
            let mut a = self.theta[x * self.n + i];
            for k in 0..self.j {
                a += p[i * self.j + k] * z[k];
            }
            out[i] = a;
        }
    }

    /// Scale of the utilities, at least 1e-300.
    pub fn scale(&self) -> f64 {
        self.theta.iter().fold(0.0f64, |s, t| s.max(t.abs())).max(1e-300)
    }

    /// `sum_x w(x) max(a(x) [, 0])`.
    pub fn hard_value(&self, p: &[f64]) -> f64 {
        let mut a = vec![0.0; self.n];
        let mut total = 0.0;
        for x in 0..self.len() {
            self.options(p, x, &mut a);
            let mut best = if self.opt_out { 0.0 } else { f64::NEG_INFINITY };
            for &v in &a {
                best = best.max(v);
            }
            total += self.w[x] * best;
        }
        total
    }
}

static ONE: [f64; 1] = [1.0];

/// Terms added to the smoothed option value.
#[derive(Debug, Clone, Default)]
pub(crate) struct Extras {
    /// Subtracts `linear . P`.
    pub linear: Vec<f64>,
    /// Adds `sum_i m_i [-P_i]_+` (softplus smoothed), `j = 1` only.
    pub plus: Option<Vec<f64>>,
    /// Adds `(sum_i P_ik)^2 / 2` for every feature `k`.
    pub gauge: bool,
    /// Adds `|P - center|^2 * weight`.
    pub prox: Option<(Vec<f64>, f64)>,
}

/// `eps ln(1 + e^{y/eps})` and its first two derivatives.
pub(crate) fn softplus(y: f64, eps: f64) -> (f64, f64, f64) {
    let t = y / eps;
    let v = y.max(0.0) + eps * (-t.abs()).exp().ln_1p();
    let s = if t >= 0.0 { 1.0 / (1.0 + (-t).exp()) } else { t.exp() / (1.0 + t.exp()) };
    (v, s, s * (1.0 - s) / eps)
}

/// Soft maximum of `a` (and `0` when `with_zero`); writes the choice
/// probabilities of the entries of `a` into `probs`.
pub(crate) fn softmax(a: &[f64], with_zero: bool, eps: f64, probs: &mut [f64]) -> f64 {
    let mut top = if with_zero { 0.0 } else { f64::NEG_INFINITY };
    for &v in a {
        top = top.max(v);
    }
    let mut s = if with_zero { (-top / eps).exp() } else { 0.0 };
    for (k, &v) in a.iter().enumerate() {
        let e = ((v - top) / eps).exp();
        probs[k] = e;
        s += e;
    }
    for pr in probs.iter_mut() {
        *pr /= s;
    }
    top + eps * s.ln()
}

const CHUNK: usize = 1024;

/// Smoothed objective with gradient and (optionally) Hessian.
pub(crate) fn evaluate(
    field: &OptionField,
    extras: &Extras,
    p: &[f64],
    eps: f64,
    hessian: bool,
) -> (f64, Vec<f64>, Vec<f64>) {
    let (n, j) = (field.n, field.j);
    let d = n * j;
    let partial = |range: std::ops::Range<usize>| -> (f64, Vec<f64>, Vec<f64>) {
        let mut val = 0.0;
        let mut g = vec![0.0; d];
        let mut h = if hessian { vec![0.0; d * d] } else { Vec::new() };
        let mut a = vec![0.0; n];
        let mut pr = vec![0.0; n];
        for x in range {
            let wx = field.w[x];
            if wx == 0.0 {
                continue;
            }
            field.options(p, x, &mut a);
            val += wx * softmax(&a, field.opt_out, eps, &mut pr);
            let z = field.zeta_at(x);
            for i in 0..n {
                if pr[i] == 0.0 {
                    continue;
                }
                for k in 0..j {
                    g[i * j + k] += wx * pr[i] * z[k];
                }
            }
            if hessian {
                let c = wx / eps;
                for i in 0..n {
                    if pr[i] == 0.0 {
                        continue;
                    }
                    for i2 in 0..n {
                        let cov = if i == i2 { pr[i] - pr[i] * pr[i2] } else { -pr[i] * pr[i2] };
                        if cov == 0.0 {
                            continue;
                        }
                        for k in 0..j {
                            for k2 in 0..j {
                                h[(i * j + k) * d + i2 * j + k2] += c * cov * z[k] * z[k2];
                            }
                        }
                    }
                }
            }
        }
        (val, g, h)
    };
    let k = field.len();
    let chunks: Vec<(f64, Vec<f64>, Vec<f64>)> = if k >= 4 * CHUNK {
        (0..k.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| partial(c * CHUNK..((c + 1) * CHUNK).min(k)))
            .collect()
    } else {
        vec![partial(0..k)]
    };
    let mut val = 0.0;
    let mut g = vec![0.0; d];
    let mut h = if hessian { vec![0.0; d * d] } else { Vec::new() };
    for (v, gg, hh) in chunks {
        val += v;
        for (a, b) in g.iter_mut().zip(&gg) {
            *a += b;
        }
        for (a, b) in h.iter_mut().zip(&hh) {
            *a += b;
        }
    }
    for (q, c) in extras.linear.iter().enumerate() {
        val -= c * p[q];
        g[q] -= c;
    }
    if let Some(m) = &extras.plus {
        for i in 0..n {
            let (v, s, s2) = softplus(-p[i * j], eps);
            val += m[i] * v;
            g[i * j] -= m[i] * s;
            if hessian {
                h[(i * j) * d + i * j] += m[i] * s2;
            }
        }
    }
    if extras.gauge {
        for kk in 0..j {
            let s: f64 = (0..n).map(|i| p[i * j + kk]).sum();
            val += 0.5 * s * s;
            for i in 0..n {
                g[i * j + kk] += s;
                if hessian {
                    for i2 in 0..n {
                        h[(i * j + kk) * d + i2 * j + kk] += 1.0;
                    }
                }
            }
        }
    }
    if let Some((c, wt)) = &extras.prox {
        for q in 0..d {
            let dv = p[q] - c[q];
            val += wt * dv * dv;
            g[q] += 2.0 * wt * dv;
            if hessian {
                h[q * d + q] += 2.0 * wt;
            }
        }
    }
    (val, g, h)
}

/// Solves `h x = b` for a symmetric positive semidefinite `h`, adding a
/// small ridge when the factorization breaks down.
pub(crate) fn solve_spd(h: &[f64], b: &[f64]) -> Vec<f64> {
    let d = b.len();
    let diag_max = (0..d).map(|i| h[i * d + i].abs()).fold(0.0f64, f64::max).max(1e-300);
    let mut ridge = 0.0;
    loop {
        if let Some(x) = cholesky_solve(h, b, ridge) {
            return x;
        }
        ridge = if ridge == 0.0 { 1e-14 * diag_max } else { ridge * 100.0 };
    }
}

fn cholesky_solve(h: &[f64], b: &[f64], ridge: f64) -> Option<Vec<f64>> {
    let d = b.len();
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..=i {
            let mut s = h[i * d + k];
            if i == k {
                s += ridge;
            }
            for t in 0..k {
                s -= l[i * d + t] * l[k * d + t];
            }
            if i == k {
                if !(s > 1e-300) {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + k] = s / l[k * d + k];
            }
        }
    }
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for t in 0..i {
            s -= l[i * d + t] * y[t];
        }
        y[i] = s / l[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut s = y[i];
        for t in i + 1..d {
            s -= l[t * d + i] * x[t];
        }
        x[i] = s / l[i * d + i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

#[derive(Debug, Clone)]
pub(crate) struct NewtonReport {
    pub p: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Minimizes the smoothed objective along a decreasing `eps` schedule,
/// warm starting each stage from the previous one.
pub(crate) fn homotopy(
    field: &OptionField,
    extras: &Extras,
    p0: &[f64],
    schedule: &[f64],
    gtol: f64,
    max_iter: usize,
) -> Result<NewtonReport> {
    let mut p = p0.to_vec();
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    let max_step = 2.0 * (field.scale() + 1.0);
    for &eps in schedule {
        if !(eps > 0.0) {
            return Err(Error::InvalidInput(format!("smoothing parameter {eps} must be positive")));
        }
        for _ in 0..max_iter {
            let (f, g, h) = evaluate(field, extras, &p, eps, true);
            grad_norm = g.iter().fold(0.0f64, |s, v| s.max(v.abs()));
            if grad_norm <= gtol {
                break;
            }
            iterations += 1;
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            let mut dir = solve_spd(&h, &neg);
            let big = dir.iter().fold(0.0f64, |s, v| s.max(v.abs()));
            if big > max_step {
                dir.iter_mut().for_each(|v| *v *= max_step / big);
            }
            let mut slope: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
            if !(slope < 0.0) {
                dir = neg.clone();
                slope = -g.iter().map(|v| v * v).sum::<f64>();
            }
            let mut t = 1.0;
            let mut moved = false;
            while t > 1e-14 {
                let trial: Vec<f64> = p.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
                let (ft, _, _) = evaluate(field, extras, &trial, eps, false);
                if ft <= f + 1e-4 * t * slope {
                    p = trial;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
    }
    Ok(NewtonReport { p, iterations, grad_norm })
}

/// Outcome of an implicit Euler run of the price flow.
#[derive(Debug, Clone)]
pub(crate) struct Flow {
    pub trajectory: Vec<Vec<f64>>,
    /// Hard objective along the trajectory.
    pub lyapunov: Vec<f64>,
    /// Largest increase of the hard objective over one step.
    pub max_increase: f64,
}

/// Implicit Euler steps `P_{k+1} = argmin F(P) + |P - P_k|^2 / (2 dt)` for
/// `F(P) = hard option value - linear . P`.
pub(crate) fn prox_flow(field: &OptionField, linear: &[f64], p0: &[f64], dt: f64, steps: usize) -> Result<Flow> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("time step {dt} must be positive")));
    }
    let s = field.scale();
    let schedule: Vec<f64> = (2..=12).map(|k| s * 10f64.powi(-k)).collect();
    let hard = |p: &[f64]| {
        field.hard_value(p) - linear.iter().zip(p).map(|(a, b)| a * b).sum::<f64>()
    };
    let mass: f64 = field.w.iter().sum();
    let mut p = p0.to_vec();
    let mut trajectory = vec![p.clone()];
    let mut lyapunov = vec![hard(&p)];
    let mut max_increase = f64::NEG_INFINITY;
    for _ in 0..steps {
        let extras = Extras {
            linear: linear.to_vec(),
            prox: Some((p.clone(), 0.5 / dt)),
            ..Default::default()
        };
        let rep = homotopy(field, &extras, &p, &schedule, 1e-13 * (1.0 + mass), 100)?;
        if rep.p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NoConvergence { iterations: rep.iterations, residual: rep.grad_norm });
        }
        p = rep.p;
        let l = hard(&p);
        max_increase = max_increase.max(l - lyapunov.last().unwrap());
        lyapunov.push(l);
        trajectory.push(p.clone());
    }
    Ok(Flow { trajectory, lyapunov, max_increase })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_limits() {
        let (v, s, _) = softplus(0.0, 0.1);
        assert!((v - 0.1 * 2f64.ln()).abs() < 1e-15);
        assert!((s - 0.5).abs() < 1e-15);
        assert_eq!(softplus(50.0, 1e-3).0, 50.0);
        assert_eq!(softplus(-50.0, 1e-3).0, 0.0);
    }

    #[test]
    fn softmax_brackets_max() {
        let a = [0.3, -0.2, 0.29];
        let mut pr = [0.0; 3];
        for eps in [1e-1, 1e-3, 1e-6] {
            let v = softmax(&a, true, eps, &mut pr);
            assert!(v >= 0.3 && v <= 0.3 + eps * 4f64.ln() + 1e-15);
        }
    }

    #[test]
    fn gradient_matches_differences() {
        let field = OptionField::scalar(vec![0.2, 0.5, 0.3], vec![1.0, 0.4, 0.2, 0.9, 0.7, 0.1], 2, true);
        let ex = Extras { linear: vec![0.3, 0.2], plus: Some(vec![0.1, 0.4]), gauge: true, prox: Some((vec![0.1, -0.1], 0.7)) };
        let p = [-0.25, 0.1];
        let (_, g, h) = evaluate(&field, &ex, &p, 0.05, true);
        let step = 1e-6;
        for q in 0..2 {
            let mut a = p;
            let mut b = p;
            a[q] += step;
            b[q] -= step;
            let (fa, ga, _) = evaluate(&field, &ex, &a, 0.05, false);
            let (fb, gb, _) = evaluate(&field, &ex, &b, 0.05, false);
            assert!(((fa - fb) / (2.0 * step) - g[q]).abs() < 1e-7);
            for r in 0..2 {
                assert!(((ga[r] - gb[r]) / (2.0 * step) - h[r * 2 + q]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn spd_solve_with_singular_matrix() {
        let x = solve_spd(&[1.0, 1.0, 1.0, 1.0], &[1.0, 1.0]);
        assert!((x[0] + x[1] - 1.0).abs() < 1e-6);
    }
}
