//! Two-phase revised simplex with an explicit basis inverse.
//!
//! Columns are produced on demand by a [`ColumnSource`], so problems with
//! very many structured columns (one per coalition, say) never materialize
//! the constraint matrix. Pricing is Dantzig's rule; after a run of
//! degenerate pivots it switches to Bland's rule until progress resumes.

use rayon::prelude::*;

pub(crate) trait ColumnSource: Sync {
    fn n_rows(&self) -> usize;
    fn n_cols(&self) -> usize;
    fn cost(&self, j: usize) -> f64;
    /// Nonzero entries `(row, value)` of column `j`.
    fn column(&self, j: usize, out: &mut Vec<(usize, f64)>);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub(crate) struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    /// Simplex multipliers, one per row: reduced cost is `c - y^T a`.
    pub y: Vec<f64>,
    pub value: f64,
    /// Sum of artificial values at the end of phase one.
    pub infeasibility: f64,
}

const PIVOT_TOL: f64 = 1e-9;
const PRICE_TOL: f64 = 1e-10;
const REFACTOR_EVERY: usize = 64;
const PAR_PRICING: usize = 4096;

struct State<'a> {
    src: &'a dyn ColumnSource,
    m: usize,
    n: usize,
    sign: Vec<f64>,
    b: Vec<f64>,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    binv: Vec<f64>,
    xb: Vec<f64>,
    iterations: usize,
}

impl<'a> State<'a> {
    fn column(&self, j: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        if j >= self.n {
            out.push((j - self.n, 1.0));
        } else {
            self.src.column(j, out);
            for e in out.iter_mut() {
                e.1 *= self.sign[e.0];
            }
        }
    }

    fn multipliers(&self, phase_one: bool) -> Vec<f64> {
        let m = self.m;
        let mut y = vec![0.0; m];
        for r in 0..m {
            let j = self.basis[r];
            let c = if phase_one {
                if j >= self.n { 1.0 } else { 0.0 }
            } else if j >= self.n {
                0.0
            } else {
                self.src.cost(j)
            };
            if c != 0.0 {
                let row = &self.binv[r * m..(r + 1) * m];
                for k in 0..m {
                    y[k] += c * row[k];
                }
            }
        }
        y
    }

    fn reduced_cost(&self, j: usize, y: &[f64], phase_one: bool, buf: &mut Vec<(usize, f64)>) -> f64 {
        self.column(j, buf);
        let c = if phase_one { 0.0 } else { self.src.cost(j) };
        c - buf.iter().map(|&(r, v)| y[r] * v).sum::<f64>()
    }

    fn price(&self, y: &[f64], phase_one: bool, bland: bool) -> Option<usize> {
        let n = self.n;
        let eval = |j: usize, buf: &mut Vec<(usize, f64)>| -> Option<(f64, usize)> {
            if self.in_basis[j] {
                return None;
            }
            let d = self.reduced_cost(j, y, phase_one, buf);
            (d < -PRICE_TOL).then_some((d, j))
        };
        if n < PAR_PRICING {
            let mut buf = Vec::new();
            if bland {
                return (0..n).find_map(|j| eval(j, &mut buf)).map(|(_, j)| j);
            }
            let mut best: Option<(f64, usize)> = None;
            for j in 0..n {
                if let Some((d, j)) = eval(j, &mut buf) {
                    if best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, j));
                    }
                }
            }
            return best.map(|(_, j)| j);
        }
        if bland {
            (0..n)
                .into_par_iter()
                .map_init(Vec::new, |buf, j| eval(j, buf))
                .find_first(|o| o.is_some())
                .flatten()
                .map(|(_, j)| j)
        } else {
            (0..n)
                .into_par_iter()
                .map_init(Vec::new, |buf, j| eval(j, buf))
                .flatten()
                .reduce_with(|a, b| if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a })
                .map(|(_, j)| j)
        }
    }

    fn direction(&self, q: usize, buf: &mut Vec<(usize, f64)>) -> Vec<f64> {
        let m = self.m;
        self.column(q, buf);
        let mut w = vec![0.0; m];
        for r in 0..m {
            let row = &self.binv[r * m..(r + 1) * m];
            w[r] = buf.iter().map(|&(k, v)| row[k] * v).sum();
        }
        w
    }

    fn pivot(&mut self, p: usize, q: usize, w: &[f64]) {
        let m = self.m;
        let t = self.xb[p] / w[p];
        for r in 0..m {
            if r != p {
                self.xb[r] -= t * w[r];
                if self.xb[r].abs() < 1e-14 {
                    self.xb[r] = 0.0;
                }
            }
        }
        self.xb[p] = t;
        let wp = w[p];
        for k in 0..m {
            self.binv[p * m + k] /= wp;
        }
        let prow: Vec<f64> = self.binv[p * m..(p + 1) * m].to_vec();
        for r in 0..m {
            if r != p && w[r] != 0.0 {
                let f = w[r];
                let row = &mut self.binv[r * m..(r + 1) * m];
                for k in 0..m {
                    row[k] -= f * prow[k];
                }
            }
        }
        self.in_basis[self.basis[p]] = false;
        self.in_basis[q] = true;
        self.basis[p] = q;
        self.iterations += 1;
        if self.iterations % REFACTOR_EVERY == 0 {
            self.refactor();
        }
    }

    fn refactor(&mut self) {
        let m = self.m;
        let mut a = vec![0.0; m * m];
        let mut buf = Vec::new();
        for (c, &j) in self.basis.iter().enumerate() {
            self.column(j, &mut buf);
            for &(r, v) in &buf {
                a[r * m + c] = v;
            }
        }
        if let Some(inv) = invert(&a, m) {
            self.binv = inv;
            for r in 0..m {
                let row = &self.binv[r * m..(r + 1) * m];
                let v: f64 = row.iter().zip(&self.b).map(|(x, y)| x * y).sum();
                self.xb[r] = if v.abs() < 1e-14 { 0.0 } else { v };
            }
        }
    }

    /// Iterates until no column prices out.
    fn run(&mut self, phase_one: bool, max_iter: usize) -> Result<(), LpStatus> {
        let mut buf = Vec::new();
        let mut degenerate_run = 0usize;
        loop {
            if self.iterations > max_iter {
                return Err(LpStatus::IterationLimit);
            }
            let y = self.multipliers(phase_one);
            let bland = degenerate_run > 2 * self.m + 10;
            let Some(q) = self.price(&y, phase_one, bland) else { return Ok(()) };
            let w = self.direction(q, &mut buf);
            let mut p = usize::MAX;
            let mut best = f64::INFINITY;
            for r in 0..self.m {
                if w[r] <= PIVOT_TOL {
                    continue;
                }
                let t = self.xb[r].max(0.0) / w[r];
                let slack = 1e-12 * (1.0 + t.abs());
                if p == usize::MAX || t < best - slack {
                    p = r;
                    best = t;
                } else if t <= best + slack {
                    let prefer = if bland { self.basis[r] < self.basis[p] } else { w[r] > w[p] };
                    if prefer {
                        p = r;
                        best = best.min(t);
                    }
                }
            }
            if p == usize::MAX {
                return Err(LpStatus::Unbounded);
            }
            if self.xb[p] < 0.0 {
                self.xb[p] = 0.0;
            }
            if self.xb[p] / w[p] <= 1e-13 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.pivot(p, q, &w);
        }
    }
}

/// Gauss-Jordan inverse with partial pivoting, `None` when singular.
pub(crate) fn invert(a: &[f64], m: usize) -> Option<Vec<f64>> {
    let mut a = a.to_vec();
    let mut inv = vec![0.0; m * m];
    for i in 0..m {
        inv[i * m + i] = 1.0;
    }
    for c in 0..m {
        let mut piv = c;
        for r in c + 1..m {
            if a[r * m + c].abs() > a[piv * m + c].abs() {
                piv = r;
            }
        }
        if a[piv * m + c].abs() < 1e-13 {
            return None;
        }
        if piv != c {
            for k in 0..m {
                a.swap(piv * m + k, c * m + k);
                inv.swap(piv * m + k, c * m + k);
            }
        }
        let d = a[c * m + c];
        for k in 0..m {
            a[c * m + k] /= d;
            inv[c * m + k] /= d;
        }
        for r in 0..m {
            if r != c {
                let f = a[r * m + c];
                if f != 0.0 {
                    for k in 0..m {
                        a[r * m + k] -= f * a[c * m + k];
                        inv[r * m + k] -= f * inv[c * m + k];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// Minimizes `c^T x` subject to `A x = b`, `x >= 0`.
pub(crate) fn minimize(src: &dyn ColumnSource, b: &[f64]) -> LpSolution {
    let m = src.n_rows();
    let n = src.n_cols();
    assert_eq!(b.len(), m);
    let sign: Vec<f64> = b.iter().map(|&v| if v < 0.0 { -1.0 } else { 1.0 }).collect();
    let bp: Vec<f64> = b.iter().map(|v| v.abs()).collect();
    let mut binv = vec![0.0; m * m];
    for r in 0..m {
        binv[r * m + r] = 1.0;
    }
    let mut in_basis = vec![false; n + m];
    for r in 0..m {
        in_basis[n + r] = true;
    }
    let mut st = State {
        src,
        m,
        n,
        sign,
        b: bp.clone(),
        basis: (n..n + m).collect(),
        in_basis,
        binv,
        xb: bp.clone(),
        iterations: 0,
    };
    let max_iter = 50 * (n + m) + 20_000;
    let bscale = 1.0 + bp.iter().fold(0.0f64, |a, v| a.max(*v));

    let fail = |status: LpStatus, st: &State, infeas: f64| LpSolution {
        status,
        x: vec![0.0; n],
        y: vec![0.0; st.m],
        value: f64::NAN,
        infeasibility: infeas,
    };

    if let Err(s) = st.run(true, max_iter) {
        return fail(s, &st, f64::NAN);
    }
    let infeas: f64 = (0..m).filter(|&r| st.basis[r] >= n).map(|r| st.xb[r].max(0.0)).sum();
    if infeas > 1e-9 * bscale {
        return fail(LpStatus::Infeasible, &st, infeas);
    }
    // drive zero-level artificials out of the basis
    let mut buf = Vec::new();
    for r in 0..m {
        if st.basis[r] < n {
            continue;
        }
        let row: Vec<f64> = st.binv[r * m..(r + 1) * m].to_vec();
        let mut found = None;
        for j in 0..n {
            if st.in_basis[j] {
                continue;
            }
            st.column(j, &mut buf);
            let alpha: f64 = buf.iter().map(|&(k, v)| row[k] * v).sum();
            if alpha.abs() > 1e-7 {
                found = Some(j);
                break;
            }
        }
        if let Some(j) = found {
            let w = st.direction(j, &mut buf);
            st.xb[r] = 0.0;
            st.pivot(r, j, &w);
        }
    }
    if let Err(s) = st.run(false, max_iter) {
        return fail(s, &st, infeas);
    }
    st.refactor();
    let mut x = vec![0.0; n];
    for r in 0..m {
        if st.basis[r] < n {
            x[st.basis[r]] = st.xb[r].max(0.0);
        }
    }
    let y: Vec<f64> = st.multipliers(false).iter().zip(&st.sign).map(|(y, s)| y * s).collect();
    let value = (0..n).filter(|&j| x[j] != 0.0).map(|j| src.cost(j) * x[j]).sum();
    LpSolution { status: LpStatus::Optimal, x, y, value, infeasibility: infeas }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Cmp {
    Le,
    Eq,
    Ge,
}

/// Sparse column storage for small explicit programs.
#[derive(Debug, Clone, Default)]
pub(crate) struct LpBuilder {
    costs: Vec<f64>,
    cols: Vec<Vec<(usize, f64)>>,
    rows: Vec<(Cmp, f64)>,
    n_vars: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct BuiltSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    /// Row multipliers of the minimization.
    pub duals: Vec<f64>,
    pub value: f64,
    pub infeasibility: f64,
}

impl ColumnSource for LpBuilder {
    fn n_rows(&self) -> usize {
        self.rows.len()
    }
    fn n_cols(&self) -> usize {
        self.cols.len()
    }
    fn cost(&self, j: usize) -> f64 {
        self.costs[j]
    }
    fn column(&self, j: usize, out: &mut Vec<(usize, f64)>) {
        out.extend_from_slice(&self.cols[j]);
    }
}

impl LpBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Nonnegative variable with the given cost (minimization).
    pub fn var(&mut self, cost: f64) -> usize {
        assert_eq!(self.cols.len(), self.n_vars, "variables must precede slack creation");
        self.costs.push(cost);
        self.cols.push(Vec::new());
        self.n_vars += 1;
        self.n_vars - 1
    }

    pub fn row(&mut self, terms: &[(usize, f64)], cmp: Cmp, rhs: f64) -> usize {
        let r = self.rows.len();
        for &(j, v) in terms {
            if v != 0.0 {
                self.cols[j].push((r, v));
            }
        }
        self.rows.push((cmp, rhs));
        r
    }

    pub fn solve(mut self) -> BuiltSolution {
        let n_vars = self.n_vars;
        let rows = self.rows.clone();
        for (r, &(cmp, _)) in rows.iter().enumerate() {
            match cmp {
                Cmp::Eq => {}
                Cmp::Le => {
                    self.costs.push(0.0);
                    self.cols.push(vec![(r, 1.0)]);
                }
                Cmp::Ge => {
                    self.costs.push(0.0);
                    self.cols.push(vec![(r, -1.0)]);
                }
            }
        }
        let b: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let sol = minimize(&self, &b);
        BuiltSolution {
            status: sol.status,
            x: sol.x[..n_vars].to_vec(),
            duals: sol.y,
            value: sol.value,
            infeasibility: sol.infeasibility,
        }
    }
}
