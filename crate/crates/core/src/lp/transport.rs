//! Transportation simplex (u-v method) on a dense cost matrix.
//!
//! The basis is a spanning tree of the bipartite row/column graph with
//! exactly `n + m - 1` cells, degenerate zeros included. Pricing follows
//! Bland's rule: the first cell in row-major order with a negative reduced
//! cost enters, and among leaving candidates with the minimal ratio the
//! lowest cell index leaves.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct TransportSolution {
    /// Row-major `n x m` flows.
    pub flow: Vec<f64>,
    /// Row potentials, `u[0] = 0`.
    pub u: Vec<f64>,
    /// Column potentials.
    pub v: Vec<f64>,
    #[allow(dead_code)]
    pub cost: f64,
}

/// Minimizes `sum c_ij x_ij` subject to row sums `a`, column sums `b`.
///
/// `a` and `b` must have equal totals up to `1e-9 (1 + total)`; the last
/// demand absorbs the rounding difference.
pub(crate) fn solve_transport(a: &[f64], b: &[f64], cost: &[f64]) -> Result<TransportSolution> {
    let n = a.len();
    let m = b.len();
    if n == 0 || m == 0 {
        return Err(Error::InvalidInput("empty transport problem".into()));
    }
    if cost.len() != n * m {
        return Err(Error::Dimension(format!("cost has {} entries for {n}x{m}", cost.len())));
    }
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    if (sa - sb).abs() > 1e-9 * (1.0 + sa.abs()) {
        return Err(Error::Unbalanced { left: sa, right: sb });
    }
    let mut b = b.to_vec();
    b[m - 1] += sa - sb;
    if b[m - 1] < 0.0 {
        b[m - 1] = 0.0;
    }

    let cscale = cost.iter().fold(0.0f64, |s, c| s.max(c.abs()));
    let tol = 1e-12 * (1.0 + cscale);

    let mut flow = vec![0.0; n * m];
    let mut basic = vec![false; n * m];
    let mut basis: Vec<usize> = Vec::with_capacity(n + m - 1);

    // northwest corner
    let mut ra = a.to_vec();
    let mut rb = b.clone();
    let (mut i, mut j) = (0usize, 0usize);
    loop {
        let x = ra[i].min(rb[j]).max(0.0);
        flow[i * m + j] = x;
        basic[i * m + j] = true;
        basis.push(i * m + j);
        ra[i] -= x;
        rb[j] -= x;
        if i == n - 1 && j == m - 1 {
            break;
        }
        if (ra[i] <= rb[j] && i < n - 1) || j == m - 1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    debug_assert_eq!(basis.len(), n + m - 1);

    let mut u = vec![0.0; n];
    let mut v = vec![0.0; m];
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n + m];
    let mut parent = vec![usize::MAX; n + m];
    let mut queue = VecDeque::new();
    let max_iter = 100 * (n * m) + 10_000;
    let mut iterations = 0;

    loop {
        // tree adjacency; node r < n is a row, n + c a column
        for l in adj.iter_mut() {
            l.clear();
        }
        for &cell in &basis {
            let (r, c) = (cell / m, cell % m);
            adj[r].push(n + c);
            adj[n + c].push(r);
        }
        // potentials
        let mut seen = vec![false; n + m];
        seen[0] = true;
        u[0] = 0.0;
        queue.clear();
        queue.push_back(0);
        while let Some(node) = queue.pop_front() {
            for &nb in &adj[node] {
                if seen[nb] {
                    continue;
                }
                seen[nb] = true;
                if node < n {
                    let c = nb - n;
                    v[c] = cost[node * m + c] - u[node];
                } else {
                    let c = node - n;
                    u[nb] = cost[nb * m + c] - v[c];
                }
                queue.push_back(nb);
            }
        }

        // Bland pricing
        let mut entering = None;
        'scan: for r in 0..n {
            let ur = u[r];
            let row = &cost[r * m..(r + 1) * m];
            for c in 0..m {
                if !basic[r * m + c] && row[c] - ur - v[c] < -tol {
                    entering = Some((r, c));
                    break 'scan;
                }
            }
        }
        let Some((er, ec)) = entering else { break };

        iterations += 1;
        if iterations > max_iter {
            return Err(Error::NoConvergence { iterations, residual: f64::NAN });
        }

        // tree path from column ec to row er
        parent.iter_mut().for_each(|p| *p = usize::MAX);
        parent[er] = er;
        queue.clear();
        queue.push_back(er);
        while let Some(node) = queue.pop_front() {
            if node == n + ec {
                break;
            }
            for &nb in &adj[node] {
                if parent[nb] == usize::MAX {
                    parent[nb] = node;
                    queue.push_back(nb);
                }
            }
        }
        let mut cycle: Vec<usize> = Vec::new();
        let mut node = n + ec;
        while node != er {
            let p = parent[node];
            let cell = if node < n { node * m + (p - n) } else { p * m + (node - n) };
            cycle.push(cell);
            node = p;
        }
        // cycle[0], cycle[2], ... lose flow
        let mut theta = f64::INFINITY;
        let mut leave = usize::MAX;
        for &cell in cycle.iter().step_by(2) {
            let f = flow[cell];
            if f < theta || (f == theta && cell < leave) {
                theta = f;
                leave = cell;
            }
        }
        let theta = theta.max(0.0);
        let enter = er * m + ec;
        flow[enter] = theta;
        for (k, &cell) in cycle.iter().enumerate() {
            if k % 2 == 0 {
                flow[cell] -= theta;
            } else {
                flow[cell] += theta;
            }
        }
        flow[leave] = 0.0;
        basic[leave] = false;
        basic[enter] = true;
        let pos = basis.iter().position(|&c| c == leave).expect("leaving cell is basic");
        basis[pos] = enter;
    }

    for f in flow.iter_mut() {
        if *f < 0.0 {
            *f = 0.0;
        }
    }
    let cost_value = flow.iter().zip(cost).map(|(f, c)| f * c).sum();
    Ok(TransportSolution { flow, u, v, cost: cost_value })
}
