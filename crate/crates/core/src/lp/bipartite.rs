//! Maximum bipartite matching by augmenting paths (Kuhn).

/// Perfect matching of rows to columns using only allowed edges, if one
/// exists. `adj[r]` lists the columns row `r` may take.
pub(crate) fn perfect_matching(adj: &[Vec<usize>], n_cols: usize) -> Option<Vec<usize>> {
    let n = adj.len();
    let mut col_owner = vec![usize::MAX; n_cols];
    for r in 0..n {
        let mut seen = vec![false; n_cols];
        if !augment(r, adj, &mut col_owner, &mut seen) {
            return None;
        }
    }
    let mut out = vec![usize::MAX; n];
    for (c, &r) in col_owner.iter().enumerate() {
        if r != usize::MAX {
            out[r] = c;
        }
    }
    Some(out)
}

fn augment(r: usize, adj: &[Vec<usize>], owner: &mut [usize], seen: &mut [bool]) -> bool {
    for &c in &adj[r] {
        if seen[c] {
            continue;
        }
        seen[c] = true;
        if owner[c] == usize::MAX || augment(owner[c], adj, owner, seen) {
            owner[c] = r;
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_matching_or_reports_none() {
        let adj = vec![vec![0, 1], vec![0], vec![1, 2]];
        let m = perfect_matching(&adj, 3).unwrap();
        assert_eq!(m, vec![1, 0, 2]);
        assert!(perfect_matching(&[vec![0], vec![0]], 2).is_none());
    }
}
