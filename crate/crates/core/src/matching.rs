//! Minimum-cost assignment (Hungarian method, O(rows^2 * cols)).

/// Assign every row of a `rows x cols` cost matrix (row-major) to a distinct
/// column minimizing the total cost. Requires `rows <= cols`. Returns the
/// column chosen for each row.
fn assign_rows(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    debug_assert!(rows <= cols);
    const INF: f64 = f64::INFINITY;
    // 1-based potentials; column 0 is the virtual start column.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Optimal one-to-one assignment for a rectangular cost matrix. Entry `r` of
/// the result is the column matched to row `r`, or `None` when there are
/// more rows than columns and the row was left out.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Vec<Option<usize>> {
    assert_eq!(cost.len(), rows * cols, "cost matrix shape mismatch");
    assert!(
        cost.iter().all(|c| c.is_finite()),
        "cost matrix must be finite"
    );
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows <= cols {
        return assign_rows(cost, rows, cols)
            .into_iter()
            .map(Some)
            .collect();
    }
    let mut transposed = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            transposed[c * rows + r] = cost[r * cols + c];
        }
    }
    let col_to_row = assign_rows(&transposed, cols, rows);
    let mut out = vec![None; rows];
    for (c, r) in col_to_row.into_iter().enumerate() {
        out[r] = Some(c);
    }
    out
}

pub fn assignment_cost(cost: &[f64], cols: usize, assignment: &[Option<usize>]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| cost[r * cols + c]))
        .sum()
}

/// Greedy cheapest-pair-first matching. Not optimal; kept as a baseline.
pub fn greedy(cost: &[f64], rows: usize, cols: usize) -> Vec<Option<usize>> {
    let mut pairs: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .collect();
    pairs.sort_by(|a, b| cost[a.0 * cols + a.1].total_cmp(&cost[b.0 * cols + b.1]));
    let mut out = vec![None; rows];
    let mut col_used = vec![false; cols];
    for (r, c) in pairs {
        if out[r].is_none() && !col_used[c] {
            out[r] = Some(c);
            col_used[c] = true;
        }
    }
    out
}
