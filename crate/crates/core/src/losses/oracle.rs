//! Exact optimal transport between two discrete distributions on the same
//! support, used to cross-check the closed forms of the number losses.
//!
//! Euclidean costs on the real line are integrated in closed form over the
//! sorted support. Any other cost matrix is solved as a transportation
//! linear program with the transportation simplex (MODI potentials on a
//! spanning-tree basis).

use std::collections::VecDeque;

use ndarray::Array2;

use super::{CostKind, CostSpec, LossError, STOCHASTIC_TOL};

/// Largest support the oracle accepts.
pub const MAX_SUPPORT: usize = 64;

/// Exact `min_γ Σ γ_jk C_jk` over couplings of `p` and `q`.
pub fn wasserstein_oracle(p: &[f64], q: &[f64], cost: &CostSpec) -> Result<f64, LossError> {
    check_distribution(p, cost.len(), "p")?;
    check_distribution(q, cost.len(), "q")?;
    match cost.kind {
        CostKind::Euclidean => Ok(wasserstein_1d(p, q, &cost.values)),
        _ => Ok(transport(p, q, &cost.matrix)?.cost),
    }
}

fn check_distribution(p: &[f64], n: usize, name: &str) -> Result<(), LossError> {
    if p.len() != n {
        return Err(LossError::Support(format!(
            "{name} has {} entries, support has {n}",
            p.len()
        )));
    }
    if n > MAX_SUPPORT {
        return Err(LossError::Support(format!("support {n} exceeds {MAX_SUPPORT}")));
    }
    let sum: f64 = p.iter().sum();
    if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(LossError::NotStochastic {
            row: 0,
            reason: format!("{name} sums to {sum}"),
        });
    }
    Ok(())
}

/// `∫ |F_p - F_q|` over the sorted support.
pub fn wasserstein_1d(p: &[f64], q: &[f64], values: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let (mut fp, mut fq, mut total) = (0.0, 0.0, 0.0);
    for w in order.windows(2) {
        fp += p[w[0]];
        fq += q[w[0]];
        total += (fp - fq).abs() * (values[w[1]] - values[w[0]]);
    }
    total
}

/// Optimal coupling and its cost.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub flow: Array2<f64>,
    pub cost: f64,
    pub pivots: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Node {
    Row(usize),
    Col(usize),
}

/// Solves the balanced transportation problem exactly.
///
/// Entering cells follow the most negative reduced cost with ties broken by
/// lowest row-major index; the leaving cell is the lowest-index cell among
/// those attaining the minimum ratio. After `50·m·n` pivots the entering
/// rule falls back to Bland's rule, which cannot cycle.
pub fn transport(supply: &[f64], demand: &[f64], cost: &Array2<f64>) -> Result<TransportPlan, LossError> {
    let (m, n) = (supply.len(), demand.len());
    if cost.dim() != (m, n) || m == 0 || n == 0 {
        return Err(LossError::Shape(format!(
            "cost {:?} for supply {m} and demand {n}",
            cost.dim()
        )));
    }
    let mut flow = Array2::zeros((m, n));
    let mut basic = Array2::from_elem((m, n), false);

    // north-west corner start: exactly m + n - 1 basic cells forming a tree
    let (mut s, mut d) = (supply.to_vec(), demand.to_vec());
    let (mut i, mut j) = (0, 0);
    loop {
        let x = s[i].min(d[j]);
        flow[[i, j]] = x;
        basic[[i, j]] = true;
        s[i] -= x;
        d[j] -= x;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if j == n - 1 || (i < m - 1 && s[i] <= d[j]) {
            i += 1;
        } else {
            j += 1;
        }
    }

    let tol = 1e-13 * cost.iter().fold(1.0f64, |a, &c| a.max(c.abs()));
    let bland_after = 50 * m * n;
    let mut pivots = 0;
    loop {
        let (u, v) = potentials(&basic, cost);
        let mut entering: Option<((usize, usize), f64)> = None;
        'scan: for r in 0..m {
            for c in 0..n {
                if basic[[r, c]] {
                    continue;
                }
                let reduced = cost[[r, c]] - u[r] - v[c];
                if reduced < -tol {
                    if pivots >= bland_after {
                        entering = Some(((r, c), reduced));
                        break 'scan;
                    }
                    if entering.is_none_or(|(_, best)| reduced < best) {
                        entering = Some(((r, c), reduced));
                    }
                }
            }
        }
        let Some(((er, ec), _)) = entering else {
            break;
        };

        // the path Col(ec) → … → Row(er) in the basis tree closes the cycle
        let path = tree_path(&basic, Node::Col(ec), Node::Row(er));
        let mut cells = Vec::with_capacity(path.len());
        for w in path.windows(2) {
            cells.push(match (w[0], w[1]) {
                (Node::Row(r), Node::Col(c)) | (Node::Col(c), Node::Row(r)) => (r, c),
                _ => unreachable!("tree edges join rows to columns"),
            });
        }
        // cells alternate −, +, −, … starting next to the entering column
        let mut leave = None;
        for &(r, c) in cells.iter().step_by(2) {
            let better = match leave {
                None => true,
                Some((lr, lc)) => {
                    let (x, y) = (flow[[r, c]], flow[[lr, lc]]);
                    x < y || (x == y && (r, c) < (lr, lc))
                }
            };
            if better {
                leave = Some((r, c));
            }
        }
        let (lr, lc) = leave.expect("cycle has a decreasing cell");
        let theta = flow[[lr, lc]];
        for (k, &(r, c)) in cells.iter().enumerate() {
            if k % 2 == 0 {
                flow[[r, c]] -= theta;
            } else {
                flow[[r, c]] += theta;
            }
        }
        flow[[er, ec]] = theta;
        basic[[er, ec]] = true;
        basic[[lr, lc]] = false;
        flow[[lr, lc]] = 0.0;
        pivots += 1;
    }
    let cost = flow.iter().zip(cost.iter()).map(|(f, c)| f * c).sum();
    Ok(TransportPlan { flow, cost, pivots })
}

/// Duals with `u_r + v_c = C_rc` on basic cells and `u_0 = 0`.
fn potentials(basic: &Array2<bool>, cost: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = basic.dim();
    let mut u = vec![f64::NAN; m];
    let mut v = vec![f64::NAN; n];
    u[0] = 0.0;
    let mut queue = VecDeque::from([Node::Row(0)]);
    while let Some(node) = queue.pop_front() {
        match node {
            Node::Row(r) => {
                for c in 0..n {
                    if basic[[r, c]] && v[c].is_nan() {
                        v[c] = cost[[r, c]] - u[r];
                        queue.push_back(Node::Col(c));
                    }
                }
            }
            Node::Col(c) => {
                for r in 0..m {
                    if basic[[r, c]] && u[r].is_nan() {
                        u[r] = cost[[r, c]] - v[c];
                        queue.push_back(Node::Row(r));
                    }
                }
            }
        }
    }
    (u, v)
}

fn tree_path(basic: &Array2<bool>, from: Node, to: Node) -> Vec<Node> {
    let (m, n) = basic.dim();
    let mut prev_row: Vec<Option<Node>> = vec![None; m];
    let mut prev_col: Vec<Option<Node>> = vec![None; n];
    let mut seen_row = vec![false; m];
    let mut seen_col = vec![false; n];
    match from {
        Node::Row(r) => seen_row[r] = true,
        Node::Col(c) => seen_col[c] = true,
    }
    let mut queue = VecDeque::from([from]);
    while let Some(node) = queue.pop_front() {
        if node == to {
            break;
        }
        match node {
            Node::Row(r) => {
                for c in 0..n {
                    if basic[[r, c]] && !seen_col[c] {
                        seen_col[c] = true;
                        prev_col[c] = Some(node);
                        queue.push_back(Node::Col(c));
                    }
                }
            }
            Node::Col(c) => {
                for r in 0..m {
                    if basic[[r, c]] && !seen_row[r] {
                        seen_row[r] = true;
                        prev_row[r] = Some(node);
                        queue.push_back(Node::Row(r));
                    }
                }
            }
        }
    }
    let mut path = vec![to];
    let mut cur = to;
    while cur != from {
        cur = match cur {
            Node::Row(r) => prev_row[r],
            Node::Col(c) => prev_col[c],
        }
        .expect("basis is a spanning tree");
        path.push(cur);
    }
    path.reverse();
    path
}
