//! Per-query, per-timestamp match counters and quota-constrained timestamp
//! assignment.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::geometry::ChamferResult;

/// `counts[i][t]`: predicted points of query `i` matched to a target that
/// carries timestamp `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl StatMatrix {
    pub fn zeros(n_queries: usize, n_timestamps: usize) -> Self {
        Self {
            counts: vec![vec![0; n_timestamps]; n_queries],
        }
    }

    pub fn n_queries(&self) -> usize {
        self.counts.len()
    }

    pub fn n_timestamps(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().flatten().for_each(|c| *c = 0);
    }

    pub fn add(&mut self, other: &StatMatrix) -> Result<()> {
        if other.n_queries() != self.n_queries() || other.n_timestamps() != self.n_timestamps() {
            return Err(Error::Shape("stat matrix shapes differ".into()));
        }
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
        Ok(())
    }

    /// Integer CSV, one row per query.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in &self.counts {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let counts = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|c| c.trim().parse::<u64>().map_err(|e| Error::Parse(format!("stat matrix: {e}"))))
                    .collect::<Result<Vec<u64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        if counts.windows(2).any(|w| w[0].len() != w[1].len()) {
            return Err(Error::Parse("stat matrix rows differ in length".into()));
        }
        Ok(Self { counts })
    }
}

/// For every predicted point `p` with nearest target `g`, increments
/// `M[source(p)][t]` once for each distinct timestamp `t` carried by `g`.
pub fn accumulate_counts<T>(
    m: &mut StatMatrix,
    chamfer: &ChamferResult<T>,
    point_sources: &[usize],
    gt_timestamps: &[Vec<usize>],
) -> Result<()> {
    if point_sources.len() != chamfer.match_p_to_g.len() {
        return Err(Error::LengthMismatch {
            what: "point sources",
            left: point_sources.len(),
            right: chamfer.match_p_to_g.len(),
        });
    }
    let (nq, nt) = (m.n_queries(), m.n_timestamps());
    for (&src, &g) in point_sources.iter().zip(&chamfer.match_p_to_g) {
        if src >= nq {
            return Err(Error::IndexOutOfRange(format!("source query {src} of {nq}")));
        }
        let ts = gt_timestamps
            .get(g)
            .ok_or_else(|| Error::IndexOutOfRange(format!("target {g} of {}", gt_timestamps.len())))?;
        for &t in ts {
            if t >= nt {
                return Err(Error::IndexOutOfRange(format!("timestamp {t} of {nt}")));
            }
            m.counts[src][t] += 1;
        }
    }
    Ok(())
}

/// Compares `a/b` with `c/d` exactly (`b, d > 0`).
fn cmp_ratio(a: u64, b: u64, c: u64, d: u64) -> Ordering {
    (a as u128 * d as u128).cmp(&(c as u128 * b as u128))
}

fn check_quota(m: &StatMatrix, quota: &[usize]) -> Result<()> {
    if quota.len() != m.n_timestamps() {
        return Err(Error::Quota(format!(
            "{} quota entries for {} timestamps",
            quota.len(),
            m.n_timestamps()
        )));
    }
    let total: usize = quota.iter().sum();
    if total != m.n_queries() {
        return Err(Error::Quota(format!("quota sums to {total}, expected {}", m.n_queries())));
    }
    Ok(())
}

/// Max-proportion prioritized pass: repeatedly assigns the unassigned query
/// holding the largest remaining proportion `M[i][t] / Σ_t M[i][t]` among
/// timestamps with quota left. Ties go to the smaller query index, then the
/// smaller timestamp. Rows without counts are placed last, in index order,
/// on the smallest timestamp with quota left.
pub fn greedy_assignment(m: &StatMatrix, quota: &[usize]) -> Result<Vec<usize>> {
    check_quota(m, quota)?;
    let n = m.n_queries();
    let nt = m.n_timestamps();
    let sums: Vec<u64> = (0..n).map(|i| m.row_sum(i)).collect();
    let mut left = quota.to_vec();
    let mut out = vec![usize::MAX; n];
    let mut pending: Vec<usize> = (0..n).filter(|&i| sums[i] > 0).collect();
    while !pending.is_empty() {
        let mut best: Option<(usize, usize, usize)> = None; // (slot in pending, query, timestamp)
        for (slot, &i) in pending.iter().enumerate() {
            for t in 0..nt {
                if left[t] == 0 {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((_, bi, bt)) => cmp_ratio(m.counts[i][t], sums[i], m.counts[bi][bt], sums[bi]) == Ordering::Greater,
                };
                if better {
                    best = Some((slot, i, t));
                }
            }
        }
        let (slot, i, t) = best.expect("quota covers every pending query");
        out[i] = t;
        left[t] -= 1;
        pending.remove(slot);
    }
    for i in 0..n {
        if sums[i] == 0 {
            let t = left.iter().position(|&q| q > 0).expect("quota covers every query");
            out[i] = t;
            left[t] -= 1;
        }
    }
    Ok(out)
}

/// Summed selected proportions of an assignment.
pub fn assignment_score(m: &StatMatrix, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let s = m.row_sum(i);
            if s == 0 {
                0.0
            } else {
                m.counts[i][t] as f64 / s as f64
            }
        })
        .sum()
}

const IMPROVEMENT_EPS: f64 = 1e-12;

/// Quota-constrained assignment maximizing the summed proportions.
///
/// Starts from [`greedy_assignment`] and then cancels improving exchange
/// cycles: moving one query from timestamp `s` to `t` for every edge of a
/// cycle over timestamps keeps every quota and changes the score by the
/// cycle's total gain. When no improving cycle exists the assignment is
/// optimal.
pub fn assign_timestamps(m: &StatMatrix, quota: &[usize]) -> Result<Vec<usize>> {
    let mut out = greedy_assignment(m, quota)?;
    let n = m.n_queries();
    let nt = m.n_timestamps();
    let w: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let s = m.row_sum(i);
            (0..nt)
                .map(|t| if s == 0 { 0.0 } else { m.counts[i][t] as f64 / s as f64 })
                .collect()
        })
        .collect();
    loop {
        // cheapest query to move along each edge s → t (cost = lost proportion)
        let mut cost = vec![vec![f64::INFINITY; nt]; nt];
        let mut mover = vec![vec![usize::MAX; nt]; nt];
        for i in 0..n {
            let s = out[i];
            for t in 0..nt {
                if t == s {
                    continue;
                }
                let c = w[i][s] - w[i][t];
                if c < cost[s][t] {
                    cost[s][t] = c;
                    mover[s][t] = i;
                }
            }
        }
        let Some(cycle) = negative_cycle(&cost) else {
            break;
        };
        let moves: Vec<(usize, usize)> = cycle
            .windows(2)
            .map(|e| (mover[e[0]][e[1]], e[1]))
            .collect();
        for (i, t) in moves {
            out[i] = t;
        }
    }
    Ok(out)
}

/// Bellman-Ford from a virtual source; returns a cycle `[v0, v1, ..., v0]`
/// with total cost below `-IMPROVEMENT_EPS`, if any.
fn negative_cycle(cost: &[Vec<f64>]) -> Option<Vec<usize>> {
    let n = cost.len();
    let mut dist = vec![0.0f64; n];
    let mut pred = vec![usize::MAX; n];
    let mut last = None;
    for _ in 0..n {
        last = None;
        for u in 0..n {
            for v in 0..n {
                let c = cost[u][v];
                if c.is_finite() && dist[u] + c < dist[v] - IMPROVEMENT_EPS {
                    dist[v] = dist[u] + c;
                    pred[v] = u;
                    last = Some(v);
                }
            }
        }
        last?;
    }
    let mut v = last?;
    for _ in 0..n {
        v = pred[v];
    }
    let mut cycle = vec![v];
    let mut u = pred[v];
    while u != v {
        cycle.push(u);
        u = pred[u];
    }
    cycle.push(v);
    cycle.reverse();
    let total: f64 = cycle.windows(2).map(|e| cost[e[0]][e[1]]).sum();
    (total < -IMPROVEMENT_EPS).then_some(cycle)
}

/// Fraction of queries whose timestamp differs.
pub fn churn(before: &[usize], after: &[usize]) -> f64 {
    if before.is_empty() {
        return 0.0;
    }
    let changed = before.iter().zip(after).filter(|(a, b)| a != b).count();
    changed as f64 / before.len() as f64
}
