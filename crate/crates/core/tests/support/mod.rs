//! Brute-force reference computations shared by the oracle tests.

#![allow(dead_code)]

use mfe_core::grid::{BidGrid, Law, StateGrid};
use mfe_core::{HoldingCost, IntegralConvention, ModelParams};

pub fn toy(
    beta: f64,
    states: usize,
    bids: usize,
    service: f64,
    arrival: Vec<f64>,
    regen: Vec<f64>,
) -> ModelParams {
    let sg = StateGrid::new(1.0, states).unwrap();
    let pts = |w: &Vec<f64>| (0..w.len()).map(|m| m as f64).collect::<Vec<_>>();
    ModelParams {
        beta,
        agents: 2,
        service,
        state_grid: sg,
        bid_grid: BidGrid::new(1.0, bids).unwrap(),
        arrival: Law::tabulated(pts(&arrival), arrival, sg).unwrap(),
        regen: Law::tabulated(pts(&regen), regen, sg).unwrap(),
        cost: HoldingCost::quadratic(),
        integral: IntegralConvention::StepWeighted,
        value_headroom: 0,
    }
}

pub fn normalize(w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

pub fn cdf_from_increments(inc: &[f64]) -> Vec<f64> {
    let total: f64 = inc.iter().sum();
    let mut acc = 0.0;
    let mut out: Vec<f64> = inc
        .iter()
        .map(|x| {
            acc += x / total;
            acc.min(1.0)
        })
        .collect();
    *out.last_mut().unwrap() = 1.0;
    out
}

/// Two agents, opponent bid on the bid grid with cdf `rho`: the best bid on
/// the grid, found by enumerating opponent outcomes. The winner pays the
/// opponent's bid and ties go to the agent, matching `p = P(opp <= x)`.
pub fn enumerated_bellman(f: &[f64], rho: &[f64], p: &ModelParams) -> Vec<f64> {
    let n = f.len();
    let last = n - 1;
    let s = p.service as usize;
    let arr = p.arrival.pmf().weights();
    let expect = |base: usize| -> f64 {
        let mut e = 0.0;
        for (j, a) in arr.iter().enumerate() {
            e += a * f[(base + j).min(last)];
        }
        e
    };
    (0..n)
        .map(|q| {
            let stay = expect(q);
            let served = expect(q.saturating_sub(s));
            let mut best = f64::INFINITY;
            for k in 0..rho.len() {
                let mut cost = 0.0;
                for m in 0..rho.len() {
                    let mass = rho[m] - if m == 0 { 0.0 } else { rho[m - 1] };
                    cost += mass
                        * if m <= k {
                            m as f64 + p.beta * served
                        } else {
                            p.beta * stay
                        };
                }
                best = best.min(cost);
            }
            p.cost.eval(q as f64) + best
        })
        .collect()
}

/// Dense kernel built state by state from the transition law.
pub fn dense_kernel(p: &ModelParams, win: &[f64]) -> Vec<Vec<f64>> {
    let n = p.state_grid.count();
    let last = n - 1;
    let s = p.service as usize;
    let arr = p.arrival.pmf().weights();
    let psi = p.regen.pmf().weights();
    let mut k = vec![vec![0.0; n]; n];
    for q in 0..n {
        for (j, a) in arr.iter().enumerate() {
            k[q][(q.saturating_sub(s) + j).min(last)] += p.beta * win[q] * a;
            k[q][(q + j).min(last)] += p.beta * (1.0 - win[q]) * a;
        }
        for (r, w) in psi.iter().enumerate() {
            k[q][r] += (1.0 - p.beta) * w;
        }
    }
    k
}

/// Solves `pi K = pi`, `sum pi = 1` by Gaussian elimination with partial
/// pivoting, replacing the last balance equation by the normalization.
#[allow(clippy::needless_range_loop)]
pub fn linear_stationary(k: &[Vec<f64>]) -> Vec<f64> {
    let n = k.len();
    let mut a = vec![vec![0.0; n + 1]; n];
    for (i, row) in a.iter_mut().enumerate() {
        for j in 0..n {
            row[j] = k[j][i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    a[n - 1] = vec![1.0; n + 1];
    for col in 0..n {
        let piv = (col..n)
            .max_by(|x, y| a[*x][col].abs().total_cmp(&a[*y][col].abs()))
            .unwrap();
        a.swap(col, piv);
        for r in 0..n {
            if r != col {
                let factor = a[r][col] / a[col][col];
                for c in col..=n {
                    a[r][c] -= factor * a[col][c];
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}
