//! Dense two-phase primal simplex with Bland's anti-cycling rule.
//!
//! Solves `minimize c·x  subject to  A x {<=,>=,=} b,  x >= 0`. Sized for
//! the calibration programs (a few dozen variables and constraints); there
//! is no sparsity handling or basis refactorization.

use std::fmt;

const PIVOT_EPS: f64 = 1e-11;
const FEAS_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

impl Constraint {
    pub fn new(coeffs: Vec<f64>, relation: Relation, rhs: f64) -> Self {
        Constraint { coeffs, relation, rhs }
    }

    /// Signed violation at `x` (zero when satisfied).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let lhs: f64 = self.coeffs.iter().zip(x).map(|(a, v)| a * v).sum();
        match self.relation {
            Relation::Le => (lhs - self.rhs).max(0.0),
            Relation::Ge => (self.rhs - lhs).max(0.0),
            Relation::Eq => (lhs - self.rhs).abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub pivots: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpFailure {
    Infeasible,
    Unbounded,
}

impl fmt::Display for LpFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LpFailure::Infeasible => "linear program is infeasible",
            LpFailure::Unbounded => "linear program is unbounded",
        })
    }
}

impl std::error::Error for LpFailure {}

struct Tableau {
    /// m rows of (n columns + rhs).
    rows: Vec<Vec<f64>>,
    basis: Vec<usize>,
    n: usize,
    pivots: usize,
}

impl Tableau {
    fn rhs(&self, i: usize) -> f64 {
        self.rows[i][self.n]
    }

    fn pivot(&mut self, r: usize, col: usize) {
        let p = self.rows[r][col];
        for v in self.rows[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.rows[r].clone();
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[col];
            if f != 0.0 {
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                row[col] = 0.0;
            }
        }
        self.basis[r] = col;
        self.pivots += 1;
    }

    /// Reduced cost of every column for cost vector `cost`.
    fn reduced_costs(&self, cost: &[f64], allowed: &[bool]) -> Vec<f64> {
        let mut d: Vec<f64> = (0..self.n).map(|j| cost[j]).collect();
        for (i, &b) in self.basis.iter().enumerate() {
            let cb = cost[b];
            if cb != 0.0 {
                for (j, dj) in d.iter_mut().enumerate() {
                    *dj -= cb * self.rows[i][j];
                }
            }
        }
        for (dj, ok) in d.iter_mut().zip(allowed) {
            if !ok {
                *dj = 0.0;
            }
        }
        d
    }

    /// Runs Bland-rule iterations to optimality for `cost`.
    fn optimize(&mut self, cost: &[f64], allowed: &[bool]) -> Result<(), LpFailure> {
        loop {
            let d = self.reduced_costs(cost, allowed);
            let Some(enter) = (0..self.n).find(|&j| allowed[j] && d[j] < -PIVOT_EPS) else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.rows.len() {
                let a = self.rows[i][enter];
                if a > PIVOT_EPS {
                    let ratio = self.rhs(i) / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((li, lr)) => {
                            if ratio < lr - 1e-14
                                || ((ratio - lr).abs() <= 1e-14 && self.basis[i] < self.basis[li])
                            {
                                Some((i, ratio))
                            } else {
                                Some((li, lr))
                            }
                        }
                    };
                }
            }
            match leave {
                Some((r, _)) => self.pivot(r, enter),
                None => return Err(LpFailure::Unbounded),
            }
        }
    }
}

impl LinearProgram {
    pub fn new(objective: Vec<f64>) -> Self {
        LinearProgram { objective, constraints: Vec::new() }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn add(&mut self, coeffs: Vec<f64>, relation: Relation, rhs: f64) {
        assert_eq!(coeffs.len(), self.num_vars(), "constraint width must match objective");
        self.constraints.push(Constraint::new(coeffs, relation, rhs));
    }

    pub fn objective_at(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Largest constraint or sign violation at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let sign = x.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max);
        self.constraints.iter().map(|c| c.violation(x)).fold(sign, f64::max)
    }

    pub fn solve(&self) -> Result<LpSolution, LpFailure> {
        let nv = self.num_vars();
        let m = self.constraints.len();

        // Orient every row so its rhs is nonnegative.
        let rows: Vec<(Vec<f64>, Relation, f64)> = self
            .constraints
            .iter()
            .map(|c| {
                if c.rhs < 0.0 {
                    let rel = match c.relation {
                        Relation::Le => Relation::Ge,
                        Relation::Ge => Relation::Le,
                        Relation::Eq => Relation::Eq,
                    };
                    (c.coeffs.iter().map(|v| -v).collect(), rel, -c.rhs)
                } else {
                    (c.coeffs.clone(), c.relation, c.rhs)
                }
            })
            .collect();

        let n_slack = rows.iter().filter(|r| r.1 != Relation::Eq).count();
        let n_art = rows.iter().filter(|r| r.1 != Relation::Le).count();
        let n = nv + n_slack + n_art;
        let art_start = nv + n_slack;

        let mut tab = Tableau { rows: Vec::with_capacity(m), basis: Vec::with_capacity(m), n, pivots: 0 };
        let (mut s, mut a) = (nv, art_start);
        for (coeffs, rel, rhs) in &rows {
            let mut row = vec![0.0; n + 1];
            row[..nv].copy_from_slice(coeffs);
            row[n] = *rhs;
            match rel {
                Relation::Le => {
                    row[s] = 1.0;
                    tab.basis.push(s);
                    s += 1;
                }
                Relation::Ge => {
                    row[s] = -1.0;
                    s += 1;
                    row[a] = 1.0;
                    tab.basis.push(a);
                    a += 1;
                }
                Relation::Eq => {
                    row[a] = 1.0;
                    tab.basis.push(a);
                    a += 1;
                }
            }
            tab.rows.push(row);
        }

        if n_art > 0 {
            let mut phase1 = vec![0.0; n];
            for c in phase1.iter_mut().skip(art_start) {
                *c = 1.0;
            }
            let all = vec![true; n];
            tab.optimize(&phase1, &all)?;
            let infeas: f64 = (0..m).filter(|&i| tab.basis[i] >= art_start).map(|i| tab.rhs(i)).sum();
            if infeas > FEAS_EPS {
                return Err(LpFailure::Infeasible);
            }
            // Drive zero-level artificials out of the basis; drop rows that
            // turn out to be redundant.
            let mut i = 0;
            while i < tab.rows.len() {
                if tab.basis[i] >= art_start {
                    match (0..art_start).find(|&j| tab.rows[i][j].abs() > PIVOT_EPS) {
                        Some(j) => {
                            tab.pivot(i, j);
                            i += 1;
                        }
                        None => {
                            tab.rows.remove(i);
                            tab.basis.remove(i);
                        }
                    }
                } else {
                    i += 1;
                }
            }
        }

        let mut cost = vec![0.0; n];
        cost[..nv].copy_from_slice(&self.objective);
        let allowed: Vec<bool> = (0..n).map(|j| j < art_start).collect();
        tab.optimize(&cost, &allowed)?;

        let mut x = vec![0.0; nv];
        for (i, &b) in tab.basis.iter().enumerate() {
            if b < nv {
                x[b] = tab.rhs(i).max(0.0);
            }
        }
        Ok(LpSolution { objective: self.objective_at(&x), x, pivots: tab.pivots })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_max_problem() {
        // max 3x + 5y s.t. x <= 4, 2y <= 12, 3x + 2y <= 18  => (2, 6), 36
        let mut lp = LinearProgram::new(vec![-3.0, -5.0]);
        lp.add(vec![1.0, 0.0], Relation::Le, 4.0);
        lp.add(vec![0.0, 2.0], Relation::Le, 12.0);
        lp.add(vec![3.0, 2.0], Relation::Le, 18.0);
        let s = lp.solve().unwrap();
        assert!((s.objective + 36.0).abs() < 1e-9);
        assert!((s.x[0] - 2.0).abs() < 1e-9 && (s.x[1] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn needs_phase_one() {
        // min x + y s.t. x + y >= 2, x - y = 0.5
        let mut lp = LinearProgram::new(vec![1.0, 1.0]);
        lp.add(vec![1.0, 1.0], Relation::Ge, 2.0);
        lp.add(vec![1.0, -1.0], Relation::Eq, 0.5);
        let s = lp.solve().unwrap();
        assert!((s.objective - 2.0).abs() < 1e-9);
        assert!((s.x[0] - 1.25).abs() < 1e-9);
        assert!(lp.max_violation(&s.x) < 1e-9);
    }

    #[test]
    fn negative_rhs_rows() {
        // min t s.t. t >= |x - 3| with x <= 1  => x = 1, t = 2
        let mut lp = LinearProgram::new(vec![0.0, 1.0]);
        lp.add(vec![1.0, -1.0], Relation::Le, 3.0);
        lp.add(vec![-1.0, -1.0], Relation::Le, -3.0);
        lp.add(vec![1.0, 0.0], Relation::Le, 1.0);
        let s = lp.solve().unwrap();
        assert!((s.objective - 2.0).abs() < 1e-9);
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        let mut lp = LinearProgram::new(vec![1.0]);
        lp.add(vec![1.0], Relation::Le, 1.0);
        lp.add(vec![1.0], Relation::Ge, 2.0);
        assert_eq!(lp.solve().unwrap_err(), LpFailure::Infeasible);

        let mut lp = LinearProgram::new(vec![-1.0, 0.0]);
        lp.add(vec![1.0, -1.0], Relation::Le, 1.0);
        assert_eq!(lp.solve().unwrap_err(), LpFailure::Unbounded);
    }

    #[test]
    fn degenerate_redundant_equalities() {
        // duplicated equality row must not break phase 1 cleanup
        let mut lp = LinearProgram::new(vec![1.0, 2.0]);
        lp.add(vec![1.0, 1.0], Relation::Eq, 1.0);
        lp.add(vec![2.0, 2.0], Relation::Eq, 2.0);
        let s = lp.solve().unwrap();
        assert!((s.objective - 1.0).abs() < 1e-9);
    }
}
