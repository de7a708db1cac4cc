//! Dense two-phase simplex over exact rationals.
//!
//! Sized for the scheduling problems of this crate (tens to a few hundred
//! variables). Bland's rule keeps it from cycling.

use num_rational::Ratio;
use thiserror::Error;

pub type Q = Ratio<i128>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub terms: Vec<(usize, Q)>,
    pub relation: Relation,
    pub rhs: Q,
}

/// minimize `objective · x` subject to the constraints and `x >= 0`.
#[derive(Debug, Clone, Default)]
pub struct LinearProgram {
    pub num_vars: usize,
    pub objective: Vec<Q>,
    pub constraints: Vec<Constraint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum LpError {
    #[error("linear program is infeasible")]
    Infeasible,
    #[error("linear program is unbounded")]
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub x: Vec<Q>,
    pub value: Q,
}

pub fn q(v: i64) -> Q {
    Q::from_integer(v as i128)
}

impl LinearProgram {
    pub fn new(num_vars: usize) -> Self {
        Self {
            num_vars,
            objective: vec![q(0); num_vars],
            constraints: vec![],
        }
    }

    pub fn add(&mut self, terms: Vec<(usize, Q)>, relation: Relation, rhs: Q) {
        self.constraints.push(Constraint {
            terms,
            relation,
            rhs,
        });
    }

    pub fn solve(&self) -> Result<Solution, LpError> {
        Tableau::build(self).run(self)
    }
}

struct Tableau {
    rows: Vec<Vec<Q>>,
    rhs: Vec<Q>,
    basis: Vec<usize>,
    /// Columns at or past this index are artificial.
    first_artificial: usize,
    width: usize,
}

impl Tableau {
    fn build(lp: &LinearProgram) -> Self {
        let n = lp.num_vars;
        let m = lp.constraints.len();
        let mut slack_count = 0;
        let mut art_count = 0;
        let normalized: Vec<(Vec<Q>, Relation, Q)> = lp
            .constraints
            .iter()
            .map(|c| {
                let mut row = vec![q(0); n];
                for &(j, v) in &c.terms {
                    row[j] += v;
                }
                let (row, rel, rhs) = if c.rhs < q(0) {
                    let flipped = match c.relation {
                        Relation::Le => Relation::Ge,
                        Relation::Ge => Relation::Le,
                        Relation::Eq => Relation::Eq,
                    };
                    (row.into_iter().map(|v| -v).collect(), flipped, -c.rhs)
                } else {
                    (row, c.relation, c.rhs)
                };
                match rel {
                    Relation::Le => slack_count += 1,
                    Relation::Ge => {
                        slack_count += 1;
                        art_count += 1
                    }
                    Relation::Eq => art_count += 1,
                }
                (row, rel, rhs)
            })
            .collect();
        let first_artificial = n + slack_count;
        let width = first_artificial + art_count;
        let mut rows = Vec::with_capacity(m);
        let mut rhs = Vec::with_capacity(m);
        let mut basis = Vec::with_capacity(m);
        let (mut s, mut a) = (n, first_artificial);
        for (mut row, rel, b) in normalized {
            row.resize(width, q(0));
            match rel {
                Relation::Le => {
                    row[s] = q(1);
                    basis.push(s);
                    s += 1;
                }
                Relation::Ge => {
                    row[s] = q(-1);
                    s += 1;
                    row[a] = q(1);
                    basis.push(a);
                    a += 1;
                }
                Relation::Eq => {
                    row[a] = q(1);
                    basis.push(a);
                    a += 1;
                }
            }
            rows.push(row);
            rhs.push(b);
        }
        Self {
            rows,
            rhs,
            basis,
            first_artificial,
            width,
        }
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.rows[r][c];
        for v in self.rows[r].iter_mut() {
            *v /= p;
        }
        self.rhs[r] /= p;
        let pivot_row = self.rows[r].clone();
        let pivot_rhs = self.rhs[r];
        for i in 0..self.rows.len() {
            if i == r {
                continue;
            }
            let f = self.rows[i][c];
            if f == q(0) {
                continue;
            }
            for (v, &pv) in self.rows[i].iter_mut().zip(&pivot_row) {
                if pv != q(0) {
                    *v -= f * pv;
                }
            }
            self.rhs[i] -= f * pivot_rhs;
        }
        self.basis[r] = c;
    }

    /// Minimizes `cost` over columns below `limit`.
    fn optimize(&mut self, cost: &[Q], limit: usize) -> Result<(), LpError> {
        loop {
            // Reduced cost of column j: cost[j] - cost_B · column_j.
            let entering = (0..limit).find(|&j| {
                if self.basis.contains(&j) {
                    return false;
                }
                let mut reduced = cost[j];
                for (i, &b) in self.basis.iter().enumerate() {
                    let a = self.rows[i][j];
                    if a != q(0) {
                        reduced -= cost[b] * a;
                    }
                }
                reduced < q(0)
            });
            let Some(c) = entering else { return Ok(()) };
            let mut leaving: Option<(usize, Q)> = None;
            for i in 0..self.rows.len() {
                let a = self.rows[i][c];
                if a > q(0) {
                    let ratio = self.rhs[i] / a;
                    let better = match leaving {
                        None => true,
                        Some((li, lr)) => ratio < lr || (ratio == lr && self.basis[i] < self.basis[li]),
                    };
                    if better {
                        leaving = Some((i, ratio));
                    }
                }
            }
            match leaving {
                Some((r, _)) => self.pivot(r, c),
                None => return Err(LpError::Unbounded),
            }
        }
    }

    fn run(mut self, lp: &LinearProgram) -> Result<Solution, LpError> {
        if self.first_artificial < self.width {
            let mut phase1 = vec![q(0); self.width];
            for v in &mut phase1[self.first_artificial..] {
                *v = q(1);
            }
            self.optimize(&phase1, self.width)?;
            let infeasibility: Q = self
                .basis
                .iter()
                .zip(&self.rhs)
                .filter(|(&b, _)| b >= self.first_artificial)
                .map(|(_, &v)| v)
                .sum();
            if infeasibility != q(0) {
                return Err(LpError::Infeasible);
            }
            // Drive zero-valued artificials out of the basis where possible.
            for r in 0..self.rows.len() {
                if self.basis[r] >= self.first_artificial {
                    if let Some(c) = (0..self.first_artificial).find(|&c| self.rows[r][c] != q(0)) {
                        self.pivot(r, c);
                    }
                }
            }
        }
        let mut cost = vec![q(0); self.width];
        cost[..lp.num_vars].copy_from_slice(&lp.objective);
        self.optimize(&cost, self.first_artificial)?;
        let mut x = vec![q(0); lp.num_vars];
        for (&b, &v) in self.basis.iter().zip(&self.rhs) {
            if b < lp.num_vars {
                x[b] = v;
            }
        }
        let value = x.iter().zip(&lp.objective).map(|(a, b)| a * b).sum();
        Ok(Solution { x, value })
    }
}
