//! Two-frame data association as an exact network-flow assignment.
//!
//! Variables follow the flattened order `[selected (N+M), links (N*M,
//! row-major), starts (M), ends (N)]`. Feasibility is the pair of
//! conservation constraints: a selected current-frame detection is either
//! linked to a previous detection or a track start; a selected
//! previous-frame detection is either linked onward or a track end.

pub mod brute;
pub mod flow;
pub mod instance;

pub use brute::solve_brute_force;
pub use flow::solve_exact;
pub use instance::{random_instance, read_instance, write_instance};

use crate::error::{Error, Result};

/// Confidence probability below which a detection's score is pinned to -1,
/// so the maximizing solver never selects it.
pub const DEFAULT_CONFIDENCE_GATE: f64 = 0.2;

/// Scores for one two-frame window.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowProblem {
    pub n: usize,
    pub m: usize,
    /// Per-detection scores, previous frame first (`n + m`).
    pub detection_scores: Vec<f64>,
    /// Row-major `n x m` link scores.
    pub link_scores: Vec<f64>,
    pub start_scores: Vec<f64>,
    pub end_scores: Vec<f64>,
}

impl FlowProblem {
    pub fn empty(n: usize, m: usize) -> Self {
        FlowProblem {
            n,
            m,
            detection_scores: vec![0.0; n + m],
            link_scores: vec![0.0; n * m],
            start_scores: vec![0.0; m],
            end_scores: vec![0.0; n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.detection_scores.len() == self.n + self.m
            && self.link_scores.len() == self.n * self.m
            && self.start_scores.len() == self.m
            && self.end_scores.len() == self.n;
        if !ok {
            return Err(Error::Contract(format!(
                "inconsistent problem arrays for n={}, m={}",
                self.n, self.m
            )));
        }
        let finite = self
            .detection_scores
            .iter()
            .chain(&self.link_scores)
            .chain(&self.start_scores)
            .chain(&self.end_scores)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Data("non-finite score in flow problem".into()));
        }
        Ok(())
    }

    pub fn num_variables(&self) -> usize {
        (self.n + self.m) + self.n * self.m + self.m + self.n
    }

    pub fn link(&self, j: usize, k: usize) -> f64 {
        self.link_scores[j * self.m + k]
    }
}

/// Pin the detection score to -1 wherever the confidence probability falls
/// strictly below the threshold. Other scores are untouched; gating can
/// only lower the attainable objective.
pub fn apply_confidence_gate(
    problem: &FlowProblem,
    conf_probs: &[f64],
    threshold: f64,
) -> Result<FlowProblem> {
    if conf_probs.len() != problem.n + problem.m {
        return Err(Error::Contract(format!(
            "{} confidence values for {} detections",
            conf_probs.len(),
            problem.n + problem.m
        )));
    }
    if conf_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Contract(
            "confidence probabilities must lie in [0, 1]".into(),
        ));
    }
    let mut gated = problem.clone();
    for (score, &p) in gated.detection_scores.iter_mut().zip(conf_probs) {
        if p < threshold {
            *score = -1.0;
        }
    }
    Ok(gated)
}

/// One feasible binary assignment with its objective value.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentSolution {
    pub selected: Vec<bool>,
    pub links: Vec<bool>,
    pub starts: Vec<bool>,
    pub ends: Vec<bool>,
    pub objective: f64,
}

impl AssignmentSolution {
    pub fn all_zero(n: usize, m: usize) -> Self {
        AssignmentSolution {
            selected: vec![false; n + m],
            links: vec![false; n * m],
            starts: vec![false; m],
            ends: vec![false; n],
            objective: 0.0,
        }
    }

    /// Flattened variable vector in the canonical order.
    pub fn flatten(&self) -> Vec<bool> {
        let mut out =
            Vec::with_capacity(self.selected.len() + self.links.len() + self.starts.len() + self.ends.len());
        out.extend(&self.selected);
        out.extend(&self.links);
        out.extend(&self.starts);
        out.extend(&self.ends);
        out
    }

    pub fn objective_of(&self, p: &FlowProblem) -> f64 {
        let dot = |xs: &[bool], ws: &[f64]| -> f64 {
            xs.iter()
                .zip(ws)
                .filter(|(&x, _)| x)
                .map(|(_, &w)| w)
                .sum()
        };
        dot(&self.selected, &p.detection_scores)
            + dot(&self.links, &p.link_scores)
            + dot(&self.starts, &p.start_scores)
            + dot(&self.ends, &p.end_scores)
    }

    /// Exact feasibility: both conservation constraints hold and link rows
    /// and columns sum to at most one.
    pub fn is_feasible(&self, n: usize, m: usize) -> bool {
        if self.selected.len() != n + m
            || self.links.len() != n * m
            || self.starts.len() != m
            || self.ends.len() != n
        {
            return false;
        }
        for j in 0..n {
            let row: usize = (0..m).map(|k| self.links[j * m + k] as usize).sum();
            if row > 1 || self.selected[j] as usize != row + self.ends[j] as usize {
                return false;
            }
        }
        for k in 0..m {
            let col: usize = (0..n).map(|j| self.links[j * m + k] as usize).sum();
            if col > 1 || self.selected[n + k] as usize != col + self.starts[k] as usize {
                return false;
            }
        }
        true
    }

    /// Lexicographic order on the flattened vector (false < true).
    pub fn lex_less(&self, other: &AssignmentSolution) -> bool {
        self.flatten() < other.flatten()
    }
}

/// Sparse constraint rows over the flattened variable vector; `C y = 0`
/// exactly characterizes feasibility (together with binarity, which implies
/// the unit row/column sums).
#[derive(Debug, Clone)]
pub struct ConstraintMatrix {
    pub n: usize,
    pub m: usize,
    /// One row per detection, previous frame first: `(column, coefficient)`.
    pub rows: Vec<Vec<(usize, f64)>>,
}

/// Build the conservation constraints for an `n x m` window. Coefficients
/// are in {-1, 0, +1}.
pub fn build_constraints(n: usize, m: usize) -> ConstraintMatrix {
    let link_base = n + m;
    let start_base = link_base + n * m;
    let end_base = start_base + m;
    let mut rows = Vec::with_capacity(n + m);
    for j in 0..n {
        let mut row = vec![(j, 1.0)];
        for k in 0..m {
            row.push((link_base + j * m + k, -1.0));
        }
        row.push((end_base + j, -1.0));
        rows.push(row);
    }
    for k in 0..m {
        let mut row = vec![(n + k, 1.0)];
        for j in 0..n {
            row.push((link_base + j * m + k, -1.0));
        }
        row.push((start_base + k, -1.0));
        rows.push(row);
    }
    ConstraintMatrix { n, m, rows }
}

impl ConstraintMatrix {
    pub fn num_variables(&self) -> usize {
        (self.n + self.m) + self.n * self.m + self.m + self.n
    }

    /// Evaluate `C y` against a flattened binary vector; zero means feasible.
    pub fn check(&self, y: &[bool]) -> bool {
        self.rows.iter().all(|row| {
            let s: f64 = row
                .iter()
                .map(|&(col, coef)| coef * (y[col] as u8 as f64))
                .sum();
            s == 0.0
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constraint_shape_for_one_by_one() {
        let c = build_constraints(1, 1);
        assert_eq!(c.rows.len(), 2);
        assert_eq!(c.num_variables(), 5);
    }

    #[test]
    fn empty_window_has_empty_constraints() {
        let c = build_constraints(0, 0);
        assert!(c.rows.is_empty());
        assert_eq!(c.num_variables(), 0);
        assert!(c.check(&[]));
    }

    #[test]
    fn gate_pins_scores_strictly_below_threshold() {
        let mut p = FlowProblem::empty(1, 1);
        p.detection_scores = vec![0.9, 0.8];
        let gated = apply_confidence_gate(&p, &[0.19, 0.2], 0.2).unwrap();
        assert_eq!(gated.detection_scores, vec![-1.0, 0.8]);
        assert_eq!(gated.link_scores, p.link_scores);
        assert!(apply_confidence_gate(&p, &[1.2, 0.0], 0.2).is_err());
        assert!(apply_confidence_gate(&p, &[0.5], 0.2).is_err());
    }

    #[test]
    fn feasibility_checker_agrees_with_constraints() {
        // Linked pair for n = m = 1.
        let linked = AssignmentSolution {
            selected: vec![true, true],
            links: vec![true],
            starts: vec![false],
            ends: vec![false],
            objective: 0.0,
        };
        assert!(linked.is_feasible(1, 1));
        let c = build_constraints(1, 1);
        assert!(c.check(&linked.flatten()));

        // Selected but neither linked nor ended: infeasible.
        let bad = AssignmentSolution {
            selected: vec![true, false],
            links: vec![false],
            starts: vec![false],
            ends: vec![false],
            objective: 0.0,
        };
        assert!(!bad.is_feasible(1, 1));
        assert!(!c.check(&bad.flatten()));
    }

    #[test]
    fn lex_order_prefers_leading_zeros() {
        let a = AssignmentSolution::all_zero(1, 1);
        let mut b = AssignmentSolution::all_zero(1, 1);
        b.selected[0] = true;
        b.ends[0] = true;
        assert!(a.lex_less(&b));
        assert!(!b.lex_less(&a));
    }
}
