//! Brute-force oracle: enumerate every feasible assignment.
//!
//! Feasible binary vectors correspond exactly to partial matchings between
//! the two frames plus, per unmatched detection, the free choice of
//! selecting it as a start/end or dropping it. The free choices decompose
//! per detection, and under lexicographically-smallest tie-breaking the
//! zero-gain ones are forced to zero, so only matchings need enumerating.

use super::{AssignmentSolution, FlowProblem};
use crate::error::{Error, Result};

const ENUMERATION_BOUND: usize = 4;

/// Exact maximizer of the window objective by exhaustive enumeration.
/// Bounded to `n, m <= 4`; ties resolve to the lexicographically smallest
/// flattened vector.
pub fn solve_brute_force(problem: &FlowProblem) -> Result<AssignmentSolution> {
    problem.validate()?;
    let (n, m) = (problem.n, problem.m);
    if n > ENUMERATION_BOUND || m > ENUMERATION_BOUND {
        return Err(Error::Contract(format!(
            "brute force bounded to {ENUMERATION_BOUND}x{ENUMERATION_BOUND}, got {n}x{m}"
        )));
    }

    let mut best: Option<AssignmentSolution> = None;
    // match_of[j] = Some(k) links previous j to current k.
    let mut match_of: Vec<Option<usize>> = vec![None; n];
    enumerate(problem, 0, 0u32, &mut match_of, &mut best);
    Ok(best.expect("the empty assignment is always feasible"))
}

fn enumerate(
    p: &FlowProblem,
    j: usize,
    used: u32,
    match_of: &mut Vec<Option<usize>>,
    best: &mut Option<AssignmentSolution>,
) {
    if j == p.n {
        let candidate = realize(p, match_of);
        let replace = match best {
            None => true,
            Some(b) => {
                candidate.objective > b.objective
                    || (candidate.objective == b.objective && candidate.lex_less(b))
            }
        };
        if replace {
            *best = Some(candidate);
        }
        return;
    }
    match_of[j] = None;
    enumerate(p, j + 1, used, match_of, best);
    for k in 0..p.m {
        if used & (1 << k) == 0 {
            match_of[j] = Some(k);
            enumerate(p, j + 1, used | (1 << k), match_of, best);
            match_of[j] = None;
        }
    }
}

/// Complete a matching into the best (and lex-smallest among optima)
/// assignment consistent with it: matched pairs are forced selected;
/// unmatched detections are selected only when their score plus their
/// start/end score is strictly positive.
fn realize(p: &FlowProblem, match_of: &[Option<usize>]) -> AssignmentSolution {
    let (n, m) = (p.n, p.m);
    let mut sol = AssignmentSolution::all_zero(n, m);
    let mut matched_cur = vec![false; m];
    let mut objective = 0.0;
    for (j, &mk) in match_of.iter().enumerate() {
        match mk {
            Some(k) => {
                sol.selected[j] = true;
                sol.selected[n + k] = true;
                sol.links[j * m + k] = true;
                matched_cur[k] = true;
                objective += p.detection_scores[j] + p.detection_scores[n + k] + p.link(j, k);
            }
            None => {
                let gain = p.detection_scores[j] + p.end_scores[j];
                if gain > 0.0 {
                    sol.selected[j] = true;
                    sol.ends[j] = true;
                    objective += gain;
                }
            }
        }
    }
    for k in 0..m {
        if !matched_cur[k] {
            let gain = p.detection_scores[n + k] + p.start_scores[k];
            if gain > 0.0 {
                sol.selected[n + k] = true;
                sol.starts[k] = true;
                objective += gain;
            }
        }
    }
    sol.objective = objective;
    sol
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_window_solves_to_empty_solution() {
        let p = FlowProblem::empty(0, 0);
        let s = solve_brute_force(&p).unwrap();
        assert_eq!(s.objective, 0.0);
        assert!(s.is_feasible(0, 0));
    }

    #[test]
    fn lone_previous_detection_ends_when_profitable() {
        let mut p = FlowProblem::empty(1, 0);
        p.detection_scores = vec![0.9];
        p.end_scores = vec![0.3];
        let s = solve_brute_force(&p).unwrap();
        assert_eq!(s.selected, vec![true]);
        assert_eq!(s.ends, vec![true]);
        assert!((s.objective - 1.2).abs() < 1e-12);
    }

    #[test]
    fn profitable_link_beats_start_end_split() {
        let mut p = FlowProblem::empty(1, 1);
        p.detection_scores = vec![0.9, 0.9];
        p.link_scores = vec![0.8];
        p.start_scores = vec![0.1];
        p.end_scores = vec![0.1];
        let s = solve_brute_force(&p).unwrap();
        assert_eq!(s.links, vec![true]);
        assert_eq!(s.starts, vec![false]);
        assert!((s.objective - 2.6).abs() < 1e-12);
    }

    #[test]
    fn all_negative_scores_select_nothing() {
        let mut p = FlowProblem::empty(2, 2);
        p.detection_scores = vec![-1.0; 4];
        p.link_scores = vec![-0.5; 4];
        p.start_scores = vec![-0.2; 2];
        p.end_scores = vec![-0.2; 2];
        let s = solve_brute_force(&p).unwrap();
        assert_eq!(s.objective, 0.0);
        assert!(s.flatten().iter().all(|&b| !b));
    }

    #[test]
    fn zero_gain_ties_resolve_to_the_all_zero_vector() {
        // Every feasible assignment scores 0; the lex-smallest is all-zero.
        let p = FlowProblem::empty(2, 2);
        let s = solve_brute_force(&p).unwrap();
        assert_eq!(s.objective, 0.0);
        assert!(s.flatten().iter().all(|&b| !b));
    }

    #[test]
    fn tie_between_two_links_takes_the_lex_smaller() {
        // Symmetric 2x2: linking (0,0)+(1,1) and (0,1)+(1,0) both score 2.2.
        let mut p = FlowProblem::empty(2, 2);
        p.detection_scores = vec![0.4, 0.4, 0.4, 0.4];
        p.link_scores = vec![0.3, 0.3, 0.3, 0.3];
        let s = solve_brute_force(&p).unwrap();
        assert!((s.objective - 2.2).abs() < 1e-12);
        // Link vector [1,0,0,1] < [0,1,1,0] is false: first differing index
        // is 0 where the diagonal has true. Lex-smaller is [0,1,1,0].
        assert_eq!(s.links, vec![false, true, true, false]);
    }

    #[test]
    fn size_bound_is_enforced() {
        let p = FlowProblem::empty(5, 1);
        assert!(matches!(solve_brute_force(&p), Err(Error::Contract(_))));
    }
}
