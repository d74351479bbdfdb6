//! Instance dump format and random instance generation for the solver
//! fuzz-regression corpus.
//!
//! ```text
//! lpinstance v1
//! n <N> m <M>
//! true <N+M values>
//! link <N*M values>
//! start <M values>
//! end <N values>
//! ```

use std::io::{BufRead, BufReader, Read, Write};

use rand::Rng;

use super::FlowProblem;
use crate::error::{Error, Result};

const HEADER: &str = "lpinstance v1";

pub fn write_instance<W: Write>(p: &FlowProblem, mut out: W) -> Result<()> {
    p.validate()?;
    writeln!(out, "{HEADER}")?;
    writeln!(out, "n {} m {}", p.n, p.m)?;
    let row = |name: &str, vals: &[f64]| -> String {
        let mut s = String::from(name);
        for v in vals {
            s.push(' ');
            s.push_str(&format!("{v:?}"));
        }
        s
    };
    writeln!(out, "{}", row("true", &p.detection_scores))?;
    writeln!(out, "{}", row("link", &p.link_scores))?;
    writeln!(out, "{}", row("start", &p.start_scores))?;
    writeln!(out, "{}", row("end", &p.end_scores))?;
    Ok(())
}

pub fn read_instance<R: Read>(input: R) -> Result<FlowProblem> {
    let mut lines = BufReader::new(input).lines();
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Format(format!("instance truncated before {what}")))
    };
    let header = next("header")?;
    if header.trim() != HEADER {
        return Err(Error::Format(format!("bad instance header {header:?}")));
    }
    let size_line = next("sizes")?;
    let toks: Vec<&str> = size_line.split_whitespace().collect();
    if toks.len() != 4 || toks[0] != "n" || toks[2] != "m" {
        return Err(Error::Format(format!("bad size line {size_line:?}")));
    }
    let n: usize = toks[1]
        .parse()
        .map_err(|_| Error::Format("bad n".into()))?;
    let m: usize = toks[3]
        .parse()
        .map_err(|_| Error::Format("bad m".into()))?;
    let mut values = |tag: &str, want: usize| -> Result<Vec<f64>> {
        let line = next(tag)?;
        let mut it = line.split_whitespace();
        if it.next() != Some(tag) {
            return Err(Error::Format(format!("expected {tag} row")));
        }
        let vals: Vec<f64> = it
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::Format(format!("bad value in {tag} row")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != want {
            return Err(Error::Format(format!(
                "{tag} row has {} values, expected {want}",
                vals.len()
            )));
        }
        Ok(vals)
    };
    let problem = FlowProblem {
        n,
        m,
        detection_scores: values("true", n + m)?,
        link_scores: values("link", n * m)?,
        start_scores: values("start", m)?,
        end_scores: values("end", n)?,
    };
    problem.validate()?;
    Ok(problem)
}

/// Instance with sizes drawn uniformly from `[0, max_n] x [0, max_m]` and
/// scores uniform in `[-1, 1]`.
pub fn random_instance<R: Rng>(rng: &mut R, max_n: usize, max_m: usize) -> FlowProblem {
    let n = rng.random_range(0..=max_n);
    let m = rng.random_range(0..=max_m);
    random_instance_exact(rng, n, m)
}

/// Instance with exact sizes and scores uniform in `[-1, 1]`.
pub fn random_instance_exact<R: Rng>(rng: &mut R, n: usize, m: usize) -> FlowProblem {
    let mut draw = |count: usize| -> Vec<f64> {
        (0..count).map(|_| rng.random_range(-1.0..=1.0)).collect()
    };
    FlowProblem {
        n,
        m,
        detection_scores: draw(n + m),
        link_scores: draw(n * m),
        start_scores: draw(m),
        end_scores: draw(n),
    }
}
