//! Text checkpoint format for parameter stores.
//!
//! One parameter per line after a version header:
//!
//! ```text
//! tensorckpt v1
//! <name> <rank> <dim>... <value>...
//! ```
//!
//! Values use Rust's shortest round-trip decimal formatting, so save/load is
//! bit-exact and files written under a fixed seed are byte-identical.

use std::io::{BufRead, BufReader, Read, Write};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const HEADER: &str = "tensorckpt v1";

pub fn save<W: Write>(store: &ParamStore, mut out: W) -> Result<()> {
    writeln!(out, "{HEADER}")?;
    for (_, p) in store.iter() {
        write!(out, "{} {}", p.name, p.value.shape().len())?;
        for d in p.value.shape() {
            write!(out, " {d}")?;
        }
        for v in p.value.data() {
            write!(out, " {v:?}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Load values into an existing store; every checkpoint entry must match a
/// registered parameter by name and shape, and every parameter must be
/// covered.
pub fn load<R: Read>(store: &mut ParamStore, input: R) -> Result<()> {
    let reader = BufReader::new(input);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Format("empty checkpoint".into()))?;
    if header.trim() != HEADER {
        return Err(Error::Format(format!(
            "unsupported checkpoint header {header:?}"
        )));
    }
    let mut filled = vec![false; store.len()];
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse_err = |msg: &str| Error::Parse {
            line: lineno + 2,
            message: msg.to_string(),
        };
        let name = it.next().ok_or_else(|| parse_err("missing name"))?;
        let rank: usize = it
            .next()
            .ok_or_else(|| parse_err("missing rank"))?
            .parse()
            .map_err(|_| parse_err("bad rank"))?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(
                it.next()
                    .ok_or_else(|| parse_err("missing dim"))?
                    .parse()
                    .map_err(|_| parse_err("bad dim"))?,
            );
        }
        let data: Vec<f64> = it
            .map(|tok| tok.parse().map_err(|_| parse_err("bad value")))
            .collect::<Result<_>>()?;
        let tensor = Tensor::new(shape, data)
            .map_err(|e| parse_err(&format!("shape/data mismatch: {e}")))?;
        let id = store
            .by_name(name)
            .ok_or_else(|| Error::Data(format!("checkpoint has unknown parameter {name:?}")))?;
        if store.value(id).shape() != tensor.shape() {
            return Err(Error::dim(
                format!("checkpoint parameter {name:?}"),
                store.value(id).shape(),
                tensor.shape(),
            ));
        }
        store.get_mut(id).value = tensor;
        filled[store.by_name(name).unwrap().0] = true;
    }
    if let Some(idx) = filled.iter().position(|f| !f) {
        let name = store.iter().nth(idx).map(|(_, p)| p.name.clone());
        return Err(Error::Data(format!(
            "checkpoint missing parameter {name:?}"
        )));
    }
    Ok(())
}
