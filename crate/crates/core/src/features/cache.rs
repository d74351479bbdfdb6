//! Feature cache files: precomputed per-detection feature columns that can
//! be injected in place of the toy encoders (e.g. features exported from a
//! full-scale backbone).

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

use super::ModalityTag;
use crate::error::{Error, Result};

const HEADER: &str = "featcache v1";

#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub modality: ModalityTag,
    pub feature_dim: usize,
    /// frame index -> one feature column per detection, in detection order.
    pub frames: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl FeatureCache {
    pub fn new(modality: ModalityTag, feature_dim: usize) -> Self {
        FeatureCache {
            modality,
            feature_dim,
            frames: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, frame: usize, columns: Vec<Vec<f64>>) -> Result<()> {
        if let Some(c) = columns.iter().find(|c| c.len() != self.feature_dim) {
            return Err(Error::dim(
                "FeatureCache::insert",
                &[self.feature_dim],
                &[c.len()],
            ));
        }
        self.frames.insert(frame, columns);
        Ok(())
    }

    pub fn columns(&self, frame: usize) -> Option<&Vec<Vec<f64>>> {
        self.frames.get(&frame)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let tag = match self.modality {
            ModalityTag::Image => "image",
            ModalityTag::Cloud => "cloud",
            ModalityTag::Fused => "fused",
        };
        writeln!(out, "{HEADER} {tag} {}", self.feature_dim)?;
        for (frame, cols) in &self.frames {
            writeln!(out, "frame {frame} {}", cols.len())?;
            for col in cols {
                let vals: Vec<String> = col.iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{}", vals.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut lines = BufReader::new(input).lines().enumerate();
        let perr = |line: usize, msg: &str| Error::Parse {
            line,
            message: msg.to_string(),
        };
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Format("empty feature cache".into()))?;
        let header = header?;
        let toks: Vec<&str> = header.split_whitespace().collect();
        if toks.len() != 4 || toks[0] != "featcache" || toks[1] != "v1" {
            return Err(Error::Format(format!("bad cache header {header:?}")));
        }
        let modality = match toks[2] {
            "image" => ModalityTag::Image,
            "cloud" => ModalityTag::Cloud,
            "fused" => ModalityTag::Fused,
            other => return Err(Error::Format(format!("unknown modality {other:?}"))),
        };
        let feature_dim: usize = toks[3]
            .parse()
            .map_err(|_| Error::Format("bad feature_dim".into()))?;
        let mut cache = FeatureCache::new(modality, feature_dim);

        let mut pending: Option<(usize, usize)> = None;
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("frame ") {
                if let Some((frame, want)) = pending.take() {
                    if cols.len() != want {
                        return Err(perr(lineno, "detection count mismatch"));
                    }
                    cache.insert(frame, std::mem::take(&mut cols))?;
                }
                let mut it = rest.split_whitespace();
                let frame = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| perr(lineno, "bad frame index"))?;
                let count = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| perr(lineno, "bad detection count"))?;
                pending = Some((frame, count));
            } else {
                if pending.is_none() {
                    return Err(perr(lineno, "column before frame header"));
                }
                let col: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| perr(lineno, "bad value")))
                    .collect::<Result<_>>()?;
                if col.len() != feature_dim {
                    return Err(perr(lineno, "column length != feature_dim"));
                }
                cols.push(col);
            }
        }
        if let Some((frame, want)) = pending {
            if cols.len() != want {
                return Err(Error::Format("detection count mismatch at EOF".into()));
            }
            cache.insert(frame, cols)?;
        }
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_round_trips() {
        let mut cache = FeatureCache::new(ModalityTag::Cloud, 3);
        cache
            .insert(0, vec![vec![1.0, 2.0, 3.0], vec![-0.5, 0.0, 4.25]])
            .unwrap();
        cache.insert(2, vec![vec![9.0, 8.0, 7.0]]).unwrap();
        let mut buf = Vec::new();
        cache.write(&mut buf).unwrap();
        let back = FeatureCache::read(buf.as_slice()).unwrap();
        assert_eq!(back.feature_dim, 3);
        assert_eq!(back.modality, ModalityTag::Cloud);
        assert_eq!(back.columns(0), cache.columns(0));
        assert_eq!(back.columns(2), cache.columns(2));
        assert_eq!(back.columns(1), None);
    }

    #[test]
    fn wrong_width_column_is_rejected() {
        let mut cache = FeatureCache::new(ModalityTag::Image, 4);
        assert!(cache.insert(0, vec![vec![1.0, 2.0]]).is_err());
        let text = "featcache v1 image 4\nframe 0 1\n1.0 2.0\n";
        assert!(FeatureCache::read(text.as_bytes()).is_err());
    }
}
