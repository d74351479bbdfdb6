//! KITTI tracking text formats: labels/results, calibration, LiDAR scans.

use std::io::{BufRead, Read, Write};

use super::types::{Box2d, Box3d, Calibration, Detection, PointCloud};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// One row of a KITTI tracking label or result file.
///
/// Layout: `frame track_id type truncated occluded alpha bbox(4) dims(3)
/// location(3) rotation_y [score]` — 17 whitespace-separated columns, 18
/// when the trailing score is present.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub frame: usize,
    pub track_id: i64,
    pub class_label: String,
    pub truncated: f64,
    pub occluded: i64,
    pub alpha: f64,
    pub box2d: Box2d,
    /// h, w, l in meters.
    pub dims: [f64; 3],
    /// x, y, z in camera coordinates.
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl LabelRecord {
    /// 'DontCare' regions stay in the record stream but are excluded from
    /// ground-truth matching; the metrics module uses them to suppress
    /// false positives.
    pub fn is_dont_care(&self) -> bool {
        self.class_label == "DontCare"
    }

    pub fn to_detection(&self) -> Detection {
        Detection {
            frame: self.frame,
            box2d: self.box2d,
            box3d: (self.dims[0] > 0.0).then_some(Box3d {
                h: self.dims[0],
                w: self.dims[1],
                l: self.dims[2],
                x: self.location[0],
                y: self.location[1],
                z: self.location[2],
                rotation_y: self.rotation_y,
            }),
            score: self.score.unwrap_or(1.0),
            class_label: self.class_label.clone(),
        }
    }
}

fn fmt_float(v: f64) -> String {
    format!("{v:.6}")
}

/// Serialize records in the canonical column layout (floats at six
/// decimals). `parse_labels` followed by this writer reproduces canonical
/// files byte for byte.
pub fn write_label_lines<W: Write>(records: &[LabelRecord], mut out: W) -> Result<()> {
    for r in records {
        let mut cols = vec![
            r.frame.to_string(),
            r.track_id.to_string(),
            r.class_label.clone(),
            fmt_float(r.truncated),
            r.occluded.to_string(),
            fmt_float(r.alpha),
            fmt_float(r.box2d.left),
            fmt_float(r.box2d.top),
            fmt_float(r.box2d.right),
            fmt_float(r.box2d.bottom),
            fmt_float(r.dims[0]),
            fmt_float(r.dims[1]),
            fmt_float(r.dims[2]),
            fmt_float(r.location[0]),
            fmt_float(r.location[1]),
            fmt_float(r.location[2]),
            fmt_float(r.rotation_y),
        ];
        if let Some(s) = r.score {
            cols.push(fmt_float(s));
        }
        writeln!(out, "{}", cols.join(" "))?;
    }
    Ok(())
}

/// Serialize tracker output: every record must carry an assigned (>= 0)
/// track id; rows are ordered by (frame, track id).
pub fn write_tracks<W: Write>(records: &[LabelRecord], out: W) -> Result<()> {
    if let Some(r) = records.iter().find(|r| r.track_id < 0) {
        return Err(Error::Contract(format!(
            "unassigned track id on frame {} ({})",
            r.frame, r.class_label
        )));
    }
    let mut sorted: Vec<LabelRecord> = records.to_vec();
    sorted.sort_by_key(|r| (r.frame, r.track_id));
    write_label_lines(&sorted, out)
}

/// Parse a KITTI tracking label/result stream. Malformed lines are reported
/// with their 1-based line number.
pub fn parse_labels<R: BufRead>(input: R) -> Result<Vec<LabelRecord>> {
    let mut records = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 17 && cols.len() != 18 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 17 or 18 columns, found {}", cols.len()),
            });
        }
        let f = |i: usize| -> Result<f64> {
            cols[i].parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("column {} is not a number: {:?}", i + 1, cols[i]),
            })
        };
        let frame = cols[0].parse::<usize>().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("bad frame index {:?}", cols[0]),
        })?;
        let track_id = cols[1].parse::<i64>().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("bad track id {:?}", cols[1]),
        })?;
        let occluded = cols[4].parse::<i64>().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("bad occlusion flag {:?}", cols[4]),
        })?;
        let box2d = Box2d::new(f(6)?, f(7)?, f(8)?, f(9)?).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        records.push(LabelRecord {
            frame,
            track_id,
            class_label: cols[2].to_string(),
            truncated: f(3)?,
            occluded,
            alpha: f(5)?,
            box2d,
            dims: [f(10)?, f(11)?, f(12)?],
            location: [f(13)?, f(14)?, f(15)?],
            rotation_y: f(16)?,
            score: if cols.len() == 18 { Some(f(17)?) } else { None },
        });
    }
    Ok(records)
}

fn parse_matrix_values(line: &str, lineno: usize, expect: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .skip(1)
        .map(|t| {
            t.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("bad matrix value {t:?}"),
            })
        })
        .collect::<Result<_>>()?;
    if vals.len() != expect {
        return Err(Error::Parse {
            line: lineno,
            message: format!("expected {expect} values, found {}", vals.len()),
        });
    }
    Ok(vals)
}

fn det3(m: &[[f64; 4]; 4]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Parse a KITTI calibration stream: requires keys `P2`, `R0_rect`, and
/// `Tr_velo_to_cam`; the rectification and extrinsic matrices are padded to
/// 4x4 homogeneous form.
pub fn parse_calib<R: BufRead>(input: R) -> Result<Calibration> {
    let mut p2: Option<Vec<f64>> = None;
    let mut r0: Option<Vec<f64>> = None;
    let mut tr: Option<Vec<f64>> = None;
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let key = line.split([':', ' ']).next().unwrap_or("");
        match key {
            "P2" => p2 = Some(parse_matrix_values(&line, lineno, 12)?),
            "R0_rect" | "R_rect" => r0 = Some(parse_matrix_values(&line, lineno, 9)?),
            "Tr_velo_to_cam" | "Tr_velo_cam" => {
                tr = Some(parse_matrix_values(&line, lineno, 12)?)
            }
            _ => {}
        }
    }
    let p2 = p2.ok_or_else(|| Error::MissingKey("P2".into()))?;
    let r0 = r0.ok_or_else(|| Error::MissingKey("R0_rect".into()))?;
    let tr = tr.ok_or_else(|| Error::MissingKey("Tr_velo_to_cam".into()))?;

    let mut p = [[0.0; 4]; 3];
    for (i, row) in p.iter_mut().enumerate() {
        row.copy_from_slice(&p2[i * 4..(i + 1) * 4]);
    }
    let mut r_rect = [[0.0; 4]; 4];
    for i in 0..3 {
        r_rect[i][..3].copy_from_slice(&r0[i * 3..(i + 1) * 3]);
    }
    r_rect[3][3] = 1.0;
    let mut t_velo_cam = [[0.0; 4]; 4];
    for (i, chunk) in tr.chunks(4).enumerate() {
        t_velo_cam[i][..4].copy_from_slice(chunk);
    }
    t_velo_cam[3][3] = 1.0;
    if det3(&t_velo_cam).abs() < 1e-12 {
        return Err(Error::Data(
            "Tr_velo_to_cam is singular (zero determinant)".into(),
        ));
    }
    let calib = Calibration {
        p,
        r_rect,
        t_velo_cam,
    };
    if !calib.p.iter().flatten().all(|v| v.is_finite())
        || !calib.r_rect.iter().flatten().all(|v| v.is_finite())
        || !calib.t_velo_cam.iter().flatten().all(|v| v.is_finite())
    {
        return Err(Error::Data("non-finite calibration entry".into()));
    }
    Ok(calib)
}

/// Decode a raw LiDAR scan: little-endian f32 quadruples (x, y, z,
/// reflectance).
pub fn read_point_cloud<R: Read>(mut input: R) -> Result<PointCloud> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() % 16 != 0 {
        return Err(Error::Format(format!(
            "scan length {} is not a multiple of 16 bytes",
            bytes.len()
        )));
    }
    let n = bytes.len() / 16;
    let mut data = Vec::with_capacity(n * 4);
    for chunk in bytes.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    PointCloud::new(Tensor::new(vec![n, 4], data)?)
}

/// Order-preserving score filter; detections scoring below `min_score` are
/// discarded, the boundary is kept.
pub fn filter_detections(detections: &[Detection], min_score: f64) -> Vec<Detection> {
    detections
        .iter()
        .filter(|d| d.score >= min_score)
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAR_LINE: &str = "0 1 Car 0.000000 0 -1.570000 100.000000 120.000000 200.000000 220.000000 1.500000 1.600000 3.800000 2.000000 1.500000 15.000000 -1.570000";

    #[test]
    fn car_line_round_trips_byte_identically() {
        let records = parse_labels(CAR_LINE.as_bytes()).unwrap();
        assert_eq!(records.len(), 1);
        let mut buf = Vec::new();
        write_label_lines(&records, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{CAR_LINE}\n"));
    }

    #[test]
    fn score_column_is_optional() {
        let with_score = format!("{CAR_LINE} 0.850000");
        let r = parse_labels(with_score.as_bytes()).unwrap();
        assert_eq!(r[0].score, Some(0.85));
        let r = parse_labels(CAR_LINE.as_bytes()).unwrap();
        assert_eq!(r[0].score, None);
    }

    #[test]
    fn wrong_column_count_reports_line_number() {
        let text = format!("{CAR_LINE}\n0 1 Car 0.0\n");
        let err = parse_labels(text.as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn three_frames_two_tracks_fixture() {
        let mut text = String::new();
        for frame in 0..3 {
            for (id, off) in [(0i64, 0.0), (1, 300.0)] {
                text.push_str(&format!(
                    "{frame} {id} Car 0.000000 0 0.000000 {l:.6} 100.000000 {r:.6} 180.000000 1.500000 1.600000 3.800000 0.000000 1.500000 12.000000 0.000000\n",
                    l = 50.0 + off + frame as f64 * 5.0,
                    r = 130.0 + off + frame as f64 * 5.0,
                ));
            }
        }
        let records = parse_labels(text.as_bytes()).unwrap();
        let mut ids: Vec<i64> = records.iter().map(|r| r.track_id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids, vec![0, 1]);
        assert_eq!(records.len(), 6);
    }

    #[test]
    fn dont_care_is_flagged_and_retained() {
        let line = "0 -1 DontCare -1.000000 -1 -10.000000 10.000000 10.000000 50.000000 50.000000 -1.000000 -1.000000 -1.000000 -1000.000000 -1000.000000 -1000.000000 -10.000000";
        let r = parse_labels(line.as_bytes()).unwrap();
        assert!(r[0].is_dont_care());
    }

    #[test]
    fn write_tracks_requires_assigned_ids_and_sorts() {
        let mut records = parse_labels(CAR_LINE.as_bytes()).unwrap();
        let mut second = records[0].clone();
        second.frame = 0;
        second.track_id = 0;
        records.insert(0, second);
        let mut buf = Vec::new();
        write_tracks(&records, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first_id: i64 = text
            .lines()
            .next()
            .unwrap()
            .split_whitespace()
            .nth(1)
            .unwrap()
            .parse()
            .unwrap();
        assert_eq!(first_id, 0);

        records[0].track_id = -1;
        assert!(matches!(
            write_tracks(&records, &mut Vec::new()),
            Err(Error::Contract(_))
        ));
    }

    const CALIB_FIXTURE: &str = "P2: 1 0 0 0 0 1 0 0 0 0 1 0\nR0_rect: 1 0 0 0 1 0 0 0 1\nTr_velo_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0\n";

    #[test]
    fn identity_calib_fixture_parses_to_identity() {
        let c = parse_calib(CALIB_FIXTURE.as_bytes()).unwrap();
        assert_eq!(c.p[0][0], 1.0);
        assert_eq!(c.r_rect[2][2], 1.0);
        assert_eq!(c.t_velo_cam[3][3], 1.0);
        let (u, v, d) = c.project(2.0, 3.0, 2.0).unwrap();
        assert_eq!((u, v, d), (1.0, 1.5, 2.0));
    }

    #[test]
    fn known_p2_projection_matches_hand_multiply() {
        let text = "P2: 100 0 50 0 0 100 25 0 0 0 1 0\nR0_rect: 1 0 0 0 1 0 0 0 1\nTr_velo_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0\n";
        let c = parse_calib(text.as_bytes()).unwrap();
        // Point (0, 0, 1): u = 50, v = 25, depth 1 by hand.
        let (u, v, d) = c.project(0.0, 0.0, 1.0).unwrap();
        assert_eq!((u, v, d), (50.0, 25.0, 1.0));
    }

    #[test]
    fn truncated_calib_names_missing_key() {
        let text = "P2: 1 0 0 0 0 1 0 0 0 0 1 0\nR0_rect: 1 0 0 0 1 0 0 0 1\n";
        let err = parse_calib(text.as_bytes()).unwrap_err();
        match err {
            Error::MissingKey(k) => assert_eq!(k, "Tr_velo_to_cam"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn point_cloud_reader_decodes_fixture() {
        // Empty stream: zero points.
        let pc = read_point_cloud(&[][..]).unwrap();
        assert_eq!(pc.len(), 0);

        // Two hand-encoded points.
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5, -4.0, 0.25, 8.0, 1.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let pc = read_point_cloud(bytes.as_slice()).unwrap();
        assert_eq!(pc.len(), 2);
        assert_eq!(pc.xyz(0), [1.0, 2.0, 3.0]);
        assert_eq!(pc.reflectance(0), Some(0.5));
        assert_eq!(pc.xyz(1), [-4.0, 0.25, 8.0]);

        // 17 bytes is not a whole number of points.
        let err = read_point_cloud(&vec![0u8; 17][..]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn filter_keeps_boundary_and_preserves_order() {
        let det = |score: f64| Detection {
            frame: 0,
            box2d: Box2d::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            box3d: None,
            score,
            class_label: "Car".into(),
        };
        let dets = vec![det(0.2), det(0.3), det(0.9)];
        let kept = filter_detections(&dets, 0.3);
        assert_eq!(
            kept.iter().map(|d| d.score).collect::<Vec<_>>(),
            vec![0.3, 0.9]
        );
        assert_eq!(filter_detections(&dets, 0.0).len(), 3);
        assert!(filter_detections(&dets, 0.95).is_empty());
    }
}
