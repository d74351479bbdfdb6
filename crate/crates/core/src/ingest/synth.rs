//! Synthetic multi-sensor sequences for desk-scale experiments.
//!
//! Objects follow constant-velocity motion in the camera frame and are
//! projected through a pinhole model. Each detection carries two raw
//! payloads whose identity cues live in different places: an image patch
//! color-coded per object, and a Gaussian point cluster around the object
//! center. Noise, corruption intervals, and outage intervals corrupt the two
//! modalities independently, so either one can be degraded while the other
//! still identifies the object.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kitti::{parse_labels, write_label_lines, LabelRecord};
use super::types::{Box2d, Detection, Frame, ImagePatch, PointSet, SequenceDataset};
use crate::error::{Error, Result};

/// Inclusive frame interval.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub fn contains(&self, frame: usize) -> bool {
        frame >= self.start && frame <= self.end
    }
}

/// Inclusive frame interval with extra payload noise.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CorruptInterval {
    pub start: usize,
    pub end: usize,
    pub sigma: f64,
}

/// Scenario description for the generator. All fields have defaults, so a
/// TOML document only needs the values it wants to change.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ScenarioConfig {
    pub name: String,
    pub frames: usize,
    pub objects: usize,
    pub seed: u64,
    pub image_width: f64,
    pub image_height: f64,
    pub focal: f64,
    /// Object speed in meters per frame.
    pub speed: f64,
    /// Pixel jitter on detection box corners.
    pub detection_noise: f64,
    /// Base per-pixel noise on image payloads.
    pub image_noise: f64,
    /// Base per-coordinate noise on cloud payloads (meters).
    pub cloud_noise: f64,
    pub points_per_object: usize,
    pub patch_size: usize,
    pub image_corrupt: Vec<CorruptInterval>,
    pub cloud_corrupt: Vec<CorruptInterval>,
    pub image_outage: Vec<Interval>,
    pub cloud_outage: Vec<Interval>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "synth".into(),
            frames: 20,
            objects: 6,
            seed: 1,
            image_width: 640.0,
            image_height: 480.0,
            focal: 400.0,
            speed: 0.35,
            detection_noise: 0.0,
            image_noise: 0.0,
            cloud_noise: 0.0,
            points_per_object: 24,
            patch_size: 8,
            image_corrupt: Vec::new(),
            cloud_corrupt: Vec::new(),
            image_outage: Vec::new(),
            cloud_outage: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("scenario needs at least one frame".into()));
        }
        if self.objects == 0 {
            return Err(Error::Config("scenario needs at least one object".into()));
        }
        if self.image_noise < 0.0 || self.cloud_noise < 0.0 || self.detection_noise < 0.0 {
            return Err(Error::Config("noise levels must be >= 0".into()));
        }
        if self.points_per_object == 0 || self.patch_size == 0 {
            return Err(Error::Config("payload sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }
}

/// Standard normal via Box-Muller; two uniforms per draw keeps the stream
/// deterministic under a fixed seed.
fn normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Distinct base color per object identity (golden-angle hue spacing).
pub fn identity_color(object: usize) -> [f64; 3] {
    let hue = (object as f64 * 0.618_033_988_749_895).fract();
    hsv_to_rgb(hue, 0.85, 0.9)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone)]
struct ObjectState {
    pos: [f64; 3],
    vel: [f64; 3],
}

const OBJ_DIMS: [f64; 3] = [1.6, 1.7, 3.6]; // h, w, l meters
const CLUSTER_SIGMA: f64 = 0.4;

fn project_box(cfg: &ScenarioConfig, pos: &[f64; 3]) -> Option<Box2d> {
    let (x, y, z) = (pos[0], pos[1], pos[2]);
    if z < 4.0 {
        return None;
    }
    let cx = cfg.image_width / 2.0;
    let cy = cfg.image_height / 2.0;
    let u = cfg.focal * x / z + cx;
    let v = cfg.focal * y / z + cy;
    let hw = cfg.focal * (OBJ_DIMS[1] / 2.0) / z;
    let hh = cfg.focal * (OBJ_DIMS[0] / 2.0) / z;
    if u < 0.0 || u > cfg.image_width || v < 0.0 || v > cfg.image_height {
        return None;
    }
    Box2d::new(u - hw, v - hh, u + hw, v + hh).ok()
}

fn spawn_objects<R: Rng>(cfg: &ScenarioConfig, rng: &mut R) -> Vec<ObjectState> {
    let mut objects: Vec<ObjectState> = Vec::with_capacity(cfg.objects);
    while objects.len() < cfg.objects {
        let mut placed = None;
        for _attempt in 0..200 {
            let pos = [
                rng.random_range(-5.0..5.0),
                1.0,
                rng.random_range(10.0..24.0),
            ];
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let vel = [cfg.speed * angle.cos(), 0.0, cfg.speed * angle.sin()];
            let candidate = ObjectState { pos, vel };
            let far_enough = objects.iter().all(|o| {
                let dx = o.pos[0] - pos[0];
                let dz = o.pos[2] - pos[2];
                (dx * dx + dz * dz).sqrt() > 3.5
            });
            let stays_visible = (0..cfg.frames).all(|t| {
                let p = [
                    pos[0] + vel[0] * t as f64,
                    pos[1],
                    pos[2] + vel[2] * t as f64,
                ];
                project_box(cfg, &p).is_some()
            });
            if far_enough && stays_visible {
                placed = Some(candidate);
                break;
            }
        }
        match placed {
            Some(o) => objects.push(o),
            // Crowded config: accept the last candidate even if it exits view.
            None => objects.push(ObjectState {
                pos: [0.0, 1.0, 16.0 + objects.len() as f64 * 2.0],
                vel: [0.0, 0.0, cfg.speed],
            }),
        }
    }
    objects
}

fn noise_sigma(base: f64, intervals: &[CorruptInterval], frame: usize) -> f64 {
    base + intervals
        .iter()
        .filter(|i| frame >= i.start && frame <= i.end)
        .map(|i| i.sigma)
        .sum::<f64>()
}

/// Generate one deterministic synthetic sequence: ground truth tracks,
/// detections, and per-detection image/cloud payloads with the configured
/// noise, corruption, and outage schedule.
pub fn generate_synthetic(cfg: &ScenarioConfig) -> Result<SequenceDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let objects = spawn_objects(cfg, &mut rng);

    let mut frames = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let image_out = cfg.image_outage.iter().any(|i| i.contains(t));
        let cloud_out = cfg.cloud_outage.iter().any(|i| i.contains(t));
        let img_sigma = noise_sigma(cfg.image_noise, &cfg.image_corrupt, t);
        let cloud_sigma = noise_sigma(cfg.cloud_noise, &cfg.cloud_corrupt, t);

        let mut gt = Vec::new();
        let mut detections = Vec::new();
        let mut image_payloads = Vec::new();
        let mut cloud_payloads = Vec::new();

        for (oid, obj) in objects.iter().enumerate() {
            let pos = [
                obj.pos[0] + obj.vel[0] * t as f64,
                obj.pos[1],
                obj.pos[2] + obj.vel[2] * t as f64,
            ];
            let Some(gt_box) = project_box(cfg, &pos) else {
                continue;
            };
            gt.push(LabelRecord {
                frame: t,
                track_id: oid as i64,
                class_label: "Car".into(),
                truncated: 0.0,
                occluded: 0,
                alpha: 0.0,
                box2d: gt_box,
                dims: OBJ_DIMS,
                location: pos,
                rotation_y: 0.0,
                score: None,
            });

            let jitter = |rng: &mut ChaCha8Rng| normal(rng) * cfg.detection_noise;
            let det_box = Box2d::new(
                gt_box.left + jitter(&mut rng),
                gt_box.top + jitter(&mut rng),
                gt_box.right + jitter(&mut rng),
                gt_box.bottom + jitter(&mut rng),
            )
            .unwrap_or(gt_box);
            let score = 0.8 + 0.2 * rng.random::<f64>();
            detections.push(Detection {
                frame: t,
                box2d: det_box,
                box3d: None,
                score,
                class_label: "Car".into(),
            });

            // Image payload: identity color plus pixel noise. Drawn even
            // during outages so the random stream (and thus everything
            // downstream) does not depend on the outage schedule.
            let base = identity_color(oid);
            let n_px = cfg.patch_size * cfg.patch_size;
            let mut rgb = Vec::with_capacity(n_px * 3);
            for _ in 0..n_px {
                for &ch in &base {
                    rgb.push((ch + normal(&mut rng) * img_sigma).clamp(0.0, 1.0));
                }
            }
            image_payloads.push(Some(ImagePatch {
                width: cfg.patch_size,
                height: cfg.patch_size,
                rgb,
            }));

            // Cloud payload: Gaussian cluster around the object center.
            let mut pts: PointSet = Vec::with_capacity(cfg.points_per_object);
            for _ in 0..cfg.points_per_object {
                pts.push([
                    pos[0] + normal(&mut rng) * CLUSTER_SIGMA + normal(&mut rng) * cloud_sigma,
                    pos[1] + normal(&mut rng) * CLUSTER_SIGMA + normal(&mut rng) * cloud_sigma,
                    pos[2] + normal(&mut rng) * CLUSTER_SIGMA + normal(&mut rng) * cloud_sigma,
                ]);
            }
            cloud_payloads.push(Some(pts));
        }

        frames.push(Frame {
            index: t,
            detections,
            gt,
            image_payloads: (!image_out).then_some(image_payloads),
            cloud_payloads: (!cloud_out).then_some(cloud_payloads),
        });
    }

    let dataset = SequenceDataset {
        id: cfg.name.clone(),
        frames,
        calibration: None,
    };
    dataset.validate()?;
    Ok(dataset)
}

// ---------------------------------------------------------------------------
// On-disk layout: <dir>/gt.txt, <dir>/detections.txt, <dir>/payloads.txt
// ---------------------------------------------------------------------------

const PAYLOAD_HEADER: &str = "payloads v1";

fn detection_to_record(d: &Detection) -> LabelRecord {
    LabelRecord {
        frame: d.frame,
        track_id: -1,
        class_label: d.class_label.clone(),
        truncated: 0.0,
        occluded: 0,
        alpha: 0.0,
        box2d: d.box2d,
        dims: d.box3d.map_or([-1.0, -1.0, -1.0], |b| [b.h, b.w, b.l]),
        location: d
            .box3d
            .map_or([-1000.0, -1000.0, -1000.0], |b| [b.x, b.y, b.z]),
        rotation_y: d.box3d.map_or(-10.0, |b| b.rotation_y),
        score: Some(d.score),
    }
}

/// Write a sequence to `dir` (created if needed).
pub fn save_dataset(dataset: &SequenceDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let gt: Vec<LabelRecord> = dataset
        .frames
        .iter()
        .flat_map(|f| f.gt.iter().cloned())
        .collect();
    let mut gt_file = fs::File::create(dir.join("gt.txt"))?;
    write_label_lines(&gt, &mut gt_file)?;

    let dets: Vec<LabelRecord> = dataset
        .frames
        .iter()
        .flat_map(|f| f.detections.iter().map(detection_to_record))
        .collect();
    let mut det_file = fs::File::create(dir.join("detections.txt"))?;
    write_label_lines(&dets, &mut det_file)?;

    let mut pl = fs::File::create(dir.join("payloads.txt"))?;
    writeln!(pl, "{PAYLOAD_HEADER}")?;
    writeln!(pl, "frames {}", dataset.frames.len())?;
    for frame in &dataset.frames {
        writeln!(
            pl,
            "frame {} image {} cloud {}",
            frame.index,
            frame.image_payloads.is_some() as u8,
            frame.cloud_payloads.is_some() as u8
        )?;
        if let Some(patches) = &frame.image_payloads {
            for (i, patch) in patches.iter().enumerate() {
                match patch {
                    Some(p) => {
                        write!(pl, "img {i} {} {}", p.width, p.height)?;
                        for v in &p.rgb {
                            write!(pl, " {v:?}")?;
                        }
                        writeln!(pl)?;
                    }
                    None => writeln!(pl, "img {i} none")?,
                }
            }
        }
        if let Some(clouds) = &frame.cloud_payloads {
            for (i, pts) in clouds.iter().enumerate() {
                match pts {
                    Some(pts) => {
                        write!(pl, "pts {i} {}", pts.len())?;
                        for p in pts {
                            write!(pl, " {:?} {:?} {:?}", p[0], p[1], p[2])?;
                        }
                        writeln!(pl)?;
                    }
                    None => writeln!(pl, "pts {i} none")?,
                }
            }
        }
    }
    Ok(())
}

/// Load a sequence previously written by [`save_dataset`]. `gt.txt` and
/// `payloads.txt` are optional; `detections.txt` is required.
pub fn load_dataset(dir: &Path) -> Result<SequenceDataset> {
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    let det_path = dir.join("detections.txt");
    if !det_path.exists() {
        return Err(Error::Data(format!(
            "no detections.txt in {}",
            dir.display()
        )));
    }
    let det_records = parse_labels(BufReader::new(fs::File::open(det_path)?))?;
    let gt_records = {
        let p = dir.join("gt.txt");
        if p.exists() {
            parse_labels(BufReader::new(fs::File::open(p)?))?
        } else {
            Vec::new()
        }
    };
    let max_frame = det_records
        .iter()
        .map(|r| r.frame)
        .chain(gt_records.iter().map(|r| r.frame))
        .max();

    let payload_path = dir.join("payloads.txt");
    let mut frames: Vec<Frame>;
    if payload_path.exists() {
        frames = parse_payloads(BufReader::new(fs::File::open(payload_path)?))?;
    } else {
        let count = max_frame.map_or(0, |m| m + 1);
        frames = (0..count).map(|i| Frame { index: i, ..Frame::default() }).collect();
    }
    if let Some(m) = max_frame {
        if m >= frames.len() {
            return Err(Error::Data(format!(
                "records reference frame {m} but payloads declare {} frames",
                frames.len()
            )));
        }
    }
    for r in det_records {
        frames[r.frame].detections.push(r.to_detection());
    }
    for r in gt_records {
        frames[r.frame].gt.push(r);
    }
    let dataset = SequenceDataset {
        id,
        frames,
        calibration: None,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn parse_payloads<R: BufRead>(input: R) -> Result<Vec<Frame>> {
    let mut lines = input.lines().enumerate();
    let mut next = || -> Result<Option<(usize, String)>> {
        match lines.next() {
            Some((i, l)) => Ok(Some((i + 1, l?))),
            None => Ok(None),
        }
    };
    let perr = |line: usize, msg: &str| Error::Parse {
        line,
        message: msg.to_string(),
    };

    let (hl, header) = next()?.ok_or_else(|| Error::Format("empty payload file".into()))?;
    if header.trim() != PAYLOAD_HEADER {
        return Err(perr(hl, "bad payload header"));
    }
    let (cl, count_line) = next()?.ok_or_else(|| Error::Format("missing frame count".into()))?;
    let count: usize = count_line
        .strip_prefix("frames ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| perr(cl, "bad frame count"))?;

    let mut frames: Vec<Frame> = (0..count)
        .map(|i| Frame {
            index: i,
            ..Frame::default()
        })
        .collect();

    let mut current: Option<usize> = None;
    while let Some((lineno, line)) = next()? {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        match toks[0] {
            "frame" => {
                if toks.len() != 6 || toks[2] != "image" || toks[4] != "cloud" {
                    return Err(perr(lineno, "bad frame line"));
                }
                let idx: usize = toks[1].parse().map_err(|_| perr(lineno, "bad frame idx"))?;
                if idx >= count {
                    return Err(perr(lineno, "frame index out of range"));
                }
                let img_on = toks[3] == "1";
                let cloud_on = toks[5] == "1";
                frames[idx].image_payloads = img_on.then(Vec::new);
                frames[idx].cloud_payloads = cloud_on.then(Vec::new);
                current = Some(idx);
            }
            "img" => {
                let idx = current.ok_or_else(|| perr(lineno, "img before frame"))?;
                let slot = frames[idx]
                    .image_payloads
                    .as_mut()
                    .ok_or_else(|| perr(lineno, "img line in image-off frame"))?;
                if toks.get(2) == Some(&"none") {
                    slot.push(None);
                    continue;
                }
                if toks.len() < 4 {
                    return Err(perr(lineno, "bad img line"));
                }
                let w: usize = toks[2].parse().map_err(|_| perr(lineno, "bad width"))?;
                let h: usize = toks[3].parse().map_err(|_| perr(lineno, "bad height"))?;
                let vals: Vec<f64> = toks[4..]
                    .iter()
                    .map(|t| t.parse().map_err(|_| perr(lineno, "bad pixel")))
                    .collect::<Result<_>>()?;
                if vals.len() != w * h * 3 {
                    return Err(perr(lineno, "pixel count mismatch"));
                }
                slot.push(Some(ImagePatch {
                    width: w,
                    height: h,
                    rgb: vals,
                }));
            }
            "pts" => {
                let idx = current.ok_or_else(|| perr(lineno, "pts before frame"))?;
                let slot = frames[idx]
                    .cloud_payloads
                    .as_mut()
                    .ok_or_else(|| perr(lineno, "pts line in cloud-off frame"))?;
                if toks.get(2) == Some(&"none") {
                    slot.push(None);
                    continue;
                }
                if toks.len() < 3 {
                    return Err(perr(lineno, "bad pts line"));
                }
                let n: usize = toks[2].parse().map_err(|_| perr(lineno, "bad count"))?;
                let vals: Vec<f64> = toks[3..]
                    .iter()
                    .map(|t| t.parse().map_err(|_| perr(lineno, "bad coordinate")))
                    .collect::<Result<_>>()?;
                if vals.len() != n * 3 {
                    return Err(perr(lineno, "coordinate count mismatch"));
                }
                slot.push(Some(
                    vals.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
                ));
            }
            other => return Err(perr(lineno, &format!("unknown payload tag {other:?}"))),
        }
    }
    Ok(frames)
}

/// Load every sequence under `dir`: either `dir` itself is a sequence
/// (contains detections.txt) or each sorted subdirectory is one.
pub fn load_dataset_dir(dir: &Path) -> Result<Vec<SequenceDataset>> {
    if dir.join("detections.txt").exists() {
        return Ok(vec![load_dataset(dir)?]);
    }
    let mut subdirs: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("detections.txt").exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::Data(format!(
            "no sequences found under {}",
            dir.display()
        )));
    }
    subdirs.iter().map(|p| load_dataset(p)).collect()
}
