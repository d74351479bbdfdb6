//! Online tracking loop and the training loop.
//!
//! Each step pairs the previous frame's surviving detections with the
//! current frame's, runs the model forward, solves the assignment exactly,
//! and turns the solution into identity bookkeeping: links continue a
//! track's id, starts allocate a fresh id, ends (and deselections) close
//! tracks for good. Ids are never reused, and detections the solver rejects
//! do not carry forward.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adjacency::{build_gt_association, compute_loss, LossBreakdown, LossWeights, SliceScores};
use crate::assoc::{apply_confidence_gate, solve_exact, AssignmentSolution, FlowProblem};
use crate::config::{DropoutSection, RunConfig};
use crate::diffcore::{adam_step, sigmoid, AdamState, Tape};
use crate::error::{Error, Result};
use crate::ingest::{Detection, Frame, ImagePatch, LabelRecord, PointSet, SequenceDataset};
use crate::model::{TrackModel, WindowInput};

/// Runtime thresholds for tracking.
#[derive(Debug, Clone, Copy)]
pub struct TrackerSettings {
    pub confidence_gate: f64,
    pub detection_filter: f64,
    pub gt_iou: f64,
}

impl TrackerSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        TrackerSettings {
            confidence_gate: cfg.thresholds.confidence_gate,
            detection_filter: cfg.thresholds.detection_filter,
            gt_iou: cfg.thresholds.gt_iou,
        }
    }
}

impl Default for TrackerSettings {
    fn default() -> Self {
        TrackerSettings {
            confidence_gate: 0.2,
            detection_filter: 0.3,
            gt_iou: 0.5,
        }
    }
}

/// One live trajectory.
#[derive(Debug, Clone)]
pub struct Track {
    pub id: i64,
    pub last_detection: Detection,
    pub age: usize,
    pub missed: usize,
}

/// A previous-frame detection carried into the next window with its id and
/// payloads.
#[derive(Debug, Clone)]
struct Carried {
    id: i64,
    image: Option<ImagePatch>,
    cloud: Option<PointSet>,
}

/// Mutable state across the frames of one sequence.
#[derive(Debug, Default)]
pub struct TrackerState {
    tracks: Vec<Track>,
    next_id: i64,
    prev: Vec<Carried>,
    prev_image_live: bool,
    prev_cloud_live: bool,
}

impl TrackerState {
    pub fn new() -> Self {
        TrackerState::default()
    }

    pub fn active_tracks(&self) -> &[Track] {
        &self.tracks
    }
}

/// Zero padding for scores that cannot be estimated from a correlation map:
/// start scores in the first window of a sequence, end scores in the last.
pub fn pad_boundaries(
    n: usize,
    m: usize,
    start: Option<Vec<f64>>,
    end: Option<Vec<f64>>,
) -> (Vec<f64>, Vec<f64>) {
    (
        start.unwrap_or_else(|| vec![0.0; m]),
        end.unwrap_or_else(|| vec![0.0; n]),
    )
}

/// Detections that survive the score filter, with their payload slots kept
/// aligned.
fn filter_frame(
    frame: &Frame,
    min_score: f64,
) -> (
    Vec<Detection>,
    Option<Vec<Option<ImagePatch>>>,
    Option<Vec<Option<PointSet>>>,
) {
    let keep: Vec<usize> = frame
        .detections
        .iter()
        .enumerate()
        .filter(|(_, d)| d.score >= min_score)
        .map(|(i, _)| i)
        .collect();
    let dets = keep.iter().map(|&i| frame.detections[i].clone()).collect();
    let images = frame
        .image_payloads
        .as_ref()
        .map(|p| keep.iter().map(|&i| p[i].clone()).collect());
    let clouds = frame
        .cloud_payloads
        .as_ref()
        .map(|p| keep.iter().map(|&i| p[i].clone()).collect());
    (dets, images, clouds)
}

/// An image modality is usable only when every detection has a patch; a
/// missing patch downgrades the whole modality for the frame.
fn image_live(payloads: &Option<Vec<Option<ImagePatch>>>, mask_on: bool) -> bool {
    mask_on
        && payloads
            .as_ref()
            .is_some_and(|p| p.iter().all(|s| s.is_some()))
}

fn cloud_live(payloads: &Option<Vec<Option<PointSet>>>, mask_on: bool) -> bool {
    mask_on && payloads.is_some()
}

/// Turn one slice's scores into a gated flow problem.
fn problem_from_slice(
    tape: &Tape,
    slice: &SliceScores,
    n: usize,
    m: usize,
    gate: f64,
) -> Result<FlowProblem> {
    let conf_probs: Vec<f64> = tape
        .value(slice.conf_logits)
        .data()
        .iter()
        .map(|&v| sigmoid(v))
        .collect();
    let link_scores = match slice.link {
        Some(v) => tape.value(v).data().to_vec(),
        None => vec![0.0; n * m],
    };
    let (start_scores, end_scores) = pad_boundaries(
        n,
        m,
        slice
            .start_logits
            .map(|v| tape.value(v).data().iter().map(|&x| sigmoid(x)).collect()),
        slice
            .end_logits
            .map(|v| tape.value(v).data().iter().map(|&x| sigmoid(x)).collect()),
    );
    let problem = FlowProblem {
        n,
        m,
        detection_scores: conf_probs.clone(),
        link_scores,
        start_scores,
        end_scores,
    };
    apply_confidence_gate(&problem, &conf_probs, gate)
}

/// Advance the tracker by one frame. Returns the (detection, id) pairs
/// emitted for this frame and the raw assignment solution.
pub fn step(
    model: &TrackModel,
    state: &mut TrackerState,
    frame: &Frame,
    mask: &DropoutSection,
    settings: &TrackerSettings,
) -> Result<(Vec<(Detection, i64)>, AssignmentSolution)> {
    let (kept, images, clouds) = filter_frame(frame, settings.detection_filter);
    let cur_image_live = image_live(&images, mask.image_on(frame.index));
    let cur_cloud_live = cloud_live(&clouds, mask.cloud_on(frame.index));
    if !cur_image_live && !cur_cloud_live {
        return Err(Error::SensorFailure);
    }

    let n = state.prev.len();
    let m = kept.len();
    if n + m == 0 {
        state.prev_image_live = cur_image_live;
        state.prev_cloud_live = cur_cloud_live;
        return Ok((Vec::new(), AssignmentSolution::all_zero(0, 0)));
    }

    let window_image = cur_image_live && (n == 0 || state.prev_image_live);
    let window_cloud = cur_cloud_live && (n == 0 || state.prev_cloud_live);
    if !window_image && !window_cloud {
        return Err(Error::SensorFailure);
    }

    let input = WindowInput {
        n,
        m,
        image_patches: window_image.then(|| {
            state
                .prev
                .iter()
                .map(|c| c.image.clone().expect("live image carried"))
                .chain(images.iter().flatten().map(|p| p.as_ref().unwrap().clone()))
                .collect()
        }),
        cloud_sets: window_cloud.then(|| {
            state
                .prev
                .iter()
                .map(|c| c.cloud.clone().unwrap_or_default())
                .chain(
                    clouds
                        .iter()
                        .flatten()
                        .map(|p| p.clone().unwrap_or_default()),
                )
                .collect()
        }),
        reflectance: None,
        injected: Vec::new(),
    };

    let mut tape = Tape::new();
    let (_, scores) = model.forward_window(&mut tape, &input)?;
    let problem = problem_from_slice(
        &tape,
        scores.inference_slice(),
        n,
        m,
        settings.confidence_gate,
    )?;
    let solution = solve_exact(&problem)?;

    // Identity bookkeeping.
    let mut emitted = Vec::new();
    let mut carried = Vec::new();
    let mut continued_prev = vec![false; n];
    for k in 0..m {
        if !solution.selected[n + k] {
            continue;
        }
        let id = match (0..n).find(|&j| solution.links[j * m + k]) {
            Some(j) => {
                continued_prev[j] = true;
                let id = state.prev[j].id;
                if let Some(t) = state.tracks.iter_mut().find(|t| t.id == id) {
                    t.last_detection = kept[k].clone();
                    t.age += 1;
                    t.missed = 0;
                }
                id
            }
            None => {
                debug_assert!(solution.starts[k]);
                let id = state.next_id;
                state.next_id += 1;
                state.tracks.push(Track {
                    id,
                    last_detection: kept[k].clone(),
                    age: 1,
                    missed: 0,
                });
                id
            }
        };
        emitted.push((kept[k].clone(), id));
        carried.push(Carried {
            id,
            image: if cur_image_live {
                images.as_ref().unwrap()[k].clone()
            } else {
                None
            },
            cloud: if cur_cloud_live {
                clouds.as_ref().unwrap()[k].clone()
            } else {
                None
            },
        });
    }
    // Previous detections that ended or were deselected close their tracks.
    for j in 0..n {
        if !continued_prev[j] {
            let id = state.prev[j].id;
            state.tracks.retain(|t| t.id != id);
        }
    }
    state.prev = carried;
    state.prev_image_live = cur_image_live;
    state.prev_cloud_live = cur_cloud_live;
    Ok((emitted, solution))
}

/// Result of tracking one sequence.
#[derive(Debug, Clone)]
pub struct SequenceRun {
    pub records: Vec<LabelRecord>,
    pub solutions: Vec<AssignmentSolution>,
}

fn emitted_record(det: &Detection, id: i64) -> LabelRecord {
    LabelRecord {
        frame: det.frame,
        track_id: id,
        class_label: det.class_label.clone(),
        truncated: 0.0,
        occluded: 0,
        alpha: 0.0,
        box2d: det.box2d,
        dims: det.box3d.map_or([-1.0, -1.0, -1.0], |b| [b.h, b.w, b.l]),
        location: det
            .box3d
            .map_or([-1000.0, -1000.0, -1000.0], |b| [b.x, b.y, b.z]),
        rotation_y: det.box3d.map_or(-10.0, |b| b.rotation_y),
        score: Some(det.score),
    }
}

/// Track a whole sequence. Deterministic for fixed weights, mask, and
/// input.
pub fn run_sequence(
    model: &TrackModel,
    dataset: &SequenceDataset,
    mask: &DropoutSection,
    settings: &TrackerSettings,
) -> Result<SequenceRun> {
    let mut state = TrackerState::new();
    let mut records = Vec::new();
    let mut solutions = Vec::new();
    for frame in &dataset.frames {
        let (emitted, sol) = step(model, &mut state, frame, mask, settings)?;
        for (det, id) in &emitted {
            records.push(emitted_record(det, *id));
        }
        solutions.push(sol);
    }
    Ok(SequenceRun { records, solutions })
}

/// Training schedule.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub detection_filter: f64,
    pub gt_iou: f64,
}

impl TrainSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        TrainSettings {
            epochs: cfg.training.epochs,
            learning_rate: cfg.training.learning_rate,
            seed: cfg.training.seed,
            loss_weights: cfg.loss_weights(),
            detection_filter: cfg.thresholds.detection_filter,
            gt_iou: cfg.thresholds.gt_iou,
        }
    }
}

/// One optimizer step's logged losses.
#[derive(Debug, Clone, Copy)]
pub struct TrainStep {
    pub step: usize,
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub steps: Vec<TrainStep>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.losses.total)
    }
}

/// Train on every consecutive-frame window of the given sequences.
/// Supervision follows ground-truth assignment; every slice of every window
/// contributes to the loss. Deterministic under a fixed seed.
pub fn train_loop(
    model: &mut TrackModel,
    datasets: &[SequenceDataset],
    settings: &TrainSettings,
) -> Result<TrainOutcome> {
    if !datasets.iter().any(|d| d.has_ground_truth()) {
        return Err(Error::Config(
            "training requires ground-truth tracks".into(),
        ));
    }
    let mut windows: Vec<(usize, usize)> = Vec::new();
    for (di, ds) in datasets.iter().enumerate() {
        for wi in 0..ds.frames.len().saturating_sub(1) {
            windows.push((di, wi));
        }
    }
    if windows.is_empty() {
        return Err(Error::Config("no trainable windows in the dataset".into()));
    }

    let mut adam = AdamState::new(&model.store, settings.learning_rate);
    let mut outcome = TrainOutcome::default();
    let mut step_no = 0usize;
    for epoch in 0..settings.epochs {
        let mut order = windows.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        for (di, wi) in order {
            let ds = &datasets[di];
            let prev_frame = &ds.frames[wi];
            let cur_frame = &ds.frames[wi + 1];
            let (prev_kept, prev_img, prev_cloud) =
                filter_frame(prev_frame, settings.detection_filter);
            let (cur_kept, cur_img, cur_cloud) =
                filter_frame(cur_frame, settings.detection_filter);
            let (n, m) = (prev_kept.len(), cur_kept.len());
            if n + m == 0 {
                continue;
            }
            let img_ok = image_live(&prev_img, true) && image_live(&cur_img, true);
            let cloud_ok = cloud_live(&prev_cloud, true) && cloud_live(&cur_cloud, true);
            if !img_ok && !cloud_ok {
                continue;
            }
            let input = WindowInput {
                n,
                m,
                image_patches: img_ok.then(|| {
                    prev_img
                        .iter()
                        .flatten()
                        .chain(cur_img.iter().flatten())
                        .map(|p| p.as_ref().unwrap().clone())
                        .collect()
                }),
                cloud_sets: cloud_ok.then(|| {
                    prev_cloud
                        .iter()
                        .flatten()
                        .chain(cur_cloud.iter().flatten())
                        .map(|p| p.clone().unwrap_or_default())
                        .collect()
                }),
                reflectance: None,
                injected: Vec::new(),
            };
            let gt = build_gt_association(
                &prev_kept,
                &cur_kept,
                &prev_frame.gt,
                &cur_frame.gt,
                settings.gt_iou,
            );
            let mut tape = Tape::new();
            let (_, scores) = model.forward_window(&mut tape, &input)?;
            let (total, parts) = compute_loss(&mut tape, &scores, &gt, &settings.loss_weights)?;
            tape.backward(total, &mut model.store)?;
            adam_step(&mut model.store, &mut adam)?;
            step_no += 1;
            log::debug!(
                "step {step_no} link {:.6} start {:.6} end {:.6} true {:.6} total {:.6}",
                parts.link,
                parts.start,
                parts.end,
                parts.truth,
                parts.total
            );
            outcome.steps.push(TrainStep {
                step: step_no,
                losses: parts,
            });
        }
    }
    Ok(outcome)
}
