//! Adjacency estimation for a two-frame window.
//!
//! From the fused feature batch this module builds per-pair correlation
//! features, runs the four estimator heads (confidence, affinity, start,
//! end — the last two share parameters), applies the row/column softmax
//! ranking to the raw affinities, derives ground-truth targets from labeled
//! boxes, and evaluates the multi-task training loss.
//!
//! Everything is point-wise over pairs and independent across batch slices:
//! each head sees one `D x K` matrix per slice and never mixes columns.

use rand::Rng;

use crate::diffcore::{sigmoid, ParamId, ParamStore, Tape, Tensor, ValueId};
use crate::error::{Error, Result};
use crate::features::ModalityTag;
use crate::fusion::FusedBatch;
use crate::ingest::{Detection, LabelRecord};

/// Pairwise correlation operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationOp {
    /// Elementwise multiplication (a depthwise 1x1 correlation filter).
    Mul,
    /// Elementwise subtraction.
    Sub,
    /// Absolute subtraction; commutative, so chronology-agnostic.
    AbsSub,
}

impl std::str::FromStr for CorrelationOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mul" => Ok(CorrelationOp::Mul),
            "sub" => Ok(CorrelationOp::Sub),
            "abs_sub" => Ok(CorrelationOp::AbsSub),
            other => Err(Error::Config(format!("unknown correlation op {other:?}"))),
        }
    }
}

/// How the row-softmax and column-softmax maps are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankCombine {
    Mul,
    Max,
    Add,
    /// Average of the two maps (sum variant halved).
    Mean,
}

impl std::str::FromStr for RankCombine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mul" => Ok(RankCombine::Mul),
            "max" => Ok(RankCombine::Max),
            "add" => Ok(RankCombine::Add),
            "mean" => Ok(RankCombine::Mean),
            other => Err(Error::Config(format!("unknown rank combine {other:?}"))),
        }
    }
}

/// Per-slice pairwise correlation features: each slice holds a
/// `D x (N*M)` matrix, column `j*M + k` carrying the pair (prev `j`,
/// cur `k`).
#[derive(Debug, Clone)]
pub struct CorrelationMap {
    pub op: CorrelationOp,
    pub n: usize,
    pub m: usize,
    pub tags: Vec<ModalityTag>,
    pub per_slice: Vec<ValueId>,
}

/// Build the correlation map from a fused batch whose window has `n`
/// previous-frame and `m` current-frame columns. `n == 0` or `m == 0`
/// yields valid empty maps.
pub fn correlate(
    tape: &mut Tape,
    batch: &FusedBatch,
    op: CorrelationOp,
    n: usize,
    m: usize,
) -> Result<CorrelationMap> {
    let mut per_slice = Vec::with_capacity(batch.slices.len());
    let mut tags = Vec::with_capacity(batch.slices.len());
    for slice in &batch.slices {
        let cols = tape.value(slice.features).cols();
        if cols != n + m {
            return Err(Error::dim("correlate window", &[n + m], &[cols]));
        }
        let prev_idx: Vec<usize> = (0..n).collect();
        let cur_idx: Vec<usize> = (n..n + m).collect();
        let prev = tape.gather_cols(slice.features, &prev_idx)?;
        let cur = tape.gather_cols(slice.features, &cur_idx)?;
        // Pair layout: prev column j repeated m times, cur tiled n times.
        let mut rep = Vec::with_capacity(n * m);
        let mut tile = Vec::with_capacity(n * m);
        for j in 0..n {
            for k in 0..m {
                rep.push(j);
                tile.push(k);
            }
        }
        let a = tape.gather_cols(prev, &rep)?;
        let b = tape.gather_cols(cur, &tile)?;
        let map = match op {
            CorrelationOp::Mul => tape.mul(a, b)?,
            CorrelationOp::Sub => tape.sub(a, b)?,
            CorrelationOp::AbsSub => {
                let d = tape.sub(a, b)?;
                tape.abs(d)
            }
        };
        per_slice.push(map);
        tags.push(slice.modality);
    }
    Ok(CorrelationMap {
        op,
        n,
        m,
        tags,
        per_slice,
    })
}

/// Weights for the three estimator branches. The start and end heads are
/// one set of parameters applied to both pooled inputs.
#[derive(Debug, Clone)]
pub struct EstimatorWeights {
    pub affinity: Vec<(ParamId, ParamId)>,
    pub confidence: Vec<(ParamId, ParamId)>,
    pub start_end: Vec<(ParamId, ParamId)>,
    pub feature_dim: usize,
}

impl EstimatorWeights {
    pub fn create<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        feature_dim: usize,
        rng: &mut R,
    ) -> Self {
        let d = feature_dim;
        let d2 = (d / 2).max(1);
        let d4 = (d / 4).max(1);
        let stack = |store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R| {
            dims.windows(2)
                .enumerate()
                .map(|(i, w)| {
                    let (isz, osz) = (w[0], w[1]);
                    (
                        store.add_uniform(
                            format!("{prefix}.{name}.{i}.weight"),
                            &[osz, isz],
                            isz,
                            rng,
                        ),
                        store.add_uniform(format!("{prefix}.{name}.{i}.bias"), &[osz], isz, rng),
                    )
                })
                .collect()
        };
        EstimatorWeights {
            affinity: stack(store, "affinity", &[d, d2, d4, 1], rng),
            confidence: stack(store, "confidence", &[d, d2, 1], rng),
            start_end: stack(store, "start_end", &[d, d2, 1], rng),
            feature_dim,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.affinity
            .iter()
            .chain(&self.confidence)
            .chain(&self.start_end)
            .flat_map(|(w, b)| [*w, *b])
            .collect()
    }
}

/// Point-wise MLP: relu between layers, raw output on the last.
fn head_forward(
    tape: &mut Tape,
    store: &ParamStore,
    layers: &[(ParamId, ParamId)],
    input: ValueId,
) -> Result<ValueId> {
    let mut x = input;
    for (i, (w, b)) in layers.iter().enumerate() {
        let (wv, bv) = (tape.param(store, *w), tape.param(store, *b));
        x = tape.linear(wv, x, Some(bv))?;
        if i + 1 < layers.len() {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

/// Raw affinity scores per slice, shaped `N x M`. Point-wise: each pair's
/// score depends only on its own correlation column.
pub fn affinity_scores(
    tape: &mut Tape,
    store: &ParamStore,
    w: &EstimatorWeights,
    corr: &CorrelationMap,
) -> Result<Vec<ValueId>> {
    corr.per_slice
        .iter()
        .map(|&slice| {
            let flat = head_forward(tape, store, &w.affinity, slice)?;
            tape.reshape(flat, &[corr.n, corr.m])
        })
        .collect()
}

/// Start and end logits per slice: the correlation information of each
/// detection is gathered by average pooling over the opposite frame's axis,
/// then both pooled maps pass through the shared head. Requires `N >= 1`
/// and `M >= 1`; boundary windows are padded by the tracker instead.
pub fn start_end_scores(
    tape: &mut Tape,
    store: &ParamStore,
    w: &EstimatorWeights,
    corr: &CorrelationMap,
) -> Result<Vec<(ValueId, ValueId)>> {
    let (n, m) = (corr.n, corr.m);
    if n == 0 || m == 0 {
        return Err(Error::Contract(
            "start/end estimation needs a non-empty pair grid".into(),
        ));
    }
    corr.per_slice
        .iter()
        .map(|&slice| {
            // End scores: mean over current-frame partners, rows stay j-major.
            let end_segs: Vec<_> = (0..n).map(|j| j * m..(j + 1) * m).collect();
            let end_pooled = tape.segment_mean(slice, &end_segs)?;
            let end = head_forward(tape, store, &w.start_end, end_pooled)?;
            // Start scores: reorder columns k-major, then mean over previous
            // frame partners.
            let mut perm = Vec::with_capacity(n * m);
            for k in 0..m {
                for j in 0..n {
                    perm.push(j * m + k);
                }
            }
            let k_major = tape.gather_cols(slice, &perm)?;
            let start_segs: Vec<_> = (0..m).map(|k| k * n..(k + 1) * n).collect();
            let start_pooled = tape.segment_mean(k_major, &start_segs)?;
            let start = head_forward(tape, store, &w.start_end, start_pooled)?;
            Ok((start, end))
        })
        .collect()
}

/// Per-detection confidence logits per slice (`1 x (N+M)`); sigmoid is
/// applied at loss/inference time.
pub fn confidence_scores(
    tape: &mut Tape,
    store: &ParamStore,
    w: &EstimatorWeights,
    batch: &FusedBatch,
) -> Result<Vec<ValueId>> {
    batch
        .slices
        .iter()
        .map(|slice| head_forward(tape, store, &w.confidence, slice.features))
        .collect()
}

/// Ranking mechanism: combine the row softmax and the column softmax of the
/// raw score matrix elementwise.
pub fn rank_adjacency(tape: &mut Tape, raw: ValueId, combine: RankCombine) -> Result<ValueId> {
    let row_sm = tape.softmax_rows(raw)?;
    let t = tape.transpose(raw)?;
    let col_sm_t = tape.softmax_rows(t)?;
    let col_sm = tape.transpose(col_sm_t)?;
    match combine {
        RankCombine::Mul => tape.mul(row_sm, col_sm),
        RankCombine::Max => tape.elem_max(row_sm, col_sm),
        RankCombine::Add => tape.add(row_sm, col_sm),
        RankCombine::Mean => {
            let s = tape.add(row_sm, col_sm)?;
            Ok(tape.scale(s, 0.5))
        }
    }
}

/// Binary targets for one window, consistent with the flow constraints by
/// construction: a true detection is either linked or a start/end.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthAssociation {
    pub n: usize,
    pub m: usize,
    /// Row-major `n x m`.
    pub link: Vec<bool>,
    /// Previous-frame detections first, then current-frame.
    pub truth: Vec<bool>,
    pub start: Vec<bool>,
    pub end: Vec<bool>,
}

/// Greedy greatest-IoU assignment of detections to ground-truth boxes:
/// pairs above the strict threshold are taken in descending IoU order, one
/// detection per GT and one GT per detection. DontCare regions never match.
pub fn assign_track_ids(
    detections: &[Detection],
    labels: &[LabelRecord],
    iou_threshold: f64,
) -> Vec<Option<i64>> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (gi, gt) in labels.iter().enumerate() {
        if gt.is_dont_care() {
            continue;
        }
        for (di, det) in detections.iter().enumerate() {
            let iou = det.box2d.iou(&gt.box2d);
            if iou > iou_threshold {
                pairs.push((iou, gi, di));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; labels.len()];
    let mut assigned = vec![None; detections.len()];
    for (_, gi, di) in pairs {
        if !gt_used[gi] && assigned[di].is_none() {
            gt_used[gi] = true;
            assigned[di] = Some(labels[gi].track_id);
        }
    }
    assigned
}

/// Derive window targets from per-frame GT assignment.
pub fn build_gt_association(
    prev_dets: &[Detection],
    cur_dets: &[Detection],
    prev_gt: &[LabelRecord],
    cur_gt: &[LabelRecord],
    iou_threshold: f64,
) -> GroundTruthAssociation {
    let (n, m) = (prev_dets.len(), cur_dets.len());
    let prev_ids = assign_track_ids(prev_dets, prev_gt, iou_threshold);
    let cur_ids = assign_track_ids(cur_dets, cur_gt, iou_threshold);
    let mut link = vec![false; n * m];
    for j in 0..n {
        for k in 0..m {
            link[j * m + k] = match (prev_ids[j], cur_ids[k]) {
                (Some(a), Some(b)) => a == b,
                _ => false,
            };
        }
    }
    let truth: Vec<bool> = prev_ids
        .iter()
        .chain(cur_ids.iter())
        .map(|id| id.is_some())
        .collect();
    // Start/end follow from the constraints: true and unlinked.
    let start: Vec<bool> = (0..m)
        .map(|k| truth[n + k] && !(0..n).any(|j| link[j * m + k]))
        .collect();
    let end: Vec<bool> = (0..n)
        .map(|j| truth[j] && !(0..m).any(|k| link[j * m + k]))
        .collect();
    GroundTruthAssociation {
        n,
        m,
        link,
        truth,
        start,
        end,
    }
}

fn bools_to_tensor(shape: Vec<usize>, bits: &[bool]) -> Tensor {
    Tensor::new(shape, bits.iter().map(|&b| b as u8 as f64).collect()).expect("target shape")
}

/// Loss weights: start, end, and confidence terms relative to the link
/// term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub start: f64,
    pub end: f64,
    pub truth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            start: 0.4,
            end: 0.4,
            truth: 1.5,
        }
    }
}

/// Final per-slice scores for one window. `link` holds the values consumed
/// by both the loss and the solver (ranked when ranking is enabled,
/// sigmoid of the raw affinity otherwise). Start/end are raw logits.
#[derive(Debug, Clone)]
pub struct SliceScores {
    pub tag: ModalityTag,
    pub conf_logits: ValueId,
    pub link: Option<ValueId>,
    pub start_logits: Option<ValueId>,
    pub end_logits: Option<ValueId>,
}

#[derive(Debug, Clone)]
pub struct WindowScores {
    pub n: usize,
    pub m: usize,
    pub slices: Vec<SliceScores>,
}

impl WindowScores {
    pub fn slice(&self, tag: ModalityTag) -> Option<&SliceScores> {
        self.slices.iter().find(|s| s.tag == tag)
    }

    /// Slice feeding the solver: fused when present, else the single.
    pub fn inference_slice(&self) -> &SliceScores {
        self.slice(ModalityTag::Fused).unwrap_or(&self.slices[0])
    }
}

/// Unweighted component sums across slices, for logging.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub link: f64,
    pub start: f64,
    pub end: f64,
    pub truth: f64,
    pub total: f64,
}

fn mse_to_targets(tape: &mut Tape, pred: ValueId, targets: &Tensor) -> Result<ValueId> {
    let t = tape.constant(targets.clone());
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    tape.mean_all(sq)
}

/// Multi-task loss over every slice: mean squared error on link scores and
/// on sigmoid start/end scores, binary cross-entropy on confidence logits;
/// each component averaged over its own element count, components weighted
/// and summed, slices summed.
pub fn compute_loss(
    tape: &mut Tape,
    scores: &WindowScores,
    gt: &GroundTruthAssociation,
    weights: &LossWeights,
) -> Result<(ValueId, LossBreakdown)> {
    if gt.n != scores.n || gt.m != scores.m {
        return Err(Error::dim(
            "compute_loss window",
            &[scores.n, scores.m],
            &[gt.n, gt.m],
        ));
    }
    let (n, m) = (gt.n, gt.m);
    let link_t = bools_to_tensor(vec![n, m], &gt.link);
    let truth_t = bools_to_tensor(vec![1, n + m], &gt.truth);
    let start_t = bools_to_tensor(vec![1, m], &gt.start);
    let end_t = bools_to_tensor(vec![1, n], &gt.end);

    let mut breakdown = LossBreakdown::default();
    let mut total: Option<ValueId> = None;
    let add_term = |tape: &mut Tape, total: &mut Option<ValueId>, term: ValueId| {
        *total = Some(match total.take() {
            Some(t) => tape.add(t, term).expect("scalar add"),
            None => term,
        });
    };

    for slice in &scores.slices {
        if n + m > 0 {
            let l_true = tape.bce_with_logits_mean(slice.conf_logits, &truth_t)?;
            breakdown.truth += tape.value(l_true).item();
            let weighted = tape.scale(l_true, weights.truth);
            add_term(tape, &mut total, weighted);
        }
        if let Some(link) = slice.link {
            if n * m > 0 {
                let l_link = mse_to_targets(tape, link, &link_t)?;
                breakdown.link += tape.value(l_link).item();
                add_term(tape, &mut total, l_link);
            }
        }
        if let Some(start) = slice.start_logits {
            if m > 0 {
                let p = tape.sigmoid(start);
                let l_start = mse_to_targets(tape, p, &start_t)?;
                breakdown.start += tape.value(l_start).item();
                let weighted = tape.scale(l_start, weights.start);
                add_term(tape, &mut total, weighted);
            }
        }
        if let Some(end) = slice.end_logits {
            if n > 0 {
                let p = tape.sigmoid(end);
                let l_end = mse_to_targets(tape, p, &end_t)?;
                breakdown.end += tape.value(l_end).item();
                let weighted = tape.scale(l_end, weights.end);
                add_term(tape, &mut total, weighted);
            }
        }
    }
    let total =
        total.ok_or_else(|| Error::Contract("loss over a window with no terms".into()))?;
    breakdown.total = tape.value(total).item();
    Ok((total, breakdown))
}

/// Sigmoid applied outside the tape; used when turning logits into solver
/// scores.
pub fn sigmoid_slice(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&v| sigmoid(v)).collect()
}
