//! Per-detection feature encoders for the two desk-scale modalities.
//!
//! The cloud encoder is a pared-down point network: a shared per-point MLP,
//! detection-wise average pooling, and a global branch pooled from the
//! earlier per-point features. The image encoder reduces a patch to a
//! channel histogram descriptor and passes it through a small learned head.
//! Both emit a `feature_dim x n_detections` column matrix on the tape.

use rand::Rng;

use super::{EmbeddingBatch, ModalityTag};
use crate::diffcore::{ParamId, ParamStore, Tape, Tensor, ValueId};
use crate::error::{Error, Result};
use crate::ingest::{ImagePatch, PointSet};

/// Weights of the point-set encoder. The projection consumes the
/// concatenation of the pooled second-layer features and the pooled
/// first-layer (global branch) features.
#[derive(Debug, Clone)]
pub struct PointEncoderWeights {
    pub layer1: (ParamId, ParamId),
    pub layer2: (ParamId, ParamId),
    pub proj: (ParamId, ParamId),
    /// Learned column substituted for detections with no points.
    pub absent: ParamId,
    pub input_channels: usize,
    pub hidden: usize,
    pub feature_dim: usize,
}

impl PointEncoderWeights {
    pub fn create<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_channels: usize,
        hidden: usize,
        feature_dim: usize,
        rng: &mut R,
    ) -> Self {
        assert!(input_channels == 3 || input_channels == 4);
        let w = |store: &mut ParamStore, name: String, o: usize, i: usize, rng: &mut R| {
            store.add_uniform(name, &[o, i], i, rng)
        };
        let b = |store: &mut ParamStore, name: String, o: usize, i: usize, rng: &mut R| {
            store.add_uniform(name, &[o], i, rng)
        };
        PointEncoderWeights {
            layer1: (
                w(store, format!("{prefix}.l1.weight"), hidden, input_channels, rng),
                b(store, format!("{prefix}.l1.bias"), hidden, input_channels, rng),
            ),
            layer2: (
                w(store, format!("{prefix}.l2.weight"), hidden, hidden, rng),
                b(store, format!("{prefix}.l2.bias"), hidden, hidden, rng),
            ),
            proj: (
                w(store, format!("{prefix}.proj.weight"), feature_dim, 2 * hidden, rng),
                b(store, format!("{prefix}.proj.bias"), feature_dim, 2 * hidden, rng),
            ),
            absent: store.add_uniform(format!("{prefix}.absent"), &[feature_dim], 1, rng),
            input_channels,
            hidden,
            feature_dim,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![
            self.layer1.0,
            self.layer1.1,
            self.layer2.0,
            self.layer2.1,
            self.proj.0,
            self.proj.1,
            self.absent,
        ]
    }
}

/// Canonical point order: lexicographic by coordinates (and reflectance).
/// Summation then happens in a content-determined order, which makes the
/// encoder exactly permutation invariant, bit for bit.
fn canonical_order(set: &PointSet, reflect: Option<&[f64]>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.sort_by(|&a, &b| {
        let pa = &set[a];
        let pb = &set[b];
        pa[0].total_cmp(&pb[0])
            .then(pa[1].total_cmp(&pb[1]))
            .then(pa[2].total_cmp(&pb[2]))
            .then_with(|| match reflect {
                Some(r) => r[a].total_cmp(&r[b]),
                None => std::cmp::Ordering::Equal,
            })
    });
    idx
}

/// Encode point sets; every set must be non-empty. Use
/// [`encode_points_with_absent`] when upstream selection can come up empty.
pub fn encode_points(
    tape: &mut Tape,
    store: &ParamStore,
    w: &PointEncoderWeights,
    sets: &[PointSet],
    reflectance: Option<&[Vec<f64>]>,
) -> Result<EmbeddingBatch> {
    if let Some(i) = sets.iter().position(|s| s.is_empty()) {
        return Err(Error::DegenerateDetection(format!(
            "detection {i} has no points"
        )));
    }
    let features = encode_point_matrix(tape, store, w, sets, reflectance)?;
    Ok(EmbeddingBatch {
        modality: ModalityTag::Cloud,
        features,
    })
}

/// Encode point sets where empty sets are allowed: their columns are the
/// learned absent vector. Returns the batch and the flagged positions.
pub fn encode_points_with_absent(
    tape: &mut Tape,
    store: &ParamStore,
    w: &PointEncoderWeights,
    sets: &[PointSet],
    reflectance: Option<&[Vec<f64>]>,
) -> Result<(EmbeddingBatch, Vec<usize>)> {
    let empty_positions: Vec<usize> = sets
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_empty())
        .map(|(i, _)| i)
        .collect();

    let absent_leaf = tape.param(store, w.absent);
    let absent_col = tape.reshape(absent_leaf, &[w.feature_dim, 1])?;

    let features = if empty_positions.len() == sets.len() {
        // Nothing to encode: every column is the absent vector.
        tape.gather_cols(absent_col, &vec![0; sets.len()])?
    } else if empty_positions.is_empty() {
        encode_point_matrix(tape, store, w, sets, reflectance)?
    } else {
        let non_empty: Vec<PointSet> = sets.iter().filter(|s| !s.is_empty()).cloned().collect();
        let refl: Option<Vec<Vec<f64>>> = reflectance.map(|r| {
            r.iter()
                .zip(sets)
                .filter(|(_, s)| !s.is_empty())
                .map(|(r, _)| r.clone())
                .collect()
        });
        let encoded = encode_point_matrix(tape, store, w, &non_empty, refl.as_deref())?;
        // Splice the absent column into the empty positions.
        let with_absent = tape.concat(&[encoded, absent_col], 1)?;
        let absent_idx = non_empty.len();
        let mut map = Vec::with_capacity(sets.len());
        let mut cursor = 0usize;
        for set in sets {
            if set.is_empty() {
                map.push(absent_idx);
            } else {
                map.push(cursor);
                cursor += 1;
            }
        }
        tape.gather_cols(with_absent, &map)?
    };
    Ok((
        EmbeddingBatch {
            modality: ModalityTag::Cloud,
            features,
        },
        empty_positions,
    ))
}

fn encode_point_matrix(
    tape: &mut Tape,
    store: &ParamStore,
    w: &PointEncoderWeights,
    sets: &[PointSet],
    reflectance: Option<&[Vec<f64>]>,
) -> Result<ValueId> {
    if w.input_channels == 4 {
        let r = reflectance.ok_or_else(|| {
            Error::Contract("encoder expects reflectance but none supplied".into())
        })?;
        if r.len() != sets.len() || r.iter().zip(sets).any(|(ri, si)| ri.len() != si.len()) {
            return Err(Error::Contract("reflectance/point count mismatch".into()));
        }
    }

    let total: usize = sets.iter().map(|s| s.len()).sum();
    let mut data = vec![0.0; w.input_channels * total];
    let mut segments = Vec::with_capacity(sets.len());
    let mut col = 0usize;
    for (di, set) in sets.iter().enumerate() {
        let refl = reflectance.map(|r| r[di].as_slice());
        let order = canonical_order(set, refl);
        let start = col;
        for &pi in &order {
            for ch in 0..3 {
                data[ch * total + col] = set[pi][ch];
            }
            if w.input_channels == 4 {
                data[3 * total + col] = refl.map_or(0.0, |r| r[pi]);
            }
            col += 1;
        }
        segments.push(start..col);
    }

    let points = tape.constant(Tensor::new(vec![w.input_channels, total], data)?);
    let (w1, b1) = (tape.param(store, w.layer1.0), tape.param(store, w.layer1.1));
    let (w2, b2) = (tape.param(store, w.layer2.0), tape.param(store, w.layer2.1));
    let (wp, bp) = (tape.param(store, w.proj.0), tape.param(store, w.proj.1));

    let h1 = tape.linear(w1, points, Some(b1))?;
    let f1 = tape.relu(h1);
    let h2 = tape.linear(w2, f1, Some(b2))?;
    let f2 = tape.relu(h2);
    let local = tape.segment_mean(f2, &segments)?;
    let global = tape.segment_mean(f1, &segments)?;
    let both = tape.concat(&[local, global], 0)?;
    tape.linear(wp, both, Some(bp))
}

// ---------------------------------------------------------------------------
// Image encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ImageEncoderWeights {
    pub layer1: (ParamId, ParamId),
    pub proj: (ParamId, ParamId),
    pub bins: usize,
    pub hidden: usize,
    pub feature_dim: usize,
}

impl ImageEncoderWeights {
    pub fn create<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        bins: usize,
        hidden: usize,
        feature_dim: usize,
        rng: &mut R,
    ) -> Self {
        let dlen = bins * 3;
        ImageEncoderWeights {
            layer1: (
                store.add_uniform(format!("{prefix}.l1.weight"), &[hidden, dlen], dlen, rng),
                store.add_uniform(format!("{prefix}.l1.bias"), &[hidden], dlen, rng),
            ),
            proj: (
                store.add_uniform(
                    format!("{prefix}.proj.weight"),
                    &[feature_dim, hidden],
                    hidden,
                    rng,
                ),
                store.add_uniform(format!("{prefix}.proj.bias"), &[feature_dim], hidden, rng),
            ),
            bins,
            hidden,
            feature_dim,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.layer1.0, self.layer1.1, self.proj.0, self.proj.1]
    }
}

/// Fixed-length patch descriptor: per-channel value histogram, each
/// channel's mass normalized to 1.
pub fn patch_descriptor(patch: &ImagePatch, bins: usize) -> Vec<f64> {
    let mut out = vec![0.0; bins * 3];
    let pixels = patch.width * patch.height;
    if pixels == 0 {
        return out;
    }
    for px in 0..pixels {
        for ch in 0..3 {
            let v = patch.rgb[px * 3 + ch].clamp(0.0, 1.0);
            let bin = ((v * bins as f64) as usize).min(bins - 1);
            out[ch * bins + bin] += 1.0;
        }
    }
    for v in &mut out {
        *v /= pixels as f64;
    }
    out
}

/// Encode image patches; the caller must have resolved payload absence
/// (an absent payload means the modality drops out for the window).
pub fn encode_image(
    tape: &mut Tape,
    store: &ParamStore,
    w: &ImageEncoderWeights,
    patches: &[&ImagePatch],
) -> Result<EmbeddingBatch> {
    let dlen = w.bins * 3;
    let n = patches.len();
    let mut data = vec![0.0; dlen * n];
    for (i, patch) in patches.iter().enumerate() {
        let desc = patch_descriptor(patch, w.bins);
        for (r, v) in desc.into_iter().enumerate() {
            data[r * n + i] = v;
        }
    }
    let descs = tape.constant(Tensor::new(vec![dlen, n], data)?);
    let (w1, b1) = (tape.param(store, w.layer1.0), tape.param(store, w.layer1.1));
    let (wp, bp) = (tape.param(store, w.proj.0), tape.param(store, w.proj.1));
    let h = tape.linear(w1, descs, Some(b1))?;
    let a = tape.relu(h);
    let features = tape.linear(wp, a, Some(bp))?;
    Ok(EmbeddingBatch {
        modality: ModalityTag::Image,
        features,
    })
}

// ---------------------------------------------------------------------------
// Skip pooling over multi-level feature maps
// ---------------------------------------------------------------------------

/// Channel counts of the four pyramid levels the skip pool consumes.
pub const SKIP_LEVEL_CHANNELS: [usize; 4] = [64, 128, 256, 512];
const SKIP_RESCALED: usize = 128;

#[derive(Debug, Clone)]
pub struct SkipPoolWeights {
    /// Two point-wise convolutions per level.
    pub levels: Vec<((ParamId, ParamId), (ParamId, ParamId))>,
    /// Final projection of the 512-wide concat down to `feature_dim`.
    pub proj: (ParamId, ParamId),
    pub feature_dim: usize,
}

impl SkipPoolWeights {
    pub fn create<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        feature_dim: usize,
        rng: &mut R,
    ) -> Self {
        let levels = SKIP_LEVEL_CHANNELS
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                (
                    (
                        store.add_uniform(
                            format!("{prefix}.level{l}.conv1.weight"),
                            &[SKIP_RESCALED, c],
                            c,
                            rng,
                        ),
                        store.add_uniform(format!("{prefix}.level{l}.conv1.bias"), &[SKIP_RESCALED], c, rng),
                    ),
                    (
                        store.add_uniform(
                            format!("{prefix}.level{l}.conv2.weight"),
                            &[SKIP_RESCALED, SKIP_RESCALED],
                            SKIP_RESCALED,
                            rng,
                        ),
                        store.add_uniform(
                            format!("{prefix}.level{l}.conv2.bias"),
                            &[SKIP_RESCALED],
                            SKIP_RESCALED,
                            rng,
                        ),
                    ),
                )
            })
            .collect();
        let total = SKIP_RESCALED * SKIP_LEVEL_CHANNELS.len();
        SkipPoolWeights {
            levels,
            proj: (
                store.add_uniform(format!("{prefix}.proj.weight"), &[feature_dim, total], total, rng),
                store.add_uniform(format!("{prefix}.proj.bias"), &[feature_dim], total, rng),
            ),
            feature_dim,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for ((w1, b1), (w2, b2)) in &self.levels {
            out.extend([*w1, *b1, *w2, *b2]);
        }
        out.extend([self.proj.0, self.proj.1]);
        out
    }
}

/// Spatial mean of a `[C, H, W]` map, as a `[C, 1]` column on the tape.
pub fn global_avg_pool(tape: &mut Tape, map: ValueId) -> Result<ValueId> {
    let shape = tape.value(map).shape().to_vec();
    if shape.len() != 3 || shape[1] == 0 || shape[2] == 0 {
        return Err(Error::dim("global_avg_pool", &shape, &[0, 1, 1]));
    }
    let hw = shape[1] * shape[2];
    let flat = tape.reshape(map, &[shape[0], hw])?;
    tape.segment_mean(flat, &[0..hw])
}

/// Pool four pyramid levels (channels 64/128/256/512) to a single 512-long
/// feature column: global average pool per level, two point-wise
/// convolutions with normalization and relu down to 128 channels, then
/// concatenation.
pub fn skip_pool(
    tape: &mut Tape,
    store: &ParamStore,
    w: &SkipPoolWeights,
    level_maps: &[Tensor],
) -> Result<ValueId> {
    if level_maps.len() != SKIP_LEVEL_CHANNELS.len() {
        return Err(Error::Contract(format!(
            "skip_pool expects {} levels, got {}",
            SKIP_LEVEL_CHANNELS.len(),
            level_maps.len()
        )));
    }
    let mut pooled = Vec::with_capacity(level_maps.len());
    for (l, map) in level_maps.iter().enumerate() {
        let shape = map.shape().to_vec();
        if shape.len() != 3 || shape[0] != SKIP_LEVEL_CHANNELS[l] {
            return Err(Error::dim(
                format!("skip_pool level {l}"),
                &shape,
                &[SKIP_LEVEL_CHANNELS[l], 0, 0],
            ));
        }
        let leaf = tape.constant(map.clone());
        let gap = global_avg_pool(tape, leaf)?;
        let ((w1, b1), (w2, b2)) = w.levels[l];
        let (w1v, b1v) = (tape.param(store, w1), tape.param(store, b1));
        let (w2v, b2v) = (tape.param(store, w2), tape.param(store, b2));
        let c1 = tape.linear(w1v, gap, Some(b1v))?;
        let n1 = tape.layer_norm_cols(c1, 1e-6)?;
        let a1 = tape.relu(n1);
        let c2 = tape.linear(w2v, a1, Some(b2v))?;
        let n2 = tape.layer_norm_cols(c2, 1e-6)?;
        pooled.push(tape.relu(n2));
    }
    tape.concat(&pooled, 0)
}

/// [`skip_pool`] followed by the learned projection to `feature_dim`, so the
/// pyramid descriptor can stand in for the histogram image feature.
pub fn skip_pool_project(
    tape: &mut Tape,
    store: &ParamStore,
    w: &SkipPoolWeights,
    level_maps: &[Tensor],
) -> Result<ValueId> {
    let pooled = skip_pool(tape, store, w, level_maps)?;
    let (wp, bp) = (tape.param(store, w.proj.0), tape.param(store, w.proj.1));
    tape.linear(wp, pooled, Some(bp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn point_weights(seed: u64) -> (ParamStore, PointEncoderWeights) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = PointEncoderWeights::create(&mut store, "cloud", 3, 5, 6, &mut rng);
        (store, w)
    }

    #[test]
    fn identical_points_pool_to_single_point_feature() {
        let (store, w) = point_weights(3);
        let p = [0.4, -1.2, 9.5];
        let mut tape = Tape::new();
        let five = encode_points(&mut tape, &store, &w, &[vec![p; 5]], None).unwrap();
        let one = encode_points(&mut tape, &store, &w, &[vec![p]], None).unwrap();
        let a = tape.value(five.features).data().to_vec();
        let b = tape.value(one.features).data().to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_within_detection_is_bit_exact() {
        let (store, w) = point_weights(4);
        let pts = vec![
            [1.0, 2.0, 3.0],
            [-0.5, 0.25, 8.0],
            [4.0, -2.0, 6.5],
            [0.0, 0.0, 5.0],
        ];
        let mut shuffled = pts.clone();
        shuffled.swap(0, 3);
        shuffled.swap(1, 2);
        let mut tape = Tape::new();
        let a = encode_points(&mut tape, &store, &w, &[pts], None).unwrap();
        let b = encode_points(&mut tape, &store, &w, &[shuffled], None).unwrap();
        let fa = tape.value(a.features).data();
        let fb = tape.value(b.features).data();
        assert!(fa.iter().zip(fb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn empty_set_is_a_degenerate_detection_error() {
        let (store, w) = point_weights(5);
        let mut tape = Tape::new();
        let err = encode_points(&mut tape, &store, &w, &[vec![]], None).unwrap_err();
        assert!(matches!(err, Error::DegenerateDetection(_)));
    }

    #[test]
    fn absent_vector_fills_empty_detections() {
        let (store, w) = point_weights(6);
        let mut tape = Tape::new();
        let sets = vec![vec![[1.0, 1.0, 5.0]], vec![], vec![[0.0, 2.0, 7.0]]];
        let (batch, flagged) =
            encode_points_with_absent(&mut tape, &store, &w, &sets, None).unwrap();
        assert_eq!(flagged, vec![1]);
        let f = tape.value(batch.features);
        assert_eq!(f.shape(), &[6, 3]);
        let absent = store.value(w.absent).data();
        for r in 0..6 {
            assert_eq!(f.at(r, 1), absent[r]);
        }
    }

    #[test]
    fn point_encoder_gradients_match_finite_differences() {
        let (mut store, w) = point_weights(7);
        let sets = vec![
            vec![[0.3, -0.2, 6.0], [0.5, 0.1, 6.2], [0.2, 0.0, 5.8]],
            vec![[2.0, 1.0, 9.0], [2.1, 0.9, 9.2]],
        ];
        let params = w.params();
        let report = grad_check(&mut store, &params, 1e-5, |tape, store| {
            let batch = encode_points(tape, store, &w, &sets, None)?;
            let sig = tape.sigmoid(batch.features);
            tape.mean_all(sig)
        })
        .unwrap();
        assert!(report.passes(1e-4), "max err {}", report.max_error());
    }

    #[test]
    fn reflectance_channel_feeds_fourth_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let w = PointEncoderWeights::create(&mut store, "cloud", 4, 5, 6, &mut rng);
        let sets = vec![vec![[1.0, 2.0, 5.0], [1.5, 2.5, 5.5]]];
        let refl_a = vec![vec![0.1, 0.2]];
        let refl_b = vec![vec![0.8, 0.9]];
        let mut tape = Tape::new();
        let a = encode_points(&mut tape, &store, &w, &sets, Some(&refl_a)).unwrap();
        let b = encode_points(&mut tape, &store, &w, &sets, Some(&refl_b)).unwrap();
        assert_ne!(
            tape.value(a.features).data(),
            tape.value(b.features).data()
        );
        // Missing reflectance with a 4-channel encoder is a contract error.
        assert!(encode_points(&mut tape, &store, &w, &sets, None).is_err());
    }

    #[test]
    fn constant_patch_masses_one_bin_per_channel() {
        let patch = ImagePatch::solid(4, 4, [0.21, 0.55, 0.83]);
        let d = patch_descriptor(&patch, 8);
        for ch in 0..3 {
            let channel = &d[ch * 8..(ch + 1) * 8];
            let nonzero: Vec<usize> = channel
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.0)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(nonzero.len(), 1, "channel {ch}");
            assert!((channel[nonzero[0]] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_patches_embed_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let w = ImageEncoderWeights::create(&mut store, "img", 8, 5, 6, &mut rng);
        let patch = ImagePatch::solid(4, 4, [0.3, 0.6, 0.9]);
        let mut tape = Tape::new();
        let batch = encode_image(&mut tape, &store, &w, &[&patch, &patch]).unwrap();
        let f = tape.value(batch.features);
        for r in 0..6 {
            assert_eq!(f.at(r, 0).to_bits(), f.at(r, 1).to_bits());
        }
    }

    #[test]
    fn image_head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let w = ImageEncoderWeights::create(&mut store, "img", 8, 5, 6, &mut rng);
        let p1 = ImagePatch::solid(4, 4, [0.2, 0.5, 0.7]);
        let mut p2 = ImagePatch::solid(4, 4, [0.8, 0.1, 0.4]);
        p2.rgb[0] = 0.95;
        let params = w.params();
        let report = grad_check(&mut store, &params, 1e-5, |tape, store| {
            let batch = encode_image(tape, store, &w, &[&p1, &p2])?;
            let s = tape.sigmoid(batch.features);
            tape.mean_all(s)
        })
        .unwrap();
        assert!(report.passes(1e-4), "max err {}", report.max_error());
    }

    fn level_maps(fill: Option<f64>) -> Vec<Tensor> {
        SKIP_LEVEL_CHANNELS
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                let (h, w) = (3 - l.min(2), 2);
                match fill {
                    Some(v) => Tensor::filled(&[c, h, w], v),
                    None => {
                        let n = c * h * w;
                        Tensor::new(
                            vec![c, h, w],
                            (0..n).map(|i| ((i * 37 + l * 11) % 97) as f64 / 97.0 - 0.5).collect(),
                        )
                        .unwrap()
                    }
                }
            })
            .collect()
    }

    #[test]
    fn global_avg_pool_of_constant_map_is_the_constant() {
        let mut tape = Tape::new();
        let map = tape.constant(Tensor::filled(&[4, 3, 5], 2.5));
        let pooled = global_avg_pool(&mut tape, map).unwrap();
        assert_eq!(tape.value(pooled).shape(), &[4, 1]);
        assert!(tape.value(pooled).data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn skip_pool_output_is_512_long() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let w = SkipPoolWeights::create(&mut store, "skip", 6, &mut rng);
        let mut tape = Tape::new();
        let out = skip_pool(&mut tape, &store, &w, &level_maps(None)).unwrap();
        assert_eq!(tape.value(out).shape(), &[512, 1]);
        let proj = skip_pool_project(&mut tape, &store, &w, &level_maps(None)).unwrap();
        assert_eq!(tape.value(proj).shape(), &[6, 1]);
    }

    #[test]
    fn skip_pool_rejects_wrong_level_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        let w = SkipPoolWeights::create(&mut store, "skip", 6, &mut rng);
        let mut maps = level_maps(Some(1.0));
        maps[1] = Tensor::filled(&[100, 2, 2], 1.0);
        let mut tape = Tape::new();
        assert!(skip_pool(&mut tape, &store, &w, &maps).is_err());
        assert!(skip_pool(&mut tape, &store, &w, &maps[..3]).is_err());
    }

    #[test]
    fn skip_pool_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::new();
        let w = SkipPoolWeights::create(&mut store, "skip", 6, &mut rng);
        let maps = level_maps(None);
        // Checking all 512-channel weights is slow; spot-check level 0 and
        // the projection, which exercise every backward rule in the op.
        let params = vec![w.levels[0].0 .0, w.levels[0].1 .1, w.proj.0, w.proj.1];
        let report = grad_check(&mut store, &params, 1e-5, |tape, store| {
            let out = skip_pool_project(tape, store, &w, &maps)?;
            let s = tape.sigmoid(out);
            tape.mean_all(s)
        })
        .unwrap();
        assert!(report.passes(1e-4), "max err {}", report.max_error());
    }
}
