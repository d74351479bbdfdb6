//! Robust multi-modality fusion.
//!
//! Three fusion modules produce a fused feature with the same shape as a
//! single modality: A concatenates channels and projects back down, B sums
//! per-sensor projections, C gates the per-sensor projections with a learned
//! sigmoid attention map and normalizes by the gate sum. The robust wrapper
//! stacks the available single modalities plus (when at least two sensors
//! are up) the fused modality along the batch axis, so downstream estimators
//! keep working under any sensor combination.

use rand::Rng;

use crate::diffcore::{ParamId, ParamStore, Tape, ValueId};
use crate::error::{Error, Result};
use crate::features::{EmbeddingBatch, ModalityTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionVariant {
    /// Channel concatenation followed by a point-wise projection.
    A,
    /// Sum of per-sensor point-wise projections.
    B,
    /// Attention-gated, normalized sum of per-sensor projections.
    C,
}

impl std::str::FromStr for FusionVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" | "concat" => Ok(FusionVariant::A),
            "B" | "b" | "add" => Ok(FusionVariant::B),
            "C" | "c" | "attention" => Ok(FusionVariant::C),
            other => Err(Error::Config(format!("unknown fusion variant {other:?}"))),
        }
    }
}

/// Fixed sensor slot order for slice layout determinism.
pub fn sensor_slot(tag: ModalityTag) -> Result<usize> {
    match tag {
        ModalityTag::Image => Ok(0),
        ModalityTag::Cloud => Ok(1),
        ModalityTag::Fused => Err(Error::Contract(
            "fused features cannot be a fusion input".into(),
        )),
    }
}

pub const SENSOR_COUNT: usize = 2;

#[derive(Debug, Clone)]
pub struct FusionWeights {
    pub variant: FusionVariant,
    pub feature_dim: usize,
    /// Variant A: projection from `SENSOR_COUNT * D` concatenated channels.
    pub concat: Option<(ParamId, ParamId)>,
    /// Variants B and C: one `D -> D` projection per sensor slot.
    pub per_sensor: Vec<(ParamId, ParamId)>,
    /// Variant C: one `D -> D` attention map per sensor slot.
    pub attention: Vec<(ParamId, ParamId)>,
}

impl FusionWeights {
    pub fn create<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        variant: FusionVariant,
        feature_dim: usize,
        rng: &mut R,
    ) -> Self {
        let d = feature_dim;
        let mut w = FusionWeights {
            variant,
            feature_dim,
            concat: None,
            per_sensor: Vec::new(),
            attention: Vec::new(),
        };
        match variant {
            FusionVariant::A => {
                w.concat = Some((
                    store.add_uniform(
                        format!("{prefix}.concat.weight"),
                        &[d, SENSOR_COUNT * d],
                        SENSOR_COUNT * d,
                        rng,
                    ),
                    store.add_uniform(format!("{prefix}.concat.bias"), &[d], SENSOR_COUNT * d, rng),
                ));
            }
            FusionVariant::B | FusionVariant::C => {
                for s in 0..SENSOR_COUNT {
                    w.per_sensor.push((
                        store.add_uniform(format!("{prefix}.sensor{s}.weight"), &[d, d], d, rng),
                        store.add_uniform(format!("{prefix}.sensor{s}.bias"), &[d], d, rng),
                    ));
                }
                if variant == FusionVariant::C {
                    for s in 0..SENSOR_COUNT {
                        w.attention.push((
                            store.add_uniform(format!("{prefix}.att{s}.weight"), &[d, d], d, rng),
                            store.add_uniform(format!("{prefix}.att{s}.bias"), &[d], d, rng),
                        ));
                    }
                }
            }
        }
        w
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        if let Some((w, b)) = self.concat {
            out.extend([w, b]);
        }
        for (w, b) in self.per_sensor.iter().chain(&self.attention) {
            out.extend([*w, *b]);
        }
        out
    }
}

/// Singles in fixed sensor order, fused slice last when present.
#[derive(Debug, Clone)]
pub struct FusedBatch {
    pub slices: Vec<EmbeddingBatch>,
}

impl FusedBatch {
    pub fn slice_count(&self) -> usize {
        self.slices.len()
    }

    pub fn get(&self, tag: ModalityTag) -> Option<&EmbeddingBatch> {
        self.slices.iter().find(|s| s.modality == tag)
    }

    /// Slice that drives inference: fused when present, otherwise the single
    /// surviving modality.
    pub fn inference_slice(&self) -> &EmbeddingBatch {
        self.get(ModalityTag::Fused)
            .unwrap_or_else(|| &self.slices[0])
    }
}

fn check_inputs(tape: &Tape, features: &[EmbeddingBatch], min: usize) -> Result<()> {
    if features.len() < min {
        return Err(Error::Contract(format!(
            "fusion needs >= {min} modalities, got {}",
            features.len()
        )));
    }
    let cols = tape.value(features[0].features).cols();
    for f in features {
        sensor_slot(f.modality)?;
        let shape = tape.value(f.features).shape();
        if shape[1] != cols {
            return Err(Error::dim("fusion inputs", &[cols], &[shape[1]]));
        }
    }
    for pair in features.windows(2) {
        if sensor_slot(pair[1].modality)? <= sensor_slot(pair[0].modality)? {
            return Err(Error::Contract(
                "fusion inputs must be in sensor slot order without repeats".into(),
            ));
        }
    }
    Ok(())
}

/// Module A: channel-concatenate the modalities and project back to `D`
/// with a point-wise map. Requires the full sensor complement, since the
/// projection's input width is fixed.
pub fn fuse_concat(
    tape: &mut Tape,
    store: &ParamStore,
    w: &FusionWeights,
    features: &[EmbeddingBatch],
) -> Result<ValueId> {
    check_inputs(tape, features, 2)?;
    if features.len() != SENSOR_COUNT {
        return Err(Error::Contract(format!(
            "concat fusion needs all {SENSOR_COUNT} sensors, got {}",
            features.len()
        )));
    }
    let (wc, bc) = w
        .concat
        .ok_or_else(|| Error::Contract("fusion weights lack a concat projection".into()))?;
    let ids: Vec<ValueId> = features.iter().map(|f| f.features).collect();
    let stacked = tape.concat(&ids, 0)?;
    let (wv, bv) = (tape.param(store, wc), tape.param(store, bc));
    tape.linear(wv, stacked, Some(bv))
}

/// Module B: sum of per-sensor point-wise projections.
pub fn fuse_add(
    tape: &mut Tape,
    store: &ParamStore,
    w: &FusionWeights,
    features: &[EmbeddingBatch],
) -> Result<ValueId> {
    check_inputs(tape, features, 2)?;
    let mut acc: Option<ValueId> = None;
    for f in features {
        let slot = sensor_slot(f.modality)?;
        let (ws, bs) = w
            .per_sensor
            .get(slot)
            .ok_or_else(|| Error::Contract("missing per-sensor projection".into()))?;
        let (wv, bv) = (tape.param(store, *ws), tape.param(store, *bs));
        let proj = tape.linear(wv, f.features, Some(bv))?;
        acc = Some(match acc {
            Some(a) => tape.add(a, proj)?,
            None => proj,
        });
    }
    Ok(acc.expect("at least two inputs"))
}

/// Per-sensor attention map: sigmoid of a point-wise projection, entries in
/// (0, 1).
pub fn attention_weights(
    tape: &mut Tape,
    store: &ParamStore,
    w: &FusionWeights,
    feature: &EmbeddingBatch,
) -> Result<ValueId> {
    let slot = sensor_slot(feature.modality)?;
    let (wa, ba) = w
        .attention
        .get(slot)
        .ok_or_else(|| Error::Contract("missing attention projection".into()))?;
    let (wv, bv) = (tape.param(store, *wa), tape.param(store, *ba));
    let logits = tape.linear(wv, feature.features, Some(bv))?;
    Ok(tape.sigmoid(logits))
}

/// Module C: attention-gated fusion. Each channel of the output is the
/// gate-weighted mean of the per-sensor projections; the gate sum is a sum
/// of sigmoids, hence strictly positive.
pub fn fuse_attention(
    tape: &mut Tape,
    store: &ParamStore,
    w: &FusionWeights,
    features: &[EmbeddingBatch],
) -> Result<ValueId> {
    check_inputs(tape, features, 2)?;
    let mut numer: Option<ValueId> = None;
    let mut denom: Option<ValueId> = None;
    for f in features {
        let slot = sensor_slot(f.modality)?;
        let gate = attention_weights(tape, store, w, f)?;
        let (ws, bs) = w.per_sensor[slot];
        let (wv, bv) = (tape.param(store, ws), tape.param(store, bs));
        let proj = tape.linear(wv, f.features, Some(bv))?;
        let gated = tape.mul(gate, proj)?;
        numer = Some(match numer {
            Some(n) => tape.add(n, gated)?,
            None => gated,
        });
        denom = Some(match denom {
            Some(d) => tape.add(d, gate)?,
            None => gate,
        });
    }
    let numer = numer.expect("inputs checked");
    let denom = denom.expect("inputs checked");
    debug_assert!(tape.value(denom).data().iter().all(|&v| v > 0.0));
    tape.div(numer, denom)
}

/// Stack the available single modalities (fixed sensor order) and, when at
/// least two are up, the fused modality computed by the selected variant.
/// With a single surviving sensor the fusion step is skipped and the slice
/// passes through unchanged.
pub fn robust_fuse(
    tape: &mut Tape,
    store: &ParamStore,
    w: &FusionWeights,
    available: &[EmbeddingBatch],
) -> Result<FusedBatch> {
    if available.is_empty() {
        return Err(Error::SensorFailure);
    }
    let mut singles = available.to_vec();
    {
        let mut slots = Vec::new();
        for s in &singles {
            slots.push(sensor_slot(s.modality)?);
        }
        let mut order: Vec<usize> = (0..singles.len()).collect();
        order.sort_by_key(|&i| slots[i]);
        singles = order.iter().map(|&i| singles[i]).collect();
    }
    check_inputs(tape, &singles, 1)?;

    let mut slices = singles.clone();
    if singles.len() >= 2 {
        let fused = match w.variant {
            FusionVariant::A => fuse_concat(tape, store, w, &singles)?,
            FusionVariant::B => fuse_add(tape, store, w, &singles)?,
            FusionVariant::C => fuse_attention(tape, store, w, &singles)?,
        };
        slices.push(EmbeddingBatch {
            modality: ModalityTag::Fused,
            features: fused,
        });
    }
    Ok(FusedBatch { slices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D: usize = 3;

    fn eye(d: usize) -> Tensor {
        let mut t = Tensor::zeros(&[d, d]);
        for i in 0..d {
            *t.at_mut(i, i) = 1.0;
        }
        t
    }

    fn batch(tape: &mut Tape, tag: ModalityTag, cols: &[&[f64]]) -> EmbeddingBatch {
        // cols are column vectors; build the D x K matrix.
        let k = cols.len();
        let mut t = Tensor::zeros(&[D, k]);
        for (c, col) in cols.iter().enumerate() {
            for r in 0..D {
                *t.at_mut(r, c) = col[r];
            }
        }
        EmbeddingBatch {
            modality: tag,
            features: tape.constant(t),
        }
    }

    /// Variant-A weights [I | 0] or [I | I] built by hand.
    fn concat_weights(store: &mut ParamStore, second_block: f64) -> FusionWeights {
        let mut wt = Tensor::zeros(&[D, 2 * D]);
        for i in 0..D {
            *wt.at_mut(i, i) = 1.0;
            *wt.at_mut(i, D + i) = second_block;
        }
        let w = store.add("fusion.concat.weight", wt);
        let b = store.add("fusion.concat.bias", Tensor::zeros(&[D]));
        FusionWeights {
            variant: FusionVariant::A,
            feature_dim: D,
            concat: Some((w, b)),
            per_sensor: vec![],
            attention: vec![],
        }
    }

    fn per_sensor_weights(
        store: &mut ParamStore,
        variant: FusionVariant,
        att_bias: [f64; 2],
    ) -> FusionWeights {
        let mut w = FusionWeights {
            variant,
            feature_dim: D,
            concat: None,
            per_sensor: vec![],
            attention: vec![],
        };
        for s in 0..2 {
            w.per_sensor.push((
                store.add(format!("f.s{s}.w"), eye(D)),
                store.add(format!("f.s{s}.b"), Tensor::zeros(&[D])),
            ));
        }
        if variant == FusionVariant::C {
            for s in 0..2 {
                w.attention.push((
                    store.add(format!("f.a{s}.w"), Tensor::zeros(&[D, D])),
                    store.add(format!("f.a{s}.b"), Tensor::filled(&[D], att_bias[s])),
                ));
            }
        }
        w
    }

    #[test]
    fn concat_selector_weights_pick_first_modality() {
        let mut store = ParamStore::new();
        let w = concat_weights(&mut store, 0.0);
        let mut tape = Tape::new();
        let img = batch(&mut tape, ModalityTag::Image, &[&[1.0, 2.0, 3.0]]);
        let cloud = batch(&mut tape, ModalityTag::Cloud, &[&[9.0, 9.0, 9.0]]);
        let out = fuse_concat(&mut tape, &store, &w, &[img, cloud]).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn concat_additive_selector_sums_modalities() {
        let mut store = ParamStore::new();
        let w = concat_weights(&mut store, 1.0);
        let mut tape = Tape::new();
        let img = batch(&mut tape, ModalityTag::Image, &[&[1.0, 2.0, 3.0]]);
        let cloud = batch(&mut tape, ModalityTag::Cloud, &[&[10.0, 20.0, 30.0]]);
        let out = fuse_concat(&mut tape, &store, &w, &[img, cloud]).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0, 22.0, 33.0]);
    }

    #[test]
    fn single_modality_concat_is_a_contract_error() {
        let mut store = ParamStore::new();
        let w = concat_weights(&mut store, 0.0);
        let mut tape = Tape::new();
        let img = batch(&mut tape, ModalityTag::Image, &[&[1.0, 2.0, 3.0]]);
        assert!(matches!(
            fuse_concat(&mut tape, &store, &w, &[img]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn add_with_identity_projections_is_plain_sum() {
        let mut store = ParamStore::new();
        let w = per_sensor_weights(&mut store, FusionVariant::B, [0.0, 0.0]);
        let mut tape = Tape::new();
        let img = batch(&mut tape, ModalityTag::Image, &[&[1.0, 2.0, 3.0]]);
        let cloud = batch(&mut tape, ModalityTag::Cloud, &[&[0.5, 0.5, 0.5]]);
        let out = fuse_add(&mut tape, &store, &w, &[img, cloud]).unwrap();
        assert_eq!(tape.value(out).data(), &[1.5, 2.5, 3.5]);

        let zero = batch(&mut tape, ModalityTag::Image, &[&[0.0, 0.0, 0.0]]);
        let out = fuse_add(&mut tape, &store, &w, &[zero, cloud]).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn zero_attention_logits_give_half_weights() {
        let mut store = ParamStore::new();
        let w = per_sensor_weights(&mut store, FusionVariant::C, [0.0, 0.0]);
        let mut tape = Tape::new();
        let img = batch(&mut tape, ModalityTag::Image, &[&[1.0, -2.0, 0.3]]);
        let g = attention_weights(&mut tape, &store, &w, &img).unwrap();
        assert!(tape.value(g).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn saturated_attention_approaches_one() {
        let mut store = ParamStore::new();
        let w = per_sensor_weights(&mut store, FusionVariant::C, [20.0, 0.0]);
        let mut tape = Tape::new();
        let img = batch(&mut tape, ModalityTag::Image, &[&[1.0, -2.0, 0.3]]);
        let g = attention_weights(&mut tape, &store, &w, &img).unwrap();
        assert!(tape.value(g).data().iter().all(|&v| (1.0 - v) < 1e-6));
    }

    #[test]
    fn equal_attention_identity_projection_is_arithmetic_mean() {
        let mut store = ParamStore::new();
        let w = per_sensor_weights(&mut store, FusionVariant::C, [0.0, 0.0]);
        let mut tape = Tape::new();
        let img = batch(&mut tape, ModalityTag::Image, &[&[2.0, 4.0, -6.0]]);
        let cloud = batch(&mut tape, ModalityTag::Cloud, &[&[4.0, 0.0, 0.0]]);
        let out = fuse_attention(&mut tape, &store, &w, &[img, cloud]).unwrap();
        let got = tape.value(out).data();
        for (g, want) in got.iter().zip([3.0, 2.0, -3.0]) {
            assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_attention_selects_dominant_sensor() {
        let mut store = ParamStore::new();
        let w = per_sensor_weights(&mut store, FusionVariant::C, [-20.0, 20.0]);
        let mut tape = Tape::new();
        let img = batch(&mut tape, ModalityTag::Image, &[&[5.0, 5.0, 5.0]]);
        let cloud = batch(&mut tape, ModalityTag::Cloud, &[&[-1.0, 0.0, 1.0]]);
        let out = fuse_attention(&mut tape, &store, &w, &[img, cloud]).unwrap();
        for (g, want) in tape.value(out).data().iter().zip([-1.0, 0.0, 1.0]) {
            assert!((g - want).abs() < 1e-4, "{g} vs {want}");
        }
    }

    #[test]
    fn attention_output_stays_in_projection_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let w = FusionWeights::create(&mut store, "fusion", FusionVariant::C, D, &mut rng);
        let mut tape = Tape::new();
        let img = batch(&mut tape, ModalityTag::Image, &[&[0.7, -0.3, 0.1], &[0.2, 0.9, -0.5]]);
        let cloud = batch(&mut tape, ModalityTag::Cloud, &[&[-0.4, 0.6, 0.8], &[0.0, -0.2, 0.3]]);
        // Reference projections.
        let proj = |tape: &mut Tape, slot: usize, f: ValueId| {
            let (ws, bs) = w.per_sensor[slot];
            let (wv, bv) = (tape.param(&store, ws), tape.param(&store, bs));
            tape.linear(wv, f, Some(bv)).unwrap()
        };
        let p0 = proj(&mut tape, 0, img.features);
        let p1 = proj(&mut tape, 1, cloud.features);
        let fused = fuse_attention(&mut tape, &store, &w, &[img, cloud]).unwrap();
        let (f, a, b) = (tape.value(fused), tape.value(p0), tape.value(p1));
        for i in 0..f.numel() {
            let lo = a.data()[i].min(b.data()[i]) - 1e-12;
            let hi = a.data()[i].max(b.data()[i]) + 1e-12;
            assert!(f.data()[i] >= lo && f.data()[i] <= hi);
        }
    }

    #[test]
    fn robust_fuse_slice_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut store = ParamStore::new();
        let w = FusionWeights::create(&mut store, "fusion", FusionVariant::C, D, &mut rng);
        let mut tape = Tape::new();
        let img = batch(&mut tape, ModalityTag::Image, &[&[1.0, 0.0, 0.0]]);
        let cloud = batch(&mut tape, ModalityTag::Cloud, &[&[0.0, 1.0, 0.0]]);

        // Two sensors in: three slices out, fused last.
        let both = robust_fuse(&mut tape, &store, &w, &[cloud, img]).unwrap();
        assert_eq!(both.slice_count(), 3);
        assert_eq!(both.slices[0].modality, ModalityTag::Image);
        assert_eq!(both.slices[1].modality, ModalityTag::Cloud);
        assert_eq!(both.slices[2].modality, ModalityTag::Fused);
        assert_eq!(both.inference_slice().modality, ModalityTag::Fused);

        // One sensor: passthrough, no fusion slice.
        let only = robust_fuse(&mut tape, &store, &w, &[img]).unwrap();
        assert_eq!(only.slice_count(), 1);
        assert_eq!(
            tape.value(only.slices[0].features).data(),
            tape.value(img.features).data()
        );
        assert_eq!(only.inference_slice().modality, ModalityTag::Image);

        // No sensors: sensor failure.
        assert!(matches!(
            robust_fuse(&mut tape, &store, &w, &[]),
            Err(Error::SensorFailure)
        ));
    }

    #[test]
    fn cloud_only_output_ignores_image_weights() {
        // Same cloud slice through two models that differ only in their
        // image-side weights: bit-identical output.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut s1 = ParamStore::new();
        let w1 = FusionWeights::create(&mut s1, "fusion", FusionVariant::C, D, &mut rng);
        let mut s2 = ParamStore::new();
        let w2 = FusionWeights::create(&mut s2, "fusion", FusionVariant::C, D, &mut rng);

        let mut tape = Tape::new();
        let cloud = batch(&mut tape, ModalityTag::Cloud, &[&[0.3, -0.6, 0.9]]);
        let a = robust_fuse(&mut tape, &s1, &w1, &[cloud]).unwrap();
        let b = robust_fuse(&mut tape, &s2, &w2, &[cloud]).unwrap();
        let (fa, fb) = (
            tape.value(a.slices[0].features),
            tape.value(b.slices[0].features),
        );
        assert!(fa
            .data()
            .iter()
            .zip(fb.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn all_variants_pass_gradient_checks() {
        for variant in [FusionVariant::A, FusionVariant::B, FusionVariant::C] {
            let mut rng = ChaCha8Rng::seed_from_u64(24);
            let mut store = ParamStore::new();
            let w = FusionWeights::create(&mut store, "fusion", variant, D, &mut rng);
            let params = w.params();
            let report = grad_check(&mut store, &params, 1e-5, |tape, store| {
                let img = batch(tape, ModalityTag::Image, &[&[0.7, -0.3, 0.1], &[0.2, 0.9, -0.5]]);
                let cloud =
                    batch(tape, ModalityTag::Cloud, &[&[-0.4, 0.6, 0.8], &[0.0, -0.2, 0.3]]);
                let fused = robust_fuse(tape, store, &w, &[img, cloud])?;
                let f = fused.get(ModalityTag::Fused).unwrap().features;
                let s = tape.sigmoid(f);
                tape.mean_all(s)
            })
            .unwrap();
            assert!(
                report.passes(1e-4),
                "variant {variant:?}: max err {}",
                report.max_error()
            );
        }
    }
}
