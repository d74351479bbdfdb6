//! The full tracking model: every module's weights in one parameter store,
//! plus the window-level forward pass from raw payloads to association
//! scores.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adjacency::{
    affinity_scores, confidence_scores, correlate, rank_adjacency, start_end_scores,
    CorrelationOp, EstimatorWeights, RankCombine, SliceScores, WindowScores,
};
use crate::config::RunConfig;
use crate::diffcore::{checkpoint, ParamId, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::features::{
    encode_image, encode_points_with_absent, EmbeddingBatch, ImageEncoderWeights, ModalityTag,
    PointEncoderWeights,
};
use crate::fusion::{robust_fuse, FusedBatch, FusionVariant, FusionWeights};
use crate::ingest::{ImagePatch, PointSet};

#[derive(Debug, Clone)]
pub struct ModelOptions {
    pub feature_dim: usize,
    pub point_hidden: usize,
    pub image_bins: usize,
    pub image_hidden: usize,
    pub use_reflectivity: bool,
    pub fusion_variant: FusionVariant,
    pub correlation_op: CorrelationOp,
    pub ranking_enabled: bool,
    pub ranking_combine: RankCombine,
}

impl ModelOptions {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Ok(ModelOptions {
            feature_dim: cfg.model.feature_dim,
            point_hidden: cfg.model.point_hidden,
            image_bins: cfg.model.image_bins,
            image_hidden: cfg.model.image_hidden,
            use_reflectivity: cfg.model.use_reflectivity,
            fusion_variant: cfg.fusion_variant()?,
            correlation_op: cfg.correlation_op()?,
            ranking_enabled: cfg.ranking_enabled(),
            ranking_combine: cfg.ranking_combine()?,
        })
    }

    /// Small widths for fast gradient checking and unit fixtures.
    pub fn compact(feature_dim: usize) -> Self {
        ModelOptions {
            feature_dim,
            point_hidden: 5,
            image_bins: 4,
            image_hidden: 5,
            use_reflectivity: false,
            fusion_variant: FusionVariant::C,
            correlation_op: CorrelationOp::AbsSub,
            ranking_enabled: true,
            ranking_combine: RankCombine::Add,
        }
    }
}

#[derive(Debug)]
pub struct TrackModel {
    pub options: ModelOptions,
    pub store: ParamStore,
    pub point_encoder: PointEncoderWeights,
    pub image_encoder: ImageEncoderWeights,
    pub fusion: FusionWeights,
    pub estimator: EstimatorWeights,
}

impl TrackModel {
    pub fn new(options: ModelOptions, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let channels = if options.use_reflectivity { 4 } else { 3 };
        let point_encoder = PointEncoderWeights::create(
            &mut store,
            "point",
            channels,
            options.point_hidden,
            options.feature_dim,
            &mut rng,
        );
        let image_encoder = ImageEncoderWeights::create(
            &mut store,
            "image",
            options.image_bins,
            options.image_hidden,
            options.feature_dim,
            &mut rng,
        );
        let fusion = FusionWeights::create(
            &mut store,
            "fusion",
            options.fusion_variant,
            options.feature_dim,
            &mut rng,
        );
        let estimator = EstimatorWeights::create(&mut store, "adj", options.feature_dim, &mut rng);
        TrackModel {
            options,
            store,
            point_encoder,
            image_encoder,
            fusion,
            estimator,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut out = self.point_encoder.params();
        out.extend(self.image_encoder.params());
        out.extend(self.fusion.params());
        out.extend(self.estimator.params());
        out
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        checkpoint::save(&self.store, out)
    }

    /// Load values into a model built with the same options (names and
    /// shapes must line up).
    pub fn load<R: Read>(&mut self, input: R) -> Result<()> {
        checkpoint::load(&mut self.store, input)
    }
}

/// Raw inputs for one two-frame window: previous-frame detections first,
/// then current-frame, `n + m` entries per live modality. A modality that
/// is `None` is absent for the whole window. Injected columns short-circuit
/// the corresponding encoder (precomputed external features).
#[derive(Debug, Clone, Default)]
pub struct WindowInput {
    pub n: usize,
    pub m: usize,
    pub image_patches: Option<Vec<ImagePatch>>,
    pub cloud_sets: Option<Vec<PointSet>>,
    pub reflectance: Option<Vec<Vec<f64>>>,
    pub injected: Vec<(ModalityTag, Vec<Vec<f64>>)>,
}

impl WindowInput {
    fn validate(&self, feature_dim: usize) -> Result<()> {
        let total = self.n + self.m;
        if let Some(p) = &self.image_patches {
            if p.len() != total {
                return Err(Error::dim("window image payloads", &[total], &[p.len()]));
            }
        }
        if let Some(c) = &self.cloud_sets {
            if c.len() != total {
                return Err(Error::dim("window cloud payloads", &[total], &[c.len()]));
            }
        }
        for (tag, cols) in &self.injected {
            if cols.len() != total {
                return Err(Error::dim(
                    format!("injected {tag} columns"),
                    &[total],
                    &[cols.len()],
                ));
            }
            if let Some(c) = cols.iter().find(|c| c.len() != feature_dim) {
                return Err(Error::dim(
                    format!("injected {tag} feature"),
                    &[feature_dim],
                    &[c.len()],
                ));
            }
        }
        Ok(())
    }
}

impl TrackModel {
    /// Encode the available modalities into single-modality embedding
    /// batches, in fixed sensor order.
    pub fn encode_window(&self, tape: &mut Tape, input: &WindowInput) -> Result<Vec<EmbeddingBatch>> {
        input.validate(self.options.feature_dim)?;
        let injected = |tag: ModalityTag| -> Option<&Vec<Vec<f64>>> {
            input
                .injected
                .iter()
                .find(|(t, _)| *t == tag)
                .map(|(_, cols)| cols)
        };
        let mut singles = Vec::new();

        if let Some(cols) = injected(ModalityTag::Image) {
            singles.push(constant_batch(tape, ModalityTag::Image, cols, self.options.feature_dim)?);
        } else if let Some(patches) = &input.image_patches {
            let refs: Vec<&ImagePatch> = patches.iter().collect();
            singles.push(encode_image(tape, &self.store, &self.image_encoder, &refs)?);
        }

        if let Some(cols) = injected(ModalityTag::Cloud) {
            singles.push(constant_batch(tape, ModalityTag::Cloud, cols, self.options.feature_dim)?);
        } else if let Some(sets) = &input.cloud_sets {
            let (batch, _) = encode_points_with_absent(
                tape,
                &self.store,
                &self.point_encoder,
                sets,
                input.reflectance.as_deref(),
            )?;
            singles.push(batch);
        }
        Ok(singles)
    }

    /// Full forward pass: encode, fuse, and score one window. Link, start,
    /// and end scores exist only when both frames are non-empty; boundary
    /// windows get padded downstream.
    pub fn forward_window(
        &self,
        tape: &mut Tape,
        input: &WindowInput,
    ) -> Result<(FusedBatch, WindowScores)> {
        let singles = self.encode_window(tape, input)?;
        if singles.is_empty() {
            return Err(Error::SensorFailure);
        }
        let batch = robust_fuse(tape, &self.store, &self.fusion, &singles)?;
        let (n, m) = (input.n, input.m);
        let conf = confidence_scores(tape, &self.store, &self.estimator, &batch)?;

        let mut links: Vec<Option<crate::diffcore::ValueId>> = vec![None; batch.slice_count()];
        let mut starts: Vec<Option<crate::diffcore::ValueId>> = vec![None; batch.slice_count()];
        let mut ends: Vec<Option<crate::diffcore::ValueId>> = vec![None; batch.slice_count()];
        if n > 0 && m > 0 {
            let corr = correlate(tape, &batch, self.options.correlation_op, n, m)?;
            let raw = affinity_scores(tape, &self.store, &self.estimator, &corr)?;
            let se = start_end_scores(tape, &self.store, &self.estimator, &corr)?;
            for (i, raw_slice) in raw.into_iter().enumerate() {
                let link = if self.options.ranking_enabled {
                    rank_adjacency(tape, raw_slice, self.options.ranking_combine)?
                } else {
                    tape.sigmoid(raw_slice)
                };
                links[i] = Some(link);
                starts[i] = Some(se[i].0);
                ends[i] = Some(se[i].1);
            }
        }

        let slices = batch
            .slices
            .iter()
            .enumerate()
            .map(|(i, s)| SliceScores {
                tag: s.modality,
                conf_logits: conf[i],
                link: links[i],
                start_logits: starts[i],
                end_logits: ends[i],
            })
            .collect();
        Ok((batch, WindowScores { n, m, slices }))
    }
}

fn constant_batch(
    tape: &mut Tape,
    tag: ModalityTag,
    cols: &[Vec<f64>],
    feature_dim: usize,
) -> Result<EmbeddingBatch> {
    let k = cols.len();
    let mut t = Tensor::zeros(&[feature_dim, k]);
    for (c, col) in cols.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            *t.at_mut(r, c) = v;
        }
    }
    Ok(EmbeddingBatch {
        modality: tag,
        features: tape.constant(t),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::ImagePatch;

    fn patch(level: f64) -> ImagePatch {
        ImagePatch::solid(4, 4, [level, 1.0 - level, 0.5])
    }

    fn cluster(x: f64, z: f64) -> PointSet {
        vec![[x, 1.0, z], [x + 0.1, 1.1, z - 0.1], [x - 0.1, 0.9, z + 0.1]]
    }

    fn window() -> WindowInput {
        WindowInput {
            n: 2,
            m: 2,
            image_patches: Some(vec![patch(0.1), patch(0.8), patch(0.12), patch(0.82)]),
            cloud_sets: Some(vec![
                cluster(0.0, 10.0),
                cluster(5.0, 14.0),
                cluster(0.2, 10.2),
                cluster(5.1, 14.3),
            ]),
            reflectance: None,
            injected: Vec::new(),
        }
    }

    #[test]
    fn forward_produces_three_slices_with_full_sensors() {
        let model = TrackModel::new(ModelOptions::compact(6), 5);
        let mut tape = Tape::new();
        let (batch, scores) = model.forward_window(&mut tape, &window()).unwrap();
        assert_eq!(batch.slice_count(), 3);
        assert_eq!(scores.slices.len(), 3);
        assert_eq!(scores.inference_slice().tag, ModalityTag::Fused);
        let link = scores.inference_slice().link.unwrap();
        assert_eq!(tape.value(link).shape(), &[2, 2]);
        let conf = scores.inference_slice().conf_logits;
        assert_eq!(tape.value(conf).shape(), &[1, 4]);
    }

    #[test]
    fn boundary_window_has_no_link_scores() {
        let model = TrackModel::new(ModelOptions::compact(6), 5);
        let mut tape = Tape::new();
        let mut input = window();
        input.n = 0;
        input.m = 4;
        let (_, scores) = model.forward_window(&mut tape, &input).unwrap();
        assert!(scores.inference_slice().link.is_none());
        assert!(scores.inference_slice().start_logits.is_none());
    }

    #[test]
    fn no_modality_is_sensor_failure() {
        let model = TrackModel::new(ModelOptions::compact(6), 5);
        let mut tape = Tape::new();
        let input = WindowInput {
            n: 1,
            m: 1,
            ..WindowInput::default()
        };
        assert!(matches!(
            model.forward_window(&mut tape, &input),
            Err(Error::SensorFailure)
        ));
    }

    #[test]
    fn checkpoint_round_trip_restores_weights() {
        let model = TrackModel::new(ModelOptions::compact(6), 7);
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let mut other = TrackModel::new(ModelOptions::compact(6), 8);
        other.load(buf.as_slice()).unwrap();
        for (a, b) in model.store.iter().zip(other.store.iter()) {
            assert_eq!(a.1.value.data(), b.1.value.data());
        }
    }

    #[test]
    fn same_seed_gives_identical_checkpoints() {
        let a = TrackModel::new(ModelOptions::compact(6), 11);
        let b = TrackModel::new(ModelOptions::compact(6), 11);
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        a.save(&mut ba).unwrap();
        b.save(&mut bb).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn injected_features_bypass_the_encoder() {
        let model = TrackModel::new(ModelOptions::compact(3), 5);
        let mut tape = Tape::new();
        let input = WindowInput {
            n: 1,
            m: 1,
            injected: vec![(
                ModalityTag::Cloud,
                vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]],
            )],
            ..WindowInput::default()
        };
        let singles = model.encode_window(&mut tape, &input).unwrap();
        assert_eq!(singles.len(), 1);
        assert_eq!(singles[0].modality, ModalityTag::Cloud);
        assert_eq!(
            tape.value(singles[0].features).data(),
            &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]
        );
    }

    #[test]
    fn per_slice_scores_do_not_depend_on_other_slices() {
        // Criterion: drop the image modality; the cloud slice's scores stay
        // bit-identical.
        let model = TrackModel::new(ModelOptions::compact(6), 5);
        let mut tape_full = Tape::new();
        let (_, full) = model.forward_window(&mut tape_full, &window()).unwrap();
        let mut tape_cloud = Tape::new();
        let mut cloud_only = window();
        cloud_only.image_patches = None;
        let (_, solo) = model.forward_window(&mut tape_cloud, &cloud_only).unwrap();

        let full_cloud = full.slice(ModalityTag::Cloud).unwrap();
        let solo_cloud = solo.slice(ModalityTag::Cloud).unwrap();
        let bits = |tape: &Tape, v: crate::diffcore::ValueId| -> Vec<u64> {
            tape.value(v).data().iter().map(|x| x.to_bits()).collect()
        };
        assert_eq!(
            bits(&tape_full, full_cloud.conf_logits),
            bits(&tape_cloud, solo_cloud.conf_logits)
        );
        assert_eq!(
            bits(&tape_full, full_cloud.link.unwrap()),
            bits(&tape_cloud, solo_cloud.link.unwrap())
        );
        assert_eq!(
            bits(&tape_full, full_cloud.start_logits.unwrap()),
            bits(&tape_cloud, solo_cloud.start_logits.unwrap())
        );
        assert_eq!(
            bits(&tape_full, full_cloud.end_logits.unwrap()),
            bits(&tape_cloud, solo_cloud.end_logits.unwrap())
        );
    }
}
