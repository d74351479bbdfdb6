//! Whole-model gradient verification suite: every differentiable tape
//! operation, both encoders, the skip pool, all three fusion variants, and
//! every estimator head, each checked against central finite differences
//! over many random seeds.
//!
//! Central differences are invalid within the differencing window of a
//! `relu`/`abs`/`max` kink, so every sampled configuration is first probed
//! with [`Tape::min_kink_distance`] and resampled (deterministically) until
//! the forward pass clears the window. Acceptance of a sample depends only
//! on that structural property, never on the check outcome, so a genuine
//! backward bug still fails on every accepted sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adjacency::{
    affinity_scores, compute_loss, confidence_scores, correlate, rank_adjacency,
    start_end_scores, CorrelationOp, EstimatorWeights, GroundTruthAssociation, LossWeights,
    RankCombine, WindowScores,
};
use crate::diffcore::{
    grad_check, grad_check_corrupted, ParamId, ParamStore, Tape, Tensor, ValueId,
};
use crate::error::Result;
use crate::features::{
    encode_image, encode_points, skip_pool_project, EmbeddingBatch, ImageEncoderWeights,
    ModalityTag, PointEncoderWeights, SkipPoolWeights, SKIP_LEVEL_CHANNELS,
};
use crate::fusion::{robust_fuse, FusionVariant, FusionWeights};
use crate::ingest::ImagePatch;
use crate::model::{ModelOptions, TrackModel, WindowInput};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: u64 = 20;
const FD_STEP: f64 = 1e-5;
/// Forward passes closer than this to a kink are resampled; comfortably
/// above the differencing step times any Jacobian entry in play here.
const KINK_MARGIN: f64 = 1e-4;
const MAX_RESAMPLES: u64 = 32;

#[derive(Debug, Clone)]
pub struct SuiteItem {
    pub name: &'static str,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub seeds: u64,
    pub items: Vec<SuiteItem>,
}

impl SuiteReport {
    pub fn all_pass(&self) -> bool {
        self.items.iter().all(|i| i.max_rel_error < self.tolerance)
    }

    pub fn format_table(&self) -> String {
        let mut out = String::new();
        let width = self.items.iter().map(|i| i.name.len()).max().unwrap_or(4);
        for item in &self.items {
            let verdict = if item.max_rel_error < self.tolerance {
                "pass"
            } else {
                "FAIL"
            };
            out.push_str(&format!(
                "{:width$}  {:>12.3e}  {verdict}\n",
                item.name, item.max_rel_error
            ));
        }
        out
    }
}

type Forward = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<ValueId>>;

/// One sampled configuration ready for checking.
struct BuiltItem {
    store: ParamStore,
    params: Vec<ParamId>,
    forward: Forward,
}

type ItemBuild = Box<dyn Fn(u64) -> Result<BuiltItem>>;

fn run_item(build: &ItemBuild, seed: u64, corrupt: bool) -> Result<f64> {
    let mut built = build(seed)?;
    for attempt in 1..=MAX_RESAMPLES {
        let mut probe = Tape::new();
        (built.forward)(&mut probe, &built.store)?;
        if probe.min_kink_distance() >= KINK_MARGIN {
            break;
        }
        built = build(seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15)))?;
    }
    let BuiltItem {
        mut store,
        params,
        forward,
    } = built;
    let report = if corrupt {
        grad_check_corrupted(&mut store, &params, FD_STEP, |t, s| forward(t, s))?
    } else {
        grad_check(&mut store, &params, FD_STEP, |t, s| forward(t, s))?
    };
    Ok(report.max_error())
}

fn rand_tensor<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("shape")
}

/// Values in +-[min_abs, 1): keeps div poles out of the finite-difference
/// window.
fn nudged_tensor<R: Rng>(rng: &mut R, shape: &[usize], min_abs: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| {
                let mag = rng.random_range(min_abs..1.0);
                if rng.random::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect(),
    )
    .expect("shape")
}

/// Reduce a matrix against a fixed random probe so the scalar objective has
/// non-degenerate gradients everywhere.
fn probed_mean(tape: &mut Tape, value: ValueId, probe: &Tensor) -> Result<ValueId> {
    let p = tape.constant(probe.clone());
    let prod = tape.mul(value, p)?;
    tape.mean_all(prod)
}

fn op_item(
    name: &'static str,
    build: impl Fn(&mut ChaCha8Rng, &mut ParamStore) -> Vec<ParamId> + Copy + 'static,
    forward: impl Fn(&mut Tape, &ParamStore, &[ParamId], &Tensor) -> Result<ValueId> + Copy + 'static,
    probe_shape: &'static [usize],
) -> (&'static str, ItemBuild) {
    (
        name,
        Box::new(move |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37).wrapping_add(1));
            let mut store = ParamStore::new();
            let params = build(&mut rng, &mut store);
            let probe = rand_tensor(&mut rng, probe_shape, -1.0, 1.0);
            let params_for_fwd = params.clone();
            Ok(BuiltItem {
                store,
                params,
                forward: Box::new(move |tape, store| {
                    forward(tape, store, &params_for_fwd, &probe)
                }),
            })
        }),
    )
}

fn binary_items() -> Vec<(&'static str, ItemBuild)> {
    let make = |name: &'static str,
                apply: fn(&mut Tape, ValueId, ValueId) -> Result<ValueId>,
                denom_safe: bool| {
        op_item(
            name,
            move |rng, store| {
                let a = rand_tensor(rng, &[2, 3], -1.0, 1.0);
                let b = if denom_safe {
                    nudged_tensor(rng, &[2, 3], 0.4)
                } else {
                    rand_tensor(rng, &[2, 3], -1.0, 1.0)
                };
                vec![store.add("a", a), store.add("b", b)]
            },
            move |tape, store, params, probe| {
                let a = tape.param(store, params[0]);
                let b = tape.param(store, params[1]);
                let out = apply(tape, a, b)?;
                probed_mean(tape, out, probe)
            },
            &[2, 3],
        )
    };
    vec![
        make("op.add", |t, a, b| t.add(a, b), false),
        make("op.sub", |t, a, b| t.sub(a, b), false),
        make("op.mul", |t, a, b| t.mul(a, b), false),
        make("op.div", |t, a, b| t.div(a, b), true),
        make("op.max", |t, a, b| t.elem_max(a, b), false),
    ]
}

fn unary_items() -> Vec<(&'static str, ItemBuild)> {
    let make = |name: &'static str, apply: fn(&mut Tape, ValueId) -> ValueId| {
        op_item(
            name,
            |rng, store| vec![store.add("x", rand_tensor(rng, &[2, 3], -1.0, 1.0))],
            move |tape, store, params, probe| {
                let x = tape.param(store, params[0]);
                let y = apply(tape, x);
                probed_mean(tape, y, probe)
            },
            &[2, 3],
        )
    };
    vec![
        make("op.abs", |t, x| t.abs(x)),
        make("op.relu", |t, x| t.relu(x)),
        make("op.sigmoid", |t, x| t.sigmoid(x)),
        make("op.scale", |t, x| t.scale(x, 1.7)),
        make("op.add_scalar", |t, x| t.add_scalar(x, -0.3)),
    ]
}

fn structural_items() -> Vec<(&'static str, ItemBuild)> {
    let mut items: Vec<(&'static str, ItemBuild)> = Vec::new();
    items.push(op_item(
        "op.linear",
        |rng, store| {
            vec![
                store.add("w", rand_tensor(rng, &[3, 4], -0.7, 0.7)),
                store.add("b", rand_tensor(rng, &[3], -0.5, 0.5)),
                store.add("x", rand_tensor(rng, &[4, 2], -1.0, 1.0)),
            ]
        },
        |tape, store, params, probe| {
            let w = tape.param(store, params[0]);
            let b = tape.param(store, params[1]);
            let x = tape.param(store, params[2]);
            let y = tape.linear(w, x, Some(b))?;
            probed_mean(tape, y, probe)
        },
        &[3, 2],
    ));
    items.push(op_item(
        "op.softmax_rows",
        |rng, store| vec![store.add("x", rand_tensor(rng, &[3, 4], -2.0, 2.0))],
        |tape, store, params, probe| {
            let x = tape.param(store, params[0]);
            let y = tape.softmax_rows(x)?;
            probed_mean(tape, y, probe)
        },
        &[3, 4],
    ));
    items.push(op_item(
        "op.transpose",
        |rng, store| vec![store.add("x", rand_tensor(rng, &[2, 5], -1.0, 1.0))],
        |tape, store, params, probe| {
            let x = tape.param(store, params[0]);
            let y = tape.transpose(x)?;
            probed_mean(tape, y, probe)
        },
        &[5, 2],
    ));
    items.push(op_item(
        "op.segment_mean",
        |rng, store| vec![store.add("x", rand_tensor(rng, &[3, 7], -1.0, 1.0))],
        |tape, store, params, probe| {
            let x = tape.param(store, params[0]);
            let y = tape.segment_mean(x, &[0..2, 2..5, 5..7])?;
            probed_mean(tape, y, probe)
        },
        &[3, 3],
    ));
    items.push(op_item(
        "op.concat_rows",
        |rng, store| {
            vec![
                store.add("a", rand_tensor(rng, &[2, 3], -1.0, 1.0)),
                store.add("b", rand_tensor(rng, &[1, 3], -1.0, 1.0)),
            ]
        },
        |tape, store, params, probe| {
            let a = tape.param(store, params[0]);
            let b = tape.param(store, params[1]);
            let y = tape.concat(&[a, b], 0)?;
            probed_mean(tape, y, probe)
        },
        &[3, 3],
    ));
    items.push(op_item(
        "op.concat_cols",
        |rng, store| {
            vec![
                store.add("a", rand_tensor(rng, &[2, 2], -1.0, 1.0)),
                store.add("b", rand_tensor(rng, &[2, 3], -1.0, 1.0)),
            ]
        },
        |tape, store, params, probe| {
            let a = tape.param(store, params[0]);
            let b = tape.param(store, params[1]);
            let y = tape.concat(&[a, b], 1)?;
            probed_mean(tape, y, probe)
        },
        &[2, 5],
    ));
    items.push(op_item(
        "op.gather_cols",
        |rng, store| vec![store.add("x", rand_tensor(rng, &[3, 4], -1.0, 1.0))],
        |tape, store, params, probe| {
            let x = tape.param(store, params[0]);
            let y = tape.gather_cols(x, &[0, 2, 1, 2, 3])?;
            probed_mean(tape, y, probe)
        },
        &[3, 5],
    ));
    items.push(op_item(
        "op.reshape",
        |rng, store| vec![store.add("x", rand_tensor(rng, &[2, 6], -1.0, 1.0))],
        |tape, store, params, probe| {
            let x = tape.param(store, params[0]);
            let y = tape.reshape(x, &[3, 4])?;
            probed_mean(tape, y, probe)
        },
        &[3, 4],
    ));
    items.push(op_item(
        "op.sum_all",
        |rng, store| vec![store.add("x", rand_tensor(rng, &[2, 3], -1.0, 1.0))],
        |tape, store, params, _probe| {
            let x = tape.param(store, params[0]);
            let s = tape.sigmoid(x);
            Ok(tape.sum_all(s))
        },
        &[1],
    ));
    items.push(op_item(
        "op.mean_all",
        |rng, store| vec![store.add("x", rand_tensor(rng, &[2, 3], -1.0, 1.0))],
        |tape, store, params, _probe| {
            let x = tape.param(store, params[0]);
            let s = tape.sigmoid(x);
            tape.mean_all(s)
        },
        &[1],
    ));
    items.push(op_item(
        "op.bce_with_logits",
        |rng, store| vec![store.add("logits", rand_tensor(rng, &[2, 3], -2.0, 2.0))],
        |tape, store, params, probe| {
            let x = tape.param(store, params[0]);
            // Binary targets derived from the probe sign.
            let targets = Tensor::new(
                vec![2, 3],
                probe.data().iter().map(|&v| f64::from(v > 0.0)).collect(),
            )?;
            tape.bce_with_logits_mean(x, &targets)
        },
        &[2, 3],
    ));
    items.push(op_item(
        "op.layer_norm_cols",
        |rng, store| vec![store.add("x", rand_tensor(rng, &[4, 3], -1.0, 1.0))],
        |tape, store, params, probe| {
            let x = tape.param(store, params[0]);
            let y = tape.layer_norm_cols(x, 1e-6)?;
            probed_mean(tape, y, probe)
        },
        &[4, 3],
    ));
    items
}

const D: usize = 6;

fn rand_patch<R: Rng>(rng: &mut R) -> ImagePatch {
    let mut p = ImagePatch::solid(3, 3, [0.0, 0.0, 0.0]);
    for v in &mut p.rgb {
        *v = rng.random_range(0.0..1.0);
    }
    p
}

fn rand_sets<R: Rng>(rng: &mut R, counts: &[usize]) -> Vec<Vec<[f64; 3]>> {
    counts
        .iter()
        .map(|&c| {
            (0..c)
                .map(|_| {
                    [
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(5.0..15.0),
                    ]
                })
                .collect()
        })
        .collect()
}

fn encoder_items() -> Vec<(&'static str, ItemBuild)> {
    let mut items: Vec<(&'static str, ItemBuild)> = Vec::new();
    items.push((
        "encoder.point",
        Box::new(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(2));
            let mut store = ParamStore::new();
            let w = PointEncoderWeights::create(&mut store, "point", 3, 5, D, &mut rng);
            let sets = rand_sets(&mut rng, &[3, 2]);
            let params = w.params();
            Ok(BuiltItem {
                store,
                params,
                forward: Box::new(move |tape, store| {
                    let batch = encode_points(tape, store, &w, &sets, None)?;
                    let s = tape.sigmoid(batch.features);
                    tape.mean_all(s)
                }),
            })
        }),
    ));
    items.push((
        "encoder.image",
        Box::new(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(37).wrapping_add(3));
            let mut store = ParamStore::new();
            let w = ImageEncoderWeights::create(&mut store, "image", 4, 5, D, &mut rng);
            let patches = vec![rand_patch(&mut rng), rand_patch(&mut rng)];
            let params = w.params();
            Ok(BuiltItem {
                store,
                params,
                forward: Box::new(move |tape, store| {
                    let refs: Vec<&ImagePatch> = patches.iter().collect();
                    let batch = encode_image(tape, store, &w, &refs)?;
                    let s = tape.sigmoid(batch.features);
                    tape.mean_all(s)
                }),
            })
        }),
    ));
    items.push((
        "encoder.skip_pool",
        Box::new(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(41).wrapping_add(4));
            let mut store = ParamStore::new();
            let w = SkipPoolWeights::create(&mut store, "skip", D, &mut rng);
            let maps: Vec<Tensor> = SKIP_LEVEL_CHANNELS
                .iter()
                .map(|&c| rand_tensor(&mut rng, &[c, 2, 2], -1.0, 1.0))
                .collect();
            // Full weight matrices are too wide for per-entry differencing;
            // the biases and projection drive every backward rule in the op
            // (the linear weight rule is covered by op.linear and both
            // encoders).
            let mut params = vec![w.proj.1];
            for ((_, b1), (_, b2)) in &w.levels {
                params.extend([*b1, *b2]);
            }
            Ok(BuiltItem {
                store,
                params,
                forward: Box::new(move |tape, store| {
                    let out = skip_pool_project(tape, store, &w, &maps)?;
                    let s = tape.sigmoid(out);
                    tape.mean_all(s)
                }),
            })
        }),
    ));
    items
}

fn fusion_items() -> Vec<(&'static str, ItemBuild)> {
    let make = |name: &'static str, variant: FusionVariant| -> (&'static str, ItemBuild) {
        (
            name,
            Box::new(move |seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(43).wrapping_add(5));
                let mut store = ParamStore::new();
                let w = FusionWeights::create(&mut store, "fusion", variant, D, &mut rng);
                let img = rand_tensor(&mut rng, &[D, 3], -1.0, 1.0);
                let cloud = rand_tensor(&mut rng, &[D, 3], -1.0, 1.0);
                let params = w.params();
                Ok(BuiltItem {
                    store,
                    params,
                    forward: Box::new(move |tape, store| {
                        let slices = [
                            EmbeddingBatch {
                                modality: ModalityTag::Image,
                                features: tape.constant(img.clone()),
                            },
                            EmbeddingBatch {
                                modality: ModalityTag::Cloud,
                                features: tape.constant(cloud.clone()),
                            },
                        ];
                        let fused = robust_fuse(tape, store, &w, &slices)?;
                        let f = fused.get(ModalityTag::Fused).unwrap().features;
                        let s = tape.sigmoid(f);
                        tape.mean_all(s)
                    }),
                })
            }),
        )
    };
    vec![
        make("fusion.concat_a", FusionVariant::A),
        make("fusion.add_b", FusionVariant::B),
        make("fusion.attention_c", FusionVariant::C),
    ]
}

fn head_items() -> Vec<(&'static str, ItemBuild)> {
    let make = |name: &'static str, head: usize| -> (&'static str, ItemBuild) {
        (
            name,
            Box::new(move |seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(47).wrapping_add(6));
                let mut store = ParamStore::new();
                let w = EstimatorWeights::create(&mut store, "adj", D, &mut rng);
                let feats = rand_tensor(&mut rng, &[D, 4], -1.0, 1.0);
                let params = match head {
                    0 => w.affinity.iter(),
                    1 => w.start_end.iter(),
                    _ => w.confidence.iter(),
                }
                .flat_map(|(a, b)| [*a, *b])
                .collect::<Vec<_>>();
                Ok(BuiltItem {
                    store,
                    params,
                    forward: Box::new(move |tape, store| {
                        let batch = crate::fusion::FusedBatch {
                            slices: vec![EmbeddingBatch {
                                modality: ModalityTag::Cloud,
                                features: tape.constant(feats.clone()),
                            }],
                        };
                        let out = match head {
                            0 => {
                                let corr = correlate(tape, &batch, CorrelationOp::AbsSub, 2, 2)?;
                                let scores = affinity_scores(tape, store, &w, &corr)?;
                                rank_adjacency(tape, scores[0], RankCombine::Add)?
                            }
                            1 => {
                                let corr = correlate(tape, &batch, CorrelationOp::AbsSub, 2, 2)?;
                                let se = start_end_scores(tape, store, &w, &corr)?;
                                tape.concat(&[se[0].0, se[0].1], 1)?
                            }
                            _ => confidence_scores(tape, store, &w, &batch)?[0],
                        };
                        let s = tape.sigmoid(out);
                        tape.mean_all(s)
                    }),
                })
            }),
        )
    };
    vec![
        make("head.affinity", 0),
        make("head.start_end", 1),
        make("head.confidence", 2),
    ]
}

fn pipeline_item() -> (&'static str, ItemBuild) {
    (
        "pipeline.fusion_c_loss",
        Box::new(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(53).wrapping_add(7));
            let model = TrackModel::new(ModelOptions::compact(D), seed.wrapping_add(900));
            let mut patches = Vec::new();
            for _ in 0..4 {
                patches.push(rand_patch(&mut rng));
            }
            let sets = rand_sets(&mut rng, &[3, 2, 3, 2]);
            let input = WindowInput {
                n: 2,
                m: 2,
                image_patches: Some(patches),
                cloud_sets: Some(sets),
                reflectance: None,
                injected: Vec::new(),
            };
            let gt = GroundTruthAssociation {
                n: 2,
                m: 2,
                link: vec![true, false, false, true],
                truth: vec![true, true, true, true],
                start: vec![false, false],
                end: vec![false, false],
            };
            let store = model.store.clone();
            let params = model.param_ids();
            Ok(BuiltItem {
                store,
                params,
                forward: Box::new(move |tape, store| {
                    let scores = forward_with_store(&model, store, tape, &input)?;
                    let (total, _) = compute_loss(tape, &scores, &gt, &LossWeights::default())?;
                    Ok(total)
                }),
            })
        }),
    )
}

/// Forward pass reading weights from an external store (same layout as the
/// model's own); lets the checker perturb a cloned store.
fn forward_with_store(
    model: &TrackModel,
    store: &ParamStore,
    tape: &mut Tape,
    input: &WindowInput,
) -> Result<WindowScores> {
    let shadow = TrackModel {
        options: model.options.clone(),
        store: store.clone(),
        point_encoder: model.point_encoder.clone(),
        image_encoder: model.image_encoder.clone(),
        fusion: model.fusion.clone(),
        estimator: model.estimator.clone(),
    };
    let (_, scores) = shadow.forward_window(tape, input)?;
    Ok(scores)
}

/// Run the whole suite. `corrupt` enables the deliberate backward
/// corruption, which must make the suite fail (negative control).
pub fn run_suite(seeds: u64, tolerance: f64, corrupt: bool) -> Result<SuiteReport> {
    let mut all: Vec<(&'static str, ItemBuild)> = Vec::new();
    all.extend(structural_items());
    all.extend(binary_items());
    all.extend(unary_items());
    all.extend(encoder_items());
    all.extend(fusion_items());
    all.extend(head_items());
    all.push(pipeline_item());

    let mut items = Vec::with_capacity(all.len());
    for (name, build) in &all {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            worst = worst.max(run_item(build, seed, corrupt)?);
        }
        items.push(SuiteItem {
            name,
            max_rel_error: worst,
        });
    }
    Ok(SuiteReport {
        tolerance,
        seeds,
        items,
    })
}
