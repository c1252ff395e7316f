//! Gradient checks shared by the unit-level suites and the acceptance run.
#![allow(dead_code)]

use std::collections::HashSet;

use mmkg::fusion::FusionVariant;
use mmkg::graphdata::synthetic::{generate_ea, generate_kgc, EaSyntheticSpec, KgcSyntheticSpec};
use mmkg::kgc::{sample_negatives, EntityRepr, KgcConfig, KgcFusion, KgcModel};
use mmkg::mmea::{EaConfig, EaData, EaModel};
use mmkg::numkit::{check_gradients_multi, Bound, ParamStore, Tape, Tensor, Var};
use mmkg::rng::seeded;
use mmkg::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
pub const EPS: f64 = 1e-6;

pub type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: &'static [&'static [usize]],
    /// Draw inputs from `[0.5, 2)` instead of a standard normal.
    pub positive: bool,
    pub op: OpFn,
}

const fn case(name: &'static str, shapes: &'static [&'static [usize]], positive: bool, op: OpFn) -> OpCase {
    OpCase { name, shapes, positive, op }
}

pub const UNARY: &[OpCase] = &[
    case("exp", &[&[3, 4]], false, |t, v| Ok(t.exp(v[0]))),
    case("log", &[&[3, 4]], true, |t, v| Ok(t.log(v[0]))),
    case("sigmoid", &[&[3, 4]], false, |t, v| Ok(t.sigmoid(v[0]))),
    case("log_sigmoid", &[&[3, 4]], false, |t, v| Ok(t.log_sigmoid(v[0]))),
    case("relu", &[&[3, 4]], false, |t, v| Ok(t.relu(v[0]))),
    case("leaky_relu", &[&[3, 4]], false, |t, v| Ok(t.leaky_relu(v[0], 0.2))),
    case("elu", &[&[3, 4]], false, |t, v| Ok(t.elu(v[0]))),
    case("tanh", &[&[3, 4]], false, |t, v| Ok(t.tanh(v[0]))),
    case("sqrt", &[&[3, 4]], true, |t, v| Ok(t.sqrt(v[0]))),
    case("sin", &[&[3, 4]], false, |t, v| Ok(t.sin(v[0]))),
    case("cos", &[&[3, 4]], false, |t, v| Ok(t.cos(v[0]))),
    case("scale", &[&[3, 4]], false, |t, v| Ok(t.scale(v[0], -2.5))),
    case("add_scalar", &[&[3, 4]], false, |t, v| Ok(t.add_scalar(v[0], 1.5))),
];

pub const BINARY: &[OpCase] = &[
    case("add", &[&[3, 4], &[3, 4]], false, |t, v| t.add(v[0], v[1])),
    case("sub", &[&[3, 4], &[3, 4]], false, |t, v| t.sub(v[0], v[1])),
    case("mul", &[&[3, 4], &[3, 4]], false, |t, v| t.mul(v[0], v[1])),
    case("minimum", &[&[3, 4], &[3, 4]], false, |t, v| t.minimum(v[0], v[1])),
    case("add_row", &[&[3, 4], &[4]], false, |t, v| t.add_row(v[0], v[1])),
    case("mul_row", &[&[2, 3, 4], &[4]], false, |t, v| t.mul_row(v[0], v[1])),
    case("mul_col", &[&[3, 4], &[3]], false, |t, v| t.mul_col(v[0], v[1])),
    case("scale_by", &[&[3, 4], &[1]], false, |t, v| t.scale_by(v[0], v[1])),
];

pub const MATRIX: &[OpCase] = &[
    case("matmul", &[&[3, 4], &[4, 2]], false, |t, v| t.matmul(v[0], v[1])),
    case("bmm", &[&[2, 3, 4], &[2, 4, 5]], false, |t, v| t.bmm(v[0], v[1])),
    case("transpose", &[&[2, 3, 4]], false, |t, v| t.transpose(v[0])),
    case("reshape", &[&[2, 6]], false, |t, v| t.reshape(v[0], &[3, 4])),
];

pub const LAST_AXIS: &[OpCase] = &[
    case("softmax_last", &[&[3, 5]], false, |t, v| t.softmax_last(v[0])),
    case("log_softmax_last", &[&[3, 5]], false, |t, v| t.log_softmax_last(v[0])),
    case("layer_norm_last", &[&[3, 5]], false, |t, v| t.layer_norm_last(v[0], 1e-5)),
    case("sum_last", &[&[2, 3, 5]], false, |t, v| Ok(t.sum_last(v[0]))),
    case("mean_last", &[&[3, 5]], false, |t, v| t.mean_last(v[0])),
    case("l1_norm_last", &[&[3, 5]], false, |t, v| Ok(t.l1_norm_last(v[0]))),
    case("l2_norm_last", &[&[3, 5]], false, |t, v| Ok(t.l2_norm_last(v[0]))),
    case("l2_normalize_last", &[&[3, 5]], false, |t, v| t.l2_normalize_last(v[0], 1e-12)),
    case("concat_last", &[&[3, 2], &[3, 4]], false, |t, v| t.concat_last(&[v[0], v[1], v[0]])),
    case("narrow_last", &[&[3, 6]], false, |t, v| t.narrow_last(v[0], 2, 3)),
    case("pick_last", &[&[3, 4]], false, |t, v| t.pick_last(v[0], &[3, 0, 2])),
];

pub const ROWS: &[OpCase] = &[
    case("gather_rows", &[&[4, 3]], false, |t, v| t.gather_rows(v[0], &[2, 0, 2, 3, 1])),
    case("scatter_add_rows", &[&[5, 3]], false, |t, v| t.scatter_add_rows(v[0], &[1, 0, 1, 3, 1], 4)),
    case("segment_softmax", &[&[6]], false, |t, v| t.segment_softmax(v[0], &[0, 0, 1, 2, 2, 2], 3)),
    case("mean_rows", &[&[4, 3]], false, |t, v| t.mean_rows(v[0])),
    case("sum_all", &[&[4, 3]], false, |t, v| Ok(t.sum_all(v[0]))),
    case("mean_all", &[&[4, 3]], false, |t, v| t.mean_all(v[0])),
];

pub fn all_ops() -> impl Iterator<Item = &'static OpCase> {
    [UNARY, BINARY, MATRIX, LAST_AXIS, ROWS].into_iter().flatten()
}

/// Reduces an op output to a scalar with a fixed, non-uniform weighting so
/// that every output coordinate contributes a distinct amount.
fn weighted_sum(t: &mut Tape, y: Var) -> Result<Var> {
    let n = t.value(y).numel();
    let shape = t.value(y).shape().to_vec();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 7.0).collect();
    let w = t.constant(Tensor::new(shape, w)?);
    let p = t.mul(y, w)?;
    Ok(t.sum_all(p))
}

/// Worst relative error of `c` over `trials` random inputs.
pub fn op_worst(c: &OpCase, trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED ^ c.name.len() as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let points: Vec<Tensor> = c
            .shapes
            .iter()
            .map(|s| {
                if c.positive {
                    Tensor::uniform(s, 0.5, 2.0, &mut rng)
                } else {
                    Tensor::randn(s, 1.0, &mut rng)
                }
            })
            .collect();
        let err = check_gradients_multi(
            |t, v| {
                let y = (c.op)(t, v)?;
                weighted_sum(t, y)
            },
            &points,
            EPS,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

fn check_params<F>(params: &ParamStore, loss: F) -> f64
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    check_gradients_multi(|t, v| loss(t, &Bound::from_vars(v.to_vec())), &params.snapshot(), EPS).unwrap()
}

pub const KGC_HEADS: &[(&str, KgcFusion, EntityRepr)] = &[
    ("transformer/g", KgcFusion::Transformer, EntityRepr::StructureFused),
    ("transformer/avg", KgcFusion::Transformer, EntityRepr::MeanFused),
    ("fc", KgcFusion::Variant(FusionVariant::Fc), EntityRepr::StructureFused),
    ("ws", KgcFusion::Variant(FusionVariant::Ws), EntityRepr::StructureFused),
    ("at", KgcFusion::Variant(FusionVariant::At), EntityRepr::StructureFused),
    ("ts", KgcFusion::Variant(FusionVariant::Ts), EntityRepr::StructureFused),
    ("structure", KgcFusion::StructureOnly, EntityRepr::StructureFused),
];

/// Worst relative error of the completion loss over every parameter.
pub fn kgc_worst(fusion: KgcFusion, repr: EntityRepr, seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let spec = KgcSyntheticSpec {
            entities: 6,
            visual_dim: 3,
            surface_dim: 3,
            image_ratio: 0.5,
            ..Default::default()
        };
        let d = generate_kgc(&spec, seed).unwrap();
        let stores: Vec<_> = [d.visual, d.surface]
            .iter()
            .map(|s| mmkg::encoders::impute_missing(s, seed).unwrap())
            .collect();
        // One negative keeps the detached self-adversarial weight at 1.
        let cfg = KgcConfig {
            dim: 4,
            heads: 2,
            ffn_dim: 8,
            negatives: 1,
            margin: 2.0,
            fusion,
            entity_repr: repr,
            ..Default::default()
        };
        let dims: Vec<_> = stores.iter().map(|s| (s.modality(), s.dim())).collect();
        let model = KgcModel::new(&cfg, 6, d.kg.num_relations(), &dims, seed).unwrap();
        let mut rng = seeded(seed);
        let batch: Vec<_> = d.kg.train[..3]
            .iter()
            .map(|&t| (t, sample_negatives(t, 1, 6, &HashSet::new(), &mut rng).unwrap()))
            .collect();
        let err = check_params(&model.params, |t, b| model.clean_loss(t, b, &batch, &stores));
        worst = worst.max(err);
    }
    worst
}

pub fn small_ea(seed: u64) -> EaData {
    let spec = EaSyntheticSpec {
        entities: 8,
        relations: 3,
        triples: 14,
        attributes: 5,
        attributes_per_entity: 2,
        visual_dim: 3,
        surface_dim: 3,
        jitter: 0.3,
        image_ratio: 0.5,
        seed_ratio: 0.5,
    };
    let s = generate_ea(&spec, seed).unwrap();
    EaData::from_synthetic(&s, 3, 5, seed).unwrap()
}

/// Worst relative error of the total alignment loss over every parameter.
pub fn ea_worst(seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let data = small_ea(seed);
        let cfg = EaConfig {
            dim: 4,
            ffn_dim: 8,
            tau: 0.5,
            ..Default::default()
        };
        let dims: Vec<_> = data.stores1.iter().map(|s| (s.modality(), s.dim())).collect();
        let model = EaModel::new(&cfg, 8, 8, &dims, seed).unwrap();
        let pairs = data.alignment.seed.clone();
        let err = check_params(&model.params, |t, b| Ok(model.clean_loss(t, b, &pairs, &data)?.0));
        worst = worst.max(err);
    }
    worst
}
