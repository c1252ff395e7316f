//! Multi-modal knowledge graph completion: RotatE scoring over fused entity
//! representations, self-adversarial negative sampling and training.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::encoders::{init_rng, ModalityProjector, RelationEmbedding, StructureEncoder};
use crate::error::{Error, Result};
use crate::eval::{eval_kgc_triples, RankResult, TripleScorer};
use crate::fusion::{
    fuse, fuse_variant, modality_mean, modality_slice, stack_modalities, FusionVariant, FusionWeights,
    VariantParams,
};
use crate::gmnm::{NoiseConfig, NoisePlan};
use crate::graphdata::{FeatureStats, KnowledgeGraph, ModalityFeatureStore, Split, Triple};
use crate::modality::Modality;
use crate::numkit::{log_sigmoid, AdamW, Bound, CosineWarmup, ParamStore, Tape, Tensor, Var};
use crate::rng::{stream, tag};

/// Which fused vector represents an entity in the score function.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntityRepr {
    /// The structure modality's fused vector.
    StructureFused,
    /// Mean of all fused modality vectors.
    MeanFused,
}

impl FromStr for EntityRepr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "structure_fused" => Ok(EntityRepr::StructureFused),
            "mean_fused" => Ok(EntityRepr::MeanFused),
            _ => Err(Error::Config(format!("unknown entity representation `{s}`"))),
        }
    }
}

impl fmt::Display for EntityRepr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntityRepr::StructureFused => "structure_fused",
            EntityRepr::MeanFused => "mean_fused",
        })
    }
}

/// How the per-coordinate complex moduli are aggregated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreNorm {
    L1,
    L2,
}

impl FromStr for ScoreNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(ScoreNorm::L1),
            "l2" => Ok(ScoreNorm::L2),
            _ => Err(Error::Config(format!("unknown score norm `{s}`"))),
        }
    }
}

impl fmt::Display for ScoreNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreNorm::L1 => "l1",
            ScoreNorm::L2 => "l2",
        })
    }
}

/// Direction of the self-adversarial negative weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdversarialWeighting {
    /// `softmax(tau * F)`: more distant negatives weigh more.
    Distance,
    /// `softmax(-tau * F)`: closer (harder) negatives weigh more.
    Plausibility,
}

impl AdversarialWeighting {
    fn sign(self) -> f64 {
        match self {
            AdversarialWeighting::Distance => 1.0,
            AdversarialWeighting::Plausibility => -1.0,
        }
    }
}

impl FromStr for AdversarialWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distance" => Ok(AdversarialWeighting::Distance),
            "plausibility" => Ok(AdversarialWeighting::Plausibility),
            _ => Err(Error::Config(format!("unknown adversarial weighting `{s}`"))),
        }
    }
}

impl fmt::Display for AdversarialWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdversarialWeighting::Distance => "distance",
            AdversarialWeighting::Plausibility => "plausibility",
        })
    }
}

/// Entity encoder feeding the score function.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KgcFusion {
    /// Cross-modal transformer; the entity vector follows [`EntityRepr`].
    Transformer,
    /// One of the single-vector baselines.
    Variant(FusionVariant),
    /// The structure embedding alone, no other modality.
    StructureOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KgcConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub fusion: KgcFusion,
    pub entity_repr: EntityRepr,
    /// Modalities in fusion order; the structure modality must come first.
    pub modalities: Vec<Modality>,
    pub noise: NoiseConfig,
    pub margin: f64,
    pub negatives: usize,
    pub temperature: f64,
    pub weighting: AdversarialWeighting,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub norm: ScoreNorm,
    /// Validation cadence in epochs (0 disables validation).
    pub eval_every: usize,
}

impl Default for KgcConfig {
    fn default() -> Self {
        KgcConfig {
            dim: 256,
            heads: 2,
            ffn_dim: 1024,
            fusion: KgcFusion::Transformer,
            entity_repr: EntityRepr::StructureFused,
            modalities: vec![Modality::Structure, Modality::Visual, Modality::Surface],
            noise: NoiseConfig::gmnm(0.2, 0.7, vec![Modality::Visual, Modality::Surface]),
            margin: 12.0,
            negatives: 32,
            temperature: 2.0,
            weighting: AdversarialWeighting::Distance,
            batch_size: 1024,
            lr: 1e-4,
            weight_decay: 0.0,
            warmup_fraction: 0.0,
            epochs: 200,
            norm: ScoreNorm::L1,
            eval_every: 10,
        }
    }
}

impl KgcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.negatives == 0 {
            return bad("kgc.negatives must be >= 1");
        }
        if !(self.margin > 0.0) {
            return bad("kgc.margin must be > 0");
        }
        if !(self.temperature > 0.0) {
            return bad("kgc.temperature must be > 0");
        }
        if self.dim == 0 || self.dim % 2 != 0 {
            return bad("model.dim must be even and positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("kgc.batch_size and kgc.epochs must be >= 1");
        }
        if self.modalities.first() != Some(&Modality::Structure) {
            return bad("kgc.modalities must start with g");
        }
        self.noise.validate()
    }

    /// Modalities the entity encoder actually consumes.
    pub fn used_modalities(&self) -> Vec<Modality> {
        match self.fusion {
            KgcFusion::StructureOnly => vec![Modality::Structure],
            _ => self.modalities.clone(),
        }
    }
}

/// A triple with its distance under the model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredTriple {
    pub triple: Triple,
    pub score: f64,
}

/// `|| h o r - t ||` with `h`, `t` split into real and imaginary halves and
/// `r = (cos theta, sin theta)`.
pub fn rotate_score(head: &[f64], phases: &[f64], tail: &[f64], norm: ScoreNorm) -> Result<f64> {
    let d = head.len();
    if d % 2 != 0 || tail.len() != d || phases.len() != d / 2 {
        return Err(Error::shape("rotate_score", &[head.len(), tail.len()], &[phases.len()]));
    }
    let k = d / 2;
    let mut acc = 0.0;
    for i in 0..k {
        let (c, s) = (phases[i].cos(), phases[i].sin());
        let re = head[i] * c - head[k + i] * s - tail[i];
        let im = head[i] * s + head[k + i] * c - tail[k + i];
        let sq = re * re + im * im;
        acc += match norm {
            ScoreNorm::L1 => sq.sqrt(),
            ScoreNorm::L2 => sq,
        };
    }
    Ok(match norm {
        ScoreNorm::L1 => acc,
        ScoreNorm::L2 => acc.sqrt(),
    })
}

/// Batched RotatE distances for index triples into `ent` rows and `phases`
/// rows. Returns a vector with one distance per triple.
pub fn rotate_distances(
    tape: &mut Tape,
    ent: Var,
    phases: Var,
    heads: &[usize],
    relations: &[usize],
    tails: &[usize],
    norm: ScoreNorm,
) -> Result<Var> {
    let d = tape.value(ent).cols();
    if d % 2 != 0 || tape.value(phases).cols() * 2 != d {
        return Err(Error::shape("rotate_distances", tape.value(ent).shape(), tape.value(phases).shape()));
    }
    let k = d / 2;
    let h = tape.gather_rows(ent, heads)?;
    let t = tape.gather_rows(ent, tails)?;
    let theta = tape.gather_rows(phases, relations)?;
    let (h_re, h_im) = (tape.narrow_last(h, 0, k)?, tape.narrow_last(h, k, k)?);
    let (t_re, t_im) = (tape.narrow_last(t, 0, k)?, tape.narrow_last(t, k, k)?);
    let (c, s) = (tape.cos(theta), tape.sin(theta));
    let rc = tape.mul(h_re, c)?;
    let is = tape.mul(h_im, s)?;
    let rot_re = tape.sub(rc, is)?;
    let rs = tape.mul(h_re, s)?;
    let ic = tape.mul(h_im, c)?;
    let rot_im = tape.add(rs, ic)?;
    let dre = tape.sub(rot_re, t_re)?;
    let dim = tape.sub(rot_im, t_im)?;
    let dre2 = tape.mul(dre, dre)?;
    let dim2 = tape.mul(dim, dim)?;
    let sq = tape.add(dre2, dim2)?;
    match norm {
        ScoreNorm::L1 => {
            let m = tape.sqrt(sq);
            Ok(tape.sum_last(m))
        }
        ScoreNorm::L2 => {
            let s = tape.sum_last(sq);
            Ok(tape.sqrt(s))
        }
    }
}

/// Self-adversarial weights `softmax(temperature * negative distances)`.
pub fn adversarial_weights(neg: &[f64], temperature: f64) -> Vec<f64> {
    weights_with(neg, temperature, AdversarialWeighting::Distance)
}

fn weights_with(neg: &[f64], temperature: f64, weighting: AdversarialWeighting) -> Vec<f64> {
    let mut w: Vec<f64> = neg.iter().map(|s| weighting.sign() * temperature * s).collect();
    crate::numkit::softmax_in_place(&mut w);
    w
}

/// `-log sigma(margin - pos) - sum_i w_i log sigma(neg_i - margin)` with
/// `w = softmax(temperature * neg)`.
pub fn kgc_loss(pos: f64, neg: &[f64], margin: f64, temperature: f64) -> f64 {
    kgc_loss_with(pos, neg, margin, temperature, AdversarialWeighting::Distance)
}

pub fn kgc_loss_with(pos: f64, neg: &[f64], margin: f64, temperature: f64, weighting: AdversarialWeighting) -> f64 {
    let w = weights_with(neg, temperature, weighting);
    -log_sigmoid(margin - pos) - neg.iter().zip(&w).map(|(s, w)| w * log_sigmoid(s - margin)).sum::<f64>()
}

/// Batch loss over distances `[B, 1 + K]` (positive first in each row),
/// averaged over rows. The adversarial weights are treated as constants.
pub fn kgc_batch_loss(
    tape: &mut Tape,
    scores: Var,
    margin: f64,
    temperature: f64,
    weighting: AdversarialWeighting,
) -> Result<Var> {
    let s = tape.value(scores).shape().to_vec();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::shape("kgc_batch_loss", &s, &[0, 2]));
    }
    let k = s[1] - 1;
    let pos = tape.narrow_last(scores, 0, 1)?;
    let neg = tape.narrow_last(scores, 1, k)?;
    let pos_margin = tape.scale(pos, -1.0);
    let pos_margin = tape.add_scalar(pos_margin, margin);
    let pos_term = tape.log_sigmoid(pos_margin);
    let pos_term = tape.sum_last(pos_term);
    let neg_fixed = tape.detach(neg);
    let logits = tape.scale(neg_fixed, weighting.sign() * temperature);
    let w = tape.softmax_last(logits)?;
    let neg_margin = tape.add_scalar(neg, -margin);
    let neg_ls = tape.log_sigmoid(neg_margin);
    let weighted = tape.mul(w, neg_ls)?;
    let neg_term = tape.sum_last(weighted);
    let total = tape.add(pos_term, neg_term)?;
    let mean = tape.mean_all(total)?;
    Ok(tape.scale(mean, -1.0))
}

/// `k` corruptions of `triple`: head or tail (fair coin) replaced by a
/// uniformly drawn different entity. A corruption that is a known training
/// triple is redrawn (coin included) up to a fixed number of times, after
/// which the last draw is kept.
pub fn sample_negatives<R: Rng + ?Sized>(
    triple: Triple,
    k: usize,
    num_entities: usize,
    known: &HashSet<Triple>,
    rng: &mut R,
) -> Result<Vec<Triple>> {
    if num_entities < 2 {
        return Err(Error::invalid("negative sampling needs at least two entities"));
    }
    const MAX_TRIES: usize = 10;
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut cand = triple;
        for _ in 0..MAX_TRIES {
            let corrupt_head = rng.random_bool(0.5);
            let mut e = rng.random_range(0..num_entities - 1);
            let orig = if corrupt_head { triple.head } else { triple.tail };
            if e >= orig {
                e += 1;
            }
            cand = if corrupt_head {
                Triple::new(e, triple.relation, triple.tail)
            } else {
                Triple::new(triple.head, triple.relation, e)
            };
            if !known.contains(&cand) {
                break;
            }
        }
        out.push(cand);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
enum Head {
    Transformer(FusionWeights),
    Variant(VariantParams),
    StructureOnly,
}

/// All learnable state of a completion model.
#[derive(Clone, Debug)]
pub struct KgcModel {
    pub params: ParamStore,
    pub config: KgcConfig,
    structure: StructureEncoder,
    projectors: Vec<ModalityProjector>,
    relations: RelationEmbedding,
    head: Head,
}

/// Frozen feature matrices for the non-structure modalities, in the
/// model's modality order.
fn feature_matrices<'a>(
    modalities: &[Modality],
    stores: &'a [ModalityFeatureStore],
) -> Result<Vec<&'a ModalityFeatureStore>> {
    modalities[1..]
        .iter()
        .map(|m| {
            let s = stores
                .iter()
                .find(|s| s.modality() == *m)
                .ok_or_else(|| Error::invalid(format!("no feature store for modality {m}")))?;
            if !s.is_complete() {
                return Err(Error::invalid(format!("modality {m} has absent rows; impute first")));
            }
            Ok(s)
        })
        .collect()
}

impl KgcModel {
    /// Builds freshly initialized parameters. `feature_dims` gives the raw
    /// width of each non-structure modality.
    pub fn new(
        config: &KgcConfig,
        num_entities: usize,
        num_relations: usize,
        feature_dims: &[(Modality, usize)],
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(seed);
        let mut params = ParamStore::new();
        let d = config.dim;
        let structure = StructureEncoder::table_fc(&mut params, num_entities, d, &mut rng);
        let used = config.used_modalities();
        let mut projectors = Vec::new();
        for &m in &used[1..] {
            let (_, in_dim) = feature_dims
                .iter()
                .find(|(fm, _)| *fm == m)
                .ok_or_else(|| Error::Config(format!("no features for modality {m}")))?;
            projectors.push(ModalityProjector::new(&mut params, m, *in_dim, d, &mut rng));
        }
        let relations = RelationEmbedding::new(&mut params, num_relations, d, &mut rng)?;
        let head = match config.fusion {
            KgcFusion::Transformer => {
                Head::Transformer(FusionWeights::new(&mut params, d, config.heads, config.ffn_dim, &mut rng)?)
            }
            KgcFusion::Variant(v) => Head::Variant(VariantParams::new(
                v,
                &mut params,
                used.len(),
                d,
                config.heads,
                config.ffn_dim,
                &mut rng,
            )?),
            KgcFusion::StructureOnly => Head::StructureOnly,
        };
        Ok(KgcModel {
            params,
            config: config.clone(),
            structure,
            projectors,
            relations,
            head,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.params.get(self.structure.table).rows()
    }

    /// Entity vectors for `ids`. `features` are the (possibly noised)
    /// full matrices of the non-structure modalities; `g_plan` noises the
    /// structure table.
    fn entity_reps(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ids: &[usize],
        features: &[Tensor],
        g_plan: &NoisePlan,
    ) -> Result<Var> {
        let xg = tape.gather_rows(bound.var(self.structure.table), ids)?;
        let xg = g_plan.select(ids)?.apply_var(tape, xg)?;
        let hg = self.structure.encode(tape, bound, xg, None)?;
        let mut hs = vec![hg];
        for (proj, x) in self.projectors.iter().zip(features) {
            let x = tape.constant(x.gather_rows(ids)?);
            hs.push(proj.forward(tape, bound, x)?);
        }
        match &self.head {
            Head::StructureOnly => Ok(hg),
            Head::Transformer(w) => {
                let stacked = stack_modalities(tape, &hs)?;
                let out = fuse(tape, bound, w, stacked)?;
                match self.config.entity_repr {
                    EntityRepr::StructureFused => modality_slice(tape, out.fused, 0),
                    EntityRepr::MeanFused => modality_mean(tape, out.fused),
                }
            }
            Head::Variant(p) => {
                let stacked = stack_modalities(tape, &hs)?;
                fuse_variant(tape, bound, p, stacked)
            }
        }
    }

    /// Noise-free entity vectors for every entity plus relation phases.
    pub fn scorer(&self, stores: &[ModalityFeatureStore]) -> Result<KgcScorer> {
        let used = self.config.used_modalities();
        let feats: Vec<Tensor> = feature_matrices(&used, stores)?
            .into_iter()
            .map(|s| s.matrix().clone())
            .collect();
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let ids: Vec<usize> = (0..self.num_entities()).collect();
        let ent = self.entity_reps(&mut tape, &bound, &ids, &feats, &NoisePlan::Identity)?;
        Ok(KgcScorer {
            entities: tape.value(ent).clone(),
            phases: self.params.get(self.relations.phases).clone(),
            norm: self.config.norm,
        })
    }

    /// Loss of one batch of positives with their negatives, recorded on
    /// `tape` against `bound`.
    /// Noise-free loss of `batch` (positives with their negatives).
    pub fn clean_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[(Triple, Vec<Triple>)],
        stores: &[ModalityFeatureStore],
    ) -> Result<Var> {
        let feats: Vec<Tensor> = feature_matrices(&self.config.used_modalities(), stores)?
            .into_iter()
            .map(|s| s.matrix().clone())
            .collect();
        self.batch_loss(tape, bound, batch, &feats, &NoisePlan::Identity)
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[(Triple, Vec<Triple>)],
        features: &[Tensor],
        g_plan: &NoisePlan,
    ) -> Result<Var> {
        let n = self.num_entities();
        let mut local = vec![usize::MAX; n];
        let mut ids = Vec::new();
        let mut intern = |e: usize, ids: &mut Vec<usize>| {
            if local[e] == usize::MAX {
                local[e] = ids.len();
                ids.push(e);
            }
            local[e]
        };
        let (mut hs, mut rs, mut ts) = (Vec::new(), Vec::new(), Vec::new());
        for (pos, negs) in batch {
            for t in std::iter::once(pos).chain(negs) {
                hs.push(intern(t.head, &mut ids));
                rs.push(t.relation);
                ts.push(intern(t.tail, &mut ids));
            }
        }
        let ent = self.entity_reps(tape, bound, &ids, features, g_plan)?;
        let phases = bound.var(self.relations.phases);
        let dist = rotate_distances(tape, ent, phases, &hs, &rs, &ts, self.config.norm)?;
        let k = self.config.negatives;
        let scores = tape.reshape(dist, &[batch.len(), 1 + k])?;
        kgc_batch_loss(tape, scores, self.config.margin, self.config.temperature, self.config.weighting)
    }
}

/// Frozen entity vectors and phases; scores every candidate entity.
#[derive(Clone, Debug)]
pub struct KgcScorer {
    pub entities: Tensor,
    pub phases: Tensor,
    pub norm: ScoreNorm,
}

impl KgcScorer {
    pub fn score(&self, t: Triple) -> ScoredTriple {
        let score = rotate_score(
            self.entities.row(t.head),
            self.phases.row(t.relation),
            self.entities.row(t.tail),
            self.norm,
        )
        .expect("scorer shapes are consistent");
        ScoredTriple { triple: t, score }
    }
}

impl TripleScorer for KgcScorer {
    fn num_entities(&self) -> usize {
        self.entities.rows()
    }

    fn tail_scores(&self, head: usize, relation: usize) -> Vec<f64> {
        (0..self.num_entities())
            .map(|e| self.score(Triple::new(head, relation, e)).score)
            .collect()
    }

    fn head_scores(&self, relation: usize, tail: usize) -> Vec<f64> {
        (0..self.num_entities())
            .map(|e| self.score(Triple::new(e, relation, tail)).score)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KgcEpoch {
    pub epoch: usize,
    pub loss: f64,
    /// Filtered validation MRR, when validation ran this epoch.
    pub valid_mrr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct KgcTrained {
    pub model: KgcModel,
    pub trace: Vec<KgcEpoch>,
}

/// Trains a completion model. Per epoch: draw the noise plans, shuffle the
/// training triples, then take one optimizer step per batch.
pub fn train_kgc(
    kg: &KnowledgeGraph,
    stores: &[ModalityFeatureStore],
    config: &KgcConfig,
    seed: u64,
) -> Result<KgcTrained> {
    kg.validate()?;
    if kg.train.is_empty() {
        return Err(Error::invalid("no training triples"));
    }
    let used = config.used_modalities();
    let feature_stores = feature_matrices(&used, stores)?;
    let dims: Vec<(Modality, usize)> = feature_stores.iter().map(|s| (s.modality(), s.dim())).collect();
    let mut model = KgcModel::new(config, kg.num_entities(), kg.num_relations(), &dims, seed)?;
    let train_known: HashSet<Triple> = kg.train.iter().copied().collect();
    let all_known = kg.known();

    let steps_per_epoch = kg.train.len().div_ceil(config.batch_size);
    let schedule = CosineWarmup::new(config.lr, config.warmup_fraction, steps_per_epoch * config.epochs);
    let mut opt = AdamW::new(&model.params, 0.9, 0.999, config.weight_decay);
    let mut trace = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 0..config.epochs {
        let features: Vec<Tensor> = feature_stores
            .iter()
            .map(|s| {
                config
                    .noise
                    .plan(s.modality(), s.matrix(), s.stats(), seed, epoch)?
                    .apply(s.matrix())
            })
            .collect::<Result<_>>()?;
        let table = model.params.get(model.structure.table);
        let g_plan = config
            .noise
            .plan(Modality::Structure, table, &FeatureStats::of_matrix(table), seed, epoch)?;

        let mut order = kg.train.clone();
        order.shuffle(&mut stream(seed, tag::SHUFFLE, epoch as u64));
        let mut neg_rng = stream(seed, tag::NEGATIVES, epoch as u64);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(Triple, Vec<Triple>)> = chunk
                .iter()
                .map(|&t| Ok((t, sample_negatives(t, config.negatives, kg.num_entities(), &train_known, &mut neg_rng)?)))
                .collect::<Result<_>>()?;
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let loss = model.batch_loss(&mut tape, &bound, &batch, &features, &g_plan)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("loss {value} at step {step}"),
                });
            }
            let mut grads = tape.backward(loss)?;
            let grads = model.params.collect_grads(&bound, &mut grads);
            opt.step(&mut model.params, &grads, schedule.lr(step));
            step += 1;
            total += value * chunk.len() as f64;
        }

        let validate = config.eval_every > 0
            && !kg.valid.is_empty()
            && ((epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs);
        let valid_mrr = if validate {
            let scorer = model.scorer(stores)?;
            Some(eval_kgc_triples(&scorer, &kg.valid, Some(&all_known))?.mrr)
        } else {
            None
        };
        trace.push(KgcEpoch {
            epoch,
            loss: total / kg.train.len() as f64,
            valid_mrr,
        });
    }
    Ok(KgcTrained { model, trace })
}

/// Filtered or raw ranks of `triples` under a trained model.
pub fn evaluate(
    model: &KgcModel,
    kg: &KnowledgeGraph,
    stores: &[ModalityFeatureStore],
    split: Split,
    filtered: bool,
) -> Result<RankResult> {
    let scorer = model.scorer(stores)?;
    crate::eval::eval_kgc(&scorer, kg, split, filtered)
}
