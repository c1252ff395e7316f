//! Multi-modal entity alignment: global modality integration, bidirectional
//! in-batch contrastive losses (plain, confidence-augmented, and over fused
//! outputs), probation-based iterative training.
//!
//! Both graphs share one entity space: graph 2's ids are offset by the
//! number of graph-1 entities, so a single structure table, graph attention
//! encoder and set of projectors serve both sides.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;

use crate::encoders::{impute_missing, init_rng, EdgeList, HeadMerge, ModalityProjector, StructureEncoder};
use crate::error::{Error, Result};
use crate::eval::{eval_ea, similarity, CandidatePool, RankResult};
use crate::fusion::{fuse, modality_slice, stack_modalities, FusionWeights};
use crate::gmnm::{NoiseConfig, NoisePlan};
use crate::graphdata::synthetic::{EaGraph, SyntheticEa};
use crate::graphdata::{build_bow_features, AlignmentSet, BowEncoding, FeatureStats, KnowledgeGraph, ModalityFeatureStore};
use crate::modality::Modality;
use crate::numkit::{AdamW, Bound, CosineWarmup, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::{stream, tag};

const NORM_EPS: f64 = 1e-12;
const MASKED: f64 = -1e30;

#[derive(Clone, Debug, PartialEq)]
pub struct EaConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub gat_layers: usize,
    pub gat_heads: usize,
    pub gat_merge: HeadMerge,
    pub modalities: Vec<Modality>,
    pub noise: NoiseConfig,
    /// Contrastive temperature.
    pub tau: f64,
    /// L2-normalize embeddings before every similarity.
    pub normalize: bool,
    /// Treat fused confidences as constants inside the confidence loss.
    pub detach_confidence: bool,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub iterative_epochs: usize,
    /// Fraction of seed pairs held out for early stopping.
    pub valid_ratio: f64,
    pub eval_every: usize,
    /// Validation checks without improvement before stopping (0 disables).
    pub patience: usize,
    pub probe_every: usize,
    pub promote_after: usize,
    pub pool: CandidatePool,
}

impl Default for EaConfig {
    fn default() -> Self {
        EaConfig {
            dim: 300,
            heads: 1,
            ffn_dim: 1200,
            gat_layers: 2,
            gat_heads: 2,
            gat_merge: HeadMerge::Mean,
            modalities: Modality::ALL.to_vec(),
            noise: NoiseConfig::gmnm(0.2, 0.7, Modality::ALL.to_vec()),
            tau: 0.1,
            normalize: true,
            detach_confidence: false,
            batch_size: 3500,
            lr: 5e-4,
            weight_decay: 1e-4,
            warmup_fraction: 0.15,
            epochs: 500,
            iterative_epochs: 500,
            valid_ratio: 0.1,
            eval_every: 10,
            patience: 5,
            probe_every: 5,
            promote_after: 10,
            pool: CandidatePool::TestSide,
        }
    }
}

impl EaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.tau > 0.0) {
            return bad("ea.tau must be > 0");
        }
        if self.dim == 0 || self.batch_size == 0 {
            return bad("model.dim and ea.batch_size must be >= 1");
        }
        if self.modalities.is_empty() {
            return bad("ea.modalities must not be empty");
        }
        if !(0.0..1.0).contains(&self.valid_ratio) {
            return bad("ea.valid_ratio must lie in [0, 1)");
        }
        if self.probe_every == 0 || self.promote_after == 0 {
            return bad("ea.probe_every and ea.promote_after must be >= 1");
        }
        self.noise.validate()
    }
}

/// Bidirectional in-batch contrastive loss. Row `i` of `e1` and `e2` is an
/// aligned pair; the other rows of both graphs act as negatives. Per pair
/// the loss is `-log(phi * (p12 + p21) / 2)` with `log phi` optional.
pub fn contrastive_loss(
    tape: &mut Tape,
    e1: Var,
    e2: Var,
    tau: f64,
    normalize: bool,
    log_phi: Option<Var>,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid("contrastive temperature must be > 0"));
    }
    let (s1, s2) = (tape.value(e1).shape().to_vec(), tape.value(e2).shape().to_vec());
    if s1.len() != 2 || s1 != s2 {
        return Err(Error::shape("contrastive_loss", &s1, &s2));
    }
    let b = s1[0];
    let (e1, e2) = if normalize {
        (tape.l2_normalize_last(e1, NORM_EPS)?, tape.l2_normalize_last(e2, NORM_EPS)?)
    } else {
        (e1, e2)
    };
    let mut diag = Tensor::zeros(&[b, b]);
    for i in 0..b {
        diag.row_mut(i)[i] = MASKED;
    }
    let diag = tape.constant(diag);
    let sim = |tape: &mut Tape, a: Var, c: Var| -> Result<Var> {
        let ct = tape.transpose(c)?;
        let s = tape.matmul(a, ct)?;
        Ok(tape.scale(s, 1.0 / tau))
    };
    let s12 = sim(tape, e1, e2)?;
    let s21 = tape.transpose(s12)?;
    let s11 = sim(tape, e1, e1)?;
    let s11 = tape.add(s11, diag)?;
    let s22 = sim(tape, e2, e2)?;
    let s22 = tape.add(s22, diag)?;
    let idx: Vec<usize> = (0..b).collect();
    let log_p = |tape: &mut Tape, cross: Var, within: Var| -> Result<Var> {
        let logits = tape.concat_last(&[cross, within])?;
        let lp = tape.log_softmax_last(logits)?;
        let picked = tape.pick_last(lp, &idx)?;
        tape.reshape(picked, &[b, 1])
    };
    let lp12 = log_p(tape, s12, s11)?;
    let lp21 = log_p(tape, s21, s22)?;
    // log(p12 + p21) = lp12 - log_softmax([lp12, lp21])[0]
    let pair = tape.concat_last(&[lp12, lp21])?;
    let pair_ls = tape.log_softmax_last(pair)?;
    let first = tape.pick_last(pair_ls, &vec![0; b])?;
    let lp12 = tape.reshape(lp12, &[b])?;
    let log_sum = tape.sub(lp12, first)?;
    let neg = tape.scale(log_sum, -1.0);
    let mut per_pair = tape.add_scalar(neg, std::f64::consts::LN_2);
    if let Some(lphi) = log_phi {
        let lphi = tape.reshape(lphi, &[b])?;
        per_pair = tape.sub(per_pair, lphi)?;
    }
    tape.mean_all(per_pair)
}

/// `concat_m (w_m * h_m)` for modality matrices `hs` and weights `w` (`[M]`).
pub fn gmi_embed(tape: &mut Tape, hs: &[Var], weights: Var) -> Result<Var> {
    if tape.value(weights).numel() != hs.len() || hs.is_empty() {
        return Err(Error::shape("gmi_embed", tape.value(weights).shape(), &[hs.len()]));
    }
    let mut parts = Vec::with_capacity(hs.len());
    for (m, &h) in hs.iter().enumerate() {
        let w = tape.narrow_last(weights, m, 1)?;
        parts.push(tape.scale_by(h, w)?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat_last(&parts)
    }
}

/// Confidence-augmented per-modality losses: `sum_m L_m` where each pair's
/// probability is scaled by `phi = min(c1[i, m], c2[i, m])`.
pub fn ecia_loss(
    tape: &mut Tape,
    h1: &[Var],
    h2: &[Var],
    conf1: Var,
    conf2: Var,
    tau: f64,
    normalize: bool,
) -> Result<Var> {
    if h1.len() != h2.len() || h1.is_empty() {
        return Err(Error::invalid("ecia_loss: modality count mismatch"));
    }
    let mut total: Option<Var> = None;
    for m in 0..h1.len() {
        let c1 = tape.narrow_last(conf1, m, 1)?;
        let c2 = tape.narrow_last(conf2, m, 1)?;
        let phi = tape.minimum(c1, c2)?;
        let log_phi = tape.log(phi);
        let l = contrastive_loss(tape, h1[m], h2[m], tau, normalize, Some(log_phi))?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(total.expect("non-empty"))
}

/// `sum_m L_m` over fused modality outputs.
pub fn iir_loss(tape: &mut Tape, f1: &[Var], f2: &[Var], tau: f64, normalize: bool) -> Result<Var> {
    if f1.len() != f2.len() || f1.is_empty() {
        return Err(Error::invalid("iir_loss: modality count mismatch"));
    }
    let mut total: Option<Var> = None;
    for (&a, &b) in f1.iter().zip(f2) {
        let l = contrastive_loss(tape, a, b, tau, normalize, None)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Candidate pairs with consecutive mutual-nearest-neighbor counters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProbationCache {
    pub counters: BTreeMap<(usize, usize), usize>,
    pub probe_every: usize,
    pub promote_after: usize,
    promoted_left: HashSet<usize>,
    promoted_right: HashSet<usize>,
}

impl ProbationCache {
    pub fn new(probe_every: usize, promote_after: usize) -> Self {
        ProbationCache {
            probe_every,
            promote_after,
            ..Default::default()
        }
    }

    /// Applies one check: observed pairs enter at 1 or increment, cached
    /// pairs not observed are dropped, pairs reaching the threshold are
    /// promoted (returned and removed).
    pub fn observe(&mut self, mutual: &[(usize, usize)]) -> Vec<(usize, usize)> {
        let seen: HashSet<(usize, usize)> = mutual
            .iter()
            .copied()
            .filter(|(a, b)| !self.promoted_left.contains(a) && !self.promoted_right.contains(b))
            .collect();
        self.counters.retain(|p, _| seen.contains(p));
        for &p in &seen {
            *self.counters.entry(p).or_insert(0) += 1;
        }
        let ready: Vec<(usize, usize)> = self
            .counters
            .iter()
            .filter(|(_, &c)| c >= self.promote_after)
            .map(|(&p, _)| p)
            .collect();
        for p in &ready {
            self.counters.remove(p);
            self.promoted_left.insert(p.0);
            self.promoted_right.insert(p.1);
        }
        ready
    }

    pub fn is_promoted(&self, left: usize, right: usize) -> bool {
        self.promoted_left.contains(&left) || self.promoted_right.contains(&right)
    }
}

/// Mutual nearest neighbors between candidate rows of two embedding
/// matrices under cosine similarity. Ties resolve to the lower index.
pub fn mutual_nearest(emb1: &Tensor, left: &[usize], emb2: &Tensor, right: &[usize]) -> Result<Vec<(usize, usize)>> {
    if left.is_empty() || right.is_empty() {
        return Ok(Vec::new());
    }
    let sim = similarity(emb1, left, emb2, right)?;
    let argmax = |vals: &mut dyn Iterator<Item = f64>| {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, v) in vals.enumerate() {
            if v > best.1 {
                best = (i, v);
            }
        }
        best.0
    };
    let row_best: Vec<usize> = (0..left.len()).map(|i| argmax(&mut sim.row(i).iter().copied())).collect();
    let col_best: Vec<usize> = (0..right.len())
        .map(|j| argmax(&mut (0..left.len()).map(|i| sim.row(i)[j])))
        .collect();
    Ok(row_best
        .iter()
        .enumerate()
        .filter(|&(i, &j)| col_best[j] == i)
        .map(|(i, &j)| (left[i], right[j]))
        .collect())
}

/// One probation check at `epoch`: mutual nearest neighbors among the
/// not-yet-promoted candidates update the cache; promoted pairs are appended
/// to `seeds` and returned.
pub fn probe_and_promote(
    cache: &mut ProbationCache,
    emb1: &Tensor,
    emb2: &Tensor,
    left: &[usize],
    right: &[usize],
    epoch: usize,
    seeds: &mut Vec<(usize, usize)>,
) -> Result<Vec<(usize, usize)>> {
    if epoch % cache.probe_every != 0 {
        return Err(Error::invalid(format!("epoch {epoch} is not a probation check")));
    }
    let left: Vec<usize> = left.iter().copied().filter(|e| !cache.promoted_left.contains(e)).collect();
    let right: Vec<usize> = right.iter().copied().filter(|e| !cache.promoted_right.contains(e)).collect();
    let mutual = mutual_nearest(emb1, &left, emb2, &right)?;
    let promoted = cache.observe(&mutual);
    seeds.extend_from_slice(&promoted);
    Ok(promoted)
}

/// Two graphs with complete feature stores and their alignment.
#[derive(Clone, Debug)]
pub struct EaData {
    pub kg1: KnowledgeGraph,
    pub kg2: KnowledgeGraph,
    pub stores1: Vec<ModalityFeatureStore>,
    pub stores2: Vec<ModalityFeatureStore>,
    pub alignment: AlignmentSet,
    /// Seed for filling absent feature rows.
    pub impute_seed: u64,
}

impl EaData {
    /// Builds both graphs' relation and attribute bag-of-words features and
    /// pairs them with the given visual and surface stores.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        left: (&KnowledgeGraph, &[(usize, String)], Vec<ModalityFeatureStore>),
        right: (&KnowledgeGraph, &[(usize, String)], Vec<ModalityFeatureStore>),
        alignment: AlignmentSet,
        relation_dim: usize,
        attribute_dim: usize,
        encoding: BowEncoding,
        impute_seed: u64,
    ) -> Result<Self> {
        let side = |(kg, attrs, mut stores): (&KnowledgeGraph, &[(usize, String)], Vec<ModalityFeatureStore>)| -> Result<Vec<ModalityFeatureStore>> {
            let (r, a) = build_bow_features(kg, attrs, relation_dim, attribute_dim, encoding)?;
            stores.retain(|s| s.modality() != Modality::Relation && s.modality() != Modality::Attribute);
            stores.insert(0, a);
            stores.insert(0, r);
            Ok(stores)
        };
        let (kg1, kg2) = (left.0.clone(), right.0.clone());
        Ok(EaData {
            stores1: side(left)?,
            stores2: side(right)?,
            kg1,
            kg2,
            alignment,
            impute_seed,
        })
    }

    pub fn from_synthetic(s: &SyntheticEa, relation_dim: usize, attribute_dim: usize, impute_seed: u64) -> Result<Self> {
        let stores = |g: &EaGraph| vec![g.visual.clone(), g.surface.clone()];
        Self::from_parts(
            (&s.left.kg, &s.left.attributes, stores(&s.left)),
            (&s.right.kg, &s.right.attributes, stores(&s.right)),
            s.alignment.clone(),
            relation_dim,
            attribute_dim,
            BowEncoding::default(),
            impute_seed,
        )
    }

    /// Per non-structure modality, graph 1's rows stacked over graph 2's.
    /// Absent rows are imputed from statistics over both graphs.
    fn combined(&self, modalities: &[Modality]) -> Result<Vec<ModalityFeatureStore>> {
        let find = |stores: &[ModalityFeatureStore], m: Modality, side: usize| -> Result<ModalityFeatureStore> {
            let s = stores
                .iter()
                .find(|s| s.modality() == m)
                .ok_or_else(|| Error::invalid(format!("graph {side} has no {m} features")))?;
            Ok(s.clone())
        };
        modalities
            .iter()
            .filter(|m| **m != Modality::Structure)
            .map(|&m| {
                let a = find(&self.stores1, m, 1)?;
                let b = find(&self.stores2, m, 2)?;
                if a.rows() != self.kg1.num_entities() || b.rows() != self.kg2.num_entities() {
                    return Err(Error::invalid(format!("{m} feature rows do not match entity counts")));
                }
                impute_missing(&a.stack(&b)?, self.impute_seed)
            })
            .collect()
    }
}

/// All learnable state of an alignment model.
#[derive(Clone, Debug)]
pub struct EaModel {
    pub params: ParamStore,
    pub config: EaConfig,
    structure: Option<StructureEncoder>,
    projectors: Vec<ModalityProjector>,
    fusion: FusionWeights,
    gmi_logits: ParamId,
    pub n1: usize,
    pub n2: usize,
}

impl EaModel {
    /// `feature_dims` gives the raw width of each non-structure modality.
    pub fn new(config: &EaConfig, n1: usize, n2: usize, feature_dims: &[(Modality, usize)], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(seed);
        let mut params = ParamStore::new();
        let d = config.dim;
        let structure = if config.modalities.contains(&Modality::Structure) {
            Some(StructureEncoder::graph(
                &mut params,
                n1 + n2,
                d,
                config.gat_layers,
                config.gat_heads,
                config.gat_merge,
                &mut rng,
            )?)
        } else {
            None
        };
        if config.gat_merge == HeadMerge::Concat && config.gat_heads != 1 {
            return Err(Error::Config("concatenated GAT heads change the width; use mean merging".into()));
        }
        let mut projectors = Vec::new();
        for &m in config.modalities.iter().filter(|m| **m != Modality::Structure) {
            let (_, in_dim) = feature_dims
                .iter()
                .find(|(fm, _)| *fm == m)
                .ok_or_else(|| Error::Config(format!("no features for modality {m}")))?;
            projectors.push(ModalityProjector::new(&mut params, m, *in_dim, d, &mut rng));
        }
        let fusion = FusionWeights::new(&mut params, d, config.heads, config.ffn_dim, &mut rng)?;
        let gmi_logits = params.add("gmi.logits", Tensor::zeros(&[config.modalities.len()]));
        Ok(EaModel {
            params,
            config: config.clone(),
            structure,
            projectors,
            fusion,
            gmi_logits,
            n1,
            n2,
        })
    }

    /// Per-modality embeddings `[ids.len(), d]` in configured order.
    fn modality_embeddings(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ids: &[usize],
        features: &[Tensor],
        g_plan: &NoisePlan,
        edges: &EdgeList,
    ) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.config.modalities.len());
        let mut k = 0;
        for &m in &self.config.modalities {
            if m == Modality::Structure {
                let enc = self.structure.as_ref().expect("structure encoder exists when g is used");
                let x = g_plan.apply_var(tape, bound.var(enc.table))?;
                let h = enc.encode(tape, bound, x, Some(edges))?;
                out.push(tape.gather_rows(h, ids)?);
            } else {
                let x = tape.constant(features[k].gather_rows(ids)?);
                out.push(self.projectors[k].forward(tape, bound, x)?);
                k += 1;
            }
        }
        Ok(out)
    }

    pub fn gmi_weights(&self) -> Vec<f64> {
        let mut w = self.params.get(self.gmi_logits).data().to_vec();
        crate::numkit::softmax_in_place(&mut w);
        w
    }

    /// Total loss and its three components for a batch of pairs (combined
    /// ids).
    fn batch_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        pairs: &[(usize, usize)],
        features: &[Tensor],
        g_plan: &NoisePlan,
        edges: &EdgeList,
    ) -> Result<(Var, [Var; 3])> {
        let b = pairs.len();
        let ids: Vec<usize> = pairs.iter().map(|p| p.0).chain(pairs.iter().map(|p| p.1)).collect();
        let left: Vec<usize> = (0..b).collect();
        let right: Vec<usize> = (b..2 * b).collect();
        let hs = self.modality_embeddings(tape, bound, &ids, features, g_plan, edges)?;
        let cfg = &self.config;

        let w = tape.softmax_last(bound.var(self.gmi_logits))?;
        let gmi = gmi_embed(tape, &hs, w)?;
        let g1 = tape.gather_rows(gmi, &left)?;
        let g2 = tape.gather_rows(gmi, &right)?;
        let l_gmi = contrastive_loss(tape, g1, g2, cfg.tau, cfg.normalize, None)?;

        let stacked = stack_modalities(tape, &hs)?;
        let out = fuse(tape, bound, &self.fusion, stacked)?;
        let conf = if cfg.detach_confidence {
            tape.detach(out.confidence)
        } else {
            out.confidence
        };
        let c1 = tape.gather_rows(conf, &left)?;
        let c2 = tape.gather_rows(conf, &right)?;
        let mut h1 = Vec::new();
        let mut h2 = Vec::new();
        let mut f1 = Vec::new();
        let mut f2 = Vec::new();
        for (m, &h) in hs.iter().enumerate() {
            h1.push(tape.gather_rows(h, &left)?);
            h2.push(tape.gather_rows(h, &right)?);
            let f = modality_slice(tape, out.fused, m)?;
            f1.push(tape.gather_rows(f, &left)?);
            f2.push(tape.gather_rows(f, &right)?);
        }
        let l_ecia = ecia_loss(tape, &h1, &h2, c1, c2, cfg.tau, cfg.normalize)?;
        let l_iir = iir_loss(tape, &f1, &f2, cfg.tau, cfg.normalize)?;
        let s = tape.add(l_gmi, l_ecia)?;
        let total = tape.add(s, l_iir)?;
        Ok((total, [l_gmi, l_ecia, l_iir]))
    }

    /// Noise-free total loss and its three components for aligned pairs
    /// given in graph-local ids.
    pub fn clean_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        pairs: &[(usize, usize)],
        data: &EaData,
    ) -> Result<(Var, [Var; 3])> {
        let stores = data.combined(&self.config.modalities)?;
        let features: Vec<Tensor> = stores.iter().map(|s| s.matrix().clone()).collect();
        let edges = EdgeList::from_graph(&data.kg1).union(&EdgeList::from_graph(&data.kg2));
        let combined: Vec<(usize, usize)> = pairs.iter().map(|&(a, b)| (a, b + self.n1)).collect();
        self.batch_loss(tape, bound, &combined, &features, &NoisePlan::Identity, &edges)
    }

    /// Noise-free joint embeddings of graph 1 and graph 2 entities.
    pub fn embeddings(&self, data: &EaData) -> Result<(Tensor, Tensor)> {
        let stores = data.combined(&self.config.modalities)?;
        let features: Vec<Tensor> = stores.iter().map(|s| s.matrix().clone()).collect();
        let edges = EdgeList::from_graph(&data.kg1).union(&EdgeList::from_graph(&data.kg2));
        self.embeddings_with(&features, &edges)
    }

    fn embeddings_with(&self, features: &[Tensor], edges: &EdgeList) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let ids: Vec<usize> = (0..self.n1 + self.n2).collect();
        let hs = self.modality_embeddings(&mut tape, &bound, &ids, features, &NoisePlan::Identity, edges)?;
        let w = tape.softmax_last(bound.var(self.gmi_logits))?;
        let gmi = gmi_embed(&mut tape, &hs, w)?;
        let all = tape.value(gmi);
        let e1 = all.gather_rows(&(0..self.n1).collect::<Vec<_>>())?;
        let e2 = all.gather_rows(&(self.n1..self.n1 + self.n2).collect::<Vec<_>>())?;
        Ok((e1, e2))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EaPhase {
    Main,
    Iterative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EaEpoch {
    pub epoch: usize,
    pub phase: EaPhase,
    pub loss: f64,
    pub gmi: f64,
    pub ecia: f64,
    pub iir: f64,
    pub valid_hits1: Option<f64>,
    pub promoted: usize,
}

/// A promoted pair in graph-local ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Promotion {
    pub epoch: usize,
    pub left: usize,
    pub right: usize,
}

#[derive(Clone, Debug)]
pub struct EaTrained {
    pub model: EaModel,
    pub trace: Vec<EaEpoch>,
    pub promotions: Vec<Promotion>,
    /// Pairs held out from the seeds for early stopping (graph-local ids).
    pub valid: Vec<(usize, usize)>,
    /// Final training pairs including promotions (graph-local ids).
    pub train: Vec<(usize, usize)>,
}

impl EaTrained {
    pub fn evaluate(&self, data: &EaData) -> Result<RankResult> {
        let (e1, e2) = self.model.embeddings(data)?;
        eval_ea(&e1, &e2, &data.alignment.test, self.model.config.pool)
    }
}

/// Trains on `data.alignment.seed` (minus a validation hold-out) and, with
/// `iterative`, continues with probation-driven seed expansion.
pub fn train_mmea(data: &EaData, config: &EaConfig, seed: u64, iterative: bool) -> Result<EaTrained> {
    config.validate()?;
    data.alignment.validate()?;
    let (n1, n2) = (data.kg1.num_entities(), data.kg2.num_entities());
    let stores = data.combined(&config.modalities)?;
    let dims: Vec<(Modality, usize)> = stores.iter().map(|s| (s.modality(), s.dim())).collect();
    let mut model = EaModel::new(config, n1, n2, &dims, seed)?;
    let edges = EdgeList::from_graph(&data.kg1).union(&EdgeList::from_graph(&data.kg2));
    let clean: Vec<Tensor> = stores.iter().map(|s| s.matrix().clone()).collect();

    let mut seeds = data.alignment.seed.clone();
    seeds.shuffle(&mut stream(seed, tag::SPLIT, 1));
    let n_valid = (config.valid_ratio * seeds.len() as f64).round() as usize;
    let valid = seeds.split_off(seeds.len() - n_valid);
    let mut train = seeds;
    if train.is_empty() {
        return Err(Error::invalid("no training seed pairs"));
    }

    let mut opt = AdamW::new(&model.params, 0.9, 0.999, config.weight_decay);
    let mut trace = Vec::new();
    let mut promotions = Vec::new();
    let mut epoch = 0;

    let run_epoch = |model: &mut EaModel,
                         opt: &mut AdamW,
                         train: &[(usize, usize)],
                         schedule: &CosineWarmup,
                         step: &mut usize,
                         epoch: usize|
     -> Result<[f64; 4]> {
        let features: Vec<Tensor> = stores
            .iter()
            .map(|s| {
                config
                    .noise
                    .plan(s.modality(), s.matrix(), s.stats(), seed, epoch)?
                    .apply(s.matrix())
            })
            .collect::<Result<_>>()?;
        let g_plan = match &model.structure {
            Some(enc) => {
                let table = model.params.get(enc.table);
                config
                    .noise
                    .plan(Modality::Structure, table, &FeatureStats::of_matrix(table), seed, epoch)?
            }
            None => NoisePlan::Identity,
        };
        let mut order: Vec<(usize, usize)> = train.iter().map(|&(a, b)| (a, b + n1)).collect();
        order.shuffle(&mut stream(seed, tag::SHUFFLE, epoch as u64));
        let mut sums = [0.0; 4];
        for chunk in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let (loss, parts) = model.batch_loss(&mut tape, &bound, chunk, &features, &g_plan, &edges)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("loss {value} at step {step}"),
                });
            }
            let w = chunk.len() as f64 / order.len() as f64;
            sums[0] += w * value;
            for (k, p) in parts.iter().enumerate() {
                sums[k + 1] += w * tape.value(*p).item();
            }
            let mut grads = tape.backward(loss)?;
            let grads = model.params.collect_grads(&bound, &mut grads);
            opt.step(&mut model.params, &grads, schedule.lr(*step));
            *step += 1;
        }
        Ok(sums)
    };

    let validate = |model: &EaModel| -> Result<f64> {
        let (e1, e2) = model.embeddings_with(&clean, &edges)?;
        Ok(eval_ea(&e1, &e2, &valid, CandidatePool::Full)?.hits1)
    };

    // Main phase with early stopping on validation Hits@1.
    let steps = train.len().div_ceil(config.batch_size) * config.epochs;
    let schedule = CosineWarmup::new(config.lr, config.warmup_fraction, steps);
    let mut step = 0;
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut stale = 0;
    for e in 0..config.epochs {
        let [loss, gmi, ecia, iir] = run_epoch(&mut model, &mut opt, &train, &schedule, &mut step, epoch)?;
        let check = !valid.is_empty() && config.eval_every > 0 && ((e + 1) % config.eval_every == 0 || e + 1 == config.epochs);
        let valid_hits1 = if check { Some(validate(&model)?) } else { None };
        trace.push(EaEpoch {
            epoch,
            phase: EaPhase::Main,
            loss,
            gmi,
            ecia,
            iir,
            valid_hits1,
            promoted: 0,
        });
        epoch += 1;
        if let Some(h) = valid_hits1 {
            if best.as_ref().is_none_or(|(b, _)| h >= *b) {
                best = Some((h, model.params.snapshot()));
                stale = 0;
            } else {
                stale += 1;
                if config.patience > 0 && stale >= config.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, snap)) = best {
        model.params.restore(snap);
    }

    // Iterative phase: probation checks every `probe_every` epochs.
    if iterative && config.iterative_epochs > 0 {
        let mut cache = ProbationCache::new(config.probe_every, config.promote_after);
        let test_left: Vec<usize> = data.alignment.test.iter().map(|p| p.0).collect();
        let test_right: Vec<usize> = data.alignment.test.iter().map(|p| p.1).collect();
        let steps = train.len().div_ceil(config.batch_size) * config.iterative_epochs;
        let schedule = CosineWarmup::new(config.lr, config.warmup_fraction, steps);
        let mut step = 0;
        for e in 0..config.iterative_epochs {
            let [loss, gmi, ecia, iir] = run_epoch(&mut model, &mut opt, &train, &schedule, &mut step, epoch)?;
            let mut promoted = 0;
            if (e + 1) % config.probe_every == 0 {
                let (e1, e2) = model.embeddings_with(&clean, &edges)?;
                let new = probe_and_promote(&mut cache, &e1, &e2, &test_left, &test_right, e + 1, &mut train)?;
                promoted = new.len();
                promotions.extend(new.into_iter().map(|(left, right)| Promotion { epoch, left, right }));
            }
            trace.push(EaEpoch {
                epoch,
                phase: EaPhase::Iterative,
                loss,
                gmi,
                ecia,
                iir,
                valid_hits1: None,
                promoted,
            });
            epoch += 1;
        }
    }

    Ok(EaTrained {
        model,
        trace,
        promotions,
        valid,
        train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(e1: &Tensor, e2: &Tensor, tau: f64, normalize: bool) -> f64 {
        let mut tape = Tape::new();
        let a = tape.constant(e1.clone());
        let b = tape.constant(e2.clone());
        let l = contrastive_loss(&mut tape, a, b, tau, normalize, None).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let e = Tensor::from_rows(&[vec![0.3, -1.0]]).unwrap();
        assert!(loss_of(&e, &e, 0.1, true).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_pairs_hand_value() {
        let e = Tensor::eye(2);
        let p = std::f64::consts::E / (std::f64::consts::E + 2.0);
        assert!((loss_of(&e, &e, 1.0, false) + p.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_is_symmetric_in_the_graphs() {
        let mut rng = crate::rng::seeded(3);
        let a = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 4], 1.0, &mut rng);
        assert!((loss_of(&a, &b, 0.5, true) - loss_of(&b, &a, 0.5, true)).abs() < 1e-12);
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::eye(2));
        assert!(contrastive_loss(&mut tape, a, a, 0.0, true, None).is_err());
    }

    #[test]
    fn gmi_scales_blocks() {
        let mut tape = Tape::new();
        let h1 = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let h2 = tape.constant(Tensor::from_rows(&[vec![3.0]]).unwrap());
        let w = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let g = gmi_embed(&mut tape, &[h1, h2], w).unwrap();
        assert_eq!(tape.value(g).data(), &[1.0, 2.0, 6.0]);
    }

    #[test]
    fn cache_promotes_after_consecutive_checks_and_resets_on_break() {
        let mut c = ProbationCache::new(5, 10);
        for _ in 0..4 {
            assert!(c.observe(&[(1, 2)]).is_empty());
        }
        assert!(c.observe(&[]).is_empty());
        assert!(c.counters.is_empty());
        for _ in 0..9 {
            assert!(c.observe(&[(1, 2)]).is_empty());
        }
        assert_eq!(c.counters[&(1, 2)], 9);
        assert_eq!(c.observe(&[(1, 2)]), vec![(1, 2)]);
        assert!(c.counters.is_empty());
        assert!(c.observe(&[(1, 2)]).is_empty());
        assert!(c.counters.is_empty());
    }
}
