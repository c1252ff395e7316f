//! Per-modality entity embeddings: feature projectors, structure encoders
//! (plain table or graph attention) and relation phase tables.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graphdata::{KnowledgeGraph, ModalityFeatureStore};
use crate::modality::Modality;
use crate::numkit::{fan_in_uniform, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::{stream, tag, Rng as StreamRng};

/// Fully connected map `x W + b` from a modality's raw features to the shared
/// embedding width.
#[derive(Clone, Debug)]
pub struct ModalityProjector {
    pub modality: Modality,
    pub weight: ParamId,
    pub bias: ParamId,
    in_dim: usize,
    out_dim: usize,
}

impl ModalityProjector {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamStore,
        modality: Modality,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let tag = modality.tag();
        let weight = params.add(format!("proj.{tag}.weight"), fan_in_uniform(&[in_dim, out_dim], in_dim, rng));
        let bias = params.add(format!("proj.{tag}.bias"), Tensor::zeros(&[out_dim]));
        ModalityProjector {
            modality,
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.in_dim {
            return Err(Error::shape("projector", tape.value(x).shape(), &[self.in_dim, self.out_dim]));
        }
        let xw = tape.matmul(x, bound.var(self.weight))?;
        tape.add_row(xw, bound.var(self.bias))
    }
}

/// Projects a complete feature store, `h = x W + b`, with the features
/// entering the tape as constants.
pub fn embed_modality(
    tape: &mut Tape,
    bound: &Bound,
    store: &ModalityFeatureStore,
    projector: &ModalityProjector,
) -> Result<Var> {
    if !store.is_complete() {
        return Err(Error::invalid(format!(
            "modality {} has absent rows; impute before embedding",
            store.modality()
        )));
    }
    if store.dim() != projector.in_dim {
        return Err(Error::shape("embed_modality", store.matrix().shape(), &[projector.in_dim]));
    }
    let x = tape.constant(store.matrix().clone());
    projector.forward(tape, bound, x)
}

/// Fills absent rows with per-dimension draws from `Normal(mu, phi^2)` of
/// the present rows. The presence mask keeps recording the original absence.
pub fn impute_missing(store: &ModalityFeatureStore, seed: u64) -> Result<ModalityFeatureStore> {
    if store.num_present() == 0 {
        return Err(Error::invalid(format!("modality {} has no present rows to impute from", store.modality())));
    }
    let mut out = store.clone();
    if store.num_present() == store.rows() {
        return Ok(out);
    }
    let stats = store.stats().clone();
    let normals: Vec<Normal<f64>> = stats
        .mean
        .iter()
        .zip(&stats.std)
        .map(|(&m, &s)| Normal::new(m, s).map_err(|e| Error::invalid(format!("imputation: {e}"))))
        .collect::<Result<_>>()?;
    let mut rng = stream(seed, tag::IMPUTE, store.modality() as u64);
    out.fill_absent(|_, row| {
        for (v, n) in row.iter_mut().zip(&normals) {
            *v = n.sample(&mut rng);
        }
    });
    Ok(out)
}

/// Directed edge list with self-loops; messages flow `src -> dst`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeList {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub nodes: usize,
}

impl EdgeList {
    /// Both directions of every undirected neighbor pair plus one self-loop
    /// per node, so every node attends to at least itself.
    pub fn from_adjacency(adjacency: &[Vec<usize>]) -> Self {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for (i, nbrs) in adjacency.iter().enumerate() {
            src.push(i);
            dst.push(i);
            for &j in nbrs {
                src.push(j);
                dst.push(i);
            }
        }
        EdgeList {
            src,
            dst,
            nodes: adjacency.len(),
        }
    }

    pub fn from_graph(kg: &KnowledgeGraph) -> Self {
        Self::from_adjacency(&kg.adjacency())
    }

    /// Disjoint union of two graphs; the second graph's ids are offset.
    pub fn union(&self, other: &EdgeList) -> Self {
        let off = self.nodes;
        EdgeList {
            src: self.src.iter().copied().chain(other.src.iter().map(|s| s + off)).collect(),
            dst: self.dst.iter().copied().chain(other.dst.iter().map(|d| d + off)).collect(),
            nodes: self.nodes + other.nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMerge {
    Mean,
    Concat,
}

/// One graph attention layer with a diagonal linear map shared by all heads.
#[derive(Clone, Debug)]
pub struct GatLayer {
    pub weight: ParamId,
    pub attn_src: ParamId,
    pub attn_dst: ParamId,
    pub heads: usize,
    pub slope: f64,
}

impl GatLayer {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        GatLayer {
            weight: params.add(format!("{name}.weight"), Tensor::ones(&[dim])),
            attn_src: params.add(format!("{name}.attn_src"), fan_in_uniform(&[heads, dim], dim, rng)),
            attn_dst: params.add(format!("{name}.attn_dst"), fan_in_uniform(&[heads, dim], dim, rng)),
            heads,
            slope: 0.2,
        }
    }

    /// Returns the layer output and the per-head edge attention vectors.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        edges: &EdgeList,
        merge: HeadMerge,
    ) -> Result<(Var, Vec<Var>)> {
        let z = tape.mul_row(x, bound.var(self.weight))?;
        let a_src = tape.transpose(bound.var(self.attn_src))?;
        let a_dst = tape.transpose(bound.var(self.attn_dst))?;
        let s_src = tape.matmul(z, a_src)?;
        let s_dst = tape.matmul(z, a_dst)?;
        let e_src = tape.gather_rows(s_src, &edges.src)?;
        let e_dst = tape.gather_rows(s_dst, &edges.dst)?;
        let logits = tape.add(e_src, e_dst)?;
        let logits = tape.leaky_relu(logits, self.slope);
        let messages = tape.gather_rows(z, &edges.src)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut alphas = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let col = tape.narrow_last(logits, h, 1)?;
            let alpha = tape.segment_softmax(col, &edges.dst, edges.nodes)?;
            let weighted = tape.mul_col(messages, alpha)?;
            outs.push(tape.scatter_add_rows(weighted, &edges.dst, edges.nodes)?);
            alphas.push(alpha);
        }
        let out = match merge {
            HeadMerge::Concat => tape.concat_last(&outs)?,
            HeadMerge::Mean => {
                let mut acc = outs[0];
                for &o in &outs[1..] {
                    acc = tape.add(acc, o)?;
                }
                tape.scale(acc, 1.0 / self.heads as f64)
            }
        };
        Ok((out, alphas))
    }
}

#[derive(Clone, Debug)]
pub enum StructureKind {
    /// Table followed by a fully connected map; no adjacency involved.
    Table { fc: ModalityProjector },
    /// Table followed by stacked graph attention layers.
    Graph { layers: Vec<GatLayer>, merge: HeadMerge },
}

/// Learnable structural embedding table `x^g` plus its encoder.
#[derive(Clone, Debug)]
pub struct StructureEncoder {
    pub table: ParamId,
    pub kind: StructureKind,
    dim: usize,
}

impl StructureEncoder {
    pub fn table_fc<R: Rng + ?Sized>(params: &mut ParamStore, entities: usize, dim: usize, rng: &mut R) -> Self {
        let table = params.add("struct.table", Tensor::randn(&[entities, dim], 1.0 / (dim as f64).sqrt(), rng));
        let fc = ModalityProjector::new(params, Modality::Structure, dim, dim, rng);
        StructureEncoder {
            table,
            kind: StructureKind::Table { fc },
            dim,
        }
    }

    /// Graph attention encoder. With [`HeadMerge::Concat`] every layer but
    /// the last sees `heads * dim` inputs, so concat requires `layers == 1`
    /// to keep the diagonal map square; mean merging has no such limit.
    pub fn graph<R: Rng + ?Sized>(
        params: &mut ParamStore,
        entities: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        merge: HeadMerge,
        rng: &mut R,
    ) -> Result<Self> {
        if layers == 0 || heads == 0 {
            return Err(Error::Config("graph encoder needs >= 1 layer and >= 1 head".into()));
        }
        if merge == HeadMerge::Concat && layers > 1 {
            return Err(Error::Config("concatenated heads are only supported with a single layer".into()));
        }
        let table = params.add("struct.table", Tensor::randn(&[entities, dim], 1.0 / (dim as f64).sqrt(), rng));
        let layers = (0..layers)
            .map(|l| GatLayer::new(params, &format!("struct.gat{l}"), dim, heads, rng))
            .collect();
        Ok(StructureEncoder {
            table,
            kind: StructureKind::Graph { layers, merge },
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn needs_graph(&self) -> bool {
        matches!(self.kind, StructureKind::Graph { .. })
    }

    /// Encodes `x` (the table, possibly noised). Table mode rejects edges,
    /// graph mode requires them.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, x: Var, edges: Option<&EdgeList>) -> Result<Var> {
        match (&self.kind, edges) {
            (StructureKind::Table { fc }, None) => fc.forward(tape, bound, x),
            (StructureKind::Table { .. }, Some(_)) => Err(Error::invalid("table structure encoder takes no adjacency")),
            (StructureKind::Graph { .. }, None) => Err(Error::invalid("graph structure encoder requires adjacency")),
            (StructureKind::Graph { layers, merge }, Some(edges)) => {
                if tape.value(x).shape()[0] != edges.nodes {
                    return Err(Error::shape("encode_structure", tape.value(x).shape(), &[edges.nodes]));
                }
                let mut h = x;
                for (l, layer) in layers.iter().enumerate() {
                    h = layer.forward(tape, bound, h, edges, *merge)?.0;
                    if l + 1 < layers.len() {
                        h = tape.elu(h);
                    }
                }
                Ok(h)
            }
        }
    }
}

/// Relation rotation phases, one per complex coordinate (half the entity
/// width).
#[derive(Clone, Debug)]
pub struct RelationEmbedding {
    pub phases: ParamId,
    half_dim: usize,
}

impl RelationEmbedding {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamStore, relations: usize, entity_dim: usize, rng: &mut R) -> Result<Self> {
        if entity_dim % 2 != 0 || entity_dim == 0 {
            return Err(Error::Config(format!("entity dimension {entity_dim} must be even and positive")));
        }
        let half_dim = entity_dim / 2;
        let phases = params.add(
            "rel.phases",
            Tensor::uniform(&[relations.max(1), half_dim], -std::f64::consts::PI, std::f64::consts::PI, rng),
        );
        Ok(RelationEmbedding { phases, half_dim })
    }

    pub fn half_dim(&self) -> usize {
        self.half_dim
    }
}

/// Deterministic initialization stream for a model built from `seed`.
pub fn init_rng(seed: u64) -> StreamRng {
    stream(seed, tag::INIT, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphdata::FeatureStats;
    use crate::rng::seeded;

    fn single_layer(params: &mut ParamStore, dim: usize, heads: usize) -> GatLayer {
        GatLayer::new(params, "gat", dim, heads, &mut seeded(0))
    }

    #[test]
    fn identity_projection_returns_input() {
        let mut params = ParamStore::new();
        let proj = ModalityProjector::new(&mut params, Modality::Visual, 3, 3, &mut seeded(0));
        *params.get_mut(proj.weight) = Tensor::eye(3);
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let store = ModalityFeatureStore::dense(Modality::Visual, x.clone()).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let h = embed_modality(&mut tape, &bound, &store, &proj).unwrap();
        assert_eq!(tape.value(h), &x);
    }

    #[test]
    fn zero_row_yields_bias() {
        let mut params = ParamStore::new();
        let proj = ModalityProjector::new(&mut params, Modality::Visual, 2, 3, &mut seeded(1));
        *params.get_mut(proj.bias) = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let store = ModalityFeatureStore::dense(Modality::Visual, Tensor::zeros(&[1, 2])).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let h = embed_modality(&mut tape, &bound, &store, &proj).unwrap();
        assert_eq!(tape.value(h).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn projection_rejects_absent_rows_and_dim_mismatch() {
        let mut params = ParamStore::new();
        let proj = ModalityProjector::new(&mut params, Modality::Visual, 2, 2, &mut seeded(1));
        let partial = ModalityFeatureStore::new(Modality::Visual, Tensor::zeros(&[2, 2]), vec![true, false]).unwrap();
        let wide = ModalityFeatureStore::dense(Modality::Visual, Tensor::zeros(&[2, 3])).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        assert!(embed_modality(&mut tape, &bound, &partial, &proj).is_err());
        assert!(embed_modality(&mut tape, &bound, &wide, &proj).is_err());
    }

    #[test]
    fn imputation_leaves_complete_store_unchanged() {
        let store = ModalityFeatureStore::dense(Modality::Visual, Tensor::full(&[3, 2], 1.5)).unwrap();
        let out = impute_missing(&store, 4).unwrap();
        assert_eq!(out.matrix(), store.matrix());
    }

    #[test]
    fn imputation_needs_a_present_row() {
        let store = ModalityFeatureStore::new(Modality::Visual, Tensor::zeros(&[2, 2]), vec![false, false]).unwrap();
        assert!(impute_missing(&store, 0).is_err());
    }

    #[test]
    fn imputed_rows_follow_observed_statistics() {
        let n = 10_001;
        let mut m = Tensor::zeros(&[n, 1]);
        m.row_mut(0)[0] = -1.0;
        m.row_mut(1)[0] = 1.0;
        let mut present = vec![false; n];
        present[0] = true;
        present[1] = true;
        let store = ModalityFeatureStore::new(Modality::Visual, m, present.clone()).unwrap();
        assert_eq!(store.stats(), &FeatureStats { mean: vec![0.0], std: vec![1.0] });
        let out = impute_missing(&store, 11).unwrap();
        assert_eq!(out.present(), &present[..]);
        assert!(out.is_complete());
        let imputed: Vec<f64> = (2..n).map(|r| out.matrix().row(r)[0]).collect();
        let mean = imputed.iter().sum::<f64>() / imputed.len() as f64;
        assert!(mean.abs() < 4.0 / (imputed.len() as f64).sqrt(), "{mean}");
        let again = impute_missing(&store, 11).unwrap();
        assert_eq!(again.matrix(), out.matrix());
    }

    #[test]
    fn self_loop_only_node_gets_its_own_scaled_input() {
        let mut params = ParamStore::new();
        let layer = single_layer(&mut params, 3, 2);
        *params.get_mut(layer.weight) = Tensor::vector(vec![2.0, 0.5, -1.0]);
        let edges = EdgeList::from_adjacency(&[vec![]]);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 4.0, 3.0]]).unwrap());
        let (out, alphas) = layer.forward(&mut tape, &bound, x, &edges, HeadMerge::Mean).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 2.0, -3.0]);
        for a in alphas {
            assert_eq!(tape.value(a).data(), &[1.0]);
        }
    }

    #[test]
    fn table_mode_with_identity_fc_is_the_table() {
        let mut params = ParamStore::new();
        let enc = StructureEncoder::table_fc(&mut params, 4, 3, &mut seeded(2));
        let StructureKind::Table { fc } = &enc.kind else { unreachable!() };
        *params.get_mut(fc.weight) = Tensor::eye(3);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = bound.var(enc.table);
        let h = enc.encode(&mut tape, &bound, x, None).unwrap();
        assert_eq!(tape.value(h), params.get(enc.table));
        let edges = EdgeList::from_adjacency(&[vec![], vec![], vec![], vec![]]);
        assert!(enc.encode(&mut tape, &bound, x, Some(&edges)).is_err());
    }

    #[test]
    fn graph_mode_requires_adjacency() {
        let mut params = ParamStore::new();
        let enc = StructureEncoder::graph(&mut params, 2, 2, 2, 2, HeadMerge::Mean, &mut seeded(2)).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = bound.var(enc.table);
        assert!(enc.encode(&mut tape, &bound, x, None).is_err());
        assert_eq!(params.get(match &enc.kind {
            StructureKind::Graph { layers, .. } => layers[0].weight,
            _ => unreachable!(),
        }).numel(), 2);
    }

    #[test]
    fn attention_sums_to_one_per_node() {
        let mut params = ParamStore::new();
        let layer = single_layer(&mut params, 4, 2);
        let adjacency = vec![vec![1, 2], vec![0], vec![0, 3], vec![2]];
        let edges = EdgeList::from_adjacency(&adjacency);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.constant(Tensor::randn(&[4, 4], 1.0, &mut seeded(3)));
        let (_, alphas) = layer.forward(&mut tape, &bound, x, &edges, HeadMerge::Mean).unwrap();
        for a in alphas {
            let mut sums = [0.0; 4];
            for (v, &d) in tape.value(a).data().iter().zip(&edges.dst) {
                sums[d] += v;
            }
            for s in sums {
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn odd_relation_width_is_rejected() {
        let mut params = ParamStore::new();
        assert!(RelationEmbedding::new(&mut params, 3, 5, &mut seeded(0)).is_err());
        let rel = RelationEmbedding::new(&mut params, 3, 6, &mut seeded(0)).unwrap();
        assert_eq!(params.get(rel.phases).shape(), &[3, 3]);
    }
}
