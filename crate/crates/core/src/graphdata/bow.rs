//! Fixed-length bag-of-words features over relations and attribute keys.

use std::collections::HashMap;

use crate::error::Result;
use crate::graphdata::features::ModalityFeatureStore;
use crate::graphdata::kg::KnowledgeGraph;
use crate::modality::Modality;
use crate::numkit::Tensor;

/// How a ranked item contributes to an entity's vector position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BowWeight {
    Count,
    Presence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BowEncoding {
    pub relation: BowWeight,
    pub attribute: BowWeight,
}

impl Default for BowEncoding {
    fn default() -> Self {
        BowEncoding {
            relation: BowWeight::Count,
            attribute: BowWeight::Presence,
        }
    }
}

impl BowEncoding {
    /// The opposite reading: relation presence, attribute counts.
    pub fn swapped() -> Self {
        BowEncoding {
            relation: BowWeight::Presence,
            attribute: BowWeight::Count,
        }
    }
}

/// Ranks keys by descending frequency, ties by first appearance.
fn rank_by_frequency<K: Eq + std::hash::Hash + Clone>(items: impl Iterator<Item = K>) -> HashMap<K, usize> {
    let mut counts: HashMap<K, (usize, usize)> = HashMap::new();
    for (order, k) in items.enumerate() {
        counts.entry(k).or_insert((0, order)).0 += 1;
    }
    let mut ranked: Vec<(K, (usize, usize))> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
    ranked.into_iter().enumerate().map(|(rank, (k, _))| (k, rank)).collect()
}

fn encode(matrix: &mut Tensor, entity: usize, pos: usize, weight: BowWeight) {
    let cell = &mut matrix.row_mut(entity)[pos];
    match weight {
        BowWeight::Count => *cell += 1.0,
        BowWeight::Presence => *cell = 1.0,
    }
}

/// Relation and attribute bag-of-words stores over `kg`'s training triples.
///
/// An entity's relation vector counts the triples (as head or tail) that use
/// the k-th most frequent relation at position k; items ranked at or beyond
/// the vector length are dropped.
pub fn build_bow_features(
    kg: &KnowledgeGraph,
    attribute_triples: &[(usize, String)],
    relation_dim: usize,
    attribute_dim: usize,
    encoding: BowEncoding,
) -> Result<(ModalityFeatureStore, ModalityFeatureStore)> {
    let n = kg.num_entities();

    let rel_rank = rank_by_frequency(kg.train.iter().map(|t| t.relation));
    let mut rel = Tensor::zeros(&[n, relation_dim]);
    for t in &kg.train {
        let pos = rel_rank[&t.relation];
        if pos < relation_dim {
            encode(&mut rel, t.head, pos, encoding.relation);
            encode(&mut rel, t.tail, pos, encoding.relation);
        }
    }

    let attr_rank = rank_by_frequency(attribute_triples.iter().map(|(_, a)| a.as_str()));
    let mut attr = Tensor::zeros(&[n, attribute_dim]);
    for (e, a) in attribute_triples {
        let pos = attr_rank[a.as_str()];
        if pos < attribute_dim {
            encode(&mut attr, *e, pos, encoding.attribute);
        }
    }

    Ok((
        ModalityFeatureStore::dense(Modality::Relation, rel)?,
        ModalityFeatureStore::dense(Modality::Attribute, attr)?,
    ))
}
