//! Desk-scale synthetic datasets.
//!
//! * [`generate_ea`] builds a graph, an isomorphic copy with permuted entity
//!   ids, and copied features with optional Gaussian jitter.
//! * [`generate_kgc`] builds a graph whose relations are cyclic shifts of the
//!   entity ring (exactly representable as rotations) with features that are
//!   noisy linear views of each entity's ring position.

use std::collections::HashSet;
use std::f64::consts::PI;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graphdata::alignment::AlignmentSet;
use crate::graphdata::features::ModalityFeatureStore;
use crate::graphdata::kg::{KnowledgeGraph, Triple, Vocab};
use crate::modality::Modality;
use crate::numkit::Tensor;
use crate::rng::{stream, tag};

#[derive(Clone, Debug, PartialEq)]
pub struct EaSyntheticSpec {
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
    pub attributes: usize,
    pub attributes_per_entity: usize,
    pub visual_dim: usize,
    pub surface_dim: usize,
    /// Std of Gaussian noise added to the second graph's feature copies.
    pub jitter: f64,
    /// Fraction of entities per graph that have visual features.
    pub image_ratio: f64,
    /// Fraction of aligned pairs used as training seeds.
    pub seed_ratio: f64,
}

impl Default for EaSyntheticSpec {
    fn default() -> Self {
        EaSyntheticSpec {
            entities: 200,
            relations: 12,
            triples: 800,
            attributes: 40,
            attributes_per_entity: 4,
            visual_dim: 32,
            surface_dim: 16,
            jitter: 0.0,
            image_ratio: 1.0,
            seed_ratio: 0.3,
        }
    }
}

/// One side of an entity-alignment dataset.
#[derive(Clone, Debug)]
pub struct EaGraph {
    pub kg: KnowledgeGraph,
    pub attributes: Vec<(usize, String)>,
    pub visual: ModalityFeatureStore,
    pub surface: ModalityFeatureStore,
}

#[derive(Clone, Debug)]
pub struct SyntheticEa {
    pub left: EaGraph,
    pub right: EaGraph,
    pub alignment: AlignmentSet,
}

fn check_ratio(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) || v.is_nan() {
        return Err(Error::invalid(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

/// Rounds through `f32` so written feature files reload bit-exactly.
fn f32_exact(t: Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

fn presence_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Vec<bool> {
    let k = (ratio * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut present = vec![false; n];
    for &i in &idx[..k] {
        present[i] = true;
    }
    present
}

fn zero_absent(mut m: Tensor, present: &[bool]) -> Tensor {
    for (r, &p) in present.iter().enumerate() {
        if !p {
            m.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    m
}

pub fn generate_ea(spec: &EaSyntheticSpec, seed: u64) -> Result<SyntheticEa> {
    check_ratio("image_ratio", spec.image_ratio)?;
    check_ratio("seed_ratio", spec.seed_ratio)?;
    if spec.entities < 2 || spec.relations == 0 {
        return Err(Error::invalid("synthetic graph needs >= 2 entities and >= 1 relation"));
    }
    let n = spec.entities;
    let max_triples = n * (n - 1) * spec.relations;
    if spec.triples > max_triples {
        return Err(Error::invalid(format!("{} triples exceed the {max_triples} possible", spec.triples)));
    }
    let mut rng = stream(seed, tag::SYNTHETIC, 0);

    // Left graph: a random spanning path keeps every entity connected, the
    // remaining triples are uniform.
    let relations = Vocab::from_names((0..spec.relations).map(|r| format!("rel{r}")))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut seen = HashSet::new();
    let mut triples = Vec::with_capacity(spec.triples);
    for w in order.windows(2) {
        if triples.len() >= spec.triples {
            break;
        }
        let t = Triple::new(w[0], rng.random_range(0..spec.relations), w[1]);
        seen.insert(t);
        triples.push(t);
    }
    while triples.len() < spec.triples {
        let h = rng.random_range(0..n);
        let t = rng.random_range(0..n);
        if h == t {
            continue;
        }
        let tr = Triple::new(h, rng.random_range(0..spec.relations), t);
        if seen.insert(tr) {
            triples.push(tr);
        }
    }

    let attr_names: Vec<String> = (0..spec.attributes.max(1)).map(|a| format!("attr{a}")).collect();
    let mut attributes = Vec::new();
    for e in 0..n {
        let k = spec.attributes_per_entity.min(attr_names.len());
        for a in attr_names.choose_multiple(&mut rng, k) {
            attributes.push((e, a.clone()));
        }
    }

    let visual = f32_exact(Tensor::randn(&[n, spec.visual_dim], 1.0, &mut rng));
    let surface = f32_exact(Tensor::randn(&[n, spec.surface_dim], 1.0, &mut rng));

    // Right graph: entity i of the left graph becomes perm[i].
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut inv = vec![0; n];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let jitter = |m: &Tensor, rng: &mut crate::rng::Rng| -> Tensor {
        let mut out = m.gather_rows(&inv).expect("permutation in range");
        if spec.jitter > 0.0 {
            let noise = Tensor::randn(out.shape(), spec.jitter, rng);
            out.add_assign(&noise);
        }
        f32_exact(out)
    };
    let visual_r = jitter(&visual, &mut rng);
    let surface_r = jitter(&surface, &mut rng);

    let present_l = presence_mask(n, spec.image_ratio, &mut rng);
    let present_r = presence_mask(n, spec.image_ratio, &mut rng);

    let left_kg = KnowledgeGraph {
        entities: Vocab::from_names((0..n).map(|i| format!("a/{i}")))?,
        relations: relations.clone(),
        train: triples.clone(),
        ..Default::default()
    };
    let right_kg = KnowledgeGraph {
        entities: Vocab::from_names((0..n).map(|i| format!("b/{i}")))?,
        relations,
        train: triples
            .iter()
            .map(|t| Triple::new(perm[t.head], t.relation, perm[t.tail]))
            .collect(),
        ..Default::default()
    };
    let right_attrs = attributes.iter().map(|(e, a)| (perm[*e], a.clone())).collect();

    let pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, perm[i])).collect();
    let alignment = AlignmentSet::split(&pairs, spec.seed_ratio, &mut stream(seed, tag::SPLIT, 0))?;

    Ok(SyntheticEa {
        left: EaGraph {
            kg: left_kg,
            attributes,
            visual: ModalityFeatureStore::new(Modality::Visual, zero_absent(visual, &present_l), present_l)?,
            surface: ModalityFeatureStore::dense(Modality::Surface, surface)?,
        },
        right: EaGraph {
            kg: right_kg,
            attributes: right_attrs,
            visual: ModalityFeatureStore::new(Modality::Visual, zero_absent(visual_r, &present_r), present_r)?,
            surface: ModalityFeatureStore::dense(Modality::Surface, surface_r)?,
        },
        alignment,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KgcSyntheticSpec {
    pub entities: usize,
    pub relations: usize,
    /// Ring frequencies used to build each entity's latent position.
    pub frequencies: usize,
    pub visual_dim: usize,
    pub surface_dim: usize,
    /// Std of Gaussian noise added to the feature views.
    pub feature_noise: f64,
    pub image_ratio: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

impl Default for KgcSyntheticSpec {
    fn default() -> Self {
        KgcSyntheticSpec {
            entities: 20,
            relations: 2,
            frequencies: 2,
            visual_dim: 16,
            surface_dim: 16,
            feature_noise: 0.05,
            image_ratio: 1.0,
            valid_fraction: 0.0,
            test_fraction: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticKgc {
    pub kg: KnowledgeGraph,
    pub visual: ModalityFeatureStore,
    pub surface: ModalityFeatureStore,
}

pub fn generate_kgc(spec: &KgcSyntheticSpec, seed: u64) -> Result<SyntheticKgc> {
    check_ratio("image_ratio", spec.image_ratio)?;
    check_ratio("valid_fraction", spec.valid_fraction)?;
    check_ratio("test_fraction", spec.test_fraction)?;
    if spec.valid_fraction + spec.test_fraction >= 1.0 {
        return Err(Error::invalid("valid + test fractions must leave training triples"));
    }
    let n = spec.entities;
    if n < 3 || spec.relations == 0 || spec.relations > n - 1 {
        return Err(Error::invalid("need >= 3 entities and 1..entities-1 relations"));
    }
    let mut rng = stream(seed, tag::SYNTHETIC, 1);

    let mut shifts: Vec<usize> = (1..n).collect();
    shifts.shuffle(&mut rng);
    shifts.truncate(spec.relations);

    let mut triples: Vec<Triple> = (0..spec.relations)
        .flat_map(|r| (0..n).map(move |e| (r, e)))
        .map(|(r, e)| Triple::new(e, r, (e + shifts[r]) % n))
        .collect();
    triples.shuffle(&mut rng);
    let n_valid = (spec.valid_fraction * triples.len() as f64).round() as usize;
    let n_test = (spec.test_fraction * triples.len() as f64).round() as usize;
    let test = triples.split_off(triples.len() - n_test);
    let valid = triples.split_off(triples.len() - n_valid);

    let freqs = spec.frequencies.max(1);
    let mut latent = Tensor::zeros(&[n, 2 * freqs]);
    for e in 0..n {
        for k in 0..freqs {
            let angle = 2.0 * PI * (k + 1) as f64 * e as f64 / n as f64;
            latent.row_mut(e)[2 * k] = angle.cos();
            latent.row_mut(e)[2 * k + 1] = angle.sin();
        }
    }
    let mut view = |dim: usize| -> Result<Tensor> {
        let proj = Tensor::randn(&[2 * freqs, dim], 1.0 / (2.0 * freqs as f64).sqrt(), &mut rng);
        let mut out = latent.matmul(&proj)?;
        if spec.feature_noise > 0.0 {
            out.add_assign(&Tensor::randn(out.shape(), spec.feature_noise, &mut rng));
        }
        Ok(f32_exact(out))
    };
    let visual = view(spec.visual_dim)?;
    let surface = view(spec.surface_dim)?;
    let present = presence_mask(n, spec.image_ratio, &mut rng);

    let kg = KnowledgeGraph {
        entities: Vocab::from_names((0..n).map(|i| format!("e{i}")))?,
        relations: Vocab::from_names((0..spec.relations).map(|r| format!("r{r}")))?,
        train: triples,
        valid,
        test,
    };
    kg.validate()?;
    Ok(SyntheticKgc {
        kg,
        visual: ModalityFeatureStore::new(Modality::Visual, zero_absent(visual, &present), present)?,
        surface: ModalityFeatureStore::dense(Modality::Surface, surface)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_jitter_full_images_copy_features_exactly() {
        let spec = EaSyntheticSpec {
            entities: 30,
            triples: 80,
            ..Default::default()
        };
        let data = generate_ea(&spec, 3).unwrap();
        for &(a, b) in data.alignment.seed.iter().chain(&data.alignment.test) {
            assert_eq!(data.left.visual.matrix().row(a), data.right.visual.matrix().row(b));
            assert_eq!(data.left.surface.matrix().row(a), data.right.surface.matrix().row(b));
        }
    }

    #[test]
    fn image_ratio_controls_presence() {
        let spec = EaSyntheticSpec {
            entities: 53,
            triples: 100,
            image_ratio: 0.4,
            ..Default::default()
        };
        let data = generate_ea(&spec, 9).unwrap();
        for side in [&data.left, &data.right] {
            let k = side.visual.num_present() as f64;
            assert!((k - 0.4 * 53.0).abs() <= 1.0, "{k}");
        }
    }

    #[test]
    fn right_graph_is_isomorphic() {
        let spec = EaSyntheticSpec {
            entities: 25,
            triples: 60,
            ..Default::default()
        };
        let data = generate_ea(&spec, 5).unwrap();
        let map: std::collections::HashMap<usize, usize> = data
            .alignment
            .seed
            .iter()
            .chain(&data.alignment.test)
            .copied()
            .collect();
        let right: HashSet<Triple> = data.right.kg.train.iter().copied().collect();
        assert_eq!(right.len(), data.left.kg.train.len());
        for t in &data.left.kg.train {
            assert!(right.contains(&Triple::new(map[&t.head], t.relation, map[&t.tail])));
        }
    }

    #[test]
    fn ratios_outside_unit_interval_are_rejected() {
        let bad = EaSyntheticSpec {
            image_ratio: 1.2,
            ..Default::default()
        };
        assert!(generate_ea(&bad, 0).is_err());
        let bad = EaSyntheticSpec {
            seed_ratio: -0.1,
            ..Default::default()
        };
        assert!(generate_ea(&bad, 0).is_err());
    }

    #[test]
    fn kgc_relations_are_ring_shifts() {
        let data = generate_kgc(&KgcSyntheticSpec::default(), 1).unwrap();
        assert_eq!(data.kg.train.len(), 40);
        let mut shift = std::collections::HashMap::new();
        for t in &data.kg.train {
            let s = (t.tail + 20 - t.head) % 20;
            assert_eq!(*shift.entry(t.relation).or_insert(s), s);
        }
    }
}
