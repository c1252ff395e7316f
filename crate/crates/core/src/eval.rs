//! Rank metrics (MRR, Hits@N) for completion and alignment.
//!
//! Ties put the target at the mean rank of its tie group:
//! `1 + #strictly-better + #other-ties / 2`.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::graphdata::{KnowledgeGraph, Split, Triple};
use crate::numkit::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `(?, r, t)`.
    Head,
    /// `(h, r, ?)`.
    Tail,
    /// Source entity of an alignment query.
    Source,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankResult {
    pub ranks: Vec<f64>,
    pub directions: Vec<Direction>,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl RankResult {
    pub fn from_ranks(ranks: Vec<f64>, directions: Vec<Direction>) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::invalid("no queries to rank"));
        }
        let n = ranks.len() as f64;
        let mrr = ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n;
        let hits = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Ok(RankResult {
            mrr,
            hits1: hits(1.0),
            hits3: hits(3.0),
            hits10: hits(10.0),
            ranks,
            directions,
        })
    }

    pub fn hits(&self, k: usize) -> f64 {
        self.ranks.iter().filter(|&&r| r <= k as f64).count() as f64 / self.ranks.len() as f64
    }
}

/// Mean-tie rank of `target` among candidates not excluded.
/// `lower_is_better` selects ascending (distances) or descending
/// (similarities) order.
pub fn rank_of(scores: &[f64], target: usize, excluded: impl Fn(usize) -> bool, lower_is_better: bool) -> Result<f64> {
    let t = scores[target];
    if !t.is_finite() {
        return Err(Error::NonFinite(format!("score of candidate {target}")));
    }
    let mut better = 0usize;
    let mut ties = 0usize;
    for (i, &s) in scores.iter().enumerate() {
        if i == target || excluded(i) {
            continue;
        }
        if s.is_nan() {
            return Err(Error::NonFinite(format!("score of candidate {i}")));
        }
        let is_better = if lower_is_better { s < t } else { s > t };
        if is_better {
            better += 1;
        } else if s == t {
            ties += 1;
        }
    }
    Ok(1.0 + better as f64 + ties as f64 / 2.0)
}

/// Scores every entity as the missing end of a triple; lower is better.
pub trait TripleScorer {
    fn num_entities(&self) -> usize;
    /// Scores of `(h, r, e)` for every entity `e`.
    fn tail_scores(&self, head: usize, relation: usize) -> Vec<f64>;
    /// Scores of `(e, r, t)` for every entity `e`.
    fn head_scores(&self, relation: usize, tail: usize) -> Vec<f64>;
}

/// Head and tail ranks for every triple of `triples`. With `known`, every
/// other known-true triple is removed from the candidates (filtered setting).
pub fn eval_kgc_triples<S: TripleScorer + ?Sized>(
    scorer: &S,
    triples: &[Triple],
    known: Option<&HashSet<Triple>>,
) -> Result<RankResult> {
    let mut ranks = Vec::with_capacity(2 * triples.len());
    let mut dirs = Vec::with_capacity(2 * triples.len());
    for t in triples {
        let tails = scorer.tail_scores(t.head, t.relation);
        let r = rank_of(
            &tails,
            t.tail,
            |e| known.is_some_and(|k| k.contains(&Triple::new(t.head, t.relation, e))),
            true,
        )?;
        ranks.push(r);
        dirs.push(Direction::Tail);
        let heads = scorer.head_scores(t.relation, t.tail);
        let r = rank_of(
            &heads,
            t.head,
            |e| known.is_some_and(|k| k.contains(&Triple::new(e, t.relation, t.tail))),
            true,
        )?;
        ranks.push(r);
        dirs.push(Direction::Head);
    }
    RankResult::from_ranks(ranks, dirs)
}

/// Ranks a split of `kg`; filtered mode removes train, valid and test triples.
pub fn eval_kgc<S: TripleScorer + ?Sized>(
    scorer: &S,
    kg: &KnowledgeGraph,
    split: Split,
    filtered: bool,
) -> Result<RankResult> {
    let known = filtered.then(|| kg.known());
    eval_kgc_triples(scorer, kg.split(split), known.as_ref())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidatePool {
    /// Only the target sides of the evaluated pairs.
    TestSide,
    /// Every entity of the target graph.
    Full,
}

/// Rows scaled to unit L2 norm (zero rows stay zero).
pub fn normalize_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Cosine similarity between rows `left` of `a` and rows `right` of `b`.
pub fn similarity(a: &Tensor, left: &[usize], b: &Tensor, right: &[usize]) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::shape("similarity", a.shape(), b.shape()));
    }
    let qa = normalize_rows(&a.gather_rows(left)?);
    let qb = normalize_rows(&b.gather_rows(right)?);
    qa.matmul(&qb.transpose()?)
}

/// Alignment ranks: each source entity ranks the candidate targets by
/// descending cosine similarity.
pub fn eval_ea(emb1: &Tensor, emb2: &Tensor, pairs: &[(usize, usize)], pool: CandidatePool) -> Result<RankResult> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty alignment test set"));
    }
    let sources: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let candidates: Vec<usize> = match pool {
        CandidatePool::TestSide => pairs.iter().map(|p| p.1).collect(),
        CandidatePool::Full => (0..emb2.rows()).collect(),
    };
    let sim = similarity(emb1, &sources, emb2, &candidates)?;
    let mut ranks = Vec::with_capacity(pairs.len());
    for (q, &(_, target)) in pairs.iter().enumerate() {
        let col = match pool {
            CandidatePool::TestSide => q,
            CandidatePool::Full => target,
        };
        ranks.push(rank_of(sim.row(q), col, |_| false, false)?);
    }
    RankResult::from_ranks(ranks, vec![Direction::Source; pairs.len()])
}

/// Reference ranking by full sort: the target's rank is the mean position
/// of its tie group among non-excluded candidates. Test oracle only.
pub fn brute_force_oracle(scores: &[f64], target: usize, excluded: &[bool], lower_is_better: bool) -> f64 {
    let mut kept: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i == target || !excluded[i])
        .map(|(i, &s)| (if lower_is_better { s } else { -s }, i))
        .collect();
    kept.sort_by(|a, b| a.0.total_cmp(&b.0));
    let t = kept.iter().position(|&(_, i)| i == target).unwrap();
    let v = kept[t].0;
    let first = kept.iter().position(|&(s, _)| s == v).unwrap() + 1;
    let last = kept.iter().rposition(|&(s, _)| s == v).unwrap() + 1;
    (first + last) as f64 / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Table(Vec<Vec<Vec<f64>>>);

    impl TripleScorer for Table {
        fn num_entities(&self) -> usize {
            self.0.len()
        }
        fn tail_scores(&self, h: usize, r: usize) -> Vec<f64> {
            (0..self.0.len()).map(|t| self.0[h][t][r]).collect()
        }
        fn head_scores(&self, r: usize, t: usize) -> Vec<f64> {
            (0..self.0.len()).map(|h| self.0[h][t][r]).collect()
        }
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(brute_force_oracle(&[3.0, 1.0, 2.0], 0, &[false; 3], true), 3.0);
        assert_eq!(brute_force_oracle(&[1.0; 5], 2, &[false; 5], true), 3.0);
        assert_eq!(rank_of(&[1.0; 5], 2, |_| false, true).unwrap(), 3.0);
    }

    #[test]
    fn perfect_scorer_has_unit_mrr() {
        let mut s = vec![vec![vec![1.0]; 2]; 2];
        s[0][1][0] = 0.0;
        let r = eval_kgc_triples(&Table(s), &[Triple::new(0, 0, 1)], None).unwrap();
        assert_eq!(r.mrr, 1.0);
        assert_eq!(r.hits1, 1.0);
    }

    #[test]
    fn two_term_mrr_convention() {
        // Tail query: true tail 1 is second of three. Head query: true head
        // 0 is first.
        let mut s = vec![vec![vec![5.0]; 3]; 3];
        s[0][1][0] = 1.0;
        s[0][2][0] = 0.5;
        s[1][1][0] = 9.0;
        s[2][1][0] = 9.0;
        let r = eval_kgc_triples(&Table(s), &[Triple::new(0, 0, 1)], None).unwrap();
        assert_eq!(r.ranks, vec![2.0, 1.0]);
        assert_eq!(r.mrr, 0.75);
    }

    #[test]
    fn filtering_removes_other_known_answers() {
        let mut s = vec![vec![vec![5.0]; 4]; 4];
        s[0][1][0] = 1.0;
        s[0][2][0] = 0.5;
        let target = Triple::new(0, 0, 1);
        let known: HashSet<_> = [target, Triple::new(0, 0, 2)].into_iter().collect();
        let raw = eval_kgc_triples(&Table(s.clone()), &[target], None).unwrap();
        let filt = eval_kgc_triples(&Table(s), &[target], Some(&known)).unwrap();
        assert_eq!(raw.ranks[0], 2.0);
        assert_eq!(filt.ranks[0], 1.0);
    }

    #[test]
    fn alignment_rank_two_of_three() {
        let e1 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let e2 = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.7, 0.7], vec![-1.0, 0.0]]).unwrap();
        let r = eval_ea(&e1, &e2, &[(0, 1), (1, 0), (2, 2)], CandidatePool::TestSide).unwrap();
        assert_eq!(r.ranks[0], 2.0);
        let one = RankResult::from_ranks(vec![2.0], vec![Direction::Source]).unwrap();
        assert_eq!((one.mrr, one.hits1, one.hits3), (0.5, 0.0, 1.0));
    }

    #[test]
    fn identical_spaces_align_perfectly_and_empty_set_errors() {
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let r = eval_ea(&e, &e, &[(0, 0), (1, 1), (2, 2)], CandidatePool::Full).unwrap();
        assert_eq!(r.mrr, 1.0);
        assert!(eval_ea(&e, &e, &[], CandidatePool::Full).is_err());
    }
}
