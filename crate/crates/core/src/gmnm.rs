//! Gauss modality noise masking and the dropout substitute used in
//! ablations.
//!
//! Noise is drawn once per epoch as a [`NoisePlan`]: a per-row affine map
//! `scale * x + add` (masking) or an elementwise multiplier (dropout). Plans
//! apply to frozen feature matrices directly and to learnable tables on the
//! tape.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graphdata::FeatureStats;
use crate::modality::Modality;
use crate::numkit::{Tape, Tensor, Var};
use crate::rng::{stream, tag};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseMode {
    Gmnm,
    /// Zero each scalar with probability `p`; `scale` turns on the inverted
    /// `1 / (1 - p)` rescaling of survivors.
    Dropout { p: f64, scale: bool },
    Off,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseConfig {
    pub rho: f64,
    pub epsilon: f64,
    pub mode: NoiseMode,
    /// Modalities whose features get noised.
    pub modalities: Vec<Modality>,
}

impl NoiseConfig {
    pub fn gmnm(rho: f64, epsilon: f64, modalities: Vec<Modality>) -> Self {
        NoiseConfig {
            rho,
            epsilon,
            mode: NoiseMode::Gmnm,
            modalities,
        }
    }

    pub fn off() -> Self {
        NoiseConfig {
            rho: 0.0,
            epsilon: 0.0,
            mode: NoiseMode::Off,
            modalities: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("gmnm.{name} = {v} outside [0, 1]")))
            }
        };
        unit("rho", self.rho)?;
        unit("epsilon", self.epsilon)?;
        if let NoiseMode::Dropout { p, .. } = self.mode {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout p = {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn applies_to(&self, m: Modality) -> bool {
        self.mode != NoiseMode::Off && self.modalities.contains(&m)
    }

    /// The plan for modality `m` in `epoch`, drawn from its own stream so
    /// modalities and epochs never share randomness.
    pub fn plan(&self, m: Modality, x: &Tensor, stats: &FeatureStats, seed: u64, epoch: usize) -> Result<NoisePlan> {
        if !self.applies_to(m) {
            return Ok(NoisePlan::Identity);
        }
        let mut rng = stream(seed, tag::NOISE, (epoch as u64) << 8 | m as u64);
        match self.mode {
            NoiseMode::Gmnm => gmnm_plan(x.shape(), stats, self.rho, self.epsilon, &mut rng),
            NoiseMode::Dropout { p, scale } => dropout_plan(x.shape(), p, scale, &mut rng),
            NoiseMode::Off => Ok(NoisePlan::Identity),
        }
    }
}

/// Per-epoch noise realization for one feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum NoisePlan {
    Identity,
    /// Listed rows become `scale * x + add[k]`; other rows pass through.
    Rows { rows: Vec<usize>, scale: f64, add: Tensor },
    /// Elementwise multiplier.
    Mask(Tensor),
}

impl NoisePlan {
    /// Applies the plan to a matrix. Rows outside the plan are copied, so
    /// untouched rows stay bit-identical.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            NoisePlan::Identity => Ok(x.clone()),
            NoisePlan::Rows { rows, scale, add } => {
                let mut out = x.clone();
                for (k, &r) in rows.iter().enumerate() {
                    if r >= x.rows() || add.cols() != x.cols() {
                        return Err(Error::shape("noise plan", x.shape(), add.shape()));
                    }
                    for (o, &a) in out.row_mut(r).iter_mut().zip(add.row(k)) {
                        *o = *scale * *o + a;
                    }
                }
                Ok(out)
            }
            NoisePlan::Mask(m) => {
                if m.shape() != x.shape() {
                    return Err(Error::shape("noise plan", x.shape(), m.shape()));
                }
                Ok(x.zip_map(m, |a, b| a * b))
            }
        }
    }

    /// Applies the plan to a tape value, keeping gradients flowing to `x`.
    pub fn apply_var(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        match self {
            NoisePlan::Identity => Ok(x),
            NoisePlan::Rows { rows, .. } if rows.is_empty() => Ok(x),
            NoisePlan::Rows { rows, scale, add } => {
                let n = shape[0];
                let cols = *shape.last().unwrap();
                let mut col = vec![1.0; n];
                let mut shift = Tensor::zeros(&[n, cols]);
                for (k, &r) in rows.iter().enumerate() {
                    col[r] = *scale;
                    shift.row_mut(r).copy_from_slice(add.row(k));
                }
                let c = tape.constant(Tensor::vector(col));
                let scaled = tape.mul_col(x, c)?;
                let shift = tape.constant(shift.reshape(&shape)?);
                tape.add(scaled, shift)
            }
            NoisePlan::Mask(m) => {
                let m = tape.constant(m.clone());
                tape.mul(x, m)
            }
        }
    }

    /// The plan restricted to rows `ids`, in that order.
    pub fn select(&self, ids: &[usize]) -> Result<NoisePlan> {
        Ok(match self {
            NoisePlan::Identity => NoisePlan::Identity,
            NoisePlan::Rows { rows, scale, add } => {
                let pos: std::collections::HashMap<usize, usize> =
                    rows.iter().enumerate().map(|(k, &r)| (r, k)).collect();
                let mut new_rows = Vec::new();
                let mut src = Vec::new();
                for (i, id) in ids.iter().enumerate() {
                    if let Some(&k) = pos.get(id) {
                        new_rows.push(i);
                        src.push(k);
                    }
                }
                let add = if src.is_empty() {
                    Tensor::zeros(&[1, add.cols()])
                } else {
                    add.gather_rows(&src)?
                };
                NoisePlan::Rows {
                    rows: new_rows,
                    scale: *scale,
                    add,
                }
            }
            NoisePlan::Mask(m) => NoisePlan::Mask(m.gather_rows(ids)?),
        })
    }

    /// Number of rows the plan rewrites (every row for a mask).
    pub fn masked_rows(&self, total: usize) -> usize {
        match self {
            NoisePlan::Identity => 0,
            NoisePlan::Rows { rows, .. } => rows.len(),
            NoisePlan::Mask(_) => total,
        }
    }
}

fn gmnm_plan<R: Rng + ?Sized>(
    shape: &[usize],
    stats: &FeatureStats,
    rho: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<NoisePlan> {
    let (n, d) = (shape[0], shape[shape.len() - 1]);
    if stats.mean.len() != d || stats.std.len() != d {
        return Err(Error::shape("gmnm", shape, &[stats.mean.len()]));
    }
    if let Some(s) = stats.std.iter().find(|s| **s < 0.0 || s.is_nan()) {
        return Err(Error::invalid(format!("gmnm: negative std {s}")));
    }
    let mut rows = Vec::new();
    let mut add = Vec::new();
    for r in 0..n {
        let p: f64 = rng.random();
        // p < rho rather than p <= rho so rho = 0 never masks, even at p = 0.
        if p >= rho {
            continue;
        }
        rows.push(r);
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            add.push(epsilon * (stats.std[j] * z + stats.mean[j]));
        }
    }
    if epsilon == 0.0 || rows.is_empty() {
        return Ok(NoisePlan::Identity);
    }
    let k = rows.len();
    Ok(NoisePlan::Rows {
        rows,
        scale: 1.0 - epsilon,
        add: Tensor::new(vec![k, d], add)?,
    })
}

fn dropout_plan<R: Rng + ?Sized>(shape: &[usize], p: f64, scale: bool, rng: &mut R) -> Result<NoisePlan> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout p = {p} outside [0, 1)")));
    }
    if p == 0.0 {
        return Ok(NoisePlan::Identity);
    }
    let keep = if scale { 1.0 / (1.0 - p) } else { 1.0 };
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Ok(NoisePlan::Mask(Tensor::new(shape.to_vec(), data)?))
}

/// Masks rows of `x`: each row independently with probability `rho` becomes
/// `(1 - epsilon) x + epsilon (std * z + mean)`, `z ~ N(0, I)`.
pub fn apply_gmnm<R: Rng + ?Sized>(
    x: &Tensor,
    stats: &FeatureStats,
    rho: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<Tensor> {
    gmnm_plan(x.shape(), stats, rho, epsilon, rng)?.apply(x)
}

/// Zeros each entry with probability `p`, optionally rescaling survivors.
pub fn apply_dropout<R: Rng + ?Sized>(x: &Tensor, p: f64, scale: bool, rng: &mut R) -> Result<Tensor> {
    dropout_plan(x.shape(), p, scale, rng)?.apply(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn stats(mean: f64, std: f64, d: usize) -> FeatureStats {
        FeatureStats {
            mean: vec![mean; d],
            std: vec![std; d],
        }
    }

    #[test]
    fn rho_zero_and_epsilon_zero_are_identity() {
        let x = Tensor::randn(&[50, 3], 1.0, &mut seeded(0));
        let s = stats(1.0, 2.0, 3);
        assert_eq!(apply_gmnm(&x, &s, 0.0, 0.7, &mut seeded(1)).unwrap(), x);
        assert_eq!(apply_gmnm(&x, &s, 1.0, 0.0, &mut seeded(1)).unwrap(), x);
    }

    #[test]
    fn full_noise_matches_stats() {
        let x = Tensor::zeros(&[10_000, 1]);
        let out = apply_gmnm(&x, &stats(5.0, 2.0, 1), 1.0, 1.0, &mut seeded(2)).unwrap();
        let n = out.numel() as f64;
        let mean = out.sum() / n;
        let std = (out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mean - 5.0).abs() < 0.08, "{mean}");
        assert!((std - 2.0).abs() < 0.06, "{std}");
    }

    #[test]
    fn negative_std_is_rejected() {
        let x = Tensor::zeros(&[2, 1]);
        assert!(apply_gmnm(&x, &stats(0.0, -1.0, 1), 0.5, 0.5, &mut seeded(0)).is_err());
    }

    #[test]
    fn dropout_rate_and_limits() {
        let x = Tensor::ones(&[1000, 100]);
        let out = apply_dropout(&x, 0.3, false, &mut seeded(3)).unwrap();
        let zeros = out.data().iter().filter(|v| **v == 0.0).count() as f64 / 1e5;
        assert!((zeros - 0.3).abs() < 0.01, "{zeros}");
        assert!(out.data().iter().all(|v| *v == 0.0 || *v == 1.0));
        assert_eq!(apply_dropout(&x, 0.0, false, &mut seeded(3)).unwrap(), x);
        let near = apply_dropout(&x, 1.0 - 1e-9, false, &mut seeded(3)).unwrap();
        assert_eq!(near.sum(), 0.0);
        assert!(apply_dropout(&x, 1.0, false, &mut seeded(3)).is_err());
        let scaled = apply_dropout(&x, 0.5, true, &mut seeded(3)).unwrap();
        assert!(scaled.data().iter().all(|v| *v == 0.0 || *v == 2.0));
    }

    #[test]
    fn plan_is_deterministic_per_epoch_and_varies_across_epochs() {
        let cfg = NoiseConfig::gmnm(0.5, 0.7, vec![Modality::Visual]);
        let x = Tensor::randn(&[40, 4], 1.0, &mut seeded(0));
        let s = FeatureStats::of_matrix(&x);
        let a = cfg.plan(Modality::Visual, &x, &s, 9, 3).unwrap();
        let b = cfg.plan(Modality::Visual, &x, &s, 9, 3).unwrap();
        let c = cfg.plan(Modality::Visual, &x, &s, 9, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(cfg.plan(Modality::Surface, &x, &s, 9, 3).unwrap(), NoisePlan::Identity);
    }

    #[test]
    fn tape_application_matches_matrix_application() {
        let cfg = NoiseConfig::gmnm(0.5, 0.7, vec![Modality::Structure]);
        let x = Tensor::randn(&[30, 3], 1.0, &mut seeded(5));
        let plan = cfg.plan(Modality::Structure, &x, &FeatureStats::of_matrix(&x), 1, 0).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = plan.apply_var(&mut tape, v).unwrap();
        assert!(tape.value(out).max_abs_diff(&plan.apply(&x).unwrap()) < 1e-12);

        let ids = [7, 3, 3, 20];
        let sub = plan.select(&ids).unwrap().apply(&x.gather_rows(&ids).unwrap()).unwrap();
        let full = plan.apply(&x).unwrap().gather_rows(&ids).unwrap();
        assert!(sub.max_abs_diff(&full) < 1e-12);
    }
}
