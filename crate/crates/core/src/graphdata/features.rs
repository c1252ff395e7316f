//! Per-modality entity feature matrices.
//!
//! Binary layout (`MMFT`), all little-endian:
//!
//! ```text
//! b"MMFT" | u32 rows | u32 dim | rows*dim f32
//! [ b"MASK" | rows bytes, 1 = present, 0 = absent ]
//! ```
//!
//! The trailing mask block is optional; without it every row is present.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graphdata::kg::Vocab;
use crate::modality::Modality;
use crate::numkit::Tensor;

const MAGIC: &[u8; 4] = b"MMFT";
const MASK_TAG: &[u8; 4] = b"MASK";

/// Per-dimension mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Statistics over the rows of `matrix` flagged in `rows`.
    pub fn over_rows(matrix: &Tensor, rows: impl Iterator<Item = usize> + Clone) -> Self {
        let d = matrix.cols();
        let mut mean = vec![0.0; d];
        let mut n = 0usize;
        for r in rows.clone() {
            n += 1;
            for (m, v) in mean.iter_mut().zip(matrix.row(r)) {
                *m += v;
            }
        }
        if n == 0 {
            return FeatureStats {
                mean,
                std: vec![0.0; d],
            };
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(matrix.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
        FeatureStats { mean, std }
    }

    pub fn of_matrix(matrix: &Tensor) -> Self {
        Self::over_rows(matrix, 0..matrix.rows())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityFeatureStore {
    modality: Modality,
    matrix: Tensor,
    present: Vec<bool>,
    imputed: bool,
    stats: FeatureStats,
}

impl ModalityFeatureStore {
    pub fn new(modality: Modality, matrix: Tensor, present: Vec<bool>) -> Result<Self> {
        if matrix.rank() != 2 || present.len() != matrix.rows() {
            return Err(Error::shape("ModalityFeatureStore", matrix.shape(), &[present.len()]));
        }
        if !matrix.is_finite() {
            return Err(Error::NonFinite(format!("{modality} feature matrix")));
        }
        let mut store = ModalityFeatureStore {
            modality,
            matrix,
            present,
            imputed: false,
            stats: FeatureStats {
                mean: vec![],
                std: vec![],
            },
        };
        store.recompute_stats();
        Ok(store)
    }

    /// Store with every row present.
    pub fn dense(modality: Modality, matrix: Tensor) -> Result<Self> {
        let n = matrix.rows();
        Self::new(modality, matrix, vec![true; n])
    }

    fn recompute_stats(&mut self) {
        let present = &self.present;
        self.stats = FeatureStats::over_rows(
            &self.matrix,
            (0..present.len()).filter(move |&i| present[i]),
        );
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    /// Original presence; imputation leaves it unchanged.
    pub fn present(&self) -> &[bool] {
        &self.present
    }

    pub fn num_present(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn stats(&self) -> &FeatureStats {
        &self.stats
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn is_imputed(&self) -> bool {
        self.imputed
    }

    /// True when every row holds usable data (present or imputed).
    pub fn is_complete(&self) -> bool {
        self.imputed || self.present.iter().all(|&p| p)
    }

    /// Overwrites absent rows and marks the store imputed. Statistics stay
    /// computed over the originally present rows.
    pub(crate) fn fill_absent(&mut self, mut fill: impl FnMut(usize, &mut [f64])) {
        for r in 0..self.present.len() {
            if !self.present[r] {
                fill(r, self.matrix.row_mut(r));
            }
        }
        self.imputed = true;
        self.recompute_stats();
    }

    /// Rows of `other` appended below this store's rows.
    pub fn stack(&self, other: &ModalityFeatureStore) -> Result<Self> {
        if self.modality != other.modality || self.dim() != other.dim() {
            return Err(Error::shape("stack", self.matrix.shape(), other.matrix.shape()));
        }
        let mut data = self.matrix.data().to_vec();
        data.extend_from_slice(other.matrix.data());
        let matrix = Tensor::new(vec![self.rows() + other.rows(), self.dim()], data)?;
        let mut present = self.present.clone();
        present.extend_from_slice(&other.present);
        let mut s = Self::new(self.modality, matrix, present)?;
        s.imputed = self.is_complete() && other.is_complete() && !(self.present.iter().chain(&other.present).all(|&p| p));
        Ok(s)
    }

    pub fn write_mmft(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(self.rows() as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for &v in self.matrix.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        if self.present.iter().any(|&p| !p) {
            w.write_all(MASK_TAG)?;
            let mask: Vec<u8> = self.present.iter().map(|&p| p as u8).collect();
            w.write_all(&mask)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads an `MMFT` file; `expected_rows` is the entity count it must match.
    pub fn read_mmft(path: &Path, modality: Modality, expected_rows: usize) -> Result<Self> {
        let fmt_err = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(fmt_err("missing MMFT header".into()));
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if rows != expected_rows {
            return Err(fmt_err(format!("{rows} rows, but the graph has {expected_rows} entities")));
        }
        let body_end = 12 + rows * dim * 4;
        if bytes.len() < body_end {
            return Err(fmt_err("truncated feature data".into()));
        }
        let data: Vec<f64> = bytes[12..body_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if data.iter().any(|v| v.is_nan()) {
            return Err(fmt_err("NaN in feature data".into()));
        }
        let present = match &bytes[body_end..] {
            [] => vec![true; rows],
            [t0, t1, t2, t3, mask @ ..] if [*t0, *t1, *t2, *t3] == *MASK_TAG && mask.len() == rows => {
                mask.iter().map(|&b| b != 0).collect()
            }
            _ => return Err(fmt_err("malformed trailing mask block".into())),
        };
        Self::new(modality, Tensor::new(vec![rows, dim], data)?, present)
    }

    /// Reads `name,v1,...,vd` lines; entities not listed are absent.
    pub fn read_csv(path: &Path, modality: Modality, entities: &Vocab) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut dim = None;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg,
            };
            let mut fields = line.split(',');
            let name = fields.next().unwrap_or_default().trim();
            let id = entities
                .get(name)
                .ok_or_else(|| perr(format!("unknown entity `{name}`")))?;
            let values = fields
                .map(|f| f.trim().parse::<f64>().map_err(|e| perr(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            if values.iter().any(|v| v.is_nan()) {
                return Err(perr("NaN in feature row".into()));
            }
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(perr(format!("expected {d} values, got {}", values.len())))
                }
                _ => {}
            }
            rows.push((id, values));
        }
        let mut matrix = Tensor::zeros(&[entities.len(), dim.unwrap_or(0)]);
        let mut present = vec![false; entities.len()];
        for (id, values) in rows {
            matrix.row_mut(id).copy_from_slice(&values);
            present[id] = true;
        }
        Self::new(modality, matrix, present)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_use_population_std() {
        let m = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap();
        let s = ModalityFeatureStore::dense(Modality::Visual, m).unwrap();
        assert_eq!(s.stats().mean, vec![1.0, 1.0]);
        assert_eq!(s.stats().std, vec![1.0, 1.0]);
    }

    #[test]
    fn stats_ignore_absent_rows() {
        let m = Tensor::from_rows(&[vec![1.0], vec![3.0], vec![100.0]]).unwrap();
        let s = ModalityFeatureStore::new(Modality::Visual, m, vec![true, true, false]).unwrap();
        assert_eq!(s.stats().mean, vec![2.0]);
        assert!(!s.is_complete());
    }

    #[test]
    fn csv_rows_mark_presence_in_listed_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        std::fs::write(&p, "e0,1,2\ne1,3,4\ne2,5,6\n").unwrap();
        let vocab = Vocab::from_names((0..5).map(|i| format!("e{i}"))).unwrap();
        let s = ModalityFeatureStore::read_csv(&p, Modality::Visual, &vocab).unwrap();
        assert_eq!(s.present(), &[true, true, true, false, false]);
        assert_eq!(s.matrix().row(1), &[3.0, 4.0]);
    }

    #[test]
    fn mmft_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.mmft");
        let m = Tensor::from_rows(&[vec![0.5, -1.25], vec![3.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let s = ModalityFeatureStore::new(Modality::Visual, m, vec![true, true, false]).unwrap();
        s.write_mmft(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let back = ModalityFeatureStore::read_mmft(&p, Modality::Visual, 3).unwrap();
        assert_eq!(back, s);
        back.write_mmft(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
    }

    #[test]
    fn mmft_row_count_must_match_graph() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.mmft");
        let s = ModalityFeatureStore::dense(Modality::Surface, Tensor::zeros(&[4, 2])).unwrap();
        s.write_mmft(&p).unwrap();
        assert!(ModalityFeatureStore::read_mmft(&p, Modality::Surface, 5).is_err());
    }

    #[test]
    fn nan_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.mmft");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MMFT");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert!(ModalityFeatureStore::read_mmft(&p, Modality::Visual, 1).is_err());
        let c = dir.path().join("f.csv");
        std::fs::write(&c, "e0,NaN\n").unwrap();
        let vocab = Vocab::from_names(["e0".to_string()]).unwrap();
        assert!(ModalityFeatureStore::read_csv(&c, Modality::Visual, &vocab).is_err());
    }
}
