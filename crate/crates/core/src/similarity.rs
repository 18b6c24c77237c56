//! Video-to-video scoring over clip embeddings.
//!
//! `topk_cs` takes, for every query clip, its best match among the candidate
//! clips, then averages the `k` largest of those maxima. Chamfer similarity
//! is the same computation with `k = n`; both share one summation path, so
//! `topk_cs(a, b, k >= n)` and `chamfer(a, b)` agree bit for bit.

use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 3;

/// Row norms must be within this distance of 1.
pub const UNIT_TOLERANCE: f32 = 1e-5;

/// `n × D` matrix of unit-norm clip embeddings, one row per clip in time order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl ClipMatrix {
    /// Validates shape and that every row has unit norm.
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || dim == 0 || data.len() != rows * dim {
            return Err(Error::shape("clip_matrix", &[rows, dim], &[data.len()]));
        }
        for (i, row) in data.chunks(dim).enumerate() {
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE as f64 {
                return Err(Error::Integrity(format!("row {i} has norm {norm}, expected 1")));
            }
        }
        Ok(Self { rows, dim, data })
    }

    /// Normalizes each row first; zero rows are rejected.
    pub fn normalized(rows: usize, dim: usize, mut data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim || dim == 0 {
            return Err(Error::shape("clip_matrix", &[rows, dim], &[data.len()]));
        }
        for row in data.chunks_mut(dim) {
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Integrity("cannot normalize a zero or non-finite row".into()));
            }
            for v in row.iter_mut() {
                *v = (*v as f64 / norm) as f32;
            }
        }
        Self::new(rows, dim, data)
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Contract("ragged clip rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Rows in a new order given by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let data = perm.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Self::new(perm.len(), self.dim, data)
    }
}

/// `n × m` clip similarities plus how many dot products produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct SimMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    pub dot_products: u64,
}

impl SimMatrix {
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    /// Best candidate similarity for each query row.
    pub fn row_maxima(&self) -> Vec<f32> {
        self.data
            .chunks(self.cols)
            .map(|r| r.iter().copied().fold(f32::NEG_INFINITY, f32::max))
            .collect()
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `A · Bᵀ`.
pub fn sim_matrix(a: &ClipMatrix, b: &ClipMatrix) -> Result<SimMatrix> {
    if a.dim != b.dim {
        return Err(Error::shape("sim_matrix", &[a.rows, a.dim], &[b.rows, b.dim]));
    }
    let mut data = Vec::with_capacity(a.rows * b.rows);
    let mut dot_products = 0u64;
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            data.push(dot(ar, b.row(j)));
            dot_products += 1;
        }
    }
    Ok(SimMatrix {
        rows: a.rows,
        cols: b.rows,
        data,
        dot_products,
    })
}

/// Mean of the `k` largest values, summed in f64 in descending order (ties
/// by lower index first). With fewer than `k` values, the mean of all.
fn mean_of_top(maxima: &[f32], k: usize) -> f64 {
    let mut order: Vec<usize> = (0..maxima.len()).collect();
    order.sort_by(|&i, &j| maxima[j].total_cmp(&maxima[i]).then(i.cmp(&j)));
    let take = k.min(order.len());
    let total: f64 = order[..take].iter().map(|&i| maxima[i] as f64).sum();
    total / take as f64
}

pub fn chamfer(a: &ClipMatrix, b: &ClipMatrix) -> Result<f64> {
    let sims = sim_matrix(a, b)?;
    Ok(mean_of_top(&sims.row_maxima(), a.rows))
}

pub fn topk_cs(a: &ClipMatrix, b: &ClipMatrix, k: usize) -> Result<f64> {
    Ok(topk_cs_with_cost(a, b, k)?.0)
}

/// [`topk_cs`] together with the number of dot products it computed.
pub fn topk_cs_with_cost(a: &ClipMatrix, b: &ClipMatrix, k: usize) -> Result<(f64, u64)> {
    if k < 1 {
        return Err(Error::Contract("topk_cs needs k >= 1".into()));
    }
    let sims = sim_matrix(a, b)?;
    Ok((mean_of_top(&sims.row_maxima(), k), sims.dot_products))
}

#[cfg(test)]
mod tests {
    use super::*;

    const H: f32 = std::f32::consts::FRAC_1_SQRT_2;

    fn m(rows: &[&[f32]]) -> ClipMatrix {
        ClipMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn self_similarity_diagonal() {
        let a = m(&[&[1.0, 0.0], &[H, H], &[0.0, 1.0]]);
        let s = sim_matrix(&a, &a).unwrap();
        for i in 0..3 {
            assert!((s.get(i, i) - 1.0).abs() < 1e-6);
        }
        assert_eq!(s.get(0, 2), 0.0);
        assert_eq!(s.dot_products, 9);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn direct_dot_product() {
        let s = sim_matrix(&m(&[&[1.0, 0.0]]), &m(&[&[H, H]])).unwrap();
        assert!((s.get(0, 0) - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn chamfer_brute_force_example() {
        let a = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = m(&[&[1.0, 0.0], &[H, H]]);
        assert!((chamfer(&a, &b).unwrap() - 0.85355).abs() < 1e-5);
        assert!((topk_cs(&a, &b, 3).unwrap() - 0.85355).abs() < 1e-5);
        assert!((chamfer(&a, &a).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_row_is_max() {
        let a = m(&[&[0.0, 1.0]]);
        let b = m(&[&[1.0, 0.0], &[H, H]]);
        assert_eq!(chamfer(&a, &b).unwrap(), H as f64);
    }

    #[test]
    fn k_zero_rejected() {
        let a = m(&[&[1.0, 0.0]]);
        assert!(matches!(topk_cs(&a, &a, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn dimension_mismatch() {
        let a = m(&[&[1.0, 0.0]]);
        let b = m(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(sim_matrix(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_unit_rows_rejected() {
        assert!(matches!(ClipMatrix::new(1, 2, vec![1.0, 1.0]), Err(Error::Integrity(_))));
        assert!(ClipMatrix::normalized(1, 2, vec![1.0, 1.0]).is_ok());
        assert!(ClipMatrix::normalized(1, 2, vec![0.0, 0.0]).is_err());
    }
}
