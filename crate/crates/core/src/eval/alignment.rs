use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn unit_rows(x: &Tensor) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|r| {
            let row = x.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter().map(|v| v / norm).collect()
            } else {
                vec![0.0; row.len()]
            }
        })
        .collect()
}

/// Indices of the `k` rows most cosine-similar to each row, self excluded.
/// Equal similarities are ordered by smaller index.
pub fn knn_sets(x: &Tensor, k: usize) -> Vec<Vec<usize>> {
    let rows = unit_rows(x);
    let n = rows.len();
    (0..n)
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum(), j))
                .collect();
            others.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut set: Vec<usize> = others.into_iter().take(k).map(|(_, j)| j).collect();
            set.sort_unstable();
            set
        })
        .collect()
}

/// Mean fraction of shared `k`-nearest neighbors between two row-aligned
/// feature matrices.
pub fn mutual_knn_alignment(a: &Tensor, b: &Tensor, k: usize) -> Result<f64> {
    let n = a.rows();
    if b.rows() != n {
        return Err(Error::Dimension(format!(
            "alignment needs paired rows, got {n} and {}",
            b.rows()
        )));
    }
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!(
            "k must lie in 1..{n}, got {k}"
        )));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::NonFinite {
            op: "mutual_knn_alignment",
        });
    }
    let (sa, sb) = (knn_sets(a, k), knn_sets(b, k));
    let shared: usize = sa
        .iter()
        .zip(&sb)
        .map(|(x, y)| x.iter().filter(|i| y.binary_search(i).is_ok()).count())
        .sum();
    Ok(shared as f64 / (n * k) as f64)
}

/// Alignment of `features` averaged over several reference feature sets.
pub fn alignment_against_references(
    features: &Tensor,
    references: &[Tensor],
    k: usize,
) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::InvalidArgument("no reference features".into()));
    }
    let total = references
        .iter()
        .map(|r| mutual_knn_alignment(features, r, k))
        .sum::<Result<f64>>()?;
    Ok(total / references.len() as f64)
}
