use crate::error::{Error, Result};
use nalgebra::{DMatrix, SymmetricEigen};

/// Principal axes of a row set, strongest first.
#[derive(Debug, Clone)]
pub struct PcaFit {
    pub mean: Vec<f64>,
    /// Unit eigenvectors of the covariance, sorted by decreasing eigenvalue.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

/// Fit all principal axes of `rows` (n × d).
pub fn pca_fit(rows: &[Vec<f32>]) -> Result<PcaFit> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::DegenerateInput(format!("PCA needs at least 2 rows, got {n}")));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::DegenerateInput("rows must share a non-zero width".into()));
    }
    if rows.iter().all(|r| r == &rows[0]) {
        return Err(Error::DegenerateInput("all rows are identical".into()));
    }
    let mut mean = vec![0.0f64; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += *v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] as f64 - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(d);
    let mut eigenvalues = Vec::with_capacity(d);
    for &c in &order {
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        // Sign convention: the largest-magnitude loading is positive.
        let (imax, _) = v
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |acc, (i, x)| if x.abs() > acc.1 + 1e-12 { (i, x.abs()) } else { acc });
        if v[imax] < 0.0 {
            for x in &mut v {
                *x = -*x;
            }
        }
        components.push(v);
        eigenvalues.push(eig.eigenvalues[c].max(0.0));
    }
    Ok(PcaFit {
        mean,
        components,
        eigenvalues,
    })
}

impl PcaFit {
    pub fn project(&self, row: &[f32], k: usize) -> Vec<f64> {
        (0..k)
            .map(|c| match self.components.get(c) {
                Some(axis) => axis
                    .iter()
                    .zip(row.iter().zip(&self.mean))
                    .map(|(a, (x, m))| a * (*x as f64 - m))
                    .sum(),
                None => 0.0,
            })
            .collect()
    }
}

/// Project rows onto their top two principal components.
pub fn pca_2d(rows: &[Vec<f32>]) -> Result<Vec<[f64; 2]>> {
    let fit = pca_fit(rows)?;
    Ok(rows
        .iter()
        .map(|r| {
            let p = fit.project(r, 2);
            [p[0], p[1]]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_points_have_flat_second_axis() {
        let rows: Vec<Vec<f32>> = (0..6).map(|i| vec![i as f32, 2.0 * i as f32, -(i as f32)]).collect();
        let p = pca_2d(&rows).unwrap();
        for c in &p {
            assert!(c[1].abs() < 1e-6, "{c:?}");
        }
    }

    #[test]
    fn mirrored_set_gives_mirrored_projection() {
        let rows = vec![vec![1.0, 0.2], vec![-1.0, -0.2], vec![2.0, 1.0], vec![-2.0, -1.0]];
        let p = pca_2d(&rows).unwrap();
        for k in 0..2 {
            assert!((p[0][k] + p[1][k]).abs() < 1e-9);
            assert!((p[2][k] + p[3][k]).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_rows_are_degenerate() {
        let rows = vec![vec![1.0, 2.0]; 3];
        assert!(matches!(pca_2d(&rows), Err(Error::DegenerateInput(_))));
        assert!(matches!(pca_2d(&rows[..1]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn single_column_pads_second_axis() {
        let rows = vec![vec![1.0], vec![3.0]];
        let p = pca_2d(&rows).unwrap();
        assert_eq!(p[0][1], 0.0);
        assert!((p[0][0] + 1.0).abs() < 1e-9 || (p[0][0] - 1.0).abs() < 1e-9);
    }
}
