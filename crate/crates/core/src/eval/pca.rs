use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{CellRecord, Window};
use crate::error::{Error, Result};
use crate::net::Model;
use crate::parallel::Parallelism;

/// Latent states projected on their top two principal components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub coords: Vec<[f64; 2]>,
    /// Explained-variance ratios of PC1 and PC2.
    pub ratios: [f64; 2],
    pub soh: Vec<f64>,
    pub cell_ids: Vec<String>,
}

/// Exact covariance eigendecomposition. Each component's sign is fixed so
/// that its largest-magnitude loading is positive.
pub fn latent_pca(latents: &[Vec<f64>], soh: &[f64], cell_ids: &[String]) -> Result<PcaProjection> {
    let n = latents.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("PCA needs at least 3 samples, got {n}")));
    }
    if soh.len() != n || cell_ids.len() != n {
        return Err(Error::Shape("latents, SOH and cell ids differ in length".into()));
    }
    let d = latents[0].len();
    if d == 0 || latents.iter().any(|z| z.len() != d) {
        return Err(Error::Shape("latents must share one nonzero width".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| latents.iter().map(|z| z[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| latents[i][j] - mean[j]);
    let cov = x.transpose() * &x / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum();

    let mut ratios = [0.0; 2];
    let mut coords = vec![[0.0; 2]; n];
    if total > 0.0 {
        for (k, &c) in order.iter().take(2).enumerate() {
            let lambda = eig.eigenvalues[c].max(0.0);
            ratios[k] = lambda / total;
            if lambda == 0.0 {
                continue;
            }
            let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            for (i, row) in coords.iter_mut().enumerate() {
                row[k] = (0..d).map(|j| x[(i, j)] * v[j]).sum();
            }
        }
    }
    Ok(PcaProjection {
        coords,
        ratios,
        soh: soh.to_vec(),
        cell_ids: cell_ids.to_vec(),
    })
}

/// PCA of the model's latent `z(k)` over `windows`, coloured by current SOH.
pub fn model_pca(model: &Model, cells: &[CellRecord], windows: &[&Window], par: Parallelism) -> Result<PcaProjection> {
    let latents: Vec<Vec<f64>> = model.latents(cells, windows, par)?.into_iter().map(|z| z.0).collect();
    let soh: Vec<f64> = windows.iter().map(|w| w.soh_now).collect();
    let ids: Vec<String> = windows.iter().map(|w| w.cell_id.to_string()).collect();
    latent_pca(&latents, &soh, &ids)
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman inputs differ in length");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}
