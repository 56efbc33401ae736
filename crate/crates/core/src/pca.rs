//! Principal component analysis for reducing metadata feature vectors.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::format::{read_container, read_sidecar, write_container, write_sidecar, FeatureMatrix};

pub const DEFAULT_COMPONENTS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// k x d, each row a unit principal direction.
    pub components: FeatureMatrix,
    /// Non-increasing variances along each component.
    pub eigenvalues: Vec<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.rows()
    }

    pub fn input_dims(&self) -> usize {
        self.mean.len()
    }

    pub fn explained_variance(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// Fraction of total variance captured; 0 for constant input.
    pub fn explained_variance_ratio(&self) -> f64 {
        if self.total_variance > 0.0 {
            self.explained_variance() / self.total_variance
        } else {
            0.0
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.total_variance == 0.0
    }

    pub fn transform_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dims() {
            return Err(Error::arg(format!(
                "pca expects {} input dims, got {}",
                self.input_dims(),
                x.len()
            )));
        }
        Ok(self
            .components
            .iter_rows()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect())
    }

    pub fn inverse_row(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.k() {
            return Err(Error::arg(format!("pca expects {} components, got {}", self.k(), y.len())));
        }
        let mut out = self.mean.clone();
        for (c, &w) in self.components.iter_rows().zip(y) {
            for (o, &ci) in out.iter_mut().zip(c) {
                *o += w * ci;
            }
        }
        Ok(out)
    }
}

/// Fits the top-`k` principal directions of the 1/(n-1) sample covariance.
///
/// Each component is sign-normalized so its largest-magnitude entry is
/// non-negative (first such entry on ties).
pub fn fit_pca(x: &FeatureMatrix, k: usize) -> Result<PcaModel> {
    let (n, d) = (x.rows(), x.dims());
    if n < 2 {
        return Err(Error::arg(format!("pca needs at least 2 samples, got {n}")));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::arg(format!("pca k={k} out of range 1..={}", n.min(d))));
    }
    let mut mean = vec![0.0; d];
    for row in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::from_fn(n, d, |i, j| x.row(i)[j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let total_variance = cov.trace().max(0.0);

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite covariance")
            .then(a.cmp(&b))
    });

    let mut comps = Vec::with_capacity(k * d);
    let mut eigenvalues = Vec::with_capacity(k);
    for &j in order.iter().take(k) {
        let col = eig.eigenvectors.column(j);
        let mut v: Vec<f64> = col.iter().copied().collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        let pivot = v
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, a)| if a.abs() > best.1 { (i, a.abs()) } else { best })
            .0;
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|a| *a = -*a);
        }
        comps.extend(v);
        eigenvalues.push(eig.eigenvalues[j].max(0.0));
    }
    if total_variance == 0.0 {
        log::warn!("pca input has zero variance; components are an arbitrary orthonormal basis");
    }
    Ok(PcaModel {
        mean,
        components: FeatureMatrix::new(k, d, comps)?,
        eigenvalues,
        total_variance,
    })
}

pub fn pca_transform(model: &PcaModel, x: &FeatureMatrix) -> Result<FeatureMatrix> {
    let rows = x
        .iter_rows()
        .map(|r| model.transform_row(r))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(FeatureMatrix::zeros(0, model.k()));
    }
    FeatureMatrix::from_rows(&rows)
}

pub fn pca_inverse(model: &PcaModel, y: &FeatureMatrix) -> Result<FeatureMatrix> {
    let rows = y
        .iter_rows()
        .map(|r| model.inverse_row(r))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(FeatureMatrix::zeros(0, model.input_dims()));
    }
    FeatureMatrix::from_rows(&rows)
}

/// Matrices in the order they are stored in a container.
pub(crate) fn pca_matrices(model: &PcaModel) -> Result<[FeatureMatrix; 3]> {
    Ok([
        FeatureMatrix::new(1, model.input_dims(), model.mean.clone())?,
        model.components.clone(),
        FeatureMatrix::new(1, model.k(), model.eigenvalues.clone())?,
    ])
}

pub(crate) fn pca_from_matrices(ms: &[FeatureMatrix], total_variance: f64) -> Result<PcaModel> {
    let [mean, components, eig] = ms else {
        return Err(Error::arg(format!("pca container needs 3 matrices, found {}", ms.len())));
    };
    if mean.rows() != 1
        || eig.rows() != 1
        || components.dims() != mean.dims()
        || components.rows() != eig.dims()
    {
        return Err(Error::arg("pca container matrices have inconsistent shapes"));
    }
    Ok(PcaModel {
        mean: mean.data().to_vec(),
        components: components.clone(),
        eigenvalues: eig.data().to_vec(),
        total_variance,
    })
}

pub fn save_pca(model: &PcaModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ms = pca_matrices(model)?;
    write_container(&[&ms[0], &ms[1], &ms[2]], path)?;
    write_sidecar(
        path,
        &[
            ("k", model.k().to_string()),
            ("d", model.input_dims().to_string()),
            ("total_variance", format!("{:e}", model.total_variance)),
        ],
    )
}

pub fn load_pca(path: impl AsRef<Path>) -> Result<PcaModel> {
    let path = path.as_ref();
    let ms = read_container(path)?;
    let meta = read_sidecar(path)?;
    let total_variance = meta
        .get("total_variance")
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.0);
    let model = pca_from_matrices(&ms, total_variance)?;
    for (key, want) in [("k", model.k()), ("d", model.input_dims())] {
        if meta.get(key).and_then(|v| v.parse::<usize>().ok()) != Some(want) {
            return Err(Error::Config(format!("{}: sidecar `{key}` disagrees with matrices", path.display())));
        }
    }
    Ok(model)
}
