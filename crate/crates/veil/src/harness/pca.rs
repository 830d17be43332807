//! Two-component PCA over embeddings for feature-space visualization.
//!
//! Covariance eigendecomposition runs on a cyclic Jacobi sweep; output is
//! a point table (group, index, pc1, pc2) plus explained-variance ratios.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::imaging::Image;

/// One projected point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaPoint {
    pub group: String,
    pub index: usize,
    pub pc1: f64,
    pub pc2: f64,
}

/// Projection of named embedding groups onto the top two principal
/// components of their union.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaTable {
    pub points: Vec<PcaPoint>,
    /// Fraction of total variance carried by pc1 and pc2; non-increasing,
    /// sums to at most 1.
    pub explained_variance_ratio: [f64; 2],
}

impl PcaTable {
    /// CSV rows: group, point id, pc1, pc2.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,point,pc1,pc2\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{:.8},{:.8}\n", p.group, p.index, p.pc1, p.pc2));
        }
        out
    }
}

/// Embeds every image and projects the union onto its top two principal
/// components.
pub fn emit_pca(phi: &FeatureExtractor, groups: &[(String, Vec<Image>)]) -> Result<PcaTable> {
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for (gi, (_, images)) in groups.iter().enumerate() {
        for img in images {
            rows.push((gi, phi.embed(img)?.values().to_vec()));
        }
    }
    if rows.len() < 2 {
        return Err(Error::Dataset("pca needs at least 2 images".into()));
    }
    let data: Vec<&[f64]> = rows.iter().map(|(_, e)| e.as_slice()).collect();
    let (components, ratios) = principal_components(&data)?;

    let dim = data[0].len();
    let n = data.len() as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();

    let mut points = Vec::with_capacity(rows.len());
    let mut counters = vec![0usize; groups.len()];
    for (gi, emb) in &rows {
        let centered: Vec<f64> = emb.iter().zip(&mean).map(|(v, m)| v - m).collect();
        let dot = |axis: &[f64]| centered.iter().zip(axis).map(|(a, b)| a * b).sum::<f64>();
        points.push(PcaPoint {
            group: groups[*gi].0.clone(),
            index: counters[*gi],
            pc1: dot(&components.0),
            pc2: dot(&components.1),
        });
        counters[*gi] += 1;
    }

    Ok(PcaTable {
        points,
        explained_variance_ratio: ratios,
    })
}

/// Top-2 eigenvectors of the sample covariance and their variance ratios.
pub(crate) fn principal_components(data: &[&[f64]]) -> Result<((Vec<f64>, Vec<f64>), [f64; 2])> {
    let n = data.len();
    let dim = data[0].len();
    if data.iter().any(|r| r.len() != dim) {
        return Err(Error::Dimension("embeddings differ in dimension".into()));
    }

    let mean: Vec<f64> = (0..dim)
        .map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    // Covariance with the 1/(n-1) normalization; the ratio output is
    // normalization-invariant.
    let denom = (n - 1).max(1) as f64;
    let mut cov = vec![0.0; dim * dim];
    for row in data {
        let centered: Vec<f64> = row.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..dim {
            if centered[i] == 0.0 {
                continue;
            }
            for j in i..dim {
                cov[i * dim + j] += centered[i] * centered[j] / denom;
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            cov[i * dim + j] = cov[j * dim + i];
        }
    }

    let (eigenvalues, eigenvectors) = jacobi_eigen(&mut cov.clone(), dim);
    let trace: f64 = eigenvalues.iter().map(|v| v.max(0.0)).sum();
    if trace <= 0.0 || !trace.is_finite() {
        return Err(Error::Numerical(
            "covariance has no variance (all embeddings identical)".into(),
        ));
    }

    // Indices of the two largest eigenvalues.
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|a, b| eigenvalues[*b].partial_cmp(&eigenvalues[*a]).expect("finite"));
    let (i1, i2) = (order[0], order[1]);

    let column = |k: usize| -> Vec<f64> {
        let mut v: Vec<f64> = (0..dim).map(|r| eigenvectors[r * dim + k]).collect();
        // Deterministic sign: the largest-magnitude entry is positive.
        let lead = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).expect("finite"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };

    Ok((
        (column(i1), column(i2)),
        [
            eigenvalues[i1].max(0.0) / trace,
            eigenvalues[i2].max(0.0) / trace,
        ],
    ))
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (in place);
/// returns (eigenvalues, column eigenvectors).
fn jacobi_eigen(a: &mut [f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-30 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    (eigenvalues, v)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn axis_aligned_2d_data_projects_onto_itself() {
        // Centered data with axis-aligned variance, x-spread > y-spread.
        let rows: Vec<Vec<f64>> = vec![
            vec![4.0, 1.0],
            vec![-4.0, 1.0],
            vec![4.0, -1.0],
            vec![-4.0, -1.0],
        ];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let ((pc1, pc2), ratios) = principal_components(&refs).unwrap();
        assert!(pc1[0].abs() > 0.99, "pc1 {pc1:?}");
        assert!(pc2[1].abs() > 0.99, "pc2 {pc2:?}");
        assert!(ratios[0] >= ratios[1]);
        assert!(ratios[0] + ratios[1] <= 1.0 + 1e-12);
        // Projection recovers the data up to sign.
        let p1 = rows[0][0] * pc1[0] + rows[0][1] * pc1[1];
        assert!((p1.abs() - 4.0).abs() < 0.3, "p1 {p1}");
    }

    #[test]
    fn matches_brute_force_eigendecomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let ((pc1, pc2), ratios) = principal_components(&refs).unwrap();

        // Oracle: nalgebra's symmetric eigendecomposition of the same
        // covariance matrix.
        let n = rows.len() as f64;
        let dim = 5;
        let mean: Vec<f64> = (0..dim)
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        let mut cov = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        for r in &rows {
            let c: Vec<f64> = r.iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..dim {
                for j in 0..dim {
                    cov[(i, j)] += c[i] * c[j] / (n - 1.0);
                }
            }
        }
        let eig = nalgebra::SymmetricEigen::new(cov);
        let vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|a, b| vals[*b].partial_cmp(&vals[*a]).unwrap());
        let trace: f64 = vals.iter().sum();

        for (col, (mine, ratio)) in [(order[0], (&pc1, ratios[0])), (order[1], (&pc2, ratios[1]))]
        {
            let want_ratio = vals[col] / trace;
            assert!((ratio - want_ratio).abs() < 1e-8, "{ratio} vs {want_ratio}");
            // Eigenvectors match up to sign.
            let dot: f64 = (0..dim).map(|r| mine[r] * eig.eigenvectors[(r, col)]).sum();
            assert!(
                (dot.abs() - 1.0).abs() < 1e-8,
                "axis misaligned, |dot| = {}",
                dot.abs()
            );
        }
    }

    #[test]
    fn identical_embeddings_are_a_numerical_error() {
        let rows = vec![vec![1.0, 2.0, 3.0]; 5];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        assert!(matches!(
            principal_components(&refs),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn emit_pca_groups_and_counts_points() {
        let phi = FeatureExtractor::identity(16, 16, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut make = |value: f64| {
            let v: f64 = value + rng.gen_range(-0.05..0.05);
            Image::constant(16, 16, 1, v.clamp(0.0, 1.0)).unwrap()
        };
        let groups = vec![
            ("user".to_string(), vec![make(0.2), make(0.22), make(0.21)]),
            ("target".to_string(), vec![make(0.8), make(0.78)]),
        ];
        let table = emit_pca(&phi, &groups).unwrap();
        assert_eq!(table.points.len(), 5);
        assert_eq!(table.points[0].group, "user");
        assert_eq!(table.points[4].group, "target");
        assert_eq!(table.points[4].index, 1);
        assert!(table.explained_variance_ratio[0] >= table.explained_variance_ratio[1]);
        assert!(table.to_csv().lines().count() == 6);

        // The two groups must separate along pc1.
        let user_mean: f64 = table.points[..3].iter().map(|p| p.pc1).sum::<f64>() / 3.0;
        let target_mean: f64 = table.points[3..].iter().map(|p| p.pc1).sum::<f64>() / 2.0;
        assert!((user_mean - target_mean).abs() > 1.0);
    }

    #[test]
    fn needs_at_least_two_images() {
        let phi = FeatureExtractor::identity(16, 16, 1);
        let groups = vec![(
            "solo".to_string(),
            vec![Image::constant(16, 16, 1, 0.5).unwrap()],
        )];
        assert!(matches!(emit_pca(&phi, &groups), Err(Error::Dataset(_))));
    }
}
