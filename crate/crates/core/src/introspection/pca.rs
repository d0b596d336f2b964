use crate::error::{Error, Result};

/// Principal components of a point set.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k×d`, orthonormal rows in order of decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component.
    pub explained_variance: Vec<f64>,
    /// `n×k` coordinates of the centred points.
    pub projection: Vec<Vec<f64>>,
}

impl Pca {
    /// Maps projected coordinates back to the input space.
    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, comp) in coords.iter().zip(&self.components) {
            for (o, v) in out.iter_mut().zip(comp) {
                *o += c * v;
            }
        }
        out
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations,
/// iterated until the off-diagonal Frobenius norm falls below `tol` times
/// the matrix norm. Returns eigenvalues in decreasing order and the
/// matching unit eigenvectors as rows.
pub fn jacobi_eigen(matrix: &[Vec<f64>], tol: f64) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let d = matrix.len();
    if matrix.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidInput("jacobi_eigen needs a square matrix".into()));
    }
    let mut a = matrix.to_vec();
    let mut v: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    let norm = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let off = |a: &[Vec<f64>]| {
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    s += a[i][j] * a[i][j];
                }
            }
        }
        s.sqrt()
    };
    for _sweep in 0..100 {
        if off(&a) <= tol * norm.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..d).map(|k| v[k][i]).collect()).collect();
    Ok((values, vectors))
}

/// Top-`k` principal components of `points` (`n×d`), using the
/// population covariance. Each component's largest-magnitude coordinate
/// is made positive.
pub fn pca(points: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    if n < 2 || d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::InvalidInput(format!("pca needs at least 2 points of equal nonzero dimension, got {n}")));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::InvalidInput(format!("pca: k = {k} must lie in 1..={}", n.min(d))));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x / n as f64;
        }
    }
    let centred: Vec<Vec<f64>> = points.iter().map(|p| p.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for p in &centred {
        for i in 0..d {
            for j in i..d {
                cov[i][j] += p[i] * p[j] / n as f64;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i][j] = cov[j][i];
        }
    }
    let (values, vectors) = jacobi_eigen(&cov, 1e-10)?;
    let mut components: Vec<Vec<f64>> = vectors.into_iter().take(k).collect();
    for c in &mut components {
        let lead = c.iter().enumerate().fold(0, |best, (i, x)| if x.abs() > c[best].abs() { i } else { best });
        if c[lead] < 0.0 {
            c.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let explained_variance = values.into_iter().take(k).map(|v| v.max(0.0)).collect();
    let projection =
        centred.iter().map(|p| components.iter().map(|c| c.iter().zip(p).map(|(a, b)| a * b).sum()).collect()).collect();
    Ok(Pca { mean, components, explained_variance, projection })
}

/// Largest pairwise Euclidean distance.
pub fn diameter(points: &[Vec<f64>]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max(dist(a, b));
        }
    }
    best
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Connected components when points within `radius` are linked
/// (single linkage).
pub fn count_clusters(points: &[Vec<f64>], radius: f64) -> usize {
    let mut parent: Vec<usize> = (0..points.len()).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if dist(&points[i], &points[j]) <= radius {
                let (ri, rj) = (root(&mut parent, i), root(&mut parent, j));
                parent[ri] = rj;
            }
        }
    }
    (0..points.len()).filter(|&i| root(&mut parent, i) == i).count()
}

/// Clusters of `states` in their top-two PCA plane at a linkage radius of
/// a tenth of the projected diameter.
pub fn state_clusters(states: &[Vec<f64>]) -> Result<usize> {
    let k = 2.min(states.first().map_or(0, Vec::len)).min(states.len());
    let plane = pca(states, k)?.projection;
    Ok(count_clusters(&plane, 0.1 * diameter(&plane)))
}
