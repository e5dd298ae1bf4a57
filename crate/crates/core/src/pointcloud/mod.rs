//! LiDAR front-end: radius-bounded k-nearest neighborhoods, covariance
//! normals and `[p; n]` augmentation.

pub mod eigen;
pub mod io;
mod kdtree;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
pub use eigen::{canonical_sign, smallest_eigenvector, Mat3, SmallestEigen, Vec3};
pub use kdtree::{dist2, SpatialIndex};

/// Middle eigenvalue below which a neighborhood counts as collinear.
pub const RANK_EPS: f64 = 1e-12;

/// Fewest neighborhood points that can define a plane.
pub const MIN_NEIGHBORS: usize = 3;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// Unit normals, or zeros where `valid` is false.
    pub normals: Option<Vec<Vec3>>,
    pub valid: Vec<bool>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::Validation(format!("point {i} has non-finite coordinates")));
        }
        Ok(Self {
            points,
            normals: None,
            valid: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn translated(&self, t: Vec3) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
                .collect(),
            normals: None,
            valid: Vec::new(),
        }
    }

    pub fn rotated(&self, r: &Mat3) -> Self {
        Self {
            points: self.points.iter().map(|p| eigen::mat_vec(r, p)).collect(),
            normals: None,
            valid: Vec::new(),
        }
    }
}

/// Neighborhood radius in meters and the neighbor cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodQuery {
    pub radius: f64,
    pub k_max: usize,
}

impl NeighborhoodQuery {
    pub fn new(radius: f64, k_max: usize) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::Config(format!("radius must be positive, got {radius}")));
        }
        if k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        Ok(Self { radius, k_max })
    }
}

impl Default for NeighborhoodQuery {
    fn default() -> Self {
        Self {
            radius: 1.0,
            k_max: 16,
        }
    }
}

pub fn build_index(cloud: &PointCloud) -> SpatialIndex {
    SpatialIndex::build(&cloud.points)
}

/// Ids of the at most `k_max` points within `radius` of point `i`, nearest
/// first, ties by ascending id. Always contains `i` itself.
pub fn neighborhood(index: &SpatialIndex, i: usize, q: &NeighborhoodQuery) -> Vec<usize> {
    index.nearest_within(index.point(i), q.radius, q.k_max)
}

/// Exhaustive O(N) version of [`neighborhood`].
pub fn neighborhood_exhaustive(points: &[Vec3], i: usize, q: &NeighborhoodQuery) -> Vec<usize> {
    let center = points[i];
    let r2 = q.radius * q.radius;
    let mut hits: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(j, p)| (dist2(p, &center), j))
        .filter(|&(d2, _)| d2 <= r2)
        .collect();
    kdtree::sort_and_truncate(&mut hits, q.k_max)
}

fn degenerate_if_empty(ids: &[usize]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::DegenerateNeighborhood("empty neighborhood".into()));
    }
    Ok(())
}

pub fn neighborhood_mean(cloud: &PointCloud, ids: &[usize]) -> Result<Vec3> {
    degenerate_if_empty(ids)?;
    let mut mu = [0.0; 3];
    for &j in ids {
        for a in 0..3 {
            mu[a] += cloud.points[j][a];
        }
    }
    let n = ids.len() as f64;
    Ok([mu[0] / n, mu[1] / n, mu[2] / n])
}

/// Population covariance `(1/n) Σ (p - μ)(p - μ)ᵀ`, exactly symmetric.
pub fn covariance(cloud: &PointCloud, ids: &[usize]) -> Result<Mat3> {
    let mu = neighborhood_mean(cloud, ids)?;
    let mut c = [[0.0; 3]; 3];
    for &j in ids {
        let p = cloud.points[j];
        let d = [p[0] - mu[0], p[1] - mu[1], p[2] - mu[2]];
        for r in 0..3 {
            for s in r..3 {
                c[r][s] += d[r] * d[s];
            }
        }
    }
    let n = ids.len() as f64;
    for r in 0..3 {
        for s in r..3 {
            c[r][s] /= n;
            c[s][r] = c[r][s];
        }
    }
    Ok(c)
}

fn normal_from_neighborhood(
    cloud: &PointCloud,
    ids: &[usize],
    solve: impl Fn(&Mat3) -> Result<SmallestEigen>,
) -> Result<Option<Vec3>> {
    if ids.len() < MIN_NEIGHBORS {
        return Ok(None);
    }
    let c = covariance(cloud, ids)?;
    let e = solve(&c)?;
    if e.values[1] < RANK_EPS {
        return Ok(None);
    }
    Ok(Some(e.vector))
}

fn with_normals(cloud: &PointCloud, normals: Vec<Option<Vec3>>) -> PointCloud {
    let valid = normals.iter().map(Option::is_some).collect();
    PointCloud {
        points: cloud.points.clone(),
        normals: Some(normals.into_iter().map(|n| n.unwrap_or([0.0; 3])).collect()),
        valid,
    }
}

/// Covariance normal per point. Neighborhoods with fewer than three points,
/// or collinear ones, get a zero normal and `valid = false`.
pub fn estimate_normals(cloud: &PointCloud, q: &NeighborhoodQuery) -> Result<PointCloud> {
    let index = build_index(cloud);
    let normals = (0..cloud.len())
        .map(|i| normal_from_neighborhood(cloud, &neighborhood(&index, i, q), smallest_eigenvector))
        .collect::<Result<Vec<_>>>()?;
    Ok(with_normals(cloud, normals))
}

/// Reference pipeline: exhaustive neighbor search and a Jacobi-only
/// eigensolve. Quadratic in the number of points.
pub fn estimate_normals_oracle(cloud: &PointCloud, q: &NeighborhoodQuery) -> Result<PointCloud> {
    let normals = (0..cloud.len())
        .map(|i| {
            let ids = neighborhood_exhaustive(&cloud.points, i, q);
            normal_from_neighborhood(cloud, &ids, |c| Ok(eigen::smallest_eigenvector_jacobi(c)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(with_normals(cloud, normals))
}

/// `N x 6` rows `[x, y, z, nx, ny, nz]`.
pub fn augment(cloud: &PointCloud) -> Result<Matrix> {
    let normals = cloud
        .normals
        .as_ref()
        .ok_or_else(|| Error::Usage("augment needs estimated normals".into()))?;
    let mut m = Matrix::zeros(cloud.len(), 6);
    for (i, (p, n)) in cloud.points.iter().zip(normals).enumerate() {
        let row = m.row_mut(i);
        row[..3].copy_from_slice(p);
        if cloud.valid[i] {
            row[3..].copy_from_slice(n);
        }
    }
    Ok(m)
}
