//! Point-cloud and rigid-motion primitives shared by the network, the losses,
//! the simulator and the metrics. Everything here is a pure function; no
//! acceleration structures, brute force is fine at the point counts we run.

use crate::error::{CoreError, Result};
use nalgebra::{Matrix3, Matrix4, Vector3};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

pub const INTERP_EPS: f64 = 1e-8;

/// One radar scan worth of points: positions plus per-point radar channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub positions: Array2<f64>,
    pub rrv: Array1<f64>,
    pub rcs: Array1<f64>,
    pub features: Option<Array2<f64>>,
}

impl PointCloud {
    pub fn new(positions: Array2<f64>, rrv: Array1<f64>, rcs: Array1<f64>) -> Result<Self> {
        let cloud = PointCloud { positions, rrv, rcs, features: None };
        cloud.validate()?;
        Ok(cloud)
    }

    /// Positions only; rrv/rcs zero-filled.
    pub fn from_positions(positions: Array2<f64>) -> Result<Self> {
        let n = positions.nrows();
        PointCloud::new(positions, Array1::zeros(n), Array1::zeros(n))
    }

    pub fn len(&self) -> usize {
        self.positions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.nrows();
        if n == 0 {
            return Err(CoreError::Invariant("point cloud must hold at least one point".into()));
        }
        if self.positions.ncols() != 3 {
            return Err(CoreError::Shape(format!(
                "positions must be Nx3, got Nx{}",
                self.positions.ncols()
            )));
        }
        if !self.positions.iter().all(|v| v.is_finite()) {
            return Err(CoreError::Invariant("positions must be finite".into()));
        }
        if self.rrv.len() != n || self.rcs.len() != n {
            return Err(CoreError::Shape("rrv/rcs length must match point count".into()));
        }
        if let Some(f) = &self.features {
            if f.nrows() != n {
                return Err(CoreError::Shape("feature row count must match point count".into()));
            }
        }
        Ok(())
    }

    pub fn select(&self, idx: &[usize]) -> PointCloud {
        let take_rows = |a: &Array2<f64>| {
            let mut out = Array2::zeros((idx.len(), a.ncols()));
            for (i, &r) in idx.iter().enumerate() {
                out.row_mut(i).assign(&a.row(r));
            }
            out
        };
        PointCloud {
            positions: take_rows(&self.positions),
            rrv: idx.iter().map(|&r| self.rrv[r]).collect(),
            rcs: idx.iter().map(|&r| self.rcs[r]).collect(),
            features: self.features.as_ref().map(take_rows),
        }
    }
}

/// Per-point displacement over one frame interval.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub vectors: Array2<f64>,
}

impl FlowField {
    pub fn new(vectors: Array2<f64>) -> Result<Self> {
        if vectors.ncols() != 3 {
            return Err(CoreError::Shape("flow must be Nx3".into()));
        }
        if !vectors.iter().all(|v| v.is_finite()) {
            return Err(CoreError::Invariant("flow must be finite".into()));
        }
        Ok(FlowField { vectors })
    }

    pub fn zeros(n: usize) -> Self {
        FlowField { vectors: Array2::zeros((n, 3)) }
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rigid transform as a 4x4 homogeneous matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SE3Transform {
    pub matrix: Matrix4<f64>,
}

impl SE3Transform {
    pub fn identity() -> Self {
        SE3Transform { matrix: Matrix4::identity() }
    }

    pub fn new(matrix: Matrix4<f64>) -> Result<Self> {
        let t = SE3Transform { matrix };
        t.validate()?;
        Ok(t)
    }

    pub fn from_rt(r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        SE3Transform::new(m)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.matrix;
        let r = m.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho = (r.transpose() * r - Matrix3::identity()).norm();
        if ortho > 1e-9 {
            return Err(CoreError::Invariant(format!(
                "rotation block not orthonormal (|R'R - I| = {ortho:.3e})"
            )));
        }
        if (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(CoreError::Invariant("rotation determinant must be +1".into()));
        }
        if m[(3, 0)] != 0.0 || m[(3, 1)] != 0.0 || m[(3, 2)] != 0.0 || m[(3, 3)] != 1.0 {
            return Err(CoreError::Invariant("last row must be (0,0,0,1)".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn inverse(&self) -> SE3Transform {
        let r = self.rotation();
        let t = self.translation();
        let ri = r.transpose();
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&ri);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-ri * t));
        // no revalidation: the inverse of a (possibly f32-rounded) rigid
        // transform is exactly as orthonormal as its input
        SE3Transform { matrix: m }
    }

    pub fn compose(&self, other: &SE3Transform) -> SE3Transform {
        // self applied after other
        SE3Transform { matrix: self.matrix * other.matrix }
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn yaw_translation(yaw: f64, t: Vector3<f64>) -> SE3Transform {
        let (s, c) = yaw.sin_cos();
        let r = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        SE3Transform::from_rt(r, t).expect("yaw rotation is a valid SE3")
    }
}

/// 2D grid over the BEV plane; half-open cells of side `cell_size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: [f64; 2],
    pub cell_size: f64,
    pub shape: [usize; 2],
}

impl GridSpec {
    pub fn new(origin: [f64; 2], cell_size: f64, shape: [usize; 2]) -> Result<Self> {
        if cell_size <= 0.0 {
            return Err(CoreError::Invariant("cell_size must be positive".into()));
        }
        if shape[0] == 0 || shape[1] == 0 {
            return Err(CoreError::Invariant("grid shape must be at least 1x1".into()));
        }
        Ok(GridSpec { origin, cell_size, shape })
    }

    pub fn n_cells(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn cell_center(&self, h: usize, w: usize) -> [f64; 2] {
        [
            self.origin[0] + (h as f64 + 0.5) * self.cell_size,
            self.origin[1] + (w as f64 + 0.5) * self.cell_size,
        ]
    }
}

/// Row indices of the k nearest targets per query, ascending by distance,
/// ties broken by lower index.
pub fn knn_points(query: &PointCloud, target: &PointCloud, k: usize) -> Result<Array2<usize>> {
    knn_positions(&query.positions, &target.positions, k)
}

pub fn knn_positions(query: &Array2<f64>, target: &Array2<f64>, k: usize) -> Result<Array2<usize>> {
    let m = target.nrows();
    if k > m {
        return Err(CoreError::Size(format!("k = {k} exceeds target size {m}")));
    }
    let n = query.nrows();
    let mut out = Array2::zeros((n, k));
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(m);
    for i in 0..n {
        dists.clear();
        for j in 0..m {
            let mut d = 0.0;
            for c in 0..query.ncols() {
                let diff = query[[i, c]] - target[[j, c]];
                d += diff * diff;
            }
            dists.push((d, j));
        }
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        for (slot, &(_, j)) in dists.iter().take(k).enumerate() {
            out[[i, slot]] = j;
        }
    }
    Ok(out)
}

/// Greedy max-min subsampling, deterministic for a fixed seed index.
pub fn farthest_point_sampling(cloud: &PointCloud, m: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m > n {
        return Err(CoreError::Size(format!("cannot sample {m} from {n} points")));
    }
    if m == 0 {
        return Err(CoreError::Size("sample count must be at least 1".into()));
    }
    if seed_index >= n {
        return Err(CoreError::Size("seed index out of range".into()));
    }
    let pos = &cloud.positions;
    let mut selected = Vec::with_capacity(m);
    let mut min_dist = vec![f64::INFINITY; n];
    let mut current = seed_index;
    selected.push(current);
    for _ in 1..m {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for j in 0..n {
            let mut d = 0.0;
            for c in 0..3 {
                let diff = pos[[j, c]] - pos[[current, c]];
                d += diff * diff;
            }
            if d < min_dist[j] {
                min_dist[j] = d;
            }
            if min_dist[j] > best.0 && !selected.contains(&j) {
                best = (min_dist[j], j);
            }
        }
        current = best.1;
        selected.push(current);
    }
    Ok(selected)
}

/// Inverse-distance weighted interpolation of per-source values at query
/// positions: value = sum w_i v_i / sum w_i over the k nearest sources,
/// with w_i = 1 / (d_i + eps). A zero-distance source dominates exactly.
pub fn inverse_distance_interpolate(
    source_positions: &Array2<f64>,
    source_values: &Array2<f64>,
    queries: &Array2<f64>,
    k: usize,
) -> Result<Array2<f64>> {
    if source_positions.nrows() == 0 {
        return Err(CoreError::Size("interpolation requires at least one source".into()));
    }
    let (idx, w) = interpolation_weights(source_positions, queries, k)?;
    let d = source_values.ncols();
    let mut out = Array2::zeros((queries.nrows(), d));
    for i in 0..queries.nrows() {
        for j in 0..k {
            let s = idx[[i, j]];
            for c in 0..d {
                out[[i, c]] += w[[i, j]] * source_values[[s, c]];
            }
        }
    }
    Ok(out)
}

/// Normalized IDW weights and neighbor indices, for callers that apply the
/// same constant weights to several value arrays.
pub fn interpolation_weights(
    source_positions: &Array2<f64>,
    queries: &Array2<f64>,
    k: usize,
) -> Result<(Array2<usize>, Array2<f64>)> {
    let idx = knn_positions(queries, source_positions, k)?;
    let n = queries.nrows();
    let mut w = Array2::zeros((n, k));
    for i in 0..n {
        let mut exact: Option<usize> = None;
        let mut total = 0.0;
        for j in 0..k {
            let s = idx[[i, j]];
            let mut d = 0.0;
            for c in 0..3 {
                let diff = queries[[i, c]] - source_positions[[s, c]];
                d += diff * diff;
            }
            let d = d.sqrt();
            if d == 0.0 && exact.is_none() {
                exact = Some(j);
            }
            let wi = 1.0 / (d + INTERP_EPS);
            w[[i, j]] = wi;
            total += wi;
        }
        if let Some(j0) = exact {
            for j in 0..k {
                w[[i, j]] = if j == j0 { 1.0 } else { 0.0 };
            }
        } else {
            for j in 0..k {
                w[[i, j]] /= total;
            }
        }
    }
    Ok((idx, w))
}

/// Rigid transform of a cloud; radar channels and features are copied.
pub fn apply_se3(t: &SE3Transform, cloud: &PointCloud) -> PointCloud {
    let mut out = cloud.clone();
    out.positions = transform_positions(t, &cloud.positions);
    out
}

pub fn transform_positions(t: &SE3Transform, positions: &Array2<f64>) -> Array2<f64> {
    let r = t.rotation();
    let tr = t.translation();
    let mut out = positions.clone();
    for mut row in out.rows_mut() {
        let p = Vector3::new(row[0], row[1], row[2]);
        let q = r * p + tr;
        row[0] = q[0];
        row[1] = q[1];
        row[2] = q[2];
    }
    out
}

/// positions' = positions + flow.
pub fn warp(cloud: &PointCloud, flow: &FlowField) -> Result<PointCloud> {
    if cloud.len() != flow.len() {
        return Err(CoreError::Shape(format!(
            "flow rows {} do not match cloud size {}",
            flow.len(),
            cloud.len()
        )));
    }
    let mut out = cloud.clone();
    out.positions = &cloud.positions + &flow.vectors;
    Ok(out)
}

/// Cell index per point under the half-open voxel rule, or None when the
/// point falls outside the grid. Out-of-range points are excluded, not
/// clamped.
pub fn voxelize_2d(positions: &Array2<f64>, grid: &GridSpec) -> Vec<Option<(usize, usize)>> {
    let mut out = Vec::with_capacity(positions.nrows());
    for row in positions.rows() {
        let fx = (row[0] - grid.origin[0]) / grid.cell_size;
        let fy = (row[1] - grid.origin[1]) / grid.cell_size;
        let cx = fx.floor();
        let cy = fy.floor();
        if cx < 0.0 || cy < 0.0 || cx >= grid.shape[0] as f64 || cy >= grid.shape[1] as f64 {
            out.push(None);
        } else {
            out.push(Some((cx as usize, cy as usize)));
        }
    }
    out
}

/// Gaussian kernel density at every point of the cloud:
/// nu(p_i) = (1/N) sum_j exp(-|p_i - p_j|^2 / (2 bw^2)).
pub fn gaussian_kde(positions: &Array2<f64>, bandwidth: f64) -> Result<Array1<f64>> {
    if bandwidth <= 0.0 {
        return Err(CoreError::Invariant("bandwidth must be positive".into()));
    }
    let n = positions.nrows();
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut out = Array1::zeros(n);
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            let mut d = 0.0;
            for c in 0..3 {
                let diff = positions[[i, c]] - positions[[j, c]];
                d += diff * diff;
            }
            acc += (-d * inv).exp();
        }
        out[i] = acc / n as f64;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions = Array2::from_shape_fn((n, 3), |_| rng.gen_range(-5.0..5.0));
        PointCloud::from_positions(positions).unwrap()
    }

    #[test]
    fn knn_trivial_cases() {
        let q = PointCloud::from_positions(arr2(&[[0.0, 0.0, 0.0]])).unwrap();
        let t =
            PointCloud::from_positions(arr2(&[[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])).unwrap();
        let idx = knn_points(&q, &t, 1).unwrap();
        assert_eq!(idx[[0, 0]], 0);

        // query coincides with a target point
        let q2 = PointCloud::from_positions(arr2(&[[2.0, 0.0, 0.0]])).unwrap();
        let idx2 = knn_points(&q2, &t, 1).unwrap();
        assert_eq!(idx2[[0, 0]], 1);

        assert!(knn_points(&q, &t, 3).is_err());
    }

    #[test]
    fn knn_matches_exhaustive_oracle() {
        let q = random_cloud(50, 1);
        let t = random_cloud(50, 2);
        let k = 5;
        let idx = knn_points(&q, &t, k).unwrap();
        for i in 0..q.len() {
            // brute-force all-pairs sort
            let mut all: Vec<(f64, usize)> = (0..t.len())
                .map(|j| {
                    let d: f64 = (0..3)
                        .map(|c| (q.positions[[i, c]] - t.positions[[j, c]]).powi(2))
                        .sum();
                    (d, j)
                })
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            for j in 0..k {
                assert_eq!(idx[[i, j]], all[j].1, "row {i} slot {j}");
            }
        }
    }

    #[test]
    fn fps_full_and_single() {
        let cloud = random_cloud(12, 3);
        let all = farthest_point_sampling(&cloud, 12, 0).unwrap();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..12).collect::<Vec<_>>());

        let one = farthest_point_sampling(&cloud, 1, 4).unwrap();
        assert_eq!(one, vec![4]);
        assert!(farthest_point_sampling(&cloud, 13, 0).is_err());
    }

    #[test]
    fn fps_collinear_picks_far_end() {
        let cloud = PointCloud::from_positions(arr2(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
        ]))
        .unwrap();
        let sel = farthest_point_sampling(&cloud, 2, 0).unwrap();
        assert_eq!(sel, vec![0, 2]);
    }

    #[test]
    fn fps_prefix_monotone() {
        let cloud = random_cloud(40, 9);
        let m = 17;
        let full = farthest_point_sampling(&cloud, m, 0).unwrap();
        let prefix = farthest_point_sampling(&cloud, m - 1, 0).unwrap();
        assert_eq!(&full[..m - 1], &prefix[..]);
    }

    #[test]
    fn interpolation_exact_and_midpoint() {
        let src_pos = arr2(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let src_val = arr2(&[[1.0, 10.0], [3.0, 30.0]]);
        // query at a source point returns that source's value
        let at_src = inverse_distance_interpolate(&src_pos, &src_val, &arr2(&[[2.0, 0.0, 0.0]]), 2)
            .unwrap();
        assert_abs_diff_eq!(at_src[[0, 0]], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(at_src[[0, 1]], 30.0, epsilon = 1e-12);
        // midpoint of two equidistant sources is the mean
        let mid = inverse_distance_interpolate(&src_pos, &src_val, &arr2(&[[1.0, 0.0, 0.0]]), 2)
            .unwrap();
        assert_abs_diff_eq!(mid[[0, 0]], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mid[[0, 1]], 20.0, epsilon = 1e-12);
    }

    #[test]
    fn interpolation_matches_direct_formula() {
        let src_pos = arr2(&[
            [0.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [2.0, 0.0, 1.0],
            [0.0, 2.0, 2.0],
        ]);
        let src_val = arr2(&[[1.0], [2.0], [3.0], [4.0]]);
        let q = arr2(&[[0.5, 0.5, 0.5]]);
        let got = inverse_distance_interpolate(&src_pos, &src_val, &q, 3).unwrap();
        // hand evaluation over the three nearest sources (0, 1, 2)
        let d0 = (0.75f64).sqrt();
        let d1 = (0.75f64).sqrt();
        let d2 = (2.75f64).sqrt();
        let w0 = 1.0 / (d0 + INTERP_EPS);
        let w1 = 1.0 / (d1 + INTERP_EPS);
        let w2 = 1.0 / (d2 + INTERP_EPS);
        let expect = (w0 * 1.0 + w1 * 2.0 + w2 * 3.0) / (w0 + w1 + w2);
        assert_abs_diff_eq!(got[[0, 0]], expect, epsilon = 1e-12);
    }

    #[test]
    fn se3_identity_translation_compose() {
        let cloud = random_cloud(10, 4);
        let id = SE3Transform::identity();
        assert_eq!(apply_se3(&id, &cloud), cloud);

        let t = SE3Transform::from_rt(Matrix3::identity(), Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let origin = PointCloud::from_positions(arr2(&[[0.0, 0.0, 0.0]])).unwrap();
        let moved = apply_se3(&t, &origin);
        assert_abs_diff_eq!(moved.positions[[0, 0]], 1.0);
        assert_abs_diff_eq!(moved.positions[[0, 1]], 2.0);
        assert_abs_diff_eq!(moved.positions[[0, 2]], 3.0);

        // compose(T2, T1) applied == T2 after T1, via the matrix-product oracle
        let t1 = SE3Transform::yaw_translation(0.3, Vector3::new(1.0, 0.0, -0.5));
        let t2 = SE3Transform::yaw_translation(-0.7, Vector3::new(0.0, 2.0, 0.1));
        let sequential = apply_se3(&t2, &apply_se3(&t1, &cloud));
        let composed = apply_se3(&t2.compose(&t1), &cloud);
        for (a, b) in sequential.positions.iter().zip(composed.positions.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn se3_preserves_pairwise_distances() {
        let cloud = random_cloud(20, 5);
        let t = SE3Transform::yaw_translation(1.1, Vector3::new(-2.0, 0.7, 3.0));
        let moved = apply_se3(&t, &cloud);
        for i in 0..cloud.len() {
            for j in (i + 1)..cloud.len() {
                let d0: f64 = (0..3)
                    .map(|c| (cloud.positions[[i, c]] - cloud.positions[[j, c]]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let d1: f64 = (0..3)
                    .map(|c| (moved.positions[[i, c]] - moved.positions[[j, c]]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert_abs_diff_eq!(d0, d1, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn warp_roundtrip() {
        let cloud = random_cloud(15, 6);
        let zero = FlowField::zeros(15);
        assert_eq!(warp(&cloud, &zero).unwrap(), cloud);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = FlowField::new(Array2::from_shape_fn((15, 3), |_| rng.gen_range(-1.0..1.0)))
            .unwrap();
        let neg = FlowField::new(-f.vectors.clone()).unwrap();
        let back = warp(&warp(&cloud, &f).unwrap(), &neg).unwrap();
        for (a, b) in back.positions.iter().zip(cloud.positions.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert!(warp(&cloud, &FlowField::zeros(3)).is_err());
    }

    #[test]
    fn voxelize_rules() {
        let grid = GridSpec::new([0.0, 0.0], 1.0, [4, 4]).unwrap();
        // cell center of (0,0)
        let cells = voxelize_2d(&arr2(&[[0.5, 0.5, 0.0]]), &grid);
        assert_eq!(cells[0], Some((0, 0)));
        // shared edge belongs to the upper neighbor under the half-open rule
        let cells = voxelize_2d(&arr2(&[[1.0, 0.5, 0.0]]), &grid);
        assert_eq!(cells[0], Some((1, 0)));
        // out of range is flagged, not clamped
        let cells = voxelize_2d(&arr2(&[[-0.1, 0.5, 0.0], [4.0, 0.0, 0.0]]), &grid);
        assert_eq!(cells[0], None);
        assert_eq!(cells[1], None);
    }

    #[test]
    fn voxelize_matches_integer_division_oracle() {
        let grid = GridSpec::new([-8.0, -8.0], 0.8, [20, 20]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts = Array2::from_shape_fn((100, 3), |_| rng.gen_range(-10.0..10.0));
        let cells = voxelize_2d(&pts, &grid);
        for (i, cell) in cells.iter().enumerate() {
            let cx = ((pts[[i, 0]] + 8.0) / 0.8).floor() as i64;
            let cy = ((pts[[i, 1]] + 8.0) / 0.8).floor() as i64;
            let expect = if (0..20).contains(&cx) && (0..20).contains(&cy) {
                Some((cx as usize, cy as usize))
            } else {
                None
            };
            assert_eq!(*cell, expect);
        }
    }

    #[test]
    fn voxelize_cell_center_is_stable() {
        let grid = GridSpec::new([-3.0, 2.0], 0.7, [6, 5]).unwrap();
        for h in 0..6 {
            for w in 0..5 {
                let c = grid.cell_center(h, w);
                let cells = voxelize_2d(&arr2(&[[c[0], c[1], 0.0]]), &grid);
                assert_eq!(cells[0], Some((h, w)));
            }
        }
    }

    #[test]
    fn kde_trivial_and_oracle() {
        let single = arr2(&[[1.0, 2.0, 3.0]]);
        let nu = gaussian_kde(&single, 1.0).unwrap();
        assert_abs_diff_eq!(nu[0], 1.0, epsilon = 1e-15);

        let coincident = arr2(&[[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]);
        let nu = gaussian_kde(&coincident, 0.5).unwrap();
        assert_abs_diff_eq!(nu[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(nu[1], 1.0, epsilon = 1e-15);

        let cloud = random_cloud(10, 11);
        let bw = 1.3;
        let nu = gaussian_kde(&cloud.positions, bw).unwrap();
        for i in 0..10 {
            let mut acc = 0.0;
            for j in 0..10 {
                let d: f64 = (0..3)
                    .map(|c| (cloud.positions[[i, c]] - cloud.positions[[j, c]]).powi(2))
                    .sum();
                acc += (-d / (2.0 * bw * bw)).exp();
            }
            assert_abs_diff_eq!(nu[i], acc / 10.0, epsilon = 1e-12);
        }
    }
}
