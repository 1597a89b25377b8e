//! Grid harmonization: kd-tree nearest-neighbor resampling, block-mean
//! coarsening and MSL to AGL re-leveling.
//!
//! Horizontal distances are taken in the raw coordinate units of the grid
//! (km or degrees); there is no geodesic correction.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::grid_io::{linspace, Grid3D, HeightDatum, TerrainGrid};

const DEFAULT_LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Balanced 2-D kd-tree over `(y, x)` points.
///
/// Queries return the exact nearest point by squared Euclidean distance;
/// equidistant points resolve to the lowest point index.
#[derive(Debug, Clone)]
pub struct KdIndex {
    points: Vec<[f64; 2]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
    leaf_size: usize,
}

impl KdIndex {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        Self::with_leaf_size(points, DEFAULT_LEAF_SIZE)
    }

    pub fn with_leaf_size(points: Vec<[f64; 2]>, leaf_size: usize) -> Result<Self> {
        if points.is_empty() {
            return validation("kd-tree needs at least one point");
        }
        if leaf_size == 0 {
            return validation("kd-tree leaf size must be positive");
        }
        if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return validation("kd-tree points must be finite");
        }
        let mut index = KdIndex { order: (0..points.len()).collect(), points, nodes: Vec::new(), leaf_size };
        let n = index.points.len();
        index.build(0, n, 0);
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    fn build(&mut self, start: usize, end: usize, depth: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= self.leaf_size {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = depth % 2;
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid, depth + 1);
        let right = self.build(mid, end, depth + 1);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// Index of the nearest point and its squared distance.
    pub fn nearest(&self, q: [f64; 2]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        best
    }

    fn search(&self, node: usize, q: [f64; 2], best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let p = self.points[i];
                    let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let delta = q[axis] - value;
                let (near, far) = if delta < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                // equal distance may still hold a lower index, so only prune strictly
                if delta * delta <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

fn grid_points(y_coords: &[f64], x_coords: &[f64]) -> Vec<[f64; 2]> {
    y_coords.iter().flat_map(|&y| x_coords.iter().map(move |&x| [y, x])).collect()
}

/// Destination-pixel to source-pixel mapping for nearest-neighbor resampling.
pub fn nn_source_indices(src: &Grid3D, dst_y: &[f64], dst_x: &[f64]) -> Result<Vec<usize>> {
    if dst_y.is_empty() || dst_x.is_empty() {
        return validation("destination coordinates are empty");
    }
    let index = KdIndex::new(grid_points(&src.y_coords, &src.x_coords))?;
    let targets = grid_points(dst_y, dst_x);
    Ok(targets.par_iter().map(|&q| index.nearest(q).0).collect())
}

/// Resamples every level of `src` onto `(dst_y, dst_x)` by nearest neighbor.
pub fn nn_resample(src: &Grid3D, dst_y: &[f64], dst_x: &[f64]) -> Result<Grid3D> {
    src.validate()?;
    let map = nn_source_indices(src, dst_y, dst_x)?;
    let plane = src.plane_len();
    let mut values = Vec::with_capacity(src.nz() * map.len());
    for z in 0..src.nz() {
        let level = &src.values[z * plane..(z + 1) * plane];
        values.extend(map.iter().map(|&i| level[i]));
    }
    let out = Grid3D { y_coords: dst_y.to_vec(), x_coords: dst_x.to_vec(), values, ..src.clone() };
    out.validate()?;
    Ok(out)
}

/// Block-averages one `ny x nx` plane. Trailing partial blocks average the
/// pixels they have; missing values are skipped and an all-missing block
/// yields `None`.
pub fn block_mean_plane(values: &[f64], ny: usize, nx: usize, factor: usize, is_missing: impl Fn(f64) -> bool) -> Vec<Option<f64>> {
    let oy = ny.div_ceil(factor);
    let ox = nx.div_ceil(factor);
    let mut out = Vec::with_capacity(oy * ox);
    for by in 0..oy {
        for bx in 0..ox {
            let mut sum = 0.0;
            let mut count = 0usize;
            for y in by * factor..((by + 1) * factor).min(ny) {
                for x in bx * factor..((bx + 1) * factor).min(nx) {
                    let v = values[y * nx + x];
                    if !is_missing(v) {
                        sum += v;
                        count += 1;
                    }
                }
            }
            out.push((count > 0).then(|| sum / count as f64));
        }
    }
    out
}

fn block_coords(coords: &[f64], factor: usize) -> Vec<f64> {
    coords.chunks(factor).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

/// Coarsens the horizontal grid by averaging `factor x factor` blocks.
pub fn block_mean(src: &Grid3D, factor: usize) -> Result<Grid3D> {
    if factor < 1 {
        return validation("block-mean factor must be at least 1");
    }
    src.validate()?;
    let (nz, ny, nx) = src.dims();
    let plane = ny * nx;
    let missing = src.missing_value;
    let mut values = Vec::new();
    for z in 0..nz {
        let level: Vec<f64> = src.values[z * plane..(z + 1) * plane].iter().map(|&v| v as f64).collect();
        let coarse = block_mean_plane(&level, ny, nx, factor, |v| src.is_missing(v as f32));
        values.extend(coarse.into_iter().map(|v| v.map_or(missing, |m| m as f32)));
    }
    let out =
        Grid3D { y_coords: block_coords(&src.y_coords, factor), x_coords: block_coords(&src.x_coords, factor), values, ..src.clone() };
    out.validate()?;
    Ok(out)
}

/// Target above-ground heights (km) for vertical re-leveling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub targets: Vec<f64>,
}

impl Default for LevelSpec {
    /// 24 levels from 0.5 to 17 km AGL.
    fn default() -> Self {
        LevelSpec { targets: linspace(0.5, 17.0, 24) }
    }
}

impl LevelSpec {
    pub fn new(targets: Vec<f64>) -> Result<Self> {
        if targets.is_empty() {
            return validation("level spec needs at least one target");
        }
        if targets.iter().any(|t| !t.is_finite()) || targets.windows(2).any(|w| w[1] <= w[0]) {
            return validation("level targets must be finite and strictly ascending");
        }
        Ok(LevelSpec { targets })
    }

    pub fn evenly_spaced(start: f64, stop: f64, count: usize) -> Result<Self> {
        Self::new(linspace(start, stop, count))
    }
}

impl FromStr for LevelSpec {
    type Err = Error;

    /// Parses `start:stop:count`, e.g. `0.5:17:24`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Validation(format!("level spec {s:?} is not start:stop:count"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let start: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let stop: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
        Self::evenly_spaced(start, stop, count)
    }
}

/// Linear interpolation of one column onto `targets`.
///
/// `heights` must ascend. Targets above the top level are `None`; targets
/// below the bottom level take the bottom value. A bracket containing a
/// missing value yields `None`.
pub fn interp_column(heights: &[f64], values: &[Option<f64>], targets: &[f64]) -> Vec<Option<f64>> {
    let n = heights.len();
    targets
        .iter()
        .map(|&t| {
            if t > heights[n - 1] {
                return None;
            }
            if t <= heights[0] {
                return values[0];
            }
            let hi = heights.partition_point(|&h| h < t);
            if heights[hi] == t {
                return values[hi];
            }
            let lo = hi - 1;
            let (v0, v1) = (values[lo]?, values[hi]?);
            let frac = (t - heights[lo]) / (heights[hi] - heights[lo]);
            Some(v0 + frac * (v1 - v0))
        })
        .collect()
}

/// Converts a mean-sea-level grid to above-ground levels.
pub fn to_agl(src: &Grid3D, terrain: &TerrainGrid, levels: &LevelSpec) -> Result<Grid3D> {
    src.validate()?;
    terrain.validate()?;
    if src.height_datum == HeightDatum::Agl {
        return validation("grid is already above ground level");
    }
    if terrain.y_coords != src.y_coords || terrain.x_coords != src.x_coords {
        return validation("terrain horizontal grid does not match the source grid");
    }
    let (nz, ny, nx) = src.dims();
    let plane = ny * nx;
    let nt = levels.targets.len();
    let columns: Vec<Vec<Option<f64>>> = (0..plane)
        .into_par_iter()
        .map(|p| {
            let elevation = terrain.elevation[p];
            let heights: Vec<f64> = src.z_coords.iter().map(|z| z - elevation).collect();
            let column: Vec<Option<f64>> = (0..nz)
                .map(|z| {
                    let v = src.values[z * plane + p];
                    (!src.is_missing(v)).then_some(v as f64)
                })
                .collect();
            interp_column(&heights, &column, &levels.targets)
        })
        .collect();
    let mut values = vec![src.missing_value; nt * plane];
    for (p, col) in columns.iter().enumerate() {
        for (t, v) in col.iter().enumerate() {
            if let Some(v) = v {
                values[t * plane + p] = *v as f32;
            }
        }
    }
    let out = Grid3D { z_coords: levels.targets.clone(), height_datum: HeightDatum::Agl, values, ..src.clone() };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_io::DEFAULT_MISSING;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_scan(points: &[[f64; 2]], q: [f64; 2]) -> usize {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    fn plane(name: &str, y: Vec<f64>, x: Vec<f64>, v: Vec<f32>) -> Grid3D {
        Grid3D::new(name, "u", vec![1.0], y, x, HeightDatum::Agl, v).unwrap()
    }

    #[test]
    fn kd_tree_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for leaf in [1, 3, 8] {
            let pts: Vec<[f64; 2]> = (0..500).map(|_| [rng.random_range(0.0..50.0), rng.random_range(0.0..50.0)]).collect();
            let tree = KdIndex::with_leaf_size(pts.clone(), leaf).unwrap();
            for _ in 0..500 {
                let q = [rng.random_range(-5.0..55.0), rng.random_range(-5.0..55.0)];
                assert_eq!(tree.nearest(q).0, linear_scan(&pts, q));
            }
        }
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let pts = vec![[0.0, 2.0], [0.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let tree = KdIndex::with_leaf_size(pts, 1).unwrap();
        assert_eq!(tree.nearest([0.0, 0.5]).0, 1);
        assert_eq!(tree.nearest([0.0, 1.0]).0, 2);
        assert_eq!(tree.nearest([0.0, 1.5]).0, 0);
    }

    #[test]
    fn empty_index_rejected() {
        assert!(KdIndex::new(vec![]).is_err());
    }

    #[test]
    fn identity_resample() {
        let g = plane("a", vec![0.0, 1.0, 2.0], vec![0.0, 3.0], (0..6).map(|v| v as f32).collect());
        let out = nn_resample(&g, &g.y_coords, &g.x_coords).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn single_source_point_fills_everything() {
        let g = plane("a", vec![5.0], vec![5.0], vec![7.5]);
        let out = nn_resample(&g, &[0.0, 1.0, 9.0], &[2.0, 30.0]).unwrap();
        assert!(out.values.iter().all(|&v| v == 7.5));
    }

    #[test]
    fn two_point_nearest() {
        let g = plane("a", vec![0.0], vec![0.0, 10.0], vec![1.0, 2.0]);
        let out = nn_resample(&g, &[0.0], &[4.0, 5.0, 6.0]).unwrap();
        // x=5 is equidistant; lowest source index wins
        assert_eq!(out.values, vec![1.0, 1.0, 2.0]);
    }

    #[test]
    fn empty_destination_rejected() {
        let g = plane("a", vec![0.0], vec![0.0], vec![1.0]);
        assert!(matches!(nn_resample(&g, &[], &[1.0]), Err(Error::Validation(_))));
    }

    #[test]
    fn block_mean_examples() {
        let g = plane("a", vec![0.0, 1.0], vec![0.0, 1.0], vec![1.0, 3.0, 5.0, 7.0]);
        let out = block_mean(&g, 2).unwrap();
        assert_eq!(out.values, vec![4.0]);
        assert_eq!(out.y_coords, vec![0.5]);
        assert_eq!(block_mean(&g, 1).unwrap(), g);
        let ones = plane("b", vec![0.0, 1.0], vec![0.0, 1.0], vec![1.0; 4]);
        assert_eq!(block_mean(&ones, 2).unwrap().values, vec![1.0]);
        assert!(block_mean(&g, 0).is_err());
    }

    #[test]
    fn block_mean_partial_and_missing() {
        let g = plane(
            "a",
            vec![0.0, 1.0, 2.0],
            vec![0.0, 1.0, 2.0],
            vec![1.0, 3.0, 10.0, 5.0, DEFAULT_MISSING, 20.0, 2.0, 4.0, DEFAULT_MISSING],
        );
        let out = block_mean(&g, 2).unwrap();
        assert_eq!(out.values, vec![3.0, 15.0, 3.0, DEFAULT_MISSING]);
        assert_eq!(out.x_coords, vec![0.5, 2.0]);
    }

    #[test]
    fn agl_conversion_examples() {
        let terrain = TerrainGrid::flat(vec![0.0], vec![0.0], 1.5).unwrap();
        let src = Grid3D::new("r", "dBZ", vec![2.0, 2.5, 3.0], vec![0.0], vec![0.0], HeightDatum::Msl, vec![10.0, 20.0, 30.0]).unwrap();
        let out = to_agl(&src, &terrain, &LevelSpec::new(vec![0.5, 0.75, 1.0, 1.5, 2.0]).unwrap()).unwrap();
        assert_eq!(out.height_datum, HeightDatum::Agl);
        assert_eq!(out.values, vec![10.0, 15.0, 20.0, 30.0, DEFAULT_MISSING]);
        assert!(to_agl(&out, &terrain, &LevelSpec::default()).is_err());
    }

    #[test]
    fn agl_top_and_bottom_rules() {
        let heights = [0.5, 1.0, 12.0];
        let vals = [Some(10.0), Some(20.0), Some(5.0)];
        let out = interp_column(&heights, &vals, &[0.1, 0.75, 17.0]);
        assert_eq!(out, vec![Some(10.0), Some(15.0), None]);
        let gap = interp_column(&heights, &[Some(1.0), None, Some(3.0)], &[0.75, 1.0, 6.0]);
        assert_eq!(gap, vec![None, None, None]);
    }

    #[test]
    fn zero_terrain_identity() {
        let z = vec![0.5, 1.0, 2.0, 4.0];
        let src = Grid3D::new("r", "dBZ", z.clone(), vec![0.0, 1.0], vec![0.0], HeightDatum::Msl, (0..8).map(|v| v as f32 * 1.5).collect())
            .unwrap();
        let terrain = TerrainGrid::flat(vec![0.0, 1.0], vec![0.0], 0.0).unwrap();
        let out = to_agl(&src, &terrain, &LevelSpec::new(z).unwrap()).unwrap();
        assert_eq!(out.values, src.values);
    }

    #[test]
    fn level_spec_parsing() {
        let l: LevelSpec = "0.5:17:24".parse().unwrap();
        assert_eq!(l.targets.len(), 24);
        assert_eq!(l.targets[0], 0.5);
        assert_abs_diff_eq!(l.targets[23], 17.0, epsilon = 1e-12);
        assert!("1:2".parse::<LevelSpec>().is_err());
        assert!("3:1:4".parse::<LevelSpec>().is_err());
        assert!("1:2:0".parse::<LevelSpec>().is_err());
    }

    proptest! {
        #[test]
        fn prop_block_mean_preserves_domain_mean(vals in proptest::collection::vec(-100.0f64..100.0, 36)) {
            let coarse = block_mean_plane(&vals, 6, 6, 3, |_| false);
            let fine_mean = vals.iter().sum::<f64>() / 36.0;
            let coarse_mean = coarse.iter().map(|v| v.unwrap()).sum::<f64>() / coarse.len() as f64;
            prop_assert!((fine_mean - coarse_mean).abs() <= 1e-12 * fine_mean.abs().max(1.0));
        }

        #[test]
        fn prop_interp_is_bounded(v0 in -50.0f64..50.0, v1 in -50.0f64..50.0, t in 0.5f64..1.0) {
            let out = interp_column(&[0.5, 1.0], &[Some(v0), Some(v1)], &[t])[0].unwrap();
            prop_assert!(out >= v0.min(v1) - 1e-12 && out <= v0.max(v1) + 1e-12);
        }
    }
}
