//! Geometric prior extraction: frustum-cropped 2cm occupancy chunks and
//! pixel-voxel correspondences.
//!
//! Chunk origins snap to the global voxel lattice so a voxel keeps its
//! identity across overlapping chunks.

use rayon::prelude::*;
use rustc_hash::FxHashSet;
use thiserror::Error;

use crate::geometry::{frame_to_world_points, CameraFrame, WorldPoint};

#[derive(Debug, Error, PartialEq)]
pub enum GeoError {
    #[error("frame has no valid depth pixels")]
    NoValidDepth,
}

/// Axis-aligned bound of a frame's back-projected view frustum, in world
/// meters, already padded by one voxel on every side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrustumBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl FrustumBox {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Occupancy grid cropped from a frustum box. Occupied voxels are stored
/// as sorted, deduplicated linear indices (z-major: (z * ny + y) * nx + x).
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyChunk {
    pub frame_index: u32,
    pub origin: [f64; 3],
    pub voxel: f64,
    pub dims: [u32; 3],
    occupied: Vec<u64>,
}

impl OccupancyChunk {
    pub fn new(
        frame_index: u32,
        origin: [f64; 3],
        voxel: f64,
        dims: [u32; 3],
        mut occupied: Vec<u64>,
    ) -> Self {
        assert!(voxel > 0.0);
        occupied.sort_unstable();
        occupied.dedup();
        let cap = dims[0] as u64 * dims[1] as u64 * dims[2] as u64;
        assert!(occupied.last().is_none_or(|&i| i < cap), "occupied index out of bounds");
        Self { frame_index, origin, voxel, dims, occupied }
    }

    pub fn occupied(&self) -> &[u64] {
        &self.occupied
    }

    pub fn len(&self) -> usize {
        self.occupied.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied.is_empty()
    }

    #[inline]
    pub fn linearize(&self, ix: u32, iy: u32, iz: u32) -> u64 {
        (iz as u64 * self.dims[1] as u64 + iy as u64) * self.dims[0] as u64 + ix as u64
    }

    #[inline]
    pub fn delinearize(&self, idx: u64) -> [u32; 3] {
        let nx = self.dims[0] as u64;
        let ny = self.dims[1] as u64;
        [(idx % nx) as u32, ((idx / nx) % ny) as u32, (idx / (nx * ny)) as u32]
    }

    /// World-space center of a voxel.
    pub fn center(&self, idx: u64) -> [f64; 3] {
        let [ix, iy, iz] = self.delinearize(idx);
        [
            self.origin[0] + (ix as f64 + 0.5) * self.voxel,
            self.origin[1] + (iy as f64 + 0.5) * self.voxel,
            self.origin[2] + (iz as f64 + 0.5) * self.voxel,
        ]
    }

    pub fn is_occupied(&self, idx: u64) -> bool {
        self.occupied.binary_search(&idx).is_ok()
    }

    /// Rank of an occupied voxel in the sorted occupied list.
    pub fn rank_of(&self, idx: u64) -> Option<usize> {
        self.occupied.binary_search(&idx).ok()
    }

    /// 3x3x3 occupancy neighborhood around an occupied voxel, z-major,
    /// out-of-bounds neighbors read as 0.
    pub fn neighborhood(&self, idx: u64) -> [f64; 27] {
        let [ix, iy, iz] = self.delinearize(idx);
        let mut out = [0.0; 27];
        let mut k = 0;
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let nx = ix as i64 + dx;
                    let ny = iy as i64 + dy;
                    let nz = iz as i64 + dz;
                    if nx >= 0
                        && ny >= 0
                        && nz >= 0
                        && nx < self.dims[0] as i64
                        && ny < self.dims[1] as i64
                        && nz < self.dims[2] as i64
                        && self.is_occupied(self.linearize(nx as u32, ny as u32, nz as u32))
                    {
                        out[k] = 1.0;
                    }
                    k += 1;
                }
            }
        }
        out
    }
}

/// Pixel-voxel matches for one frame against its chunk, sorted by pixel
/// index.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelVoxelCorrs {
    pub frame_index: u32,
    pub matches: Vec<PixelVoxelMatch>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelVoxelMatch {
    pub pixel: (u16, u16),
    pub voxel: u64,
    pub distance: f32,
}

/// AABB of all back-projected valid-pixel world points, padded by one
/// voxel on all sides.
pub fn frustum_aabb(frame: &CameraFrame, voxel: f64) -> Result<FrustumBox, GeoError> {
    assert!(voxel > 0.0);
    let points = frame_to_world_points(frame, 1);
    if points.is_empty() {
        return Err(GeoError::NoValidDepth);
    }
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for (_, wp) in &points {
        let c = wp.coords();
        for i in 0..3 {
            min[i] = min[i].min(c[i]);
            max[i] = max[i].max(c[i]);
        }
    }
    for i in 0..3 {
        min[i] -= voxel;
        max[i] += voxel;
    }
    Ok(FrustumBox { min, max })
}

/// Bins surface points inside `bounds` into an occupancy grid with the
/// origin snapped down to the global `voxel` lattice. Points outside the
/// box are discarded.
pub fn crop_chunk(
    surface_points: &[WorldPoint],
    frame_index: u32,
    bounds: &FrustumBox,
    voxel: f64,
) -> OccupancyChunk {
    assert!(voxel > 0.0);
    let origin = [
        (bounds.min[0] / voxel).floor() * voxel,
        (bounds.min[1] / voxel).floor() * voxel,
        (bounds.min[2] / voxel).floor() * voxel,
    ];
    let dims = [
        ((bounds.max[0] - origin[0]) / voxel).floor() as u32 + 1,
        ((bounds.max[1] - origin[1]) / voxel).floor() as u32 + 1,
        ((bounds.max[2] - origin[2]) / voxel).floor() as u32 + 1,
    ];
    let nx = dims[0] as u64;
    let ny = dims[1] as u64;

    let occupied: FxHashSet<u64> = surface_points
        .par_iter()
        .fold(FxHashSet::default, |mut acc, wp| {
            let c = wp.coords();
            if bounds.contains(c) {
                let ix = ((c[0] - origin[0]) / voxel).floor() as u64;
                let iy = ((c[1] - origin[1]) / voxel).floor() as u64;
                let iz = ((c[2] - origin[2]) / voxel).floor() as u64;
                acc.insert((iz * ny + iy) * nx + ix);
            }
            acc
        })
        .reduce(FxHashSet::default, |mut a, b| {
            a.extend(b);
            a
        });

    let mut occupied: Vec<u64> = occupied.into_iter().collect();
    occupied.sort_unstable();
    OccupancyChunk::new(frame_index, origin, voxel, dims, occupied)
}

/// For each valid pixel of `frame`, the nearest occupied voxel center of
/// `chunk` within `radius`; ties break toward the lower linear voxel index.
/// Pixels with no voxel in range are omitted.
pub fn pixel_voxel_correspondences(
    frame: &CameraFrame,
    chunk: &OccupancyChunk,
    radius: f64,
) -> PixelVoxelCorrs {
    assert!(radius > 0.0);
    let points = frame_to_world_points(frame, 1);
    let r2 = radius * radius;
    // candidate cell window: centers within radius of a point in cell j
    // satisfy |i - j| <= floor(0.5 + radius / voxel)
    let reach = (0.5 + radius / chunk.voxel).floor() as i64;

    let matches: Vec<PixelVoxelMatch> = points
        .par_iter()
        .filter_map(|((u, v), wp)| {
            let c = wp.coords();
            let home = [
                ((c[0] - chunk.origin[0]) / chunk.voxel).floor() as i64,
                ((c[1] - chunk.origin[1]) / chunk.voxel).floor() as i64,
                ((c[2] - chunk.origin[2]) / chunk.voxel).floor() as i64,
            ];
            let mut best: Option<(u64, f64)> = None;
            for dz in -reach..=reach {
                for dy in -reach..=reach {
                    for dx in -reach..=reach {
                        let ix = home[0] + dx;
                        let iy = home[1] + dy;
                        let iz = home[2] + dz;
                        if ix < 0
                            || iy < 0
                            || iz < 0
                            || ix >= chunk.dims[0] as i64
                            || iy >= chunk.dims[1] as i64
                            || iz >= chunk.dims[2] as i64
                        {
                            continue;
                        }
                        let idx = chunk.linearize(ix as u32, iy as u32, iz as u32);
                        if !chunk.is_occupied(idx) {
                            continue;
                        }
                        let center = chunk.center(idx);
                        let d2 = (c[0] - center[0]).powi(2)
                            + (c[1] - center[1]).powi(2)
                            + (c[2] - center[2]).powi(2);
                        if d2 > r2 {
                            continue;
                        }
                        let better = match best {
                            None => true,
                            Some((bi, bd2)) => d2 < bd2 || (d2 == bd2 && idx < bi),
                        };
                        if better {
                            best = Some((idx, d2));
                        }
                    }
                }
            }
            best.map(|(idx, d2)| PixelVoxelMatch {
                pixel: (*u as u16, *v as u16),
                voxel: idx,
                distance: d2.sqrt() as f32,
            })
        })
        .collect();

    PixelVoxelCorrs { frame_index: frame.frame_index, matches }
}

/// Union of back-projected depth points over a whole sequence: the
/// point-cloud stand-in for a fused surface reconstruction.
pub fn sequence_surface_points(frames: &[CameraFrame], pixel_stride: u32) -> Vec<WorldPoint> {
    frames
        .par_iter()
        .map(|f| {
            frame_to_world_points(f, pixel_stride)
                .into_iter()
                .map(|(_, wp)| wp)
                .collect::<Vec<_>>()
        })
        .reduce(Vec::new, |mut a, mut b| {
            a.append(&mut b);
            a
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ColorImage, DepthMap, Intrinsics, RigidPose};
    use crate::scenes::{default_light_dir, generate_scene, render_frame, CameraPath};
    use nalgebra::Vector3;

    fn plane_frame(depth_value: f64) -> CameraFrame {
        let k = Intrinsics::new(40.0, 40.0, 16.0, 12.0, 32, 24).unwrap();
        let n = (32 * 24) as usize;
        CameraFrame::new(
            0,
            ColorImage::zeros(32, 24),
            DepthMap::new(32, 24, vec![depth_value; n]),
            k,
            RigidPose::identity(),
        )
    }

    #[test]
    fn frustum_of_facing_plane_brackets_its_depth() {
        // constant-depth frame: all world z = 2, so the box z range is
        // exactly [2 - voxel, 2 + voxel] and centered at 2
        let frame = plane_frame(2.0);
        let bx = frustum_aabb(&frame, 0.02).unwrap();
        assert!((bx.min[2] - (2.0 - 0.02)).abs() < 1e-12);
        assert!((bx.max[2] - (2.0 + 0.02)).abs() < 1e-12);
        assert!(((bx.min[2] + bx.max[2]) / 2.0 - 2.0).abs() < 1e-6);
        // x/y extents follow the corner rays: (u - cx) * d / fx
        let expect_x = (31.0 - 16.0) * 2.0 / 40.0 + 0.02;
        assert!((bx.max[0] - expect_x).abs() < 1e-12);
    }

    #[test]
    fn frustum_requires_valid_depth() {
        let frame = plane_frame(0.0);
        assert_eq!(frustum_aabb(&frame, 0.02), Err(GeoError::NoValidDepth));
    }

    #[test]
    fn frustum_of_single_pixel_is_one_point_plus_margin() {
        let mut frame = plane_frame(0.0);
        frame.depth.set(16, 12, 1.5);
        let bx = frustum_aabb(&frame, 0.02).unwrap();
        for i in 0..3 {
            assert!((bx.max[i] - bx.min[i] - 0.04).abs() < 1e-12);
        }
    }

    #[test]
    fn frustum_contains_every_backprojected_pixel() {
        let scene = generate_scene(3, 4);
        let path = CameraPath::circular(6, 48, 36, 90.0);
        for (i, pose) in path.poses.iter().enumerate() {
            let f = render_frame(&scene, i as u32, pose, &path.intrinsics, default_light_dir());
            let bx = frustum_aabb(&f, 0.02).unwrap();
            for (_, wp) in frame_to_world_points(&f, 1) {
                assert!(bx.contains(wp.coords()));
            }
        }
    }

    #[test]
    fn single_point_at_box_origin_occupies_origin_voxel() {
        let bounds = FrustumBox { min: [0.0; 3], max: [0.1; 3] };
        let chunk = crop_chunk(&[WorldPoint(Vector3::zeros())], 0, &bounds, 0.02);
        assert_eq!(chunk.occupied(), &[0]);
        assert_eq!(chunk.origin, [0.0; 3]);
    }

    #[test]
    fn subvoxel_points_share_one_voxel() {
        let bounds = FrustumBox { min: [0.0; 3], max: [0.1; 3] };
        let pts = [
            WorldPoint(Vector3::new(0.030, 0.001, 0.001)),
            WorldPoint(Vector3::new(0.035, 0.001, 0.001)),
        ];
        let chunk = crop_chunk(&pts, 0, &bounds, 0.02);
        assert_eq!(chunk.len(), 1);
    }

    #[test]
    fn points_outside_box_are_discarded() {
        let bounds = FrustumBox { min: [0.0; 3], max: [0.1; 3] };
        let pts = [WorldPoint(Vector3::new(0.5, 0.5, 0.5))];
        let chunk = crop_chunk(&pts, 0, &bounds, 0.02);
        assert!(chunk.is_empty());
    }

    /// Independent one-pass binning oracle over a plain BTreeSet.
    fn brute_force_bins(points: &[WorldPoint], bounds: &FrustumBox, voxel: f64) -> Vec<u64> {
        let origin = [
            (bounds.min[0] / voxel).floor() * voxel,
            (bounds.min[1] / voxel).floor() * voxel,
            (bounds.min[2] / voxel).floor() * voxel,
        ];
        let nx = ((bounds.max[0] - origin[0]) / voxel).floor() as u64 + 1;
        let ny = ((bounds.max[1] - origin[1]) / voxel).floor() as u64 + 1;
        let mut set = std::collections::BTreeSet::new();
        for wp in points {
            let c = wp.coords();
            if (0..3).all(|i| c[i] >= bounds.min[i] && c[i] <= bounds.max[i]) {
                let ix = ((c[0] - origin[0]) / voxel).floor() as u64;
                let iy = ((c[1] - origin[1]) / voxel).floor() as u64;
                let iz = ((c[2] - origin[2]) / voxel).floor() as u64;
                set.insert((iz * ny + iy) * nx + ix);
            }
        }
        set.into_iter().collect()
    }

    #[test]
    fn voxelization_matches_binning_oracle_on_scene() {
        let scene = generate_scene(8, 5);
        let path = CameraPath::circular(6, 48, 36, 90.0);
        let frames: Vec<CameraFrame> = path
            .poses
            .iter()
            .enumerate()
            .map(|(i, p)| render_frame(&scene, i as u32, p, &path.intrinsics, default_light_dir()))
            .collect();
        let surface = sequence_surface_points(&frames, 1);
        for f in &frames {
            let bx = frustum_aabb(f, 0.02).unwrap();
            let chunk = crop_chunk(&surface, f.frame_index, &bx, 0.02);
            let oracle = brute_force_bins(&surface, &bx, 0.02);
            assert_eq!(chunk.occupied(), oracle.as_slice());
            assert!(!chunk.is_empty());
        }
    }

    #[test]
    fn chunk_origin_snaps_to_global_lattice() {
        let bounds = FrustumBox { min: [0.013, -0.013, 1.001], max: [0.1, 0.1, 1.1] };
        let chunk = crop_chunk(&[], 0, &bounds, 0.02);
        for i in 0..3 {
            let cells = chunk.origin[i] / 0.02;
            assert!((cells - cells.round()).abs() < 1e-9);
            assert!(chunk.origin[i] <= bounds.min[i]);
        }
    }

    #[test]
    fn own_points_chunk_matches_nearly_all_pixels() {
        let scene = generate_scene(14, 3);
        let path = CameraPath::circular(4, 48, 36, 90.0);
        let f = render_frame(&scene, 0, &path.poses[0], &path.intrinsics, default_light_dir());
        let bx = frustum_aabb(&f, 0.02).unwrap();
        let own: Vec<WorldPoint> =
            frame_to_world_points(&f, 1).into_iter().map(|(_, w)| w).collect();
        let chunk = crop_chunk(&own, 0, &bx, 0.02);
        let corrs = pixel_voxel_correspondences(&f, &chunk, 0.02);
        let rate = corrs.matches.len() as f64 / own.len() as f64;
        assert!(rate >= 0.99, "match rate {rate}");
        // every pixel's own voxel center is at most half a diagonal away,
        // and 0.02 * sqrt(3) / 2 < 0.02, so the rate is exactly 1 here
        assert_eq!(corrs.matches.len(), own.len());
    }

    #[test]
    fn empty_chunk_yields_no_matches() {
        let frame = plane_frame(2.0);
        let chunk = OccupancyChunk::new(0, [0.0; 3], 0.02, [4, 4, 4], vec![]);
        let corrs = pixel_voxel_correspondences(&frame, &chunk, 0.02);
        assert!(corrs.matches.is_empty());
    }

    #[test]
    fn distant_voxels_are_excluded_by_radius() {
        // one voxel at the lattice origin; a pixel whose world point is
        // 5cm away must stay unmatched at a 2cm radius
        let mut frame = plane_frame(0.0);
        frame.depth.set(16, 12, 1.0); // world point (0, 0, 1)
        let chunk = OccupancyChunk::new(0, [0.0, 0.0, 1.04], 0.02, [4, 4, 4], vec![0]);
        // voxel center (0.01, 0.01, 1.05): distance ~0.051 from (0,0,1)
        let corrs = pixel_voxel_correspondences(&frame, &chunk, 0.02);
        assert!(corrs.matches.is_empty());
        let near = pixel_voxel_correspondences(&frame, &chunk, 0.06);
        assert_eq!(near.matches.len(), 1);
        assert_eq!(near.matches[0].voxel, 0);
    }

    /// Brute-force pixel-voxel oracle scanning every occupied voxel.
    fn brute_force_pixel_voxel(
        frame: &CameraFrame,
        chunk: &OccupancyChunk,
        radius: f64,
    ) -> Vec<PixelVoxelMatch> {
        let r2 = radius * radius;
        let mut out = Vec::new();
        for ((u, v), wp) in frame_to_world_points(frame, 1) {
            let c = wp.coords();
            let mut best: Option<(u64, f64)> = None;
            for &idx in chunk.occupied() {
                let center = chunk.center(idx);
                let d2 = (c[0] - center[0]).powi(2)
                    + (c[1] - center[1]).powi(2)
                    + (c[2] - center[2]).powi(2);
                if d2 <= r2 && best.is_none_or(|(_, bd2)| d2 < bd2) {
                    best = Some((idx, d2));
                }
            }
            if let Some((idx, d2)) = best {
                out.push(PixelVoxelMatch {
                    pixel: (u as u16, v as u16),
                    voxel: idx,
                    distance: d2.sqrt() as f32,
                });
            }
        }
        out
    }

    #[test]
    fn pixel_voxel_matches_equal_brute_force() {
        let scene = generate_scene(17, 4);
        let path = CameraPath::circular(5, 32, 24, 90.0);
        let frames: Vec<CameraFrame> = path
            .poses
            .iter()
            .enumerate()
            .map(|(i, p)| render_frame(&scene, i as u32, p, &path.intrinsics, default_light_dir()))
            .collect();
        let surface = sequence_surface_points(&frames, 2);
        for f in &frames {
            let bx = frustum_aabb(f, 0.02).unwrap();
            let chunk = crop_chunk(&surface, f.frame_index, &bx, 0.02);
            let fast = pixel_voxel_correspondences(f, &chunk, 0.02);
            let slow = brute_force_pixel_voxel(f, &chunk, 0.02);
            assert_eq!(fast.matches, slow);
            // soundness: recompute each distance from raw inputs
            for m in &fast.matches {
                let wp = crate::geometry::to_world(
                    crate::geometry::backproject(
                        m.pixel.0 as u32,
                        m.pixel.1 as u32,
                        f.depth.get(m.pixel.0 as u32, m.pixel.1 as u32),
                        &f.intrinsics,
                    )
                    .unwrap(),
                    &f.pose,
                );
                let center = chunk.center(m.voxel);
                let c = wp.coords();
                let d = ((c[0] - center[0]).powi(2)
                    + (c[1] - center[1]).powi(2)
                    + (c[2] - center[2]).powi(2))
                .sqrt();
                assert!(d <= 0.02);
                assert_eq!(d as f32, m.distance);
            }
        }
    }

    #[test]
    fn neighborhood_reads_missing_neighbors_as_zero() {
        let chunk = OccupancyChunk::new(0, [0.0; 3], 0.02, [3, 3, 3], vec![13]); // center voxel
        let nb = chunk.neighborhood(13);
        let expected: Vec<f64> =
            (0..27).map(|i| if i == 13 { 1.0 } else { 0.0 }).collect();
        assert_eq!(nb.to_vec(), expected);
        // corner voxel: out-of-bounds neighbors are zero
        let corner = OccupancyChunk::new(0, [0.0; 3], 0.02, [3, 3, 3], vec![0, 1]);
        let nb = corner.neighborhood(0);
        assert_eq!(nb[13], 1.0); // itself
        assert_eq!(nb[14], 1.0); // +x neighbor
        assert_eq!(nb.iter().sum::<f64>(), 2.0);
    }
}
