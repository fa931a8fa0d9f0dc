//! Multi-view pixel correspondence mining.
//!
//! Frames are matched by lifting valid depth pixels to world space and
//! pairing each source pixel with the nearest target point within the
//! matching radius (default 2cm). A spatial hash grid with cell size equal
//! to the radius makes the search O(1) per pixel while producing exactly
//! the same set as the brute-force oracle.

use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{frame_to_world_points, pixel_index, CameraFrame, WorldPoint};

#[derive(Debug, Error, PartialEq)]
pub enum MinerError {
    #[error("both frames have zero valid pixels")]
    ZeroValidPixels,
}

/// One pixel-pixel match with its world-space distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelMatch {
    pub pixel_a: (u16, u16),
    pub pixel_b: (u16, u16),
    pub distance: f32,
}

/// The match set M between two frames, sorted by source pixel index; each
/// source pixel appears at most once.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub frame_a: u32,
    pub frame_b: u32,
    pub valid_a: u64,
    pub valid_b: u64,
    pub matches: Vec<PixelMatch>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

/// A retained frame pair with its overlap ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FramePair {
    pub i: u32,
    pub j: u32,
    pub overlap: f64,
    pub correspondence_count: u64,
}

#[inline]
pub(crate) fn dist2(a: &WorldPoint, b: &WorldPoint) -> f64 {
    let dx = a.0.x - b.0.x;
    let dy = a.0.y - b.0.y;
    let dz = a.0.z - b.0.z;
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn cell_of(p: &WorldPoint, cell: f64) -> (i32, i32, i32) {
    (
        (p.0.x / cell).floor() as i32,
        (p.0.y / cell).floor() as i32,
        (p.0.z / cell).floor() as i32,
    )
}

/// Fixed-radius nearest-neighbor structure over world points with pixel
/// provenance. Cell size >= query radius guarantees the 3x3x3 neighborhood
/// covers every candidate.
pub struct SpatialHashGrid<'a> {
    cell: f64,
    buckets: FxHashMap<(i32, i32, i32), Vec<u32>>,
    points: &'a [((u32, u32), WorldPoint)],
}

impl<'a> SpatialHashGrid<'a> {
    pub fn build(points: &'a [((u32, u32), WorldPoint)], cell: f64) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        let mut buckets: FxHashMap<(i32, i32, i32), Vec<u32>> = FxHashMap::default();
        for (i, (_, wp)) in points.iter().enumerate() {
            buckets.entry(cell_of(wp, cell)).or_default().push(i as u32);
        }
        Self { cell, buckets, points }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn cell_index(&self, p: &WorldPoint) -> (i32, i32, i32) {
        cell_of(p, self.cell)
    }

    /// Nearest stored point within `radius` of `query`, ties broken by the
    /// lower point index (equivalently, lower pixel index: insertion is in
    /// ascending pixel order). Requires radius <= cell size.
    pub fn query_nearest(&self, query: &WorldPoint, radius: f64) -> Option<(u32, f64)> {
        debug_assert!(radius <= self.cell + 1e-12, "radius must not exceed cell size");
        let (cx, cy, cz) = cell_of(query, self.cell);
        let r2 = radius * radius;
        let mut best: Option<(u32, f64)> = None;
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let Some(bucket) = self.buckets.get(&(cx + dx, cy + dy, cz + dz)) else {
                        continue;
                    };
                    for &idx in bucket {
                        let d2 = dist2(query, &self.points[idx as usize].1);
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
        }
        best
    }
}

/// Builds a grid from prepared points; exposed separately so callers can
/// reuse one grid across many pair queries.
pub fn build_grid(points: &[((u32, u32), WorldPoint)], cell: f64) -> SpatialHashGrid<'_> {
    SpatialHashGrid::build(points, cell)
}

/// Grid-accelerated pixel correspondence extraction between two frames at
/// the default pixel stride of 1.
pub fn match_frames(frame_a: &CameraFrame, frame_b: &CameraFrame, radius: f64) -> CorrespondenceSet {
    match_frames_strided(frame_a, frame_b, radius, 1)
}

/// As [`match_frames`], sampling both frames at `pixel_stride`.
pub fn match_frames_strided(
    frame_a: &CameraFrame,
    frame_b: &CameraFrame,
    radius: f64,
    pixel_stride: u32,
) -> CorrespondenceSet {
    assert!(radius > 0.0, "radius must be positive");
    let points_a = frame_to_world_points(frame_a, pixel_stride);
    let points_b = frame_to_world_points(frame_b, pixel_stride);
    let grid = SpatialHashGrid::build(&points_b, radius);
    match_points_against_grid(
        frame_a.frame_index,
        frame_b.frame_index,
        &points_a,
        &grid,
        radius,
    )
}

/// Matches prepared source points against a prebuilt target grid. The
/// pair-mining path uses this to reuse per-frame grids.
pub fn match_points_against_grid(
    frame_a: u32,
    frame_b: u32,
    points_a: &[((u32, u32), WorldPoint)],
    grid: &SpatialHashGrid<'_>,
    radius: f64,
) -> CorrespondenceSet {
    let matches: Vec<PixelMatch> = points_a
        .par_iter()
        .filter_map(|((ua, va), wa)| {
            grid.query_nearest(wa, radius).map(|(bi, d2)| {
                let (ub, vb) = grid.points[bi as usize].0;
                PixelMatch {
                    pixel_a: (*ua as u16, *va as u16),
                    pixel_b: (ub as u16, vb as u16),
                    distance: d2.sqrt() as f32,
                }
            })
        })
        .collect();

    CorrespondenceSet {
        frame_a,
        frame_b,
        valid_a: points_a.len() as u64,
        valid_b: grid.len() as u64,
        matches,
    }
}

/// Overlap ratio 2|M| / (|valid_a| + |valid_b|), clamped to [0, 1].
pub fn compute_overlap(corrs: &CorrespondenceSet) -> Result<f64, MinerError> {
    let denom = corrs.valid_a + corrs.valid_b;
    if denom == 0 {
        return Err(MinerError::ZeroValidPixels);
    }
    Ok((2.0 * corrs.matches.len() as f64 / denom as f64).clamp(0.0, 1.0))
}

/// Configuration for [`mine_pairs`]; defaults follow the standard recipe:
/// every 25th frame, 2cm radius, 30% minimum overlap.
#[derive(Debug, Clone, Copy)]
pub struct MineConfig {
    pub frame_stride: usize,
    pub min_overlap: f64,
    pub radius: f64,
    pub pixel_stride: u32,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self { frame_stride: 25, min_overlap: 0.3, radius: 0.02, pixel_stride: 1 }
    }
}

/// Subsamples every `frame_stride`-th frame, evaluates all unordered pairs
/// among the survivors, and keeps those with overlap >= `min_overlap`.
/// Output is ordered by (i, j).
pub fn mine_pairs(seq: &[CameraFrame], cfg: &MineConfig) -> Vec<FramePair> {
    assert!(!seq.is_empty(), "sequence must be nonempty");
    assert!(cfg.frame_stride >= 1);
    let kept: Vec<&CameraFrame> = seq.iter().step_by(cfg.frame_stride).collect();

    let points: Vec<Vec<((u32, u32), WorldPoint)>> = kept
        .par_iter()
        .map(|f| frame_to_world_points(f, cfg.pixel_stride))
        .collect();
    let grids: Vec<SpatialHashGrid<'_>> =
        points.iter().map(|p| SpatialHashGrid::build(p, cfg.radius)).collect();

    let mut candidates = Vec::new();
    for i in 0..kept.len() {
        for j in (i + 1)..kept.len() {
            candidates.push((i, j));
        }
    }

    candidates
        .par_iter()
        .filter_map(|&(i, j)| {
            let corrs = match_points_against_grid(
                kept[i].frame_index,
                kept[j].frame_index,
                &points[i],
                &grids[j],
                cfg.radius,
            );
            let overlap = compute_overlap(&corrs).unwrap_or(0.0);
            (overlap >= cfg.min_overlap).then_some(FramePair {
                i: kept[i].frame_index,
                j: kept[j].frame_index,
                overlap,
                correspondence_count: corrs.matches.len() as u64,
            })
        })
        .collect()
}

/// Uniform sample without replacement of min(k, |M|) matches, deterministic
/// in `seed`, preserving the sort-by-source-pixel invariant.
pub fn subsample_matches(corrs: &CorrespondenceSet, k: usize, seed: u64) -> CorrespondenceSet {
    assert!(k >= 1, "k must be >= 1");
    if corrs.matches.len() <= k {
        return corrs.clone();
    }
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, corrs.matches.len(), k).into_vec();
    picked.sort_unstable();
    CorrespondenceSet {
        frame_a: corrs.frame_a,
        frame_b: corrs.frame_b,
        valid_a: corrs.valid_a,
        valid_b: corrs.valid_b,
        matches: picked.iter().map(|&i| corrs.matches[i]).collect(),
    }
}

/// Sort key used by tests and serialization checks.
pub fn source_pixel_key(m: &PixelMatch, width: u32) -> u64 {
    pixel_index(m.pixel_a.0 as u32, m.pixel_a.1 as u32, width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ColorImage, DepthMap, Intrinsics, RigidPose};
    use crate::scenes::{
        default_light_dir, generate_scene, oracle_correspondences, render_frame, CameraPath,
    };
    use nalgebra::Vector3;

    #[test]
    fn grid_cells_use_floor_semantics() {
        let pts = vec![
            ((0u32, 0u32), WorldPoint(Vector3::new(0.01, 0.01, 0.01))),
            ((1, 0), WorldPoint(Vector3::new(-0.001, 0.0, 0.0))),
        ];
        let grid = SpatialHashGrid::build(&pts, 0.02);
        assert_eq!(grid.cell_index(&pts[0].1), (0, 0, 0));
        assert_eq!(grid.cell_index(&pts[1].1), (-1, 0, 0));
    }

    #[test]
    fn empty_grid_returns_no_neighbors() {
        let pts: Vec<((u32, u32), WorldPoint)> = Vec::new();
        let grid = SpatialHashGrid::build(&pts, 0.02);
        assert!(grid.is_empty());
        assert!(grid.query_nearest(&WorldPoint(Vector3::zeros()), 0.02).is_none());
    }

    #[test]
    fn query_finds_neighbors_across_cell_boundaries() {
        let pts = vec![((3u32, 4u32), WorldPoint(Vector3::new(0.019, 0.0, 0.0)))];
        let grid = SpatialHashGrid::build(&pts, 0.02);
        // query in the adjacent cell, within radius
        let hit = grid.query_nearest(&WorldPoint(Vector3::new(0.021, 0.0, 0.0)), 0.02);
        assert_eq!(hit.map(|(i, _)| i), Some(0));
    }

    fn synthetic_pair(seed: u64, n_frames: usize, a: usize, b: usize) -> (CameraFrame, CameraFrame) {
        let scene = generate_scene(seed, 4);
        let path = CameraPath::circular(n_frames, 48, 36, 90.0);
        let fa = render_frame(&scene, a as u32, &path.poses[a], &path.intrinsics, default_light_dir());
        let fb = render_frame(&scene, b as u32, &path.poses[b], &path.intrinsics, default_light_dir());
        (fa, fb)
    }

    #[test]
    fn identical_frames_match_completely_at_zero_distance() {
        let (fa, _) = synthetic_pair(4, 8, 0, 1);
        let set = match_frames(&fa, &fa, 0.02);
        assert_eq!(set.matches.len() as u64, set.valid_a);
        assert!(set.matches.iter().all(|m| m.distance == 0.0 && m.pixel_a == m.pixel_b));
        assert_eq!(compute_overlap(&set).unwrap(), 1.0);
    }

    #[test]
    fn miner_equals_oracle_on_overlapping_views() {
        for seed in [1u64, 2, 3] {
            let (fa, fb) = synthetic_pair(seed, 10, 0, 1);
            let mined = match_frames(&fa, &fb, 0.02);
            let oracle = oracle_correspondences(&fa, &fb, 0.02);
            assert_eq!(mined, oracle, "seed {seed}");
            assert!(!mined.matches.is_empty(), "seed {seed} produced no matches");
        }
    }

    #[test]
    fn miner_equals_oracle_under_stride() {
        let (fa, fb) = synthetic_pair(6, 10, 0, 1);
        let mined = match_frames_strided(&fa, &fb, 0.02, 3);
        let oracle = crate::scenes::oracle_correspondences_strided(&fa, &fb, 0.02, 3);
        assert_eq!(mined, oracle);
    }

    #[test]
    fn all_invalid_target_yields_empty_set() {
        let (fa, _) = synthetic_pair(4, 8, 0, 1);
        let k = fa.intrinsics;
        let fb = CameraFrame::new(
            9,
            ColorImage::zeros(k.width, k.height),
            DepthMap::zeros(k.width, k.height),
            k,
            RigidPose::identity(),
        );
        let set = match_frames(&fa, &fb, 0.02);
        assert!(set.matches.is_empty());
        assert_eq!(set.valid_b, 0);
        assert_eq!(compute_overlap(&set).unwrap(), 0.0);
    }

    #[test]
    fn overlap_errors_when_no_pixels_anywhere() {
        let set = CorrespondenceSet {
            frame_a: 0,
            frame_b: 1,
            valid_a: 0,
            valid_b: 0,
            matches: vec![],
        };
        assert_eq!(compute_overlap(&set), Err(MinerError::ZeroValidPixels));
    }

    #[test]
    fn half_overlap_is_exactly_half() {
        // two identity-rotation cameras viewing the plane z = 1, the second
        // shifted so exactly the left half of A revisits B's right half;
        // radius below the 1cm pixel pitch keeps boundary pixels unmatched.
        let w = 64u32;
        let h = 16u32;
        let fx = 100.0;
        let k = Intrinsics::new(fx, fx, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap();
        let scene = crate::scenes::SceneSpec {
            seed: 0,
            boxes: vec![],
            planes: vec![crate::scenes::ScenePlane {
                normal: [0.0, 0.0, -1.0],
                offset: -1.0,
                albedo: [0.5, 0.5, 0.5],
                salt: 1,
            }],
            room: crate::scenes::RoomBounds { min: [-9.0; 3], max: [9.0; 3] },
        };
        let shift = (w / 2) as f64 / fx;
        let pose_a = RigidPose::identity();
        let pose_b = RigidPose::from_rotation_translation(
            nalgebra::Matrix3::identity(),
            Vector3::new(shift, 0.0, 0.0),
        )
        .unwrap();
        let fa = render_frame(&scene, 0, &pose_a, &k, default_light_dir());
        let fb = render_frame(&scene, 1, &pose_b, &k, default_light_dir());
        assert_eq!(fa.depth.valid_count() as u64, (w * h) as u64);

        let radius = 0.005;
        let mined = match_frames(&fa, &fb, radius);
        let oracle = oracle_correspondences(&fa, &fb, radius);
        assert_eq!(mined, oracle);
        assert_eq!(mined.matches.len() as u64, (w * h / 2) as u64);
        assert_eq!(compute_overlap(&mined).unwrap(), 0.5);
    }

    #[test]
    fn mine_pairs_counts_candidates_and_orders_output() {
        let scene = generate_scene(12, 3);
        let path = CameraPath::circular(100, 32, 24, 90.0);
        let frames: Vec<CameraFrame> = path
            .poses
            .iter()
            .enumerate()
            .map(|(i, p)| render_frame(&scene, i as u32, p, &path.intrinsics, default_light_dir()))
            .collect();
        let pairs = mine_pairs(&frames, &MineConfig::default());
        // candidates are frames {0, 25, 50, 75}; retained pairs come ordered
        for p in &pairs {
            assert!(p.i < p.j);
            assert!([0u32, 25, 50, 75].contains(&p.i));
            assert!([0u32, 25, 50, 75].contains(&p.j));
            assert!(p.overlap >= 0.3);
        }
        let keys: Vec<(u32, u32)> = pairs.iter().map(|p| (p.i, p.j)).collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn identical_candidate_frames_are_retained() {
        let scene = generate_scene(4, 2);
        let path = CameraPath::circular(2, 32, 24, 90.0);
        let f0 = render_frame(&scene, 0, &path.poses[0], &path.intrinsics, default_light_dir());
        let mut f1 = f0.clone();
        f1.frame_index = 1;
        let pairs = mine_pairs(&[f0, f1], &MineConfig { frame_stride: 1, ..Default::default() });
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].overlap, 1.0);
    }

    #[test]
    fn pair_filter_is_monotone_in_min_overlap() {
        let scene = generate_scene(21, 4);
        let path = CameraPath::circular(8, 32, 24, 90.0);
        let frames: Vec<CameraFrame> = path
            .poses
            .iter()
            .enumerate()
            .map(|(i, p)| render_frame(&scene, i as u32, p, &path.intrinsics, default_light_dir()))
            .collect();
        let lo = mine_pairs(
            &frames,
            &MineConfig { frame_stride: 1, min_overlap: 0.3, ..Default::default() },
        );
        let hi = mine_pairs(
            &frames,
            &MineConfig { frame_stride: 1, min_overlap: 0.5, ..Default::default() },
        );
        let lo_keys: std::collections::BTreeSet<(u32, u32)> =
            lo.iter().map(|p| (p.i, p.j)).collect();
        for p in &hi {
            assert!(lo_keys.contains(&(p.i, p.j)));
        }
    }

    #[test]
    fn subsample_returns_everything_when_k_exceeds_size() {
        let (fa, fb) = synthetic_pair(4, 10, 0, 1);
        let set = match_frames(&fa, &fb, 0.02);
        assert!(set.len() >= 10);
        let sub = subsample_matches(&set, set.len() + 10, 7);
        assert_eq!(sub, set);
    }

    #[test]
    fn subsample_is_deterministic_and_sorted() {
        let (fa, fb) = synthetic_pair(4, 10, 0, 1);
        let set = match_frames(&fa, &fb, 0.02);
        let k = set.len() / 2;
        let s1 = subsample_matches(&set, k, 99);
        let s2 = subsample_matches(&set, k, 99);
        assert_eq!(s1, s2);
        assert_eq!(s1.len(), k);
        let w = fa.width();
        let keys: Vec<u64> = s1.matches.iter().map(|m| source_pixel_key(m, w)).collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted);
        assert_ne!(s1, subsample_matches(&set, k, 100));
    }

    #[test]
    fn subsample_frequencies_are_uniform() {
        // 10k seeds, pick 100 of 1000: every element should land near 1/10
        let matches: Vec<PixelMatch> = (0..1000)
            .map(|i| PixelMatch {
                pixel_a: ((i % 100) as u16, (i / 100) as u16),
                pixel_b: (0, 0),
                distance: 0.0,
            })
            .collect();
        let set = CorrespondenceSet {
            frame_a: 0,
            frame_b: 1,
            valid_a: 1000,
            valid_b: 1000,
            matches,
        };
        let mut counts = vec![0u32; 1000];
        let trials = 10_000u64;
        for seed in 0..trials {
            let sub = subsample_matches(&set, 100, seed);
            for m in &sub.matches {
                let idx = (m.pixel_a.1 as usize) * 100 + m.pixel_a.0 as usize;
                counts[idx] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            assert!((freq - 0.1).abs() <= 0.02, "element {i}: frequency {freq}");
        }
    }
}
