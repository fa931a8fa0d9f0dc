//! Procedural RGB-D scene generation with analytic ray-cast rendering.
//!
//! Scenes are built from axis-aligned boxes and infinite planes so every
//! ray intersection is closed-form and rendered depth is analytically
//! exact. The module also provides the brute-force correspondence oracle
//! that the grid-accelerated miner is checked against.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    frame_to_world_points, CameraFrame, ColorImage, DepthMap, Intrinsics, RigidPose,
};
use crate::matching::{CorrespondenceSet, PixelMatch};

/// Depth beyond this is treated as no hit.
pub const FAR_DEPTH: f64 = 10.0;
/// Ray hits closer than this are ignored (self-intersection guard).
const NEAR_EPS: f64 = 1e-9;

/// Phong specular weight; deliberately strong so corresponding pixels get
/// view-dependent color differences.
const SPECULAR_COEFF: f64 = 0.3;
const SPECULAR_EXPONENT: i32 = 8;
const AMBIENT: f64 = 0.25;

/// Radius of the canonical circular camera path guarded by `generate_scene`.
pub const PATH_RADIUS: f64 = 2.0;
/// Height of the canonical circular camera path.
pub const PATH_HEIGHT: f64 = 1.5;

const ROOM_XY: f64 = 3.0;
const ROOM_TOP: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    pub albedo: [f64; 3],
    /// Seed of the primitive's procedural albedo pattern.
    pub salt: u64,
}

impl AxisBox {
    fn min(&self) -> [f64; 3] {
        [
            self.center[0] - self.half_extents[0],
            self.center[1] - self.half_extents[1],
            self.center[2] - self.half_extents[2],
        ]
    }

    fn max(&self) -> [f64; 3] {
        [
            self.center[0] + self.half_extents[0],
            self.center[1] + self.half_extents[1],
            self.center[2] + self.half_extents[2],
        ]
    }

    pub fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        let lo = self.min();
        let hi = self.max();
        (0..3).all(|i| p[i] >= lo[i] - margin && p[i] <= hi[i] + margin)
    }
}

/// Infinite plane normal . p = offset with Lambertian albedo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenePlane {
    pub normal: [f64; 3],
    pub offset: f64,
    pub albedo: [f64; 3],
    /// Seed of the primitive's procedural albedo pattern.
    pub salt: u64,
}

/// Axis-aligned room interior used to bound camera paths and box placement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl RoomBounds {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Deterministic procedural scene: room planes plus scattered boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub boxes: Vec<AxisBox>,
    pub planes: Vec<ScenePlane>,
    pub room: RoomBounds,
}

/// Ordered camera poses plus the intrinsics shared by every frame.
#[derive(Debug, Clone)]
pub struct CameraPath {
    pub poses: Vec<RigidPose>,
    pub intrinsics: Intrinsics,
}

impl CameraPath {
    /// Poses on the canonical circle, looking radially outward, evenly
    /// spaced over the full turn. `fov_x_deg` fixes fx; pixels are square.
    pub fn circular(n_frames: usize, width: u32, height: u32, fov_x_deg: f64) -> Self {
        Self::circular_arc(n_frames, width, height, fov_x_deg, 360.0)
    }

    /// Poses spanning only `arc_deg` of the canonical circle, for slow
    /// camera motion with strongly overlapping frames.
    pub fn circular_arc(
        n_frames: usize,
        width: u32,
        height: u32,
        fov_x_deg: f64,
        arc_deg: f64,
    ) -> Self {
        assert!(n_frames >= 1);
        let fx = (width as f64 / 2.0) / (fov_x_deg.to_radians() / 2.0).tan();
        let intrinsics = Intrinsics::new(
            fx,
            fx,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
        )
        .expect("circular path intrinsics");
        let arc = arc_deg.to_radians();
        let poses = (0..n_frames)
            .map(|i| {
                let theta = arc * (i as f64) / (n_frames as f64);
                let eye = Vector3::new(
                    PATH_RADIUS * theta.cos(),
                    PATH_RADIUS * theta.sin(),
                    PATH_HEIGHT,
                );
                let forward = Vector3::new(theta.cos(), theta.sin(), 0.0);
                look_pose(eye, forward)
            })
            .collect();
        Self { poses, intrinsics }
    }
}

/// Camera-to-world pose from an eye point and a forward direction, world
/// +z up, camera +z forward / +y down.
pub fn look_pose(eye: Vector3<f64>, forward: Vector3<f64>) -> RigidPose {
    let z_cam = forward.normalize();
    let up = Vector3::new(0.0, 0.0, 1.0);
    let x_cam = z_cam.cross(&up).normalize();
    let y_cam = z_cam.cross(&x_cam);
    let rot = nalgebra::Matrix3::from_columns(&[x_cam, y_cam, z_cam]);
    RigidPose::from_rotation_translation(rot, eye).expect("look_pose produces a valid pose")
}

/// Builds a deterministic scene: the six room planes plus `n_boxes` boxes
/// that keep clear of the canonical camera circle.
pub fn generate_scene(seed: u64, n_boxes: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = RoomBounds { min: [-ROOM_XY, -ROOM_XY, 0.0], max: [ROOM_XY, ROOM_XY, ROOM_TOP] };

    let mut planes = Vec::with_capacity(6);
    let walls: [([f64; 3], f64); 6] = [
        ([0.0, 0.0, 1.0], 0.0),       // floor z = 0
        ([0.0, 0.0, -1.0], -ROOM_TOP), // ceiling z = ROOM_TOP
        ([1.0, 0.0, 0.0], -ROOM_XY),
        ([-1.0, 0.0, 0.0], -ROOM_XY),
        ([0.0, 1.0, 0.0], -ROOM_XY),
        ([0.0, -1.0, 0.0], -ROOM_XY),
    ];
    for (i, (normal, offset)) in walls.into_iter().enumerate() {
        planes.push(ScenePlane {
            normal,
            offset,
            albedo: random_albedo(&mut rng),
            salt: splitmix(seed ^ (i as u64)),
        });
    }

    // 256 samples around the canonical circle; boxes must not reach them.
    let circle: Vec<[f64; 3]> = (0..256)
        .map(|i| {
            let t = 2.0 * std::f64::consts::PI * (i as f64) / 256.0;
            [PATH_RADIUS * t.cos(), PATH_RADIUS * t.sin(), PATH_HEIGHT]
        })
        .collect();

    let mut boxes = Vec::with_capacity(n_boxes);
    let mut attempts = 0usize;
    while boxes.len() < n_boxes {
        attempts += 1;
        assert!(attempts < 100_000, "box placement failed to converge");
        let half = [
            rng.gen_range(0.15..0.45),
            rng.gen_range(0.15..0.45),
            rng.gen_range(0.15..0.45),
        ];
        let center = [
            rng.gen_range(-(ROOM_XY - 0.55)..(ROOM_XY - 0.55)),
            rng.gen_range(-(ROOM_XY - 0.55)..(ROOM_XY - 0.55)),
            rng.gen_range(half[2]..(2.4 - half[2])),
        ];
        let candidate = AxisBox {
            center,
            half_extents: half,
            albedo: random_albedo(&mut rng),
            salt: splitmix(seed ^ (0x1000 + boxes.len() as u64)),
        };
        if circle.iter().any(|p| candidate.contains(*p, 0.15)) {
            continue;
        }
        boxes.push(candidate);
    }

    SceneSpec { seed, boxes, planes, room }
}

fn random_albedo(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(0.2..0.95),
        rng.gen_range(0.2..0.95),
        rng.gen_range(0.2..0.95),
    ]
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Albedo at a world point: the base color modulated by a deterministic
/// multi-frequency pattern anchored in world space. Corresponding pixels
/// in different views see identical albedo; only the specular term is
/// view-dependent.
pub fn textured_albedo(base: [f64; 3], p: [f64; 3], salt: u64) -> [f64; 3] {
    let mut state = salt;
    let mut pattern = 0.0;
    let mut weight = 0.0;
    // four bands, wavelengths roughly 0.9 m down to 0.1 m
    for (k, freq) in [7.0, 15.0, 31.0, 59.0].into_iter().enumerate() {
        let mut unit = |s: u64| (s as f64 / u64::MAX as f64) * 2.0 - 1.0;
        state = splitmix(state);
        let dx = unit(state);
        state = splitmix(state);
        let dy = unit(state);
        state = splitmix(state);
        let dz = unit(state);
        state = splitmix(state);
        let phase = unit(state) * std::f64::consts::PI;
        let norm = (dx * dx + dy * dy + dz * dz).sqrt().max(1e-9);
        let amp = 1.0 / (k + 1) as f64;
        pattern += amp * (freq * (dx * p[0] + dy * p[1] + dz * p[2]) / norm + phase).sin();
        weight += amp;
    }
    let modulation = 0.55 + 0.45 * (pattern / weight);
    [base[0] * modulation, base[1] * modulation, base[2] * modulation]
}

struct RayHit {
    /// Camera-space depth (the ray parameter for an unnormalized direction
    /// whose camera z component is 1).
    depth: f64,
    normal: Vector3<f64>,
    albedo: [f64; 3],
}

/// Nearest intersection along origin + s * dir, s in (NEAR_EPS, FAR_DEPTH].
fn cast_ray(scene: &SceneSpec, origin: Vector3<f64>, dir: Vector3<f64>) -> Option<RayHit> {
    let mut best: Option<(f64, Vector3<f64>, [f64; 3], u64)> = None;

    for plane in &scene.planes {
        let n = Vector3::new(plane.normal[0], plane.normal[1], plane.normal[2]);
        let denom = n.dot(&dir);
        if denom.abs() < 1e-15 {
            continue;
        }
        let s = (plane.offset - n.dot(&origin)) / denom;
        if s > NEAR_EPS && s <= FAR_DEPTH && best.is_none_or(|b| s < b.0) {
            // flip the normal to face the incoming ray
            let normal = if denom > 0.0 { -n } else { n };
            best = Some((s, normal, plane.albedo, plane.salt));
        }
    }

    for bx in &scene.boxes {
        if let Some((s, normal)) = intersect_box(bx, origin, dir) {
            if s <= FAR_DEPTH && best.is_none_or(|b| s < b.0) {
                best = Some((s, normal, bx.albedo, bx.salt));
            }
        }
    }

    best.map(|(depth, normal, base, salt)| {
        let hit = origin + depth * dir;
        RayHit { depth, normal, albedo: textured_albedo(base, [hit.x, hit.y, hit.z], salt) }
    })
}

/// Slab test returning the entry parameter and entry-face normal.
fn intersect_box(
    bx: &AxisBox,
    origin: Vector3<f64>,
    dir: Vector3<f64>,
) -> Option<(f64, Vector3<f64>)> {
    let lo = bx.min();
    let hi = bx.max();
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0usize;

    for axis in 0..3 {
        let o = origin[axis];
        let d = dir[axis];
        if d.abs() < 1e-15 {
            if o < lo[axis] || o > hi[axis] {
                return None;
            }
            continue;
        }
        let mut t0 = (lo[axis] - o) / d;
        let mut t1 = (hi[axis] - o) / d;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_near {
            t_near = t0;
            near_axis = axis;
        }
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }

    if t_near <= NEAR_EPS {
        return None; // origin inside or box behind; cameras never sit in boxes
    }
    let mut normal = Vector3::zeros();
    normal[near_axis] = if dir[near_axis] > 0.0 { -1.0 } else { 1.0 };
    Some((t_near, normal))
}

/// Lambertian shading with a Phong specular lobe, quantized to 8 bits.
///
/// `light_dir` points from the surface toward the light; `view_dir` points
/// from the surface toward the camera. Exposed for test oracles that check
/// view dependence independently of the renderer.
pub fn shade(albedo: [f64; 3], normal: Vector3<f64>, light_dir: Vector3<f64>, view_dir: Vector3<f64>) -> [u8; 3] {
    let diffuse = normal.dot(&light_dir).max(0.0);
    let specular = if diffuse > 0.0 {
        let reflected = 2.0 * normal.dot(&light_dir) * normal - light_dir;
        SPECULAR_COEFF * reflected.dot(&view_dir).max(0.0).powi(SPECULAR_EXPONENT)
    } else {
        0.0
    };
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        let intensity = albedo[c] * (AMBIENT + (1.0 - AMBIENT) * diffuse) + specular;
        rgb[c] = (intensity.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    rgb
}

/// Ray-casts one frame. Depth is the exact camera-space hit depth (0 where
/// no primitive is hit within the far limit); color is the shaded albedo.
pub fn render_frame(
    scene: &SceneSpec,
    frame_index: u32,
    pose: &RigidPose,
    intrinsics: &Intrinsics,
    light_dir: Vector3<f64>,
) -> CameraFrame {
    let w = intrinsics.width;
    let h = intrinsics.height;
    let rot = pose.rotation();
    let origin = pose.translation();
    let light = light_dir.normalize();

    let rows: Vec<(Vec<f64>, Vec<u8>)> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut depth_row = vec![0.0f64; w as usize];
            let mut color_row = vec![0u8; w as usize * 3];
            for u in 0..w {
                // camera ray with unit z so the parameter equals pinhole depth
                let dir_cam = Vector3::new(
                    (u as f64 - intrinsics.cx) / intrinsics.fx,
                    (v as f64 - intrinsics.cy) / intrinsics.fy,
                    1.0,
                );
                let dir_world = rot * dir_cam;
                if let Some(hit) = cast_ray(scene, origin, dir_world) {
                    depth_row[u as usize] = hit.depth;
                    let view = -dir_world.normalize();
                    let rgb = shade(hit.albedo, hit.normal, light, view);
                    color_row[u as usize * 3..u as usize * 3 + 3].copy_from_slice(&rgb);
                }
            }
            (depth_row, color_row)
        })
        .collect();

    let mut depth = Vec::with_capacity((w * h) as usize);
    let mut color = Vec::with_capacity((w * h) as usize * 3);
    for (d, c) in rows {
        depth.extend_from_slice(&d);
        color.extend_from_slice(&c);
    }

    CameraFrame::new(
        frame_index,
        ColorImage::new(w, h, color),
        DepthMap::new(w, h, depth),
        *intrinsics,
        *pose,
    )
}

/// Default light direction used by the `synth` CLI.
pub fn default_light_dir() -> Vector3<f64> {
    Vector3::new(0.3, -0.4, 0.85).normalize()
}

/// Adds seeded Gaussian noise (sigma meters) to valid depth pixels.
/// Off by default everywhere; exists for robustness experiments.
pub fn apply_depth_noise(frame: &mut CameraFrame, sigma: f64, seed: u64) {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, sigma).expect("sigma must be finite and >= 0");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in 0..frame.height() {
        for u in 0..frame.width() {
            let d = frame.depth.get(u, v);
            if d > 0.0 {
                let noisy = (d + normal.sample(&mut rng)).max(1e-3);
                frame.depth.set(u, v, noisy);
            }
        }
    }
}

/// Exhaustive O(Na * Nb) correspondence search: for every valid pixel of
/// `frame_a`, the nearest valid world point of `frame_b` within `radius`,
/// ties broken by lower pixel index of b. This is the brute-force oracle
/// the spatial-hash miner must reproduce set-for-set.
pub fn oracle_correspondences(
    frame_a: &CameraFrame,
    frame_b: &CameraFrame,
    radius: f64,
) -> CorrespondenceSet {
    oracle_correspondences_strided(frame_a, frame_b, radius, 1)
}

/// Strided variant of [`oracle_correspondences`]; both frames are sampled
/// at `pixel_stride` so outputs stay comparable with the strided miner.
pub fn oracle_correspondences_strided(
    frame_a: &CameraFrame,
    frame_b: &CameraFrame,
    radius: f64,
    pixel_stride: u32,
) -> CorrespondenceSet {
    assert!(radius > 0.0, "radius must be positive");
    let points_a = frame_to_world_points(frame_a, pixel_stride);
    let points_b = frame_to_world_points(frame_b, pixel_stride);
    let r2 = radius * radius;

    let matches: Vec<PixelMatch> = points_a
        .par_iter()
        .filter_map(|((ua, va), wa)| {
            let mut best: Option<(usize, f64)> = None;
            for (bi, (_, wb)) in points_b.iter().enumerate() {
                let d2 = crate::matching::dist2(wa, wb);
                // strict less keeps the lowest b pixel index on exact ties
                if d2 <= r2 && best.is_none_or(|(_, bd2)| d2 < bd2) {
                    best = Some((bi, d2));
                }
            }
            best.map(|(bi, d2)| {
                let (ub, vb) = points_b[bi].0;
                PixelMatch {
                    pixel_a: (*ua as u16, *va as u16),
                    pixel_b: (ub as u16, vb as u16),
                    distance: d2.sqrt() as f32,
                }
            })
        })
        .collect();

    CorrespondenceSet {
        frame_a: frame_a.frame_index,
        frame_b: frame_b.frame_index,
        valid_a: points_a.len() as u64,
        valid_b: points_b.len() as u64,
        matches,
    }
}
