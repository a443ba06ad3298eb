//! Synthetic scenes with exact ground truth.
//!
//! A spinning LiDAR is ray cast against a ground plane, labeled yaw-only
//! boxes and unlabeled wall occluders; instance masks are rendered by
//! casting one ray per pixel center from every camera and keeping the
//! nearest surface. Noise is injected by rendering masks from a rig that
//! differs from the one handed to the pipeline.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{GroundTruth, SceneData};
use crate::painter::{InstanceMask, MaskInstance};
use crate::projection::{project_point, CalibrationRig, CameraModel, RigidTransform, Vec3, DEFAULT_Z_MIN};
use crate::scene::{stack_sweeps, Box3D, LabelTable, LidarPoint, Sweep};
use crate::fp_augment::bev_overlaps;

/// Typical `(length, width, height)` per class name.
pub fn class_size(name: &str) -> Option<[f64; 3]> {
    Some(match name {
        "car" => [4.6, 1.9, 1.7],
        "truck" => [6.9, 2.5, 3.0],
        "construction_vehicle" => [6.4, 2.8, 3.2],
        "bus" => [11.0, 2.9, 3.5],
        "trailer" => [12.3, 2.9, 3.8],
        "barrier" => [2.5, 0.5, 1.0],
        "motorcycle" => [2.1, 0.8, 1.5],
        "bicycle" => [1.7, 0.6, 1.3],
        "pedestrian" => [0.7, 0.7, 1.75],
        "traffic_cone" => [0.4, 0.4, 0.8],
        _ => return None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigSpec {
    pub cameras: usize,
    pub hfov_deg: f64,
    pub width: u32,
    pub height: u32,
    /// Camera mount circle radius and height, meters.
    pub mount_radius: f64,
    pub mount_height: f64,
    pub lidar_height: f64,
    pub lidar_yaw_deg: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            cameras: 6,
            hfov_deg: 70.0,
            width: 800,
            height: 450,
            mount_radius: 0.8,
            mount_height: 1.6,
            lidar_height: 1.85,
            lidar_yaw_deg: 0.0,
        }
    }
}

impl RigSpec {
    pub fn build(&self) -> Result<CalibrationRig> {
        let lidar = RigidTransform::from_yaw(self.lidar_yaw_deg.to_radians(), Vec3::new(0.0, 0.0, self.lidar_height));
        CalibrationRig::surround(
            lidar,
            self.cameras,
            self.hfov_deg.to_radians(),
            self.width,
            self.height,
            self.mount_radius,
            self.mount_height,
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Largest per-camera extrinsic rotation error, degrees.
    pub rotation_jitter_deg: f64,
    /// Largest per-axis extrinsic translation error, meters.
    pub translation_jitter: f64,
    /// Camera capture delay relative to the LiDAR keyframe, seconds.
    pub sync_offset: f64,
    /// Wall occluders added to the scene.
    pub occluders: usize,
    /// Erosion radius applied to rendered masks, pixels.
    pub mask_erosion: u32,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.rotation_jitter_deg, self.translation_jitter, self.sync_offset];
        if vals.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::invalid("noise magnitudes must be finite and non-negative"))
        }
    }

    pub fn is_zero(&self) -> bool {
        self.rotation_jitter_deg == 0.0 && self.translation_jitter == 0.0 && self.sync_offset == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub box_count: usize,
    /// Class names drawn uniformly per box.
    pub label_mix: Vec<String>,
    /// BEV distance range of box centers, meters.
    pub range: [f64; 2],
    /// Azimuth resolution multiplier; 1.0 is 1800 steps per revolution.
    pub density: f64,
    pub beams: usize,
    pub elevation_deg: [f64; 2],
    pub max_range: f64,
    pub sweeps: usize,
    pub sweep_interval: f64,
    pub ego_speed: f64,
    /// Ground returns closer than this to a box footprint are dropped.
    pub ground_clearance: f64,
    pub min_box_gap: f64,
    pub min_wall_gap: f64,
    /// Configured in its own section.
    #[serde(skip)]
    pub rig: RigSpec,
    pub noise: NoiseSpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            box_count: 10,
            label_mix: ["car", "truck", "bus", "pedestrian", "bicycle", "motorcycle", "barrier", "traffic_cone"]
                .map(String::from)
                .to_vec(),
            range: [6.0, 35.0],
            density: 1.0,
            beams: 32,
            elevation_deg: [-25.0, 5.0],
            max_range: 60.0,
            sweeps: 1,
            sweep_interval: 0.05,
            ego_speed: 10.0,
            ground_clearance: 2.0,
            min_box_gap: 2.0,
            min_wall_gap: 3.0,
            rig: RigSpec::default(),
            noise: NoiseSpec::default(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(Error::invalid("density must be positive"));
        }
        if self.beams == 0 || self.sweeps == 0 {
            return Err(Error::invalid("need at least one beam and one sweep"));
        }
        if !(self.range[0] >= 0.0 && self.range[0] < self.range[1]) {
            return Err(Error::invalid("box range must satisfy 0 <= min < max"));
        }
        if self.box_count > 0 && self.label_mix.is_empty() {
            return Err(Error::invalid("label mix is empty"));
        }
        if let Some(bad) = self.label_mix.iter().find(|n| class_size(n).is_none()) {
            return Err(Error::invalid(format!("no size known for class {bad}")));
        }
        self.noise.validate()
    }

    fn azimuth_steps(&self) -> usize {
        ((1800.0 * self.density).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// Calibration handed to the pipeline.
    pub rig: CalibrationRig,
    /// Calibration the masks were actually rendered with.
    pub render_rig: CalibrationRig,
    pub labels: LabelTable,
    pub gt_boxes: Vec<Box3D>,
    pub walls: Vec<Box3D>,
    pub sweeps: Vec<Sweep>,
    pub keyframe: usize,
    /// Stacked keyframe cloud.
    pub points: Vec<LidarPoint>,
    /// Box index per stacked point, `-1` for ground and walls.
    pub gt_index: Vec<i32>,
    /// Seen by some camera and occluded in none; see [`is_visible`].
    pub visible: Vec<bool>,
    pub masks: Vec<InstanceMask>,
    pub noise: NoiseSpec,
}

impl SyntheticScene {
    pub fn scene_data(&self) -> SceneData {
        SceneData {
            rig: self.rig.clone(),
            sweeps: self.sweeps.clone(),
            keyframe: self.keyframe,
            masks: self.masks.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            boxes: self.gt_boxes.clone(),
            point_box: self.gt_index.clone(),
            visible: self.visible.clone(),
        }
    }

    /// Stacked-cloud indices of the points sampled on box `b`.
    pub fn box_points(&self, b: usize) -> Vec<usize> {
        (0..self.points.len()).filter(|&i| self.gt_index[i] == b as i32).collect()
    }
}

// independent random streams so noise settings never move the layout
const STREAM_LAYOUT: u64 = 1;
const STREAM_WALLS: u64 = 2;
const STREAM_LIDAR: u64 = 3;
const STREAM_CALIB: u64 = 4;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// BEV distance between two footprints (0 when they overlap).
pub fn footprint_gap(a: &Box3D, b: &Box3D) -> f64 {
    if bev_overlaps(a, b) {
        return 0.0;
    }
    let from_a = a.bev_corners().iter().map(|c| b.bev_distance(c[0], c[1])).fold(f64::INFINITY, f64::min);
    let from_b = b.bev_corners().iter().map(|c| a.bev_distance(c[0], c[1])).fold(f64::INFINITY, f64::min);
    from_a.min(from_b)
}

const PLACEMENT_TRIES: usize = 2000;
/// Keep objects clear of the sensor mounts.
const EGO_CLEARANCE: f64 = 3.0;

fn place_boxes(spec: &SceneSpec, labels: &LabelTable, seed: u64) -> Result<Vec<Box3D>> {
    let mut rng = rng_for(seed, STREAM_LAYOUT);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(spec.box_count);
    for k in 0..spec.box_count {
        let name = &spec.label_mix[rng.random_range(0..spec.label_mix.len())];
        let size = class_size(name).expect("validated");
        let label = labels
            .id_of(name)
            .ok_or_else(|| Error::invalid(format!("class {name} missing from label table")))?;
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let r = rng.random_range(spec.range[0]..spec.range[1]);
            let az = rng.random_range(0.0..TAU);
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let b = Box3D::new([r * az.cos(), r * az.sin(), size[2] / 2.0], size, yaw, label);
            if b.bev_distance(0.0, 0.0) < EGO_CLEARANCE {
                continue;
            }
            if boxes.iter().all(|o| footprint_gap(&b, o) >= spec.min_box_gap) {
                placed = Some(b);
                break;
            }
        }
        boxes.push(placed.ok_or_else(|| {
            Error::invalid(format!("could not place box {k} after {PLACEMENT_TRIES} tries"))
        })?);
    }
    Ok(boxes)
}

fn place_walls(spec: &SceneSpec, boxes: &[Box3D], seed: u64) -> Result<Vec<Box3D>> {
    let mut rng = rng_for(seed, STREAM_WALLS);
    let mut walls: Vec<Box3D> = Vec::with_capacity(spec.noise.occluders);
    let far = spec.range[1] + 10.0;
    for k in 0..spec.noise.occluders {
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let r = rng.random_range(spec.range[0] + 4.0..far);
            let az = rng.random_range(0.0..TAU);
            let len = rng.random_range(4.0..10.0);
            let height = rng.random_range(2.5..4.0);
            let w = Box3D::new([r * az.cos(), r * az.sin(), height / 2.0], [len, 0.3, height], rng.random_range(0.0..TAU), 0);
            if w.bev_distance(0.0, 0.0) < EGO_CLEARANCE {
                continue;
            }
            let clear_boxes = boxes.iter().all(|b| footprint_gap(&w, b) >= spec.min_wall_gap);
            let clear_walls = walls.iter().all(|o| footprint_gap(&w, o) >= 0.5);
            if clear_boxes && clear_walls {
                placed = Some(w);
                break;
            }
        }
        walls.push(placed.ok_or_else(|| {
            Error::invalid(format!("could not place wall {k} after {PLACEMENT_TRIES} tries"))
        })?);
    }
    Ok(walls)
}

/// What a LiDAR return or camera ray hit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Ground,
    Box(usize),
    Wall(usize),
}

/// Nearest surface along a ray, with its distance.
fn cast(origin: &Vec3, dir: &Vec3, boxes: &[Box3D], walls: &[Box3D], max_t: f64, ground: bool) -> Option<(f64, Surface)> {
    let mut best: Option<(f64, Surface)> = None;
    let mut consider = |t: f64, s: Surface| {
        if t > 1e-9 && t <= max_t && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, s));
        }
    };
    if ground && dir.z < 0.0 {
        consider(-origin.z / dir.z, Surface::Ground);
    }
    for (i, b) in boxes.iter().enumerate() {
        if let Some((t0, _)) = b.ray_intersect(origin, dir) {
            consider(t0, Surface::Box(i));
        }
    }
    for (i, w) in walls.iter().enumerate() {
        if let Some((t0, _)) = w.ray_intersect(origin, dir) {
            consider(t0, Surface::Wall(i));
        }
    }
    best
}

/// Ego poses (`ego -> global`, global = keyframe ego frame) and timestamps
/// for a forward-driving ego; the keyframe is the last sweep.
pub fn sweep_schedule(count: usize, interval: f64, speed: f64) -> Vec<(f64, RigidTransform)> {
    (0..count)
        .map(|k| {
            let t = (k as f64 - (count - 1) as f64) * interval;
            (t, RigidTransform::from_translation(Vec3::new(speed * t, 0.0, 0.0)))
        })
        .collect()
}

fn scan(
    spec: &SceneSpec,
    rig: &CalibrationRig,
    boxes: &[Box3D],
    walls: &[Box3D],
    seed: u64,
) -> (Vec<Sweep>, Vec<Surface>) {
    let mut rng = rng_for(seed, STREAM_LIDAR);
    let steps = spec.azimuth_steps();
    let [el0, el1] = spec.elevation_deg.map(f64::to_radians);
    let elevations: Vec<f64> = (0..spec.beams)
        .map(|b| {
            if spec.beams == 1 {
                el0
            } else {
                el0 + (el1 - el0) * b as f64 / (spec.beams - 1) as f64
            }
        })
        .collect();
    let box_reflect: Vec<f64> = boxes.iter().map(|_| rng.random_range(0.2..0.9)).collect();

    let mut sweeps = Vec::with_capacity(spec.sweeps);
    let mut gt = Vec::new();
    for (t, pose) in sweep_schedule(spec.sweeps, spec.sweep_interval, spec.ego_speed) {
        let lidar_to_global = pose.compose(&rig.lidar_to_ego);
        let global_to_lidar = lidar_to_global.inverse();
        let origin = lidar_to_global.translation();
        let phase = rng.random_range(0.0..TAU / steps as f64);
        let mut points = Vec::new();
        for a in 0..steps {
            let az = phase + TAU * a as f64 / steps as f64;
            for &el in &elevations {
                let local = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
                let dir = lidar_to_global.rotation() * local;
                let Some((d, surface)) = cast(origin, &dir, boxes, walls, spec.max_range, true) else {
                    continue;
                };
                let p = origin + dir * d;
                let r = match surface {
                    Surface::Ground => {
                        if boxes.iter().any(|b| b.bev_distance(p.x, p.y) < spec.ground_clearance) {
                            continue;
                        }
                        rng.random_range(0.05..0.2)
                    }
                    Surface::Box(i) => (box_reflect[i] + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0),
                    Surface::Wall(_) => rng.random_range(0.3..0.6),
                };
                points.push(LidarPoint::from_position(&global_to_lidar.apply(&p), r));
                gt.push(surface);
            }
        }
        sweeps.push(Sweep {
            points,
            ego_pose: pose,
            timestamp: t,
        });
    }
    (sweeps, gt)
}

/// Columns and rows possibly covered by `b` in `cam`, or `None` when the
/// box is entirely behind the near plane.
fn pixel_bounds(cam: &CameraModel, b: &Box3D) -> Option<(u32, u32, u32, u32)> {
    let corners: Vec<Vec3> = b.corners().iter().map(|c| cam.extrinsic.apply(c)).collect();
    if corners.iter().all(|c| c.z <= DEFAULT_Z_MIN) {
        return None;
    }
    if corners.iter().any(|c| c.z <= DEFAULT_Z_MIN) {
        return Some((0, cam.width, 0, cam.height));
    }
    let (mut u0, mut u1, mut v0, mut v1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for c in &corners {
        let (u, v) = (cam.fx * c.x / c.z + cam.cx, cam.fy * c.y / c.z + cam.cy);
        u0 = u0.min(u);
        u1 = u1.max(u);
        v0 = v0.min(v);
        v1 = v1.max(v);
    }
    let clamp_lo = |x: f64, hi: u32| (x.floor() - 1.0).clamp(0.0, hi as f64) as u32;
    let clamp_hi = |x: f64, hi: u32| (x.ceil() + 1.0).clamp(0.0, hi as f64) as u32;
    let out = (clamp_lo(u0, cam.width), clamp_hi(u1, cam.width), clamp_lo(v0, cam.height), clamp_hi(v1, cam.height));
    (out.0 < out.1 && out.2 < out.3).then_some(out)
}

/// Z-buffered render of boxes (as instances) and walls (as background
/// that still occludes). Instance ids are local to each camera, assigned
/// 1.. in box order over the boxes that cover at least one pixel.
pub fn render_instance_masks(rig: &CalibrationRig, boxes: &[Box3D], walls: &[Box3D]) -> Vec<InstanceMask> {
    rig.cameras
        .iter()
        .enumerate()
        .map(|(k, cam)| render_camera(k, cam, boxes, walls))
        .collect()
}

fn render_camera(k: usize, cam: &CameraModel, boxes: &[Box3D], walls: &[Box3D]) -> InstanceMask {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut depth = vec![f64::INFINITY; w * h];
    // 0 = nothing, 1..=boxes.len() = box, beyond = wall
    let mut owner = vec![0usize; w * h];
    let origin = cam.center();
    let rt = cam.extrinsic.rotation().transpose();
    for (idx, b) in boxes.iter().chain(walls).enumerate() {
        let Some((u0, u1, v0, v1)) = pixel_bounds(cam, b) else {
            continue;
        };
        for py in v0..v1 {
            for px in u0..u1 {
                let d_cam = Vec3::new(
                    (px as f64 + 0.5 - cam.cx) / cam.fx,
                    (py as f64 + 0.5 - cam.cy) / cam.fy,
                    1.0,
                );
                let dir = rt * d_cam;
                if let Some((t0, _)) = b.ray_intersect(&origin, &dir) {
                    let cell = py as usize * w + px as usize;
                    if t0 > 0.0 && t0 < depth[cell] {
                        depth[cell] = t0;
                        owner[cell] = idx + 1;
                    }
                }
            }
        }
    }
    let mut local = vec![0u16; boxes.len() + 1];
    for &o in &owner {
        if o != 0 && o <= boxes.len() {
            local[o] = 1;
        }
    }
    let mut mask = InstanceMask::empty(k, cam.width, cam.height);
    let mut next = 0u16;
    for b in 1..=boxes.len() {
        if local[b] != 0 {
            next += 1;
            local[b] = next;
            mask.instances.insert(
                next,
                MaskInstance {
                    label: boxes[b - 1].label,
                    score: 1.0,
                    touches_left: false,
                    touches_right: false,
                },
            );
        }
    }
    for (cell, &o) in owner.iter().enumerate() {
        if o != 0 && o <= boxes.len() {
            mask.raster[cell] = local[o];
        }
    }
    mask.refresh_border_flags();
    mask
}

/// Whether `p` (keyframe ego frame), lying on `own`, is visible and
/// non-occluded: inside at least one camera image, and in every camera
/// whose image contains it the ray through its pixel center meets no other
/// box or wall before reaching it. This is the z-buffer notion of
/// occlusion the masks are rendered with.
pub fn is_visible(p: &Vec3, own: Surface, rig: &CalibrationRig, boxes: &[Box3D], walls: &[Box3D]) -> bool {
    let mut seen = false;
    for cam in &rig.cameras {
        let Some(proj) = project_point(p, cam, DEFAULT_Z_MIN) else {
            continue;
        };
        seen = true;
        let (px, py) = proj.pixel();
        let origin = cam.center();
        let dist = (p - origin).norm();
        let dir = cam.pixel_ray(px as f64 + 0.5, py as f64 + 0.5);
        let tol = 1e-6 * (1.0 + dist);
        if let Some((t, hit)) = cast(&origin, &dir, boxes, walls, f64::INFINITY, false) {
            if hit != own && t < dist - tol {
                return false;
            }
        }
    }
    seen
}

/// Composes each camera's extrinsic with a small random motion expressed
/// in the camera frame: rotation about a uniform axis by an angle up to
/// the jitter, translation uniform per axis. Intrinsics are untouched.
pub fn perturb_calibration(rig: &CalibrationRig, noise: &NoiseSpec, seed: u64) -> Result<CalibrationRig> {
    noise.validate()?;
    let mut rng = rng_for(seed, STREAM_CALIB);
    let max_angle = noise.rotation_jitter_deg.to_radians();
    let mut out = rig.clone();
    for cam in &mut out.cameras {
        let axis: [f64; 3] = UnitSphere.sample(&mut rng);
        let angle = if max_angle > 0.0 { rng.random_range(0.0..=max_angle) } else { 0.0 };
        let j = noise.translation_jitter;
        let t = if j > 0.0 {
            Vec3::new(rng.random_range(-j..=j), rng.random_range(-j..=j), rng.random_range(-j..=j))
        } else {
            Vec3::zeros()
        };
        if angle == 0.0 && t == Vec3::zeros() {
            continue;
        }
        let delta = RigidTransform::from_axis_angle(&Vec3::from(axis), angle, t);
        cam.extrinsic = delta.compose(&cam.extrinsic);
    }
    Ok(out)
}

/// Applies a camera-frame motion to one camera.
pub fn perturb_camera(rig: &CalibrationRig, camera: usize, delta: &RigidTransform) -> Result<CalibrationRig> {
    let mut out = rig.clone();
    let cam = out
        .cameras
        .get_mut(camera)
        .ok_or_else(|| Error::invalid(format!("no camera {camera}")))?;
    cam.extrinsic = delta.compose(&cam.extrinsic);
    Ok(out)
}

/// Rig the cameras actually had: calibration error plus the ego
/// displacement accumulated over the capture delay.
fn physical_rig(spec: &SceneSpec, rig: &CalibrationRig, seed: u64) -> Result<CalibrationRig> {
    let mut out = perturb_calibration(rig, &spec.noise, seed)?;
    let shift = spec.ego_speed * spec.noise.sync_offset;
    if shift != 0.0 {
        let back = RigidTransform::from_translation(Vec3::new(-shift, 0.0, 0.0));
        for cam in &mut out.cameras {
            cam.extrinsic = cam.extrinsic.compose(&back);
        }
    }
    Ok(out)
}

/// Random layout per `spec`, deterministic in `seed`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let labels = LabelTable::nuscenes();
    let boxes = place_boxes(spec, &labels, seed)?;
    let walls = place_walls(spec, &boxes, seed)?;
    build_scene(spec, boxes, walls, seed)
}

/// A scene over caller-provided boxes and walls (walls carry label 0).
pub fn build_scene(spec: &SceneSpec, boxes: Vec<Box3D>, walls: Vec<Box3D>, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    for b in boxes.iter().chain(&walls) {
        b.validate()?;
    }
    let labels = LabelTable::nuscenes();
    if let Some(b) = boxes.iter().find(|b| labels.get(b.label).is_none()) {
        return Err(Error::invalid(format!("box label {} not in label table", b.label)));
    }
    let rig = spec.rig.build()?;
    let render_rig = physical_rig(spec, &rig, seed)?;
    let (sweeps, surfaces) = scan(spec, &rig, &boxes, &walls, seed);
    let keyframe = sweeps.len() - 1;
    let points = stack_sweeps(&sweeps, keyframe, &rig)?;
    let visible = points
        .iter()
        .zip(&surfaces)
        .map(|(p, &own)| is_visible(&p.position(), own, &rig, &boxes, &walls))
        .collect();
    let gt_index = surfaces
        .iter()
        .map(|s| match s {
            Surface::Box(i) => *i as i32,
            _ => -1,
        })
        .collect();
    let mut masks = render_instance_masks(&render_rig, &boxes, &walls);
    if spec.noise.mask_erosion > 0 {
        masks = masks.iter().map(|m| m.eroded(spec.noise.mask_erosion)).collect();
    }
    Ok(SyntheticScene {
        rig,
        render_rig,
        labels,
        gt_boxes: boxes,
        walls,
        sweeps,
        keyframe,
        points,
        gt_index,
        visible,
        masks,
        noise: spec.noise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::project_cloud;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            box_count: 3,
            density: 0.3,
            rig: RigSpec {
                width: 320,
                height: 180,
                ..RigSpec::default()
            },
            ..SceneSpec::default()
        }
    }

    #[test]
    fn empty_scene_is_background_only() {
        let s = generate_scene(&SceneSpec { box_count: 0, ..small_spec() }, 1).unwrap();
        assert!(s.gt_boxes.is_empty());
        assert!(!s.points.is_empty());
        assert!(s.gt_index.iter().all(|&g| g == -1));
        assert!(s.masks.iter().all(|m| m.raster.iter().all(|&v| v == 0) && m.instances.is_empty()));
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec {
            noise: NoiseSpec {
                rotation_jitter_deg: 0.5,
                occluders: 2,
                ..NoiseSpec::default()
            },
            ..small_spec()
        };
        assert_eq!(generate_scene(&spec, 9).unwrap(), generate_scene(&spec, 9).unwrap());
        assert_ne!(generate_scene(&spec, 9).unwrap().points, generate_scene(&spec, 10).unwrap().points);
    }

    #[test]
    fn noise_does_not_move_layout() {
        let clean = generate_scene(&small_spec(), 4).unwrap();
        let noisy = generate_scene(
            &SceneSpec {
                noise: NoiseSpec {
                    rotation_jitter_deg: 1.0,
                    ..NoiseSpec::default()
                },
                ..small_spec()
            },
            4,
        )
        .unwrap();
        assert_eq!(clean.gt_boxes, noisy.gt_boxes);
        assert_eq!(clean.points, noisy.points);
        assert_ne!(clean.masks, noisy.masks);
    }

    #[test]
    fn box_points_lie_on_their_box() {
        let s = generate_scene(&SceneSpec { sweeps: 3, ..small_spec() }, 2).unwrap();
        let mut seen = 0;
        for (p, &g) in s.points.iter().zip(&s.gt_index) {
            let inside: Vec<usize> = (0..s.gt_boxes.len())
                .filter(|&b| {
                    let grown = Box3D {
                        size: s.gt_boxes[b].size.map(|x| x + 1e-6),
                        ..s.gt_boxes[b]
                    };
                    grown.contains(&p.position())
                })
                .collect();
            if g >= 0 {
                assert_eq!(inside, vec![g as usize]);
                seen += 1;
            } else {
                assert!(inside.is_empty());
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn box_in_one_frustum_projects_there() {
        let car = Box3D::new([15.0, 0.0, 0.85], [4.6, 1.9, 1.7], 0.3, 1);
        let s = build_scene(&small_spec(), vec![car], vec![], 0).unwrap();
        let idx = s.box_points(0);
        assert!(idx.len() > 20);
        let pts: Vec<LidarPoint> = idx.iter().map(|&i| s.points[i]).collect();
        for hits in project_cloud(&pts, &s.rig, DEFAULT_Z_MIN) {
            assert_eq!(hits.iter().map(|h| h.camera).collect::<Vec<_>>(), vec![0]);
        }
    }

    #[test]
    fn centered_box_renders_one_region() {
        let car = Box3D::new([12.0, 0.0, 0.85], [4.6, 1.9, 1.7], 0.0, 1);
        let s = build_scene(&small_spec(), vec![car], vec![], 0).unwrap();
        let m = &s.masks[0];
        assert_eq!(m.instances.len(), 1);
        assert!(!m.instances[&1].touches_left && !m.instances[&1].touches_right);
        assert!(s.masks[1..].iter().all(|m| m.instances.is_empty()));
        // 4-connected flood fill reaches every labeled pixel
        let (w, h) = (m.width as usize, m.height as usize);
        let start = m.raster.iter().position(|&v| v == 1).unwrap();
        let mut seen = vec![false; w * h];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(c) = stack.pop() {
            let (x, y) = (c % w, c / w);
            let nbrs = [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)];
            for (nx, ny) in nbrs {
                if nx < w && ny < h && !seen[ny * w + nx] && m.raster[ny * w + nx] == 1 {
                    seen[ny * w + nx] = true;
                    stack.push(ny * w + nx);
                }
            }
        }
        assert_eq!(seen.iter().filter(|&&s| s).count(), m.raster.iter().filter(|&&v| v == 1).count());
    }

    #[test]
    fn occluded_instance_loses_contested_pixels() {
        let near = Box3D::new([10.0, 0.0, 0.85], [4.6, 1.9, 1.7], 0.0, 1);
        let far = Box3D::new([20.0, 0.8, 1.5], [6.9, 2.5, 3.0], 0.0, 2);
        let spec = small_spec();
        let rig = spec.rig.build().unwrap();
        let both = render_instance_masks(&rig, &[near, far], &[]);
        let alone = render_instance_masks(&rig, &[far], &[]);
        let cam = &rig.cameras[0];
        let mut contested = 0;
        for py in 0..cam.height {
            for px in 0..cam.width {
                let dir = cam.pixel_ray(px as f64 + 0.5, py as f64 + 0.5);
                let o = cam.center();
                let (tn, tf) = (near.ray_intersect(&o, &dir), far.ray_intersect(&o, &dir));
                let got = both[0].at(px, py);
                if let (Some(a), Some(b)) = (tn, tf) {
                    contested += 1;
                    assert!(a.0 < b.0);
                    assert_eq!(both[0].instances[&got].label, 1);
                    assert_ne!(alone[0].at(px, py), 0);
                }
            }
        }
        assert!(contested > 0);
    }

    #[test]
    fn zero_noise_leaves_rig() {
        let rig = RigSpec::default().build().unwrap();
        assert_eq!(perturb_calibration(&rig, &NoiseSpec::default(), 5).unwrap(), rig);
        let n = NoiseSpec {
            rotation_jitter_deg: 2.0,
            translation_jitter: 0.1,
            ..NoiseSpec::default()
        };
        let a = perturb_calibration(&rig, &n, 5).unwrap();
        assert_eq!(a, perturb_calibration(&rig, &n, 5).unwrap());
        assert_ne!(a, rig);
        for (c, o) in a.cameras.iter().zip(&rig.cameras) {
            assert_eq!((c.fx, c.fy, c.cx, c.cy), (o.fx, o.fy, o.cx, o.cy));
            let angle = (c.extrinsic.rotation() * o.extrinsic.rotation().transpose()).trace();
            let angle = ((angle - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
            assert!(angle <= 2.0f64.to_radians() + 1e-12);
        }
        assert!(perturb_calibration(&rig, &NoiseSpec { sync_offset: -1.0, ..n }, 0).is_err());
    }

    #[test]
    fn one_degree_yaw_at_fifty_meters() {
        let rig = RigSpec::default().build().unwrap();
        let cam = &rig.cameras[0];
        let p = cam.back_project(cam.cx, cam.cy, 50.0);
        // yaw about the camera's vertical (y, pointing down) axis
        let yawed = perturb_camera(&rig, 0, &RigidTransform::from_axis_angle(&Vec3::y(), 1f64.to_radians(), Vec3::zeros())).unwrap();
        let before = cam.extrinsic.apply(&p);
        let after = yawed.cameras[0].extrinsic.apply(&p);
        let expected = 50.0 * 1f64.to_radians().tan();
        assert!(((after.x - before.x).abs() - expected).abs() < 1e-3 * expected + 1e-4 * 50.0);
    }

    #[test]
    fn infeasible_placement_is_error() {
        let spec = SceneSpec {
            box_count: 50,
            range: [6.0, 8.0],
            ..small_spec()
        };
        assert!(generate_scene(&spec, 0).is_err());
        assert!(generate_scene(&SceneSpec { density: 0.0, ..small_spec() }, 0).is_err());
    }

    #[test]
    fn masks_match_geometry_without_noise() {
        let s = generate_scene(&small_spec(), 11).unwrap();
        let hits = project_cloud(&s.points, &s.rig, DEFAULT_Z_MIN);
        let (mut agree, mut total) = (0, 0);
        for (i, hs) in hits.iter().enumerate() {
            let g = s.gt_index[i];
            if g < 0 || !s.visible[i] {
                continue;
            }
            for h in hs {
                let m = &s.masks[h.camera];
                let (px, py) = h.pixel();
                let id = m.at(px, py);
                if id != 0 {
                    total += 1;
                    agree += (m.instances[&id].label == s.gt_boxes[g as usize].label) as usize;
                }
            }
        }
        assert!(total > 0);
        assert!(agree as f64 >= 0.99 * total as f64, "{agree}/{total}");
    }
}
