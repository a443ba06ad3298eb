//! Point, label and box types shared by the pipeline, plus sweep stacking.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::{CalibrationRig, RigidTransform, Vec3};

/// A raw LiDAR return. Coordinates are meters in whatever frame the caller
/// is working in; `sweep_offset` is the capture time relative to the
/// keyframe in seconds (negative for older sweeps).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LidarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
    pub sweep_offset: f64,
}

impl LidarPoint {
    pub fn new(x: f64, y: f64, z: f64, r: f64) -> Self {
        Self {
            x,
            y,
            z,
            r,
            sweep_offset: 0.0,
        }
    }

    pub fn from_position(p: &Vec3, r: f64) -> Self {
        Self::new(p.x, p.y, p.z, r)
    }

    #[inline]
    pub fn position(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.r.is_finite()
    }
}

/// A painted point: `(x, y, z, r, s, cx, cy, cz)` plus the instance it
/// belongs to. `s = 0` and `instance_id = 0` mean unpainted.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct AugmentedPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
    pub s: u32,
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub instance_id: u32,
}

impl AugmentedPoint {
    pub fn unpainted(p: &LidarPoint) -> Self {
        Self {
            x: p.x,
            y: p.y,
            z: p.z,
            r: p.r,
            ..Default::default()
        }
    }

    pub fn position(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(self.cx, self.cy, self.cz)
    }

    pub fn is_painted(&self) -> bool {
        self.instance_id != 0
    }
}

/// Label id `0` is reserved for unpainted / background points.
pub const UNPAINTED: u32 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub id: u32,
    pub name: String,
    /// Characteristic object length in meters.
    pub length: f64,
}

/// Ordered category set with dense ids starting at 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LabelEntry>", into = "Vec<LabelEntry>")]
pub struct LabelTable {
    entries: Vec<LabelEntry>,
}

impl TryFrom<Vec<LabelEntry>> for LabelTable {
    type Error = Error;
    fn try_from(entries: Vec<LabelEntry>) -> Result<Self> {
        LabelTable::new(entries)
    }
}

impl From<LabelTable> for Vec<LabelEntry> {
    fn from(t: LabelTable) -> Self {
        t.entries
    }
}

impl LabelTable {
    pub fn new(entries: Vec<LabelEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if e.id as usize != i + 1 {
                return Err(Error::invalid(format!(
                    "label ids must be dense from 1; entry {i} has id {}",
                    e.id
                )));
            }
            if !(e.length > 0.0 && e.length.is_finite()) {
                return Err(Error::invalid(format!("label {} has bad length", e.name)));
            }
            if entries[..i].iter().any(|o| o.name == e.name) {
                return Err(Error::invalid(format!("duplicate label name {}", e.name)));
            }
        }
        Ok(Self { entries })
    }

    /// The ten nuScenes detection classes with typical object lengths.
    pub fn nuscenes() -> Self {
        let rows = [
            ("car", 4.6),
            ("truck", 6.9),
            ("construction_vehicle", 6.4),
            ("bus", 11.0),
            ("trailer", 12.3),
            ("barrier", 2.5),
            ("motorcycle", 2.1),
            ("bicycle", 1.7),
            ("pedestrian", 0.7),
            ("traffic_cone", 0.4),
        ];
        let entries = rows
            .iter()
            .enumerate()
            .map(|(i, (name, length))| LabelEntry {
                id: i as u32 + 1,
                name: name.to_string(),
                length: *length,
            })
            .collect();
        Self { entries }
    }

    pub fn entries(&self) -> &[LabelEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&LabelEntry> {
        (id as usize).checked_sub(1).and_then(|i| self.entries.get(i))
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.id)
    }
}

/// One LiDAR revolution with the ego pose (`ego -> global`) at capture.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub points: Vec<LidarPoint>,
    pub ego_pose: RigidTransform,
    pub timestamp: f64,
}

/// Stacks sweeps into the keyframe ego frame.
///
/// Points arrive in the LiDAR frame; each is mapped by
/// `T(ego_key <- ego_k) * T(ego <- lidar)` where
/// `T(ego_key <- ego_k) = pose_key^-1 * pose_k`. The result is the
/// concatenation in sweep order with `sweep_offset = t_k - t_key`.
pub fn stack_sweeps(sweeps: &[Sweep], keyframe_index: usize, rig: &CalibrationRig) -> Result<Vec<LidarPoint>> {
    if sweeps.is_empty() {
        return Err(Error::invalid("no sweeps to stack"));
    }
    let key = sweeps.get(keyframe_index).ok_or_else(|| {
        Error::invalid(format!(
            "keyframe index {keyframe_index} out of range for {} sweeps",
            sweeps.len()
        ))
    })?;
    if sweeps.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
        return Err(Error::invalid("sweep timestamps must be non-decreasing"));
    }
    for (i, s) in sweeps.iter().enumerate() {
        s.ego_pose
            .validate()
            .map_err(|e| Error::invalid(format!("sweep {i} ego pose: {e}")))?;
    }
    rig.lidar_to_ego.validate()?;

    let key_inv = key.ego_pose.inverse();
    let total = sweeps.iter().map(|s| s.points.len()).sum();
    let mut out = Vec::with_capacity(total);
    for (i, sweep) in sweeps.iter().enumerate() {
        let motion = if i == keyframe_index {
            RigidTransform::identity()
        } else {
            key_inv.compose(&sweep.ego_pose)
        };
        let to_key = motion.compose(&rig.lidar_to_ego);
        let offset = if i == keyframe_index {
            0.0
        } else {
            sweep.timestamp - key.timestamp
        };
        let identity = to_key == RigidTransform::identity();
        out.extend(sweep.points.iter().map(|p| {
            let mut q = *p;
            if !identity {
                let pos = to_key.apply(&p.position());
                q.x = pos.x;
                q.y = pos.y;
                q.z = pos.z;
            }
            q.sweep_offset = offset;
            q
        }));
    }
    Ok(out)
}

/// Zips raw points with their painted fields, enforcing the painted-point
/// invariants: instance 0 carries label 0 and a zero center, and every
/// point of one instance carries the same label and center.
pub fn assemble_augmented(
    points: &[LidarPoint],
    labels: &[u32],
    centers: &[Vec3],
    instance_ids: &[u32],
) -> Result<Vec<AugmentedPoint>> {
    let n = points.len();
    if labels.len() != n || centers.len() != n || instance_ids.len() != n {
        return Err(Error::invalid(format!(
            "length mismatch: {} points, {} labels, {} centers, {} ids",
            n,
            labels.len(),
            centers.len(),
            instance_ids.len()
        )));
    }
    let mut seen: HashMap<u32, (u32, Vec3)> = HashMap::new();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (id, s, c) = (instance_ids[i], labels[i], centers[i]);
        if id == 0 {
            if s != UNPAINTED || c != Vec3::zeros() {
                return Err(Error::invalid(format!(
                    "point {i} has no instance but label {s} / center {c:?}"
                )));
            }
        } else {
            if s == UNPAINTED {
                return Err(Error::invalid(format!("point {i} in instance {id} has label 0")));
            }
            match seen.get(&id) {
                Some(&(ls, lc)) if ls != s || lc != c => {
                    return Err(Error::invalid(format!(
                        "instance {id} has inconsistent label/center at point {i}"
                    )))
                }
                Some(_) => {}
                None => {
                    seen.insert(id, (s, c));
                }
            }
        }
        let p = &points[i];
        out.push(AugmentedPoint {
            x: p.x,
            y: p.y,
            z: p.z,
            r: p.r,
            s,
            cx: c.x,
            cy: c.y,
            cz: c.z,
            instance_id: id,
        });
    }
    Ok(out)
}

/// Checks the painted-point invariants over a whole cloud.
pub fn check_augmented(points: &[AugmentedPoint]) -> Result<()> {
    let raw: Vec<LidarPoint> = points.iter().map(|p| LidarPoint::new(p.x, p.y, p.z, p.r)).collect();
    let labels: Vec<u32> = points.iter().map(|p| p.s).collect();
    let centers: Vec<Vec3> = points.iter().map(|p| p.center()).collect();
    let ids: Vec<u32> = points.iter().map(|p| p.instance_id).collect();
    assemble_augmented(&raw, &labels, &centers, &ids).map(|_| ())
}

/// A yaw-only cuboid. `size` is `(length, width, height)` along the box's
/// local x, y, z axes; `center` is the geometric center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub label: u32,
    #[serde(default)]
    pub score: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, label: u32) -> Self {
        Self {
            center,
            size,
            yaw,
            label,
            score: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.size.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::invalid("box sizes must be positive"));
        }
        if !self.center.iter().all(|c| c.is_finite()) || !self.yaw.is_finite() {
            return Err(Error::invalid("box pose must be finite"));
        }
        Ok(())
    }

    pub fn center_vec(&self) -> Vec3 {
        Vec3::from(self.center)
    }

    /// `box -> frame` transform.
    pub fn pose(&self) -> RigidTransform {
        RigidTransform::from_yaw(self.yaw, self.center_vec())
    }

    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        let d = p - self.center_vec();
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let l = self.to_local(p);
        l.x.abs() <= self.size[0] / 2.0 && l.y.abs() <= self.size[1] / 2.0 && l.z.abs() <= self.size[2] / 2.0
    }

    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let l = self.to_local(&Vec3::new(x, y, self.center[2]));
        l.x.abs() <= self.size[0] / 2.0 && l.y.abs() <= self.size[1] / 2.0
    }

    /// BEV footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        let corner = |lx: f64, ly: f64| [self.center[0] + c * lx - s * ly, self.center[1] + s * lx + c * ly];
        [corner(hl, hw), corner(-hl, hw), corner(-hl, -hw), corner(hl, -hw)]
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let pose = self.pose();
        let [l, w, h] = self.size;
        let mut out = [Vec3::zeros(); 8];
        for (i, o) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -0.5 } else { 0.5 };
            let sy = if i & 2 == 0 { -0.5 } else { 0.5 };
            let sz = if i & 4 == 0 { -0.5 } else { 0.5 };
            *o = pose.apply(&Vec3::new(sx * l, sy * w, sz * h));
        }
        out
    }

    /// Slab test. Returns `(t_enter, t_exit)` along `origin + t * dir` when
    /// the ray's line meets the box with `t_exit >= 0`.
    pub fn ray_intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let o = self.to_local(origin);
        let (s, c) = self.yaw.sin_cos();
        let d = Vec3::new(c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z);
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for axis in 0..3 {
            let half = self.size[axis] / 2.0;
            if d[axis].abs() < 1e-15 {
                if o[axis].abs() > half {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[axis];
            let (a, b) = ((-half - o[axis]) * inv, (half - o[axis]) * inv);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        (t1 >= 0.0).then_some((t0, t1))
    }

    /// Smallest BEV distance from `(x, y)` to the footprint (0 inside).
    pub fn bev_distance(&self, x: f64, y: f64) -> f64 {
        let l = self.to_local(&Vec3::new(x, y, self.center[2]));
        let dx = (l.x.abs() - self.size[0] / 2.0).max(0.0);
        let dy = (l.y.abs() - self.size[1] / 2.0).max(0.0);
        dx.hypot(dy)
    }
}
