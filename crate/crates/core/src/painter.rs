//! Instance painting: associate projected points with per-camera 2D
//! instance masks, settle cross-camera conflicts, merge objects split at
//! camera seams and emit raw 3D instance priors.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::{project_cloud, CalibrationRig, PixelHit, Vec3, DEFAULT_Z_MIN};
use crate::scene::LidarPoint;

/// Per-instance metadata attached to a mask raster.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskInstance {
    pub label: u32,
    pub score: f64,
    pub touches_left: bool,
    pub touches_right: bool,
}

/// A camera's 2D instance raster (row-major, `0` = background).
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMask {
    pub camera: usize,
    pub width: u32,
    pub height: u32,
    pub raster: Vec<u16>,
    pub instances: BTreeMap<u16, MaskInstance>,
}

impl InstanceMask {
    pub fn empty(camera: usize, width: u32, height: u32) -> Self {
        Self {
            camera,
            width,
            height,
            raster: vec![0; width as usize * height as usize],
            instances: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.raster.len() != self.width as usize * self.height as usize {
            return Err(Error::invalid(format!(
                "camera {} mask raster has {} cells, expected {}x{}",
                self.camera,
                self.raster.len(),
                self.width,
                self.height
            )));
        }
        for (id, inst) in &self.instances {
            if *id == 0 {
                return Err(Error::invalid("instance id 0 is reserved for background"));
            }
            if !(0.0..=1.0).contains(&inst.score) {
                return Err(Error::invalid(format!(
                    "camera {} instance {id} score {} outside [0, 1]",
                    self.camera, inst.score
                )));
            }
            if inst.label == 0 {
                return Err(Error::invalid(format!("camera {} instance {id} has label 0", self.camera)));
            }
        }
        let present: BTreeSet<u16> = self.raster.iter().copied().filter(|&v| v != 0).collect();
        if let Some(missing) = present.iter().find(|v| !self.instances.contains_key(v)) {
            return Err(Error::invalid(format!(
                "camera {} raster value {missing} has no instance record",
                self.camera
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn at(&self, px: u32, py: u32) -> u16 {
        self.raster[py as usize * self.width as usize + px as usize]
    }

    /// Recomputes the border-contact flags from the raster.
    pub fn refresh_border_flags(&mut self) {
        for inst in self.instances.values_mut() {
            inst.touches_left = false;
            inst.touches_right = false;
        }
        let w = self.width as usize;
        for row in self.raster.chunks(w) {
            if let Some(inst) = self.instances.get_mut(&row[0]) {
                inst.touches_left = true;
            }
            if let Some(inst) = self.instances.get_mut(&row[w - 1]) {
                inst.touches_right = true;
            }
        }
    }

    /// Morphological erosion with a `(2r+1)^2` square: a pixel keeps its id
    /// only when every in-image neighbour carries the same id. Pixels past
    /// the image edge do not erode.
    pub fn eroded(&self, radius: u32) -> Self {
        let (w, h) = (self.width as i64, self.height as i64);
        let r = radius as i64;
        let mut raster = self.raster.clone();
        for y in 0..h {
            for x in 0..w {
                let id = self.raster[(y * w + x) as usize];
                if id == 0 {
                    continue;
                }
                let keep = (-r..=r).all(|dy| {
                    (-r..=r).all(|dx| {
                        let (nx, ny) = (x + dx, y + dy);
                        nx < 0 || ny < 0 || nx >= w || ny >= h || self.raster[(ny * w + nx) as usize] == id
                    })
                });
                if !keep {
                    raster[(y * w + x) as usize] = 0;
                }
            }
        }
        let mut out = Self {
            raster,
            ..self.clone()
        };
        out.refresh_border_flags();
        out
    }
}

/// Identifies a 2D instance: `(camera, instance id in that camera)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub camera: usize,
    pub instance: u16,
}

/// One camera's opinion about a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub key: GroupKey,
    pub label: u32,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Association {
    /// Point indices per 2D instance, ascending.
    pub groups: BTreeMap<GroupKey, Vec<usize>>,
    /// Per point, one candidate per camera whose hit lands on a nonzero id.
    pub candidates: Vec<Vec<Candidate>>,
}

pub fn check_masks(masks: &[InstanceMask], rig: Option<&CalibrationRig>) -> Result<()> {
    for (j, m) in masks.iter().enumerate() {
        if m.camera != j {
            return Err(Error::invalid(format!("mask at position {j} is for camera {}", m.camera)));
        }
        m.validate()?;
        if let Some(cam) = rig.and_then(|r| r.cameras.get(j)) {
            if (cam.width, cam.height) != (m.width, m.height) {
                return Err(Error::invalid(format!(
                    "camera {j} is {}x{} but its mask is {}x{}",
                    cam.width, cam.height, m.width, m.height
                )));
            }
        }
    }
    Ok(())
}

/// Looks every hit up in its camera's raster.
pub fn associate(point_count: usize, hits: &[Vec<PixelHit>], masks: &[InstanceMask]) -> Result<Association> {
    if hits.len() != point_count {
        return Err(Error::invalid(format!(
            "{} hit lists for {point_count} points",
            hits.len()
        )));
    }
    check_masks(masks, None)?;
    let mut assoc = Association {
        groups: BTreeMap::new(),
        candidates: vec![Vec::new(); point_count],
    };
    for (i, point_hits) in hits.iter().enumerate() {
        for hit in point_hits {
            let mask = masks
                .get(hit.camera)
                .ok_or_else(|| Error::invalid(format!("no mask for camera {}", hit.camera)))?;
            let (px, py) = hit.pixel();
            if px >= mask.width || py >= mask.height {
                return Err(Error::invalid(format!(
                    "hit ({}, {}) outside camera {} mask",
                    hit.u, hit.v, hit.camera
                )));
            }
            let id = mask.at(px, py);
            if id == 0 {
                continue;
            }
            let inst = &mask.instances[&id];
            let key = GroupKey {
                camera: hit.camera,
                instance: id,
            };
            assoc.groups.entry(key).or_default().push(i);
            assoc.candidates[i].push(Candidate {
                key,
                label: inst.label,
                score: inst.score,
            });
        }
    }
    Ok(assoc)
}

/// Keeps, per point, the candidate with the highest segmentation score;
/// exact ties go to the lower camera index.
pub fn resolve_conflicts(candidates: &[Vec<Candidate>]) -> Vec<Option<Candidate>> {
    candidates
        .iter()
        .map(|cands| {
            cands.iter().copied().reduce(|best, c| {
                if c.score > best.score || (c.score == best.score && c.key.camera < best.key.camera) {
                    c
                } else {
                    best
                }
            })
        })
        .collect()
}

/// A set of 2D instances judged to be one 3D object.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedGroup {
    pub parts: Vec<GroupKey>,
    pub label: u32,
    pub score: f64,
    pub members: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PainterConfig {
    /// Largest 3D gap (meters) bridged when merging seam fragments.
    pub merge_gap: f64,
    /// Camera near plane in meters.
    pub z_min: f64,
}

impl Default for PainterConfig {
    fn default() -> Self {
        Self {
            merge_gap: 0.5,
            z_min: DEFAULT_Z_MIN,
        }
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.0[hi] = lo;
        }
    }
}

/// Smallest distance between two point sets, stopping early once below
/// `stop_below`.
fn set_gap(points: &[LidarPoint], a: &[usize], b: &[usize], stop_below: f64) -> f64 {
    let bpos: Vec<Vec3> = b.iter().map(|&j| points[j].position()).collect();
    let mut best = f64::INFINITY;
    for &i in a {
        let p = points[i].position();
        for q in &bpos {
            let d = (p - q).norm_squared();
            if d < best {
                best = d;
                if best.sqrt() < stop_below {
                    return best.sqrt();
                }
            }
        }
    }
    best.sqrt()
}

/// 2D instance pairs observed on the same point by two cameras with the
/// same label. These are the same object seen through an overlap wedge.
pub fn co_observations(candidates: &[Vec<Candidate>]) -> BTreeSet<(GroupKey, GroupKey)> {
    let mut links = BTreeSet::new();
    for cands in candidates.iter().filter(|c| c.len() > 1) {
        for (i, a) in cands.iter().enumerate() {
            for b in &cands[i + 1..] {
                if a.label == b.label && a.key.camera != b.key.camera {
                    links.insert((a.key.min(b.key), a.key.max(b.key)));
                }
            }
        }
    }
    links
}

/// Merges groups of ring-adjacent cameras that belong to one object.
///
/// Two groups merge when their labels match, their point sets come within
/// `merge_gap`, and either both 2D instances touch the shared seam (right
/// border of camera `j`, left border of camera `j + 1`) or the pair was
/// co-observed on some point. Merging is transitive. Output groups are
/// ordered by smallest member index.
pub fn merge_truncated(
    groups: &BTreeMap<GroupKey, Vec<usize>>,
    masks: &[InstanceMask],
    points: &[LidarPoint],
    co_observed: &BTreeSet<(GroupKey, GroupKey)>,
    merge_gap: f64,
) -> Result<Vec<MergedGroup>> {
    let keys: Vec<GroupKey> = groups.keys().copied().collect();
    let record = |k: &GroupKey| -> Result<MaskInstance> {
        masks
            .get(k.camera)
            .and_then(|m| m.instances.get(&k.instance))
            .copied()
            .ok_or_else(|| Error::invalid(format!("no mask record for {k:?}")))
    };
    let cameras = masks.len();
    let mut uf = UnionFind::new(keys.len());
    for (ia, a) in keys.iter().enumerate() {
        let ra = record(a)?;
        for (ib, b) in keys.iter().enumerate() {
            if ia == ib || cameras < 2 || b.camera != (a.camera + 1) % cameras {
                continue;
            }
            let rb = record(b)?;
            if ra.label != rb.label {
                continue;
            }
            let seam = ra.touches_right && rb.touches_left;
            let linked = co_observed.contains(&(*a.min(b), *a.max(b)));
            if !(seam || linked) {
                continue;
            }
            if set_gap(points, &groups[a], &groups[b], merge_gap) < merge_gap {
                uf.union(ia, ib);
            }
        }
    }

    let mut merged: BTreeMap<usize, Vec<GroupKey>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        merged.entry(uf.find(i)).or_default().push(*k);
    }
    let mut out = Vec::with_capacity(merged.len());
    for parts in merged.into_values() {
        let mut members: Vec<usize> = parts.iter().flat_map(|k| groups[k].iter().copied()).collect();
        members.sort_unstable();
        members.dedup();
        let first = record(&parts[0])?;
        let score = parts
            .iter()
            .map(|k| record(k).map(|r| r.score))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(first.score, f64::max);
        out.push(MergedGroup {
            parts,
            label: first.label,
            score,
            members,
        });
    }
    out.sort_by_key(|g| g.members[0]);
    Ok(out)
}

/// A 3D instance prior aggregated from painted points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance3DPrior {
    pub id: u32,
    pub label: u32,
    pub score: f64,
    /// Indices into the keyframe cloud, ascending and unique.
    pub members: Vec<usize>,
    pub center: [f64; 3],
    /// Set by the refiner when no dense cluster was found.
    #[serde(default)]
    pub low_confidence: bool,
}

impl Instance3DPrior {
    pub fn center_vec(&self) -> Vec3 {
        Vec3::from(self.center)
    }
}

pub fn mean_center(points: &[LidarPoint], members: &[usize]) -> Vec3 {
    let sum = members.iter().fold(Vec3::zeros(), |acc, &i| acc + points[i].position());
    sum / members.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct PaintOutput {
    pub priors: Vec<Instance3DPrior>,
    /// Per point label (0 when unpainted).
    pub labels: Vec<u32>,
    /// Per point prior id (0 when unpainted).
    pub instance_ids: Vec<u32>,
}

impl PaintOutput {
    pub fn painted_count(&self) -> usize {
        self.instance_ids.iter().filter(|&&i| i != 0).count()
    }
}

/// Associates, resolves conflicts, merges seam fragments and assigns
/// scene-unique ids (1-based, in order of smallest member index). Prior
/// centers are member means.
pub fn paint_scene(
    points: &[LidarPoint],
    rig: &CalibrationRig,
    masks: &[InstanceMask],
    config: &PainterConfig,
) -> Result<PaintOutput> {
    if masks.len() != rig.camera_count() {
        return Err(Error::invalid(format!(
            "{} masks for {} cameras",
            masks.len(),
            rig.camera_count()
        )));
    }
    check_masks(masks, Some(rig))?;
    let hits = project_cloud(points, rig, config.z_min);
    paint_with_hits(points, &hits, masks, config)
}

/// [`paint_scene`] on precomputed hits.
pub fn paint_with_hits(
    points: &[LidarPoint],
    hits: &[Vec<PixelHit>],
    masks: &[InstanceMask],
    config: &PainterConfig,
) -> Result<PaintOutput> {
    let assoc = associate(points.len(), hits, masks)?;
    let resolved = resolve_conflicts(&assoc.candidates);
    let mut groups: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
    for (i, c) in resolved.iter().enumerate() {
        if let Some(c) = c {
            groups.entry(c.key).or_default().push(i);
        }
    }
    let links = co_observations(&assoc.candidates);
    let merged = merge_truncated(&groups, masks, points, &links, config.merge_gap)?;

    let mut labels = vec![0u32; points.len()];
    let mut instance_ids = vec![0u32; points.len()];
    let priors = merged
        .into_iter()
        .enumerate()
        .map(|(k, g)| {
            let id = k as u32 + 1;
            for &i in &g.members {
                labels[i] = g.label;
                instance_ids[i] = id;
            }
            Instance3DPrior {
                id,
                label: g.label,
                score: g.score,
                center: mean_center(points, &g.members).into(),
                members: g.members,
                low_confidence: false,
            }
        })
        .collect();
    Ok(PaintOutput {
        priors,
        labels,
        instance_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::{CameraModel, RigidTransform};

    fn hit(camera: usize, u: f64, v: f64) -> PixelHit {
        PixelHit {
            camera,
            u,
            v,
            depth: 10.0,
        }
    }

    fn mask_with(camera: usize, cells: &[(u32, u32, u16)], records: &[(u16, u32, f64)]) -> InstanceMask {
        let mut m = InstanceMask::empty(camera, 10, 10);
        for &(x, y, id) in cells {
            m.raster[(y * 10 + x) as usize] = id;
        }
        for &(id, label, score) in records {
            m.instances.insert(
                id,
                MaskInstance {
                    label,
                    score,
                    touches_left: false,
                    touches_right: false,
                },
            );
        }
        m.refresh_border_flags();
        m
    }

    fn cand(camera: usize, label: u32, score: f64) -> Candidate {
        Candidate {
            key: GroupKey { camera, instance: 1 },
            label,
            score,
        }
    }

    #[test]
    fn zero_rasters_paint_nothing() {
        let masks = vec![InstanceMask::empty(0, 10, 10)];
        let hits = vec![vec![hit(0, 3.5, 3.5)], vec![]];
        let a = associate(2, &hits, &masks).unwrap();
        assert!(a.groups.is_empty());
        assert!(a.candidates.iter().all(|c| c.is_empty()));
    }

    #[test]
    fn single_hit_joins_group() {
        let masks = vec![mask_with(0, &[(3, 4, 5)], &[(5, 1, 0.9)])];
        let hits = vec![vec![hit(0, 3.2, 4.9)]];
        let a = associate(1, &hits, &masks).unwrap();
        let key = GroupKey { camera: 0, instance: 5 };
        assert_eq!(a.groups.get(&key), Some(&vec![0]));
        assert_eq!(a.candidates[0][0].label, 1);
    }

    #[test]
    fn raster_without_record_is_rejected() {
        let masks = vec![mask_with(0, &[(3, 4, 5)], &[])];
        assert!(associate(1, &[vec![hit(0, 3.2, 4.9)]], &masks).is_err());
        assert!(associate(1, &[vec![hit(1, 3.2, 4.9)]], &[mask_with(0, &[], &[])]).is_err());
    }

    #[test]
    fn conflict_rules() {
        let r = resolve_conflicts(&[vec![cand(3, 2, 0.4)]]);
        assert_eq!(r[0].unwrap().key.camera, 3);
        let r = resolve_conflicts(&[vec![cand(0, 1, 0.7), cand(1, 2, 0.9)]]);
        assert_eq!(r[0].unwrap().label, 2);
        let r = resolve_conflicts(&[vec![cand(4, 1, 0.8), cand(2, 2, 0.8)]]);
        assert_eq!(r[0].unwrap().key.camera, 2);
        assert_eq!(resolve_conflicts(&[vec![]]), vec![None]);
    }

    fn line_points(xs: &[f64]) -> Vec<LidarPoint> {
        xs.iter().map(|&x| LidarPoint::new(x, 0.0, 0.0, 0.0)).collect()
    }

    #[test]
    fn merge_needs_facing_borders_and_label() {
        // camera 0 instance touches its right border, camera 1 instance its left
        let m0 = mask_with(0, &[(9, 2, 1)], &[(1, 1, 1.0)]);
        let m1 = mask_with(1, &[(0, 2, 1)], &[(1, 1, 1.0)]);
        let points = line_points(&[0.0, 0.2]);
        let mut groups = BTreeMap::new();
        groups.insert(GroupKey { camera: 0, instance: 1 }, vec![0]);
        groups.insert(GroupKey { camera: 1, instance: 1 }, vec![1]);
        let merged = merge_truncated(&groups, &[m0.clone(), m1.clone()], &points, &BTreeSet::new(), 0.5).unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].members, vec![0, 1]);

        // different labels
        let m1b = mask_with(1, &[(0, 2, 1)], &[(1, 2, 1.0)]);
        let merged = merge_truncated(&groups, &[m0.clone(), m1b], &points, &BTreeSet::new(), 0.5).unwrap();
        assert_eq!(merged.len(), 2);

        // too far apart in 3D
        let far = line_points(&[0.0, 3.0]);
        let merged = merge_truncated(&groups, &[m0.clone(), m1.clone()], &far, &BTreeSet::new(), 0.5).unwrap();
        assert_eq!(merged.len(), 2);

        // borders not facing: camera 0 touches left, camera 1 touches right
        let m0l = mask_with(0, &[(0, 2, 1)], &[(1, 1, 1.0)]);
        let m1r = mask_with(1, &[(9, 2, 1)], &[(1, 1, 1.0)]);
        let merged = merge_truncated(&groups, &[m0l, m1r, InstanceMask::empty(2, 10, 10)], &points, &BTreeSet::new(), 0.5)
            .unwrap();
        assert_eq!(merged.len(), 2);
    }

    #[test]
    fn merge_without_border_contact_is_noop() {
        let m0 = mask_with(0, &[(4, 2, 1)], &[(1, 1, 1.0)]);
        let m1 = mask_with(1, &[(4, 2, 1)], &[(1, 1, 1.0)]);
        let points = line_points(&[0.0, 0.1]);
        let mut groups = BTreeMap::new();
        groups.insert(GroupKey { camera: 0, instance: 1 }, vec![0]);
        groups.insert(GroupKey { camera: 1, instance: 1 }, vec![1]);
        let merged = merge_truncated(&groups, &[m0, m1], &points, &BTreeSet::new(), 0.5).unwrap();
        assert_eq!(merged.len(), 2);
    }

    #[test]
    fn co_observed_pairs_merge() {
        let m0 = mask_with(0, &[(4, 2, 1)], &[(1, 1, 1.0)]);
        let m1 = mask_with(1, &[(4, 2, 1)], &[(1, 1, 1.0)]);
        let points = line_points(&[0.0, 0.1]);
        let mut groups = BTreeMap::new();
        let (a, b) = (GroupKey { camera: 0, instance: 1 }, GroupKey { camera: 1, instance: 1 });
        groups.insert(a, vec![0]);
        groups.insert(b, vec![1]);
        let links = BTreeSet::from([(a, b)]);
        let merged = merge_truncated(&groups, &[m0, m1], &points, &links, 0.5).unwrap();
        assert_eq!(merged.len(), 1);
    }

    #[test]
    fn erosion_shrinks_masks() {
        let cells: Vec<_> = (2..7).flat_map(|x| (2..7).map(move |y| (x, y, 1u16))).collect();
        let m = mask_with(0, &cells, &[(1, 1, 1.0)]);
        let e = m.eroded(1);
        let count = |m: &InstanceMask| m.raster.iter().filter(|&&v| v != 0).count();
        assert_eq!(count(&m), 25);
        assert_eq!(count(&e), 9);
        for (a, b) in m.raster.iter().zip(&e.raster) {
            assert!(*b == 0 || a == b);
        }
    }

    #[test]
    fn empty_masks_paint_nothing() {
        let cam = CameraModel::new(100.0, 100.0, 50.0, 50.0, 100, 100, RigidTransform::identity()).unwrap();
        let rig = CalibrationRig::new(RigidTransform::identity(), vec![cam]).unwrap();
        let points = vec![LidarPoint::new(0.0, 0.0, 5.0, 0.0); 3];
        let out = paint_scene(&points, &rig, &[InstanceMask::empty(0, 100, 100)], &PainterConfig::default()).unwrap();
        assert!(out.priors.is_empty());
        assert_eq!(out.labels, vec![0; 3]);
    }

    #[test]
    fn paint_assigns_mean_center() {
        let cam = CameraModel::new(100.0, 100.0, 50.0, 50.0, 100, 100, RigidTransform::identity()).unwrap();
        let rig = CalibrationRig::new(RigidTransform::identity(), vec![cam]).unwrap();
        let mut mask = InstanceMask::empty(0, 100, 100);
        for y in 40..60 {
            for x in 40..60 {
                mask.raster[y * 100 + x] = 3;
            }
        }
        mask.instances.insert(
            3,
            MaskInstance {
                label: 2,
                score: 0.8,
                touches_left: false,
                touches_right: false,
            },
        );
        let points = vec![
            LidarPoint::new(0.0, 0.0, 5.0, 0.0),
            LidarPoint::new(0.2, 0.0, 6.0, 0.0),
            LidarPoint::new(3.0, 0.0, 5.0, 0.0),
        ];
        let out = paint_scene(&points, &rig, &[mask], &PainterConfig::default()).unwrap();
        assert_eq!(out.priors.len(), 1);
        let p = &out.priors[0];
        assert_eq!((p.id, p.label, p.members.clone()), (1, 2, vec![0, 1]));
        assert!((p.center_vec() - Vec3::new(0.1, 0.0, 5.5)).norm() < 1e-12);
        assert_eq!(out.instance_ids, vec![1, 1, 0]);
    }
}
