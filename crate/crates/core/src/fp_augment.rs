//! False-positive augmentation: mine detections that match no ground truth,
//! keep their point crops in an on-disk database and paste them back into
//! training clouds as unlabeled background.
//!
//! Database layout (one directory):
//! - `index.json`: `{"records": [{"box": {...}, "scene_id": "...",
//!   "point_count": n, "offset": byte_offset}]}`
//! - `points.bin`: little-endian `f32` rows `(x, y, z, r)` in box-local
//!   coordinates, records stored back to back.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::projection::Vec3;
use crate::scene::{AugmentedPoint, Box3D, LidarPoint};

/// Raster cell used for BEV IoU.
pub const BEV_CELL: f64 = 0.05;

fn bev_bounds(b: &Box3D) -> [f64; 4] {
    let c = b.bev_corners();
    let xs = c.iter().map(|p| p[0]);
    let ys = c.iter().map(|p| p[1]);
    [
        xs.clone().fold(f64::INFINITY, f64::min),
        ys.clone().fold(f64::INFINITY, f64::min),
        xs.fold(f64::NEG_INFINITY, f64::max),
        ys.fold(f64::NEG_INFINITY, f64::max),
    ]
}

/// BEV intersection-over-union, approximated by counting the 0.05 m cells
/// (anchored at the origin) whose centers fall inside each footprint.
/// Footprints too small to cover any cell center give 0.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let (ba, bb) = (bev_bounds(a), bev_bounds(b));
    if ba[2] < bb[0] || bb[2] < ba[0] || ba[3] < bb[1] || bb[3] < ba[1] {
        return 0.0;
    }
    let [x0, y0, x1, y1] = [ba[0].min(bb[0]), ba[1].min(bb[1]), ba[2].max(bb[2]), ba[3].max(bb[3])];
    let (i0, i1) = ((x0 / BEV_CELL).floor() as i64, (x1 / BEV_CELL).ceil() as i64);
    let (j0, j1) = ((y0 / BEV_CELL).floor() as i64, (y1 / BEV_CELL).ceil() as i64);
    let (mut inter, mut union) = (0u64, 0u64);
    for i in i0..i1 {
        let x = (i as f64 + 0.5) * BEV_CELL;
        for j in j0..j1 {
            let y = (j as f64 + 0.5) * BEV_CELL;
            let (ia, ib) = (a.contains_bev(x, y), b.contains_bev(x, y));
            if ia && ib {
                inter += 1;
            }
            if ia || ib {
                union += 1;
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Exact test for a positive-area BEV intersection (separating axes).
pub fn bev_overlaps(a: &Box3D, b: &Box3D) -> bool {
    let (ca, cb) = (a.bev_corners(), b.bev_corners());
    let axes = |c: &[[f64; 2]; 4]| [[c[1][0] - c[0][0], c[1][1] - c[0][1]], [c[3][0] - c[0][0], c[3][1] - c[0][1]]];
    for axis in axes(&ca).into_iter().chain(axes(&cb)) {
        let proj = |c: &[[f64; 2]; 4]| {
            c.iter().map(|p| p[0] * axis[0] + p[1] * axis[1]).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            })
        };
        let ((alo, ahi), (blo, bhi)) = (proj(&ca), proj(&cb));
        if ahi <= blo || bhi <= alo {
            return false;
        }
    }
    true
}

/// Detections whose best BEV IoU against every ground-truth box of the
/// same scene stays below `iou_threshold`.
pub fn mine_false_positives(detections: &[Box3D], ground_truth: &[Box3D], iou_threshold: f64) -> Result<Vec<Box3D>> {
    if !(0.0..1.0).contains(&iou_threshold) {
        return Err(Error::invalid(format!("IoU threshold {iou_threshold} outside [0, 1)")));
    }
    Ok(detections
        .iter()
        .filter(|d| {
            let best = ground_truth.iter().map(|g| bev_iou(d, g)).fold(0.0, f64::max);
            best < iou_threshold
        })
        .copied()
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpRecord {
    /// `(x, y, z, r)` in the box-local frame.
    pub points: Vec<[f32; 4]>,
    pub bbox: Box3D,
    pub scene_id: String,
}

impl FpRecord {
    /// Crops the cloud points inside `bbox` into a record.
    pub fn crop(cloud: &[LidarPoint], bbox: &Box3D, scene_id: impl Into<String>) -> Self {
        let points = cloud
            .iter()
            .filter(|p| bbox.contains(&p.position()))
            .map(|p| {
                let l = bbox.to_local(&p.position());
                [l.x as f32, l.y as f32, l.z as f32, p.r as f32]
            })
            .collect();
        Self {
            points,
            bbox: *bbox,
            scene_id: scene_id.into(),
        }
    }

    fn validate(&self) -> Result<()> {
        // f32 storage can push a boundary point a hair outside
        let tol = 1e-4;
        for p in &self.points {
            for a in 0..3 {
                if !(p[a].is_finite() && (p[a] as f64).abs() <= self.bbox.size[a] / 2.0 + tol) {
                    return Err(Error::invalid(format!(
                        "record from {} has a point outside its box",
                        self.scene_id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FpDatabase {
    pub records: Vec<FpRecord>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    #[serde(rename = "box")]
    bbox: Box3D,
    scene_id: String,
    point_count: u64,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    records: Vec<IndexEntry>,
}

impl FpDatabase {
    pub fn push(&mut self, record: FpRecord) -> Result<()> {
        record.validate()?;
        self.records.push(record);
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut index = IndexFile { records: Vec::new() };
        for r in &self.records {
            index.records.push(IndexEntry {
                bbox: r.bbox,
                scene_id: r.scene_id.clone(),
                point_count: r.points.len() as u64,
                offset: blob.len() as u64,
            });
            for p in &r.points {
                for v in p {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        write_atomic(&dir.join("points.bin"), &blob)?;
        write_atomic(&dir.join("index.json"), serde_json::to_string_pretty(&index)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join("index.json");
        let blob_path = dir.join("points.bin");
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: IndexFile = serde_json::from_str(&text)?;
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let mut db = FpDatabase::default();
        for entry in index.records {
            let len = entry.point_count * 16;
            let end = entry.offset.checked_add(len).filter(|&e| e <= blob.len() as u64).ok_or_else(|| {
                Error::format(&blob_path, entry.offset, "record extends past end of blob")
            })?;
            let bytes = &blob[entry.offset as usize..end as usize];
            let points = bytes
                .chunks_exact(16)
                .map(|c| {
                    let f = |k: usize| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap());
                    [f(0), f(1), f(2), f(3)]
                })
                .collect();
            entry.bbox.validate()?;
            db.push(FpRecord {
                points,
                bbox: entry.bbox,
                scene_id: entry.scene_id,
            })?;
        }
        Ok(db)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpaConfig {
    pub iou_threshold: f64,
    pub count: usize,
    /// Uniform BEV shift of up to this many meters per paste; `None` pastes
    /// at the stored pose.
    pub random_translation: Option<f64>,
}

impl Default for FpaConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.1,
            count: 5,
            random_translation: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PasteResult {
    pub cloud: Vec<AugmentedPoint>,
    /// Boxes actually pasted, in draw order.
    pub pasted: Vec<Box3D>,
    pub requested: usize,
}

/// Draws up to `count` distinct records with a seeded generator and pastes
/// those whose box does not overlap any ground-truth or already pasted box
/// in BEV. Pasted points are appended as unpainted background.
pub fn paste_samples(
    cloud: &[AugmentedPoint],
    db: &FpDatabase,
    count: usize,
    gt_boxes: &[Box3D],
    seed: u64,
    random_translation: Option<f64>,
) -> PasteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = cloud.to_vec();
    let mut placed: Vec<Box3D> = Vec::new();
    let draws = count.min(db.records.len());
    let picks = sample(&mut rng, db.records.len(), draws).into_vec();
    for idx in picks {
        let rec = &db.records[idx];
        let mut bbox = rec.bbox;
        if let Some(max) = random_translation {
            bbox.center[0] += rng.random_range(-max..=max);
            bbox.center[1] += rng.random_range(-max..=max);
        }
        if gt_boxes.iter().chain(&placed).any(|g| bev_overlaps(&bbox, g)) {
            continue;
        }
        let pose = bbox.pose();
        out.extend(rec.points.iter().map(|p| {
            let g = pose.apply(&Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64));
            AugmentedPoint {
                x: g.x,
                y: g.y,
                z: g.z,
                r: p[3] as f64,
                ..Default::default()
            }
        }));
        placed.push(bbox);
    }
    PasteResult {
        cloud: out,
        pasted: placed,
        requested: count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x: f64, y: f64) -> Box3D {
        Box3D::new([x, y, 0.5], [1.0, 1.0, 1.0], 0.0, 1)
    }

    #[test]
    fn iou_examples() {
        let a = square(0.0, 0.0);
        assert_eq!(bev_iou(&a, &a), 1.0);
        assert_eq!(bev_iou(&a, &square(100.0, 0.0)), 0.0);
        assert!((bev_iou(&a, &square(0.5, 0.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_symmetric_under_rotation() {
        let a = Box3D::new([3.0, 1.0, 0.0], [4.0, 2.0, 1.5], 0.4, 1);
        let b = Box3D::new([3.5, 1.2, 0.0], [4.0, 2.0, 1.5], -0.3, 1);
        let (ab, ba) = (bev_iou(&a, &b), bev_iou(&b, &a));
        assert_eq!(ab, ba);
        assert!(ab > 0.3 && ab < 1.0);
    }

    #[test]
    fn sat_overlap() {
        let a = square(0.0, 0.0);
        assert!(bev_overlaps(&a, &square(0.9, 0.0)));
        assert!(!bev_overlaps(&a, &square(1.0, 0.0)));
        let rotated = Box3D::new([1.15, 1.15, 0.5], [1.0, 1.0, 1.0], std::f64::consts::FRAC_PI_4, 1);
        assert!(!bev_overlaps(&a, &rotated));
        assert!(bev_overlaps(&a, &Box3D { center: [0.8, 0.8, 0.5], ..rotated }));
    }

    #[test]
    fn mining_examples() {
        let gt = [square(0.0, 0.0)];
        assert!(mine_false_positives(&[], &gt, 0.1).unwrap().is_empty());
        assert!(mine_false_positives(&[square(0.0, 0.0)], &gt, 0.1).unwrap().is_empty());
        assert_eq!(mine_false_positives(&[square(100.0, 0.0)], &gt, 0.1).unwrap().len(), 1);
        assert!(mine_false_positives(&[], &gt, 1.0).is_err());
    }

    fn record_at(x: f64) -> FpRecord {
        let cloud: Vec<LidarPoint> = (0..5).map(|i| LidarPoint::new(x + 0.1 * i as f64, 0.0, 0.4, 0.2)).collect();
        FpRecord::crop(&cloud, &square(x + 0.2, 0.0), "scene-a")
    }

    #[test]
    fn paste_examples() {
        let base = vec![AugmentedPoint::default(); 3];
        let mut db = FpDatabase::default();
        db.push(record_at(10.0)).unwrap();
        let r = paste_samples(&base, &db, 0, &[], 1, None);
        assert_eq!(r.cloud, base);
        let r = paste_samples(&base, &db, 1, &[], 1, None);
        assert_eq!(r.cloud.len(), 8);
        assert!(r.cloud[3..].iter().all(|p| p.s == 0 && p.instance_id == 0));
        assert!((r.cloud[3].x - 10.0).abs() < 1e-6);
        // collides with a GT box
        let gt = square(10.5, 0.2);
        assert!(bev_iou(&db.records[0].bbox, &gt) > 0.0);
        let r = paste_samples(&base, &db, 1, &[gt], 1, None);
        assert!(r.pasted.is_empty());
        assert_eq!(r.cloud.len(), 3);
    }

    #[test]
    fn over_demand_and_determinism() {
        let mut db = FpDatabase::default();
        for k in 0..4 {
            db.push(record_at(10.0 * k as f64)).unwrap();
        }
        let r = paste_samples(&[], &db, 10, &[], 3, None);
        assert_eq!(r.pasted.len(), 4);
        let a = paste_samples(&[], &db, 2, &[], 42, Some(1.0));
        let b = paste_samples(&[], &db, 2, &[], 42, Some(1.0));
        assert_eq!(a, b);
    }

    #[test]
    fn record_rejects_outside_points() {
        let mut r = record_at(0.0);
        r.points.push([5.0, 0.0, 0.0, 0.0]);
        assert!(FpDatabase::default().push(r).is_err());
    }

    #[test]
    fn database_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut db = FpDatabase::default();
        db.push(record_at(1.0)).unwrap();
        db.push(FpRecord {
            points: vec![],
            bbox: Box3D::new([4.0, -2.0, 1.0], [2.0, 1.0, 1.5], 0.7, 3),
            scene_id: "empty".into(),
        })
        .unwrap();
        db.push(record_at(-7.0)).unwrap();
        db.save(dir.path()).unwrap();
        assert_eq!(FpDatabase::load(dir.path()).unwrap(), db);
    }
}
