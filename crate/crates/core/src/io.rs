//! File formats.
//!
//! - point clouds: little-endian `f32` rows of 4 `(x, y, z, r)` or 5
//!   fields (the fifth is the sweep offset)
//! - augmented clouds: 8 little-endian `f32` `(x, y, z, r, s, cx, cy, cz)`
//!   followed by a little-endian `u32` instance id, 36 bytes per point
//! - masks: 16-bit binary PGM (`P5`, maxval 65535, big-endian samples as
//!   Netpbm requires) plus a JSON sidecar `{id: {label, score,
//!   touches_left, touches_right}}`
//! - calibration: JSON with row-major 4x4 matrices
//! - scene directories: the above plus `sweeps.json` and an optional
//!   ground-truth sidecar
//!
//! Every write goes to a temporary sibling and is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::painter::{InstanceMask, MaskInstance};
use crate::projection::{CalibrationRig, RigidTransform};
use crate::scene::{AugmentedPoint, Box3D, LabelTable, LidarPoint, Sweep};

pub const AUGMENTED_RECORD_BYTES: usize = 36;

/// Writes `bytes` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, 0, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[inline]
fn f32_at(bytes: &[u8], offset: usize) -> f32 {
    f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

pub fn encode_cloud(points: &[LidarPoint], field_count: usize) -> Result<Vec<u8>> {
    check_field_count(field_count)?;
    let mut out = Vec::with_capacity(points.len() * field_count * 4);
    for p in points {
        let row = [p.x, p.y, p.z, p.r, p.sweep_offset];
        for v in &row[..field_count] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a cloud buffer; `path` only labels errors.
pub fn decode_cloud(bytes: &[u8], field_count: usize, path: &Path) -> Result<Vec<LidarPoint>> {
    check_field_count(field_count)?;
    let row = field_count * 4;
    if !bytes.len().is_multiple_of(row) {
        return Err(Error::format(
            path,
            (bytes.len() - bytes.len() % row) as u64,
            format!("{} bytes is not a multiple of the {row}-byte row", bytes.len()),
        ));
    }
    let mut out = Vec::with_capacity(bytes.len() / row);
    for (i, chunk) in bytes.chunks_exact(row).enumerate() {
        let mut v = [0.0f64; 5];
        for (k, slot) in v.iter_mut().enumerate().take(field_count) {
            let x = f32_at(chunk, 4 * k);
            if !x.is_finite() {
                return Err(Error::format(path, (i * row + 4 * k) as u64, "non-finite value"));
            }
            *slot = x as f64;
        }
        out.push(LidarPoint {
            x: v[0],
            y: v[1],
            z: v[2],
            r: v[3],
            sweep_offset: v[4],
        });
    }
    Ok(out)
}

fn check_field_count(field_count: usize) -> Result<()> {
    if field_count == 4 || field_count == 5 {
        Ok(())
    } else {
        Err(Error::invalid(format!("field count must be 4 or 5, got {field_count}")))
    }
}

pub fn read_cloud(path: &Path, field_count: usize) -> Result<Vec<LidarPoint>> {
    decode_cloud(&read_bytes(path)?, field_count, path)
}

pub fn write_cloud(path: &Path, points: &[LidarPoint], field_count: usize) -> Result<()> {
    write_atomic(path, &encode_cloud(points, field_count)?)
}

pub fn encode_augmented(points: &[AugmentedPoint]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * AUGMENTED_RECORD_BYTES);
    for p in points {
        for v in [p.x, p.y, p.z, p.r, p.s as f64, p.cx, p.cy, p.cz] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&p.instance_id.to_le_bytes());
    }
    out
}

pub fn decode_augmented(bytes: &[u8], path: &Path) -> Result<Vec<AugmentedPoint>> {
    if !bytes.len().is_multiple_of(AUGMENTED_RECORD_BYTES) {
        return Err(Error::format(
            path,
            (bytes.len() - bytes.len() % AUGMENTED_RECORD_BYTES) as u64,
            "truncated augmented record",
        ));
    }
    let mut out = Vec::with_capacity(bytes.len() / AUGMENTED_RECORD_BYTES);
    for (i, c) in bytes.chunks_exact(AUGMENTED_RECORD_BYTES).enumerate() {
        let base = (i * AUGMENTED_RECORD_BYTES) as u64;
        let mut v = [0.0f64; 8];
        for (k, slot) in v.iter_mut().enumerate() {
            let x = f32_at(c, 4 * k);
            if !x.is_finite() {
                return Err(Error::format(path, base + 4 * k as u64, "non-finite value"));
            }
            *slot = x as f64;
        }
        if v[4] < 0.0 || v[4].fract() != 0.0 || v[4] > u32::MAX as f64 {
            return Err(Error::format(path, base + 16, format!("label {} is not a class id", v[4])));
        }
        out.push(AugmentedPoint {
            x: v[0],
            y: v[1],
            z: v[2],
            r: v[3],
            s: v[4] as u32,
            cx: v[5],
            cy: v[6],
            cz: v[7],
            instance_id: u32::from_le_bytes(c[32..36].try_into().unwrap()),
        });
    }
    Ok(out)
}

pub fn write_augmented(points: &[AugmentedPoint], path: &Path) -> Result<()> {
    write_atomic(path, &encode_augmented(points))
}

pub fn read_augmented(path: &Path) -> Result<Vec<AugmentedPoint>> {
    decode_augmented(&read_bytes(path)?, path)
}

pub fn encode_pgm16(width: u32, height: u32, raster: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(raster.len() * 2);
    for v in raster {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

/// Parses a 16-bit `P5` PGM. Header comments (`#` to end of line) are
/// allowed between tokens.
pub fn decode_pgm16(bytes: &[u8], path: &Path) -> Result<(u32, u32, Vec<u16>)> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::format(path, start as u64, "truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos)?;
    if magic != "P5" {
        return Err(Error::format(path, 0, format!("expected P5, found {magic:?}")));
    }
    let number = |pos: &mut usize| -> Result<u32> {
        let at = *pos as u64;
        let t = token(pos)?;
        t.parse().map_err(|_| Error::format(path, at, format!("bad header number {t:?}")))
    };
    let width = number(&mut pos)?;
    let height = number(&mut pos)?;
    let maxval_at = pos as u64;
    let maxval = number(&mut pos)?;
    if maxval != 65535 {
        return Err(Error::format(path, maxval_at, format!("maxval {maxval}, expected 65535")));
    }
    // exactly one whitespace byte separates the header from the samples
    pos += 1;
    let expected = width as usize * height as usize * 2;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != expected {
        return Err(Error::format(
            path,
            pos as u64,
            format!("{} sample bytes, expected {expected}", body.len()),
        ));
    }
    let raster = body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((width, height, raster))
}

fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("json")
}

/// Writes `<stem>.pgm` and the `<stem>.json` sidecar.
pub fn write_mask(pgm: &Path, mask: &InstanceMask) -> Result<()> {
    mask.validate()?;
    write_atomic(pgm, &encode_pgm16(mask.width, mask.height, &mask.raster))?;
    let sidecar: BTreeMap<String, MaskInstance> =
        mask.instances.iter().map(|(id, inst)| (id.to_string(), *inst)).collect();
    write_json(&sidecar_path(pgm), &sidecar)
}

pub fn read_mask(pgm: &Path, camera: usize) -> Result<InstanceMask> {
    let (width, height, raster) = decode_pgm16(&read_bytes(pgm)?, pgm)?;
    let side = sidecar_path(pgm);
    let raw: BTreeMap<String, MaskInstance> = read_json(&side)?;
    let mut instances = BTreeMap::new();
    for (k, v) in raw {
        let id: u16 = k
            .parse()
            .map_err(|_| Error::format(&side, 0, format!("instance key {k:?} is not a 16-bit id")))?;
        instances.insert(id, v);
    }
    let mask = InstanceMask {
        camera,
        width,
        height,
        raster,
        instances,
    };
    mask.validate()?;
    Ok(mask)
}

pub fn write_calibration(path: &Path, rig: &CalibrationRig) -> Result<()> {
    write_json(path, rig)
}

pub fn read_calibration(path: &Path) -> Result<CalibrationRig> {
    read_json(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SweepEntry {
    file: String,
    timestamp: f64,
    ego_pose: RigidTransform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SweepIndex {
    keyframe: usize,
    sweeps: Vec<SweepEntry>,
}

/// Everything the pipeline consumes for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneData {
    pub rig: CalibrationRig,
    /// Raw sweeps in the LiDAR frame.
    pub sweeps: Vec<Sweep>,
    pub keyframe: usize,
    pub masks: Vec<InstanceMask>,
    pub labels: LabelTable,
}

/// Exact answers for a synthetic sample, aligned with the stacked cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub boxes: Vec<Box3D>,
    /// Box index per stacked point, `-1` for background.
    pub point_box: Vec<i32>,
    /// Whether each stacked point is seen unobstructed by some camera.
    pub visible: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct GtFile {
    boxes: Vec<Box3D>,
}

pub fn mask_path(dir: &Path, camera: usize) -> PathBuf {
    dir.join("masks").join(format!("cam_{camera}.pgm"))
}

/// Layout: `calibration.json`, `labels.json`, `sweeps.json`,
/// `sweep_NN.bin` (4-field, LiDAR frame), `masks/cam_K.{pgm,json}`.
pub fn write_scene(dir: &Path, scene: &SceneData) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_calibration(&dir.join("calibration.json"), &scene.rig)?;
    write_json(&dir.join("labels.json"), &scene.labels)?;
    let mut index = SweepIndex {
        keyframe: scene.keyframe,
        sweeps: Vec::new(),
    };
    for (i, s) in scene.sweeps.iter().enumerate() {
        let file = format!("sweep_{i:02}.bin");
        write_cloud(&dir.join(&file), &s.points, 4)?;
        index.sweeps.push(SweepEntry {
            file,
            timestamp: s.timestamp,
            ego_pose: s.ego_pose,
        });
    }
    write_json(&dir.join("sweeps.json"), &index)?;
    for m in &scene.masks {
        write_mask(&mask_path(dir, m.camera), m)?;
    }
    Ok(())
}

pub fn read_scene(dir: &Path) -> Result<SceneData> {
    let rig = read_calibration(&dir.join("calibration.json"))?;
    let labels_path = dir.join("labels.json");
    let labels = if labels_path.exists() {
        read_json(&labels_path)?
    } else {
        LabelTable::nuscenes()
    };
    let index: SweepIndex = read_json(&dir.join("sweeps.json"))?;
    let mut sweeps = Vec::with_capacity(index.sweeps.len());
    for e in index.sweeps {
        sweeps.push(Sweep {
            points: read_cloud(&dir.join(&e.file), 4)?,
            ego_pose: e.ego_pose,
            timestamp: e.timestamp,
        });
    }
    let masks = (0..rig.camera_count())
        .map(|k| read_mask(&mask_path(dir, k), k))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneData {
        rig,
        sweeps,
        keyframe: index.keyframe,
        masks,
        labels,
    })
}

/// Writes `gt.json`, `gt_points.bin` (little-endian `i32`) and
/// `visibility.bin` (one byte per point).
pub fn write_ground_truth(dir: &Path, gt: &GroundTruth) -> Result<()> {
    if gt.point_box.len() != gt.visible.len() {
        return Err(Error::invalid("ground-truth index and visibility lengths differ"));
    }
    write_json(&dir.join("gt.json"), &GtFile { boxes: gt.boxes.clone() })?;
    let idx: Vec<u8> = gt.point_box.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(&dir.join("gt_points.bin"), &idx)?;
    let vis: Vec<u8> = gt.visible.iter().map(|&v| v as u8).collect();
    write_atomic(&dir.join("visibility.bin"), &vis)
}

pub fn read_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let file: GtFile = read_json(&dir.join("gt.json"))?;
    let idx_path = dir.join("gt_points.bin");
    let idx = read_bytes(&idx_path)?;
    if idx.len() % 4 != 0 {
        return Err(Error::format(&idx_path, (idx.len() / 4 * 4) as u64, "truncated index"));
    }
    let point_box: Vec<i32> = idx.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect();
    if let Some(i) = point_box.iter().position(|&b| b < -1 || b >= file.boxes.len() as i32) {
        return Err(Error::format(&idx_path, 4 * i as u64, "box index out of range"));
    }
    let vis_path = dir.join("visibility.bin");
    let vis = read_bytes(&vis_path)?;
    if vis.len() != point_box.len() {
        return Err(Error::format(&vis_path, vis.len() as u64, "visibility length differs from index"));
    }
    Ok(GroundTruth {
        boxes: file.boxes,
        point_box,
        visible: vis.into_iter().map(|b| b != 0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn cloud_examples() {
        let d = tmp();
        let p = d.path().join("c.bin");
        write_cloud(&p, &[], 4).unwrap();
        assert!(read_cloud(&p, 4).unwrap().is_empty());
        write_cloud(&p, &[LidarPoint::new(1.0, 2.0, 3.0, 0.5)], 4).unwrap();
        assert_eq!(read_cloud(&p, 4).unwrap(), vec![LidarPoint::new(1.0, 2.0, 3.0, 0.5)]);
        fs::write(&p, [0u8; 17]).unwrap();
        match read_cloud(&p, 4) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_finite_reports_offset() {
        let mut bytes = encode_cloud(&[LidarPoint::new(1.0, 2.0, 3.0, 0.5); 2], 4).unwrap();
        bytes[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode_cloud(&bytes, 4, Path::new("x")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 24),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn five_fields_carry_offset() {
        let mut p = LidarPoint::new(1.0, 2.0, 3.0, 0.5);
        p.sweep_offset = -0.25;
        let bytes = encode_cloud(&[p], 5).unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(decode_cloud(&bytes, 5, Path::new("x")).unwrap(), vec![p]);
        assert!(decode_cloud(&bytes, 6, Path::new("x")).is_err());
    }

    #[test]
    fn augmented_layout() {
        assert!(encode_augmented(&[]).is_empty());
        let p = AugmentedPoint {
            x: 1.0,
            y: 2.0,
            z: 3.0,
            r: 0.5,
            s: 7,
            cx: 4.0,
            cy: 5.0,
            cz: 6.0,
            instance_id: 0x0102_0304,
        };
        let b = encode_augmented(&[p]);
        assert_eq!(b.len(), 36);
        assert_eq!(&b[16..20], &7.0f32.to_le_bytes());
        assert_eq!(&b[32..36], &[4, 3, 2, 1]);
        assert_eq!(decode_augmented(&b, Path::new("x")).unwrap(), vec![p]);
    }

    #[test]
    fn augmented_rejects_fractional_label() {
        let mut b = encode_augmented(&[AugmentedPoint::default()]);
        b[16..20].copy_from_slice(&1.5f32.to_le_bytes());
        assert!(decode_augmented(&b, Path::new("x")).is_err());
    }

    fn sample_mask() -> InstanceMask {
        let mut m = InstanceMask::empty(2, 4, 3);
        m.raster[0] = 300;
        m.raster[5] = 300;
        m.raster[11] = 65535;
        m.instances.insert(300, MaskInstance { label: 1, score: 0.9, touches_left: false, touches_right: false });
        m.instances.insert(65535, MaskInstance { label: 9, score: 0.25, touches_left: false, touches_right: false });
        m.refresh_border_flags();
        m
    }

    #[test]
    fn pgm_is_big_endian() {
        let b = encode_pgm16(2, 1, &[0x0102, 0xfffe]);
        assert!(b.starts_with(b"P5\n2 1\n65535\n"));
        assert_eq!(&b[b.len() - 4..], &[1, 2, 0xff, 0xfe]);
    }

    #[test]
    fn pgm_with_comment() {
        let mut b = b"P5 # made by hand\n1 1\n65535\n".to_vec();
        b.extend_from_slice(&[0, 9]);
        assert_eq!(decode_pgm16(&b, Path::new("x")).unwrap(), (1, 1, vec![9]));
        assert!(decode_pgm16(b"P5\n1 1\n255\n\0", Path::new("x")).is_err());
        assert!(decode_pgm16(b"P6\n1 1\n65535\n\0\0", Path::new("x")).is_err());
    }

    #[test]
    fn mask_round_trip() {
        let d = tmp();
        let p = d.path().join("m.pgm");
        let m = sample_mask();
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p, 2).unwrap(), m);
        assert!(read_mask(&d.path().join("missing.pgm"), 0).is_err());
    }

    #[test]
    fn calibration_round_trip() {
        let d = tmp();
        let p = d.path().join("calib.json");
        let rig = CalibrationRig::surround(RigidTransform::from_yaw(0.3, [0.1, 0.0, 1.8].into()), 6, 1.2, 800, 450, 0.8, 1.6)
            .unwrap();
        write_calibration(&p, &rig).unwrap();
        assert_eq!(read_calibration(&p).unwrap(), rig);
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"fx\"") && text.contains("\"extrinsic\""));
    }

    #[test]
    fn ground_truth_round_trip() {
        let d = tmp();
        let gt = GroundTruth {
            boxes: vec![Box3D::new([5.0, 1.0, 0.8], [4.6, 1.9, 1.7], 0.2, 1)],
            point_box: vec![-1, 0, 0, -1],
            visible: vec![true, true, false, false],
        };
        write_ground_truth(d.path(), &gt).unwrap();
        assert_eq!(read_ground_truth(d.path()).unwrap(), gt);
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let d = tmp();
        let p = d.path().join("nested").join("f.bin");
        write_atomic(&p, b"abc").unwrap();
        write_atomic(&p, b"de").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"de");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
