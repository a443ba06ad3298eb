//! Scale-aware detection head assignment.
//!
//! A feature pyramid is built from a BEV raster by repeated 2x average
//! pooling, and every category is routed to the pyramid level whose
//! receptive field is the smallest one covering twice the category's
//! characteristic length.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Box3D, LabelTable};

/// Row-major 2D feature raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster2D {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Raster2D {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid("raster data does not match its dimensions"));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    fn pool2(&self) -> Self {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let s = self.at(2 * x, 2 * y)
                    + self.at(2 * x + 1, 2 * y)
                    + self.at(2 * x, 2 * y + 1)
                    + self.at(2 * x + 1, 2 * y + 1);
                data.push(s / 4.0);
            }
        }
        Self { width: w, height: h, data }
    }
}

/// Level `k` is a 2x average pool of level `k - 1`.
pub fn build_pyramid(base: &Raster2D, levels: usize) -> Result<Vec<Raster2D>> {
    if levels == 0 {
        return Err(Error::invalid("pyramid needs at least one level"));
    }
    let factor = 1usize << (levels - 1);
    if !base.width.is_multiple_of(factor) || !base.height.is_multiple_of(factor) || base.width == 0 || base.height == 0 {
        return Err(Error::invalid(format!(
            "{}x{} raster is not divisible by {factor}",
            base.width, base.height
        )));
    }
    let mut out = Vec::with_capacity(levels);
    out.push(base.clone());
    for _ in 1..levels {
        let next = out.last().unwrap().pool2();
        out.push(next);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidLevel {
    pub index: usize,
    /// Base cells per level cell.
    pub stride: usize,
    pub width: usize,
    pub height: usize,
    /// Nominal receptive field in meters.
    pub receptive_field: f64,
}

/// Level descriptors for a pyramid over a `base_width x base_height` grid
/// of `cell_size` meter cells: stride `2^k`, receptive field
/// `stride x cell_size x growth`.
pub fn pyramid_levels(base_width: usize, base_height: usize, cell_size: f64, growth: f64, count: usize) -> Vec<PyramidLevel> {
    (0..count)
        .map(|k| {
            let stride = 1usize << k;
            PyramidLevel {
                index: k,
                stride,
                width: base_width / stride,
                height: base_height / stride,
                receptive_field: stride as f64 * cell_size * growth,
            }
        })
        .collect()
}

/// Label id to pyramid level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispatchTable {
    pub levels: BTreeMap<u32, usize>,
}

impl DispatchTable {
    pub fn level_of(&self, label: u32) -> Option<usize> {
        self.levels.get(&label).copied()
    }
}

/// Maps each label to the first level (in index order, receptive fields
/// ascending) whose receptive field is at least twice the label's length;
/// labels too large for every level go to the coarsest.
pub fn assign_category_scales(labels: &LabelTable, levels: &[PyramidLevel]) -> Result<DispatchTable> {
    if labels.is_empty() {
        return Err(Error::invalid("empty label table"));
    }
    if levels.is_empty() {
        return Err(Error::invalid("no pyramid levels"));
    }
    let map = labels
        .entries()
        .iter()
        .map(|e| {
            let need = 2.0 * e.length;
            let level = levels
                .iter()
                .position(|l| l.receptive_field >= need)
                .unwrap_or(levels.len() - 1);
            (e.id, level)
        })
        .collect();
    Ok(DispatchTable { levels: map })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub box_index: usize,
    pub label: u32,
    pub cell: [usize; 2],
}

/// Routes boxes to their label's level and cell. `origin` is the BEV
/// coordinate of the raster corner and `cell_size` the base cell size.
/// Boxes with unknown labels or centers outside the raster are dropped.
pub fn dispatch_targets(
    boxes: &[Box3D],
    table: &DispatchTable,
    levels: &[PyramidLevel],
    origin: [f64; 2],
    cell_size: f64,
) -> Vec<Vec<Target>> {
    let mut out = vec![Vec::new(); levels.len()];
    for (i, b) in boxes.iter().enumerate() {
        let Some(level) = table.level_of(b.label).filter(|&l| l < levels.len()) else {
            continue;
        };
        let lv = &levels[level];
        let size = cell_size * lv.stride as f64;
        let fx = ((b.center[0] - origin[0]) / size).floor();
        let fy = ((b.center[1] - origin[1]) / size).floor();
        if fx < 0.0 || fy < 0.0 || fx >= lv.width as f64 || fy >= lv.height as f64 {
            continue;
        }
        out[level].push(Target {
            box_index: i,
            label: b.label,
            cell: [fx as usize, fy as usize],
        });
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DispatchConfig {
    pub levels: usize,
    pub growth: f64,
}

impl Default for DispatchConfig {
    fn default() -> Self {
        Self { levels: 3, growth: 16.0 }
    }
}
