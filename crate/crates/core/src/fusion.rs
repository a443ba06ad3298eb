//! Pillar/voxel grids and cascaded channel attention over painted points.
//!
//! Every point carries three channel blocks: the raw return `(x, y, z, r)`,
//! a one-hot semantic label, and the offset to its instance center. An
//! attention stage runs a two-layer MLP over the concatenated blocks,
//! squashes one logit per block through a logistic and outputs the
//! mask-weighted sum of the (zero-padded) blocks. Stages cascade: stage `k`
//! sees stage `k - 1`'s output as an extra block. The final feature is the
//! last stage output concatenated with the raw point.
//!
//! Weights are seeded fixtures; the analytic backward pass exists so the
//! forward map can be checked against finite differences.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::AugmentedPoint;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub voxel: [f64; 3],
}

impl GridConfig {
    pub fn new(min: [f64; 3], max: [f64; 3], voxel: [f64; 3]) -> Result<Self> {
        let g = Self { min, max, voxel };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.max[a] > self.min[a]) || !(self.voxel[a] > 0.0) {
                return Err(Error::invalid(format!("grid axis {a} is degenerate")));
            }
        }
        Ok(())
    }

    /// PointPillars setting: 0.2 m pillars over +-51.2 m, z in [-5, 3].
    pub fn point_pillars() -> Self {
        Self {
            min: [-51.2, -51.2, -5.0],
            max: [51.2, 51.2, 3.0],
            voxel: [0.2, 0.2, 8.0],
        }
    }

    /// VoxelNet setting: 0.075 m voxels over +-54 m, z in [-5, 3].
    pub fn voxel_net() -> Self {
        Self {
            min: [-54.0, -54.0, -5.0],
            max: [54.0, 54.0, 3.0],
            voxel: [0.075, 0.075, 0.075],
        }
    }

    /// `ceil((max - min) / size)` per axis, tolerant to float noise in the
    /// quotient.
    pub fn dims(&self) -> [usize; 3] {
        let mut d = [0; 3];
        for a in 0..3 {
            let q = (self.max[a] - self.min[a]) / self.voxel[a];
            let r = q.round();
            d[a] = if (q - r).abs() < 1e-9 * q.max(1.0) { r as usize } else { q.ceil() as usize };
        }
        d
    }

    pub fn cell_of(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let dims = self.dims();
        let mut cell = [0; 3];
        for a in 0..3 {
            if !(p[a] >= self.min[a] && p[a] < self.max[a]) {
                return None;
            }
            let i = ((p[a] - self.min[a]) / self.voxel[a]).floor() as usize;
            if i >= dims[a] {
                return None;
            }
            cell[a] = i;
        }
        Some(cell)
    }
}

/// Groups in-range points by grid cell; out-of-range points are dropped.
pub fn pillarize(points: &[AugmentedPoint], grid: &GridConfig) -> BTreeMap<[usize; 3], Vec<usize>> {
    let mut cells: BTreeMap<[usize; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        if let Some(c) = grid.cell_of([p.x, p.y, p.z]) {
            cells.entry(c).or_default().push(i);
        }
    }
    cells
}

/// Per-point values of one channel block, row-major `n x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub width: usize,
    pub data: Vec<f64>,
}

impl Block {
    pub fn new(width: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || !data.len().is_multiple_of(width) {
            return Err(Error::invalid(format!(
                "block of width {width} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { width, data })
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.width
    }

    fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.width..(p + 1) * self.width]
    }
}

/// The channel blocks of a point set, all with the same row count.
#[derive(Clone, Debug, PartialEq)]
pub struct Channels {
    pub points: usize,
    pub blocks: Vec<Block>,
}

impl Channels {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        let points = blocks.first().map_or(0, Block::rows);
        if let Some(b) = blocks.iter().find(|b| b.rows() != points) {
            return Err(Error::invalid(format!(
                "channel blocks disagree on point count ({} vs {points})",
                b.rows()
            )));
        }
        Ok(Self { points, blocks })
    }

    /// Raw `(x, y, z, r)`, one-hot label over `label_count` classes (all
    /// zero when unpainted) and center offset `c - p` (zero when unpainted).
    pub fn from_augmented(points: &[AugmentedPoint], label_count: usize) -> Self {
        let mut raw = Vec::with_capacity(points.len() * 4);
        let mut sem = vec![0.0; points.len() * label_count];
        let mut off = Vec::with_capacity(points.len() * 3);
        for (i, p) in points.iter().enumerate() {
            raw.extend_from_slice(&[p.x, p.y, p.z, p.r]);
            if p.s >= 1 && (p.s as usize) <= label_count {
                sem[i * label_count + p.s as usize - 1] = 1.0;
            }
            if p.is_painted() {
                off.extend_from_slice(&[p.cx - p.x, p.cy - p.y, p.cz - p.z]);
            } else {
                off.extend_from_slice(&[0.0; 3]);
            }
        }
        let blocks = vec![
            Block { width: 4, data: raw },
            Block { width: label_count.max(1), data: if label_count == 0 { vec![0.0; points.len()] } else { sem } },
            Block { width: 3, data: off },
        ];
        Self {
            points: points.len(),
            blocks,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.width).sum()
    }

    pub fn common_width(&self) -> usize {
        self.blocks.iter().map(|b| b.width).max().unwrap_or(0)
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `input -> hidden (ReLU) -> one logit per block`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStage {
    pub input_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    /// `hidden x input_dim`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `blocks x hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl AttentionStage {
    pub fn zeros(input_dim: usize, hidden: usize, blocks: usize) -> Self {
        Self {
            input_dim,
            hidden,
            blocks,
            w1: vec![0.0; hidden * input_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; blocks * hidden],
            b2: vec![0.0; blocks],
        }
    }

    /// Weights and biases drawn uniformly from `(-0.1, 0.1)`.
    pub fn seeded(input_dim: usize, hidden: usize, blocks: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Self::zeros(input_dim, hidden, blocks);
        for v in s.w1.iter_mut().chain(&mut s.b1).chain(&mut s.w2).chain(&mut s.b2) {
            *v = rng.random_range(-0.1..0.1);
        }
        s
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn params(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                p.len()
            )));
        }
        let (a, rest) = p.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.b1.len());
        let (c, d) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2.copy_from_slice(d);
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.w1.len() != self.hidden * self.input_dim
            || self.b1.len() != self.hidden
            || self.w2.len() != self.blocks * self.hidden
            || self.b2.len() != self.blocks
        {
            return Err(Error::invalid("attention stage weight shapes are inconsistent"));
        }
        if !self.params().iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("attention stage has non-finite weights"));
        }
        Ok(())
    }
}

/// Output of one attention stage.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub width: usize,
    /// `n x width` weighted block sums.
    pub features: Vec<f64>,
    /// `n x blocks` mask values in `(0, 1)`.
    pub mask: Vec<f64>,
}

struct StageCache {
    x: Vec<f64>,
    a: Vec<f64>,
    h: Vec<f64>,
    m: Vec<f64>,
}

fn stage_point(stage: &AttentionStage, blocks: &[&Block], width: usize, p: usize, out: &mut [f64]) -> StageCache {
    let x: Vec<f64> = blocks.iter().flat_map(|b| b.row(p).iter().copied()).collect();
    let a: Vec<f64> = (0..stage.hidden)
        .map(|k| {
            let row = &stage.w1[k * stage.input_dim..(k + 1) * stage.input_dim];
            row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + stage.b1[k]
        })
        .collect();
    let h: Vec<f64> = a.iter().map(|v| v.max(0.0)).collect();
    let m: Vec<f64> = (0..stage.blocks)
        .map(|i| {
            let row = &stage.w2[i * stage.hidden..(i + 1) * stage.hidden];
            sigmoid(row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>() + stage.b2[i])
        })
        .collect();
    out[..width].fill(0.0);
    for (i, b) in blocks.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(b.row(p)) {
            *o += m[i] * v;
        }
    }
    StageCache { x, a, h, m }
}

fn check_stage(stage: &AttentionStage, blocks: &[&Block]) -> Result<(usize, usize)> {
    stage.validate()?;
    let n = blocks.first().map_or(0, |b| b.rows());
    if blocks.iter().any(|b| b.rows() != n) {
        return Err(Error::invalid("channel blocks disagree on point count"));
    }
    let dim: usize = blocks.iter().map(|b| b.width).sum();
    if dim != stage.input_dim || blocks.len() != stage.blocks {
        return Err(Error::invalid(format!(
            "stage expects {} blocks / {} inputs, got {} / {dim}",
            stage.blocks,
            stage.input_dim,
            blocks.len()
        )));
    }
    Ok((n, blocks.iter().map(|b| b.width).max().unwrap_or(0)))
}

fn forward_blocks(blocks: &[&Block], stage: &AttentionStage) -> Result<(AttentionOutput, Vec<StageCache>)> {
    let (n, width) = check_stage(stage, blocks)?;
    let mut features = vec![0.0; n * width];
    let mut mask = Vec::with_capacity(n * stage.blocks);
    let mut caches = Vec::with_capacity(n);
    for p in 0..n {
        let c = stage_point(stage, blocks, width, p, &mut features[p * width..(p + 1) * width]);
        mask.extend_from_slice(&c.m);
        caches.push(c);
    }
    Ok((AttentionOutput { width, features, mask }, caches))
}

/// One attention stage over the given blocks.
pub fn attention_forward(channels: &Channels, stage: &AttentionStage) -> Result<AttentionOutput> {
    let blocks: Vec<&Block> = channels.blocks.iter().collect();
    forward_blocks(&blocks, stage).map(|(o, _)| o)
}

/// Per-point fused features: last stage output followed by `(x, y, z, r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FusedFeatures {
    pub fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }
}

/// Stage shapes for a cascade over `channels`: stage 0 sees the base
/// blocks, every later stage one extra block (the previous output).
pub fn seeded_cascade(channels: &Channels, depth: usize, hidden: usize, seed: u64) -> Vec<AttentionStage> {
    let width = channels.common_width();
    (0..depth)
        .map(|k| {
            let extra = if k == 0 { 0 } else { 1 };
            AttentionStage::seeded(
                channels.input_dim() + extra * width,
                hidden,
                channels.blocks.len() + extra,
                seed.wrapping_add(k as u64),
            )
        })
        .collect()
}

fn raw_block(channels: &Channels) -> Result<&Block> {
    match channels.blocks.first() {
        Some(b) if b.width == 4 => Ok(b),
        _ => Err(Error::invalid("first channel block must be the raw (x, y, z, r) block")),
    }
}

struct CascadeTrace {
    outputs: Vec<Block>,
    caches: Vec<Vec<StageCache>>,
}

fn run_cascade(channels: &Channels, stages: &[AttentionStage]) -> Result<CascadeTrace> {
    if stages.is_empty() {
        return Err(Error::invalid("cascade needs at least one stage"));
    }
    let mut outputs: Vec<Block> = Vec::with_capacity(stages.len());
    let mut caches = Vec::with_capacity(stages.len());
    for (k, stage) in stages.iter().enumerate() {
        let mut blocks: Vec<&Block> = channels.blocks.iter().collect();
        if k > 0 {
            blocks.push(&outputs[k - 1]);
        }
        let (out, cache) = forward_blocks(&blocks, stage)?;
        caches.push(cache);
        outputs.push(Block {
            width: out.width,
            data: out.features,
        });
    }
    Ok(CascadeTrace { outputs, caches })
}

/// Runs the cascade and appends the raw point (skip connection).
pub fn cascaded_fuse(channels: &Channels, stages: &[AttentionStage]) -> Result<FusedFeatures> {
    let raw = raw_block(channels)?;
    let trace = run_cascade(channels, stages)?;
    let last = trace.outputs.last().expect("non-empty cascade");
    let dim = last.width + 4;
    let mut data = Vec::with_capacity(channels.points * dim);
    for p in 0..channels.points {
        data.extend_from_slice(last.row(p));
        data.extend_from_slice(raw.row(p));
    }
    Ok(FusedFeatures { dim, data })
}

/// Analytic gradient of a scalar loss with respect to every stage's
/// parameters (in [`AttentionStage::params`] order), given `dL/dF` for the
/// fused features `F`.
pub fn cascade_backward(channels: &Channels, stages: &[AttentionStage], grad_fused: &[f64]) -> Result<Vec<Vec<f64>>> {
    raw_block(channels)?;
    let trace = run_cascade(channels, stages)?;
    let width = trace.outputs.last().unwrap().width;
    let dim = width + 4;
    if grad_fused.len() != channels.points * dim {
        return Err(Error::invalid("gradient does not match fused feature shape"));
    }
    let n = channels.points;
    // dL/d(out_k), row-major n x width
    let mut g_out: Vec<f64> = (0..n)
        .flat_map(|p| grad_fused[p * dim..p * dim + width].iter().copied())
        .collect();
    let mut grads: Vec<Vec<f64>> = stages.iter().map(|s| vec![0.0; s.param_count()]).collect();

    for k in (0..stages.len()).rev() {
        let stage = &stages[k];
        let mut blocks: Vec<&Block> = channels.blocks.iter().collect();
        if k > 0 {
            blocks.push(&trace.outputs[k - 1]);
        }
        let (w1n, b1n, w2n) = (stage.w1.len(), stage.b1.len(), stage.w2.len());
        let mut g_prev = vec![0.0; if k > 0 { n * trace.outputs[k - 1].width } else { 0 }];
        let g = &mut grads[k];
        for p in 0..n {
            let cache = &trace.caches[k][p];
            let go = &g_out[p * width..(p + 1) * width];
            let mut gz = vec![0.0; stage.blocks];
            for (i, b) in blocks.iter().enumerate() {
                let gm: f64 = b.row(p).iter().zip(go).map(|(v, g)| v * g).sum();
                let m = cache.m[i];
                gz[i] = gm * m * (1.0 - m);
            }
            // output layer
            for i in 0..stage.blocks {
                for j in 0..stage.hidden {
                    g[w1n + b1n + i * stage.hidden + j] += gz[i] * cache.h[j];
                }
                g[w1n + b1n + w2n + i] += gz[i];
            }
            // hidden layer
            let mut gx = vec![0.0; stage.input_dim];
            for j in 0..stage.hidden {
                if cache.a[j] <= 0.0 {
                    continue;
                }
                let ga: f64 = (0..stage.blocks).map(|i| stage.w2[i * stage.hidden + j] * gz[i]).sum();
                let row = &stage.w1[j * stage.input_dim..(j + 1) * stage.input_dim];
                for (c, &xv) in cache.x.iter().enumerate() {
                    g[j * stage.input_dim + c] += ga * xv;
                    gx[c] += ga * row[c];
                }
                g[w1n + j] += ga;
            }
            if k > 0 {
                // previous output feeds both the mask MLP (last input slice)
                // and the weighted sum (last block)
                let pw = trace.outputs[k - 1].width;
                let m_last = cache.m[stage.blocks - 1];
                let x_off = stage.input_dim - pw;
                for c in 0..pw {
                    g_prev[p * pw + c] = gx[x_off + c] + m_last * go[c];
                }
            }
        }
        if k > 0 {
            g_out = g_prev;
        }
    }
    Ok(grads)
}

/// Central-difference gradient of `f` at `params` with step `h`.
pub fn numerical_gradient<F>(f: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut x = params.to_vec();
    let mut g = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub depth: usize,
    pub hidden: usize,
    pub seed: u64,
    pub grid: GridConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            hidden: 16,
            seed: 0,
            grid: GridConfig::point_pillars(),
        }
    }
}
