//! Salient-cluster refinement of instance priors.
//!
//! A prior collected through a 2D mask is the union of everything inside
//! the mask's viewing frustum, so it often carries background returns from
//! far behind the object. Each prior is clustered with DBSCAN; the cluster
//! with the best size/proximity trade-off is kept, the rest of the members
//! are evicted back to unpainted, and the kept cluster's medoid becomes the
//! instance center.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::painter::Instance3DPrior;
use crate::projection::Vec3;
use crate::scene::{LabelTable, LidarPoint};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterParams {
    /// Neighbourhood radius in meters (inclusive).
    pub eps: f64,
    /// Neighbourhood size, counting the point itself, that makes a core point.
    pub min_pts: usize,
}

impl ClusterParams {
    pub fn new(eps: f64, min_pts: usize) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) || min_pts == 0 {
            return Err(Error::invalid(format!("bad cluster params eps={eps} min_pts={min_pts}")));
        }
        Ok(Self { eps, min_pts })
    }
}

/// Cluster assignment per input point; `None` is noise. Clusters are
/// numbered `0..count` in order of their smallest member index.
#[derive(Clone, Debug, PartialEq)]
pub struct DbscanResult {
    pub assignment: Vec<Option<usize>>,
    pub cluster_count: usize,
}

impl DbscanResult {
    pub fn is_noise(&self, i: usize) -> bool {
        self.assignment[i].is_none()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == Some(cluster))
            .collect()
    }
}

/// DBSCAN over a uniform hash grid with cell size `eps`.
///
/// Points are visited in index order and each unclaimed core point seeds a
/// breadth-first expansion, so a border point reachable from several
/// clusters joins the one whose lowest-index core point comes first.
pub fn dbscan(points: &[Vec3], params: &ClusterParams) -> DbscanResult {
    let n = points.len();
    let grid = NeighborGrid::new(points, params.eps);
    let is_core: Vec<bool> = (0..n).map(|i| grid.count_within(i, params.min_pts) >= params.min_pts).collect();

    let mut raw: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    let mut queue = std::collections::VecDeque::new();
    let mut scratch = Vec::new();
    for seed in 0..n {
        if raw[seed].is_some() || !is_core[seed] {
            continue;
        }
        let c = next;
        next += 1;
        raw[seed] = Some(c);
        queue.push_back(seed);
        while let Some(p) = queue.pop_front() {
            grid.neighbors(p, &mut scratch);
            for &q in &scratch {
                if raw[q].is_none() {
                    raw[q] = Some(c);
                    if is_core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
    }

    // renumber by smallest member index
    let mut remap = vec![usize::MAX; next];
    let mut count = 0;
    for c in raw.iter().flatten() {
        if remap[*c] == usize::MAX {
            remap[*c] = count;
            count += 1;
        }
    }
    DbscanResult {
        assignment: raw.into_iter().map(|c| c.map(|c| remap[c])).collect(),
        cluster_count: count,
    }
}

/// Hashed cubic cells of side `eps`; a neighbourhood query scans the
/// 27 cells around the query point.
struct NeighborGrid<'a> {
    points: &'a [Vec3],
    eps2: f64,
    inv: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> NeighborGrid<'a> {
    fn new(points: &'a [Vec3], eps: f64) -> Self {
        let inv = 1.0 / eps;
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, inv)).or_default().push(i);
        }
        Self {
            points,
            eps2: eps * eps,
            inv,
            cells,
        }
    }

    fn key(p: &Vec3, inv: f64) -> [i64; 3] {
        [(p.x * inv).floor() as i64, (p.y * inv).floor() as i64, (p.z * inv).floor() as i64]
    }

    fn visit(&self, i: usize, mut f: impl FnMut(usize) -> bool) {
        let p = &self.points[i];
        let k = Self::key(p, self.inv);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(cell) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) else {
                        continue;
                    };
                    for &j in cell {
                        if (p - self.points[j]).norm_squared() <= self.eps2 && !f(j) {
                            return;
                        }
                    }
                }
            }
        }
    }

    /// Neighbour count including the point itself, stopping at `cap`.
    fn count_within(&self, i: usize, cap: usize) -> usize {
        let mut count = 0;
        self.visit(i, |_| {
            count += 1;
            count < cap
        });
        count
    }

    fn neighbors(&self, i: usize, out: &mut Vec<usize>) {
        out.clear();
        self.visit(i, |j| {
            out.push(j);
            true
        });
    }
}

/// Index of the point minimizing the summed Euclidean distance to all
/// others; ties go to the smaller index.
pub fn medoid(points: &[Vec3]) -> Result<usize> {
    if points.is_empty() {
        return Err(Error::invalid("medoid of an empty set"));
    }
    let n = points.len();
    let mut sums = vec![0.0f64; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = (points[i] - points[j]).norm();
            sums[i] += d;
            sums[j] += d;
        }
    }
    let mut best = 0;
    for i in 1..n {
        if sums[i] < sums[best] {
            best = i;
        }
    }
    Ok(best)
}

/// A DBSCAN cluster inside one prior.
#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    /// Indices into the keyframe cloud.
    pub members: Vec<usize>,
    /// Cloud index of the cluster medoid.
    pub medoid: usize,
    pub count: usize,
    /// Distance of the medoid from the ego origin.
    pub ego_distance: f64,
}

impl Cluster {
    pub fn salience(&self) -> f64 {
        self.count as f64 / (1.0 + self.ego_distance)
    }
}

/// Picks the cluster maximizing `count / (1 + ego_distance)`; ties prefer
/// the nearer cluster, then the smaller medoid index.
pub fn select_salient(clusters: &[Cluster]) -> Result<&Cluster> {
    clusters
        .iter()
        .reduce(|best, c| {
            let (sb, sc) = (best.salience(), c.salience());
            let better = sc > sb
                || (sc == sb
                    && (c.ego_distance < best.ego_distance
                        || (c.ego_distance == best.ego_distance && c.medoid < best.medoid)));
            if better {
                c
            } else {
                best
            }
        })
        .ok_or_else(|| Error::invalid("no clusters to select from"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    pub enabled: bool,
    pub min_pts: usize,
    /// eps = `eps_scale` x characteristic label length, clamped.
    pub eps_scale: f64,
    pub eps_min: f64,
    pub eps_max: f64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            min_pts: 4,
            eps_scale: 0.25,
            eps_min: 0.3,
            eps_max: 1.5,
        }
    }
}

impl RefinerConfig {
    pub fn params_for(&self, labels: &LabelTable, label: u32) -> Result<ClusterParams> {
        let length = labels
            .get(label)
            .ok_or_else(|| Error::invalid(format!("unknown label {label}")))?
            .length;
        ClusterParams::new((self.eps_scale * length).clamp(self.eps_min, self.eps_max), self.min_pts)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinedInstance {
    pub prior: Instance3DPrior,
    /// Former members dropped back to unpainted.
    pub evicted: Vec<usize>,
}

/// Keeps the salient cluster of one prior and recenters it on its medoid.
/// When every member is noise the prior survives whole, flagged
/// low-confidence, centered on the medoid of all members.
pub fn refine_instance(prior: &Instance3DPrior, points: &[LidarPoint], params: &ClusterParams) -> Result<RefinedInstance> {
    if prior.members.is_empty() {
        return Err(Error::invalid(format!("prior {} has no members", prior.id)));
    }
    let positions: Vec<Vec3> = prior.members.iter().map(|&i| points[i].position()).collect();
    let result = dbscan(&positions, params);

    if result.cluster_count == 0 {
        let m = medoid(&positions)?;
        return Ok(RefinedInstance {
            prior: Instance3DPrior {
                center: positions[m].into(),
                low_confidence: true,
                ..prior.clone()
            },
            evicted: Vec::new(),
        });
    }

    let clusters = (0..result.cluster_count)
        .map(|c| {
            let local = result.members(c);
            let pts: Vec<Vec3> = local.iter().map(|&i| positions[i]).collect();
            let m = local[medoid(&pts)?];
            Ok(Cluster {
                members: local.iter().map(|&i| prior.members[i]).collect(),
                medoid: prior.members[m],
                count: local.len(),
                ego_distance: positions[m].norm(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let salient = select_salient(&clusters)?;
    let keep = &salient.members;
    let evicted = prior
        .members
        .iter()
        .copied()
        .filter(|i| keep.binary_search(i).is_err())
        .collect();
    Ok(RefinedInstance {
        prior: Instance3DPrior {
            members: keep.clone(),
            center: points[salient.medoid].position().into(),
            low_confidence: false,
            ..prior.clone()
        },
        evicted,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineOutput {
    pub priors: Vec<Instance3DPrior>,
    pub labels: Vec<u32>,
    pub centers: Vec<Vec3>,
    pub instance_ids: Vec<u32>,
    pub evicted: usize,
}

/// Refines every prior and lays the result out per point. With the
/// refiner disabled the priors pass through with their painter centers.
pub fn refine_scene(
    priors: &[Instance3DPrior],
    points: &[LidarPoint],
    labels: &LabelTable,
    config: &RefinerConfig,
) -> Result<RefineOutput> {
    let mut out = RefineOutput {
        priors: Vec::with_capacity(priors.len()),
        labels: vec![0; points.len()],
        centers: vec![Vec3::zeros(); points.len()],
        instance_ids: vec![0; points.len()],
        evicted: 0,
    };
    for prior in priors {
        if let Some(&bad) = prior.members.iter().find(|&&i| i >= points.len()) {
            return Err(Error::invalid(format!("prior {} member {bad} out of range", prior.id)));
        }
        let refined = if config.enabled {
            let params = config.params_for(labels, prior.label)?;
            refine_instance(prior, points, &params)?
        } else {
            RefinedInstance {
                prior: prior.clone(),
                evicted: Vec::new(),
            }
        };
        out.evicted += refined.evicted.len();
        let center = refined.prior.center_vec();
        for &i in &refined.prior.members {
            out.labels[i] = refined.prior.label;
            out.centers[i] = center;
            out.instance_ids[i] = refined.prior.id;
        }
        out.priors.push(refined.prior);
    }
    Ok(out)
}
