//! Shared helpers and reference implementations for integration tests.
#![allow(dead_code)]

use instpaint::projection::Vec3;
use instpaint::synth::{RigSpec, SceneSpec};

/// O(n^2) DBSCAN written straight from the definition: core points have at
/// least `min_pts` neighbours within `eps` (self included), clusters are
/// connected components of the core graph, and a border point joins the
/// reachable cluster whose lowest core index is smallest.
pub fn brute_dbscan(points: &[Vec3], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let near = |i: usize, j: usize| (points[i] - points[j]).norm_squared() <= eps * eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts).collect();

    let mut comp = vec![usize::MAX; n];
    let mut count = 0;
    for s in 0..n {
        if !core[s] || comp[s] != usize::MAX {
            continue;
        }
        let mut stack = vec![s];
        comp[s] = count;
        while let Some(p) = stack.pop() {
            for q in 0..n {
                if core[q] && comp[q] == usize::MAX && near(p, q) {
                    comp[q] = count;
                    stack.push(q);
                }
            }
        }
        count += 1;
    }
    (0..n)
        .map(|i| {
            if core[i] {
                Some(comp[i])
            } else {
                (0..n).filter(|&j| core[j] && near(i, j)).map(|j| comp[j]).min()
            }
        })
        .collect()
}

/// Relabels clusters in order of first appearance.
pub fn canonical(assignment: &[Option<usize>]) -> Vec<Option<usize>> {
    let mut map = std::collections::HashMap::new();
    assignment
        .iter()
        .map(|a| {
            a.map(|c| {
                let next = map.len();
                *map.entry(c).or_insert(next)
            })
        })
        .collect()
}

/// Smaller images and a sparser scan, for tests that build many scenes.
pub fn light_spec(boxes: usize) -> SceneSpec {
    SceneSpec {
        box_count: boxes,
        density: 0.4,
        rig: RigSpec {
            width: 400,
            height: 225,
            ..RigSpec::default()
        },
        ..SceneSpec::default()
    }
}
