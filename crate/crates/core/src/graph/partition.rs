//! Balanced k-way edge-cut partitioning: greedy graph growing from
//! pseudo-peripheral seeds followed by one boundary refinement pass.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SparseGraph;
use crate::error::{Error, Result};
use crate::seed::{rng_for, stream};

pub const PARTITION_FORMAT_VERSION: u32 = 1;

/// Allowed deviation of each part size from `n / K`.
const BALANCE_TOLERANCE: f64 = 0.2;

fn size_bounds(n: usize, parts: usize) -> (usize, usize) {
    let ideal = n as f64 / parts as f64;
    let lo = (ideal * (1.0 - BALANCE_TOLERANCE)).ceil().max(1.0) as usize;
    let hi = (ideal * (1.0 + BALANCE_TOLERANCE)).floor() as usize;
    (lo, hi)
}

/// Number of edges whose endpoints lie in different parts.
pub fn edge_cut(g: &SparseGraph, assignment: &[usize]) -> usize {
    g.edges()
        .iter()
        .filter(|&&(u, v)| assignment[u] != assignment[v])
        .count()
}

/// Assigns every node to one of `parts` parts, each within ±20% of `n / parts`.
/// Deterministic in `(g, parts, seed)`.
pub fn partition_graph(g: &SparseGraph, parts: usize, seed: u64) -> Result<Vec<usize>> {
    let n = g.num_nodes();
    if parts < 2 {
        return Err(Error::Partition(format!("need at least 2 parts, got {parts}")));
    }
    if n < parts {
        return Err(Error::Partition(format!("cannot split {n} nodes into {parts} parts")));
    }
    let (lo, hi) = size_bounds(n, parts);
    let base = n / parts;
    let extra = n % parts;
    if base < lo || base + usize::from(extra > 0) > hi {
        return Err(Error::Partition(format!(
            "no assignment of {n} nodes into {parts} parts fits the size window [{lo}, {hi}]"
        )));
    }
    let targets: Vec<usize> = (0..parts).map(|p| base + usize::from(p < extra)).collect();

    let mut rng = rng_for(seed, &[stream::PARTITION]);
    let unassigned = usize::MAX;
    let mut assignment = vec![unassigned; n];

    for (part, &target) in targets.iter().enumerate() {
        if part == parts - 1 {
            for a in assignment.iter_mut().filter(|a| **a == unassigned) {
                *a = part;
            }
            break;
        }
        grow_part(g, &mut assignment, part, target, &mut rng);
    }

    refine(g, &mut assignment, parts, lo, hi);
    Ok(assignment)
}

/// BFS from `start` over unassigned nodes; returns the last node reached.
fn farthest_unassigned(g: &SparseGraph, assignment: &[usize], start: usize) -> usize {
    let mut dist = vec![usize::MAX; g.num_nodes()];
    let mut queue = VecDeque::from([start]);
    dist[start] = 0;
    let mut last = start;
    while let Some(u) = queue.pop_front() {
        last = u;
        for &v in g.neighbors(u) {
            if assignment[v] == usize::MAX && dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    last
}

fn pseudo_peripheral(g: &SparseGraph, assignment: &[usize], rng: &mut impl Rng) -> usize {
    let free: Vec<usize> = (0..g.num_nodes())
        .filter(|&u| assignment[u] == usize::MAX)
        .collect();
    let start = free[rng.random_range(0..free.len())];
    let a = farthest_unassigned(g, assignment, start);
    farthest_unassigned(g, assignment, a)
}

/// Greedy graph growing: repeatedly absorb the frontier node with the most
/// edges into the part (ties to the earliest discovered), jumping to a new
/// pseudo-peripheral seed when the current component is exhausted.
fn grow_part(
    g: &SparseGraph,
    assignment: &mut [usize],
    part: usize,
    target: usize,
    rng: &mut impl Rng,
) {
    let n = g.num_nodes();
    let free = usize::MAX;
    let mut gain = vec![0usize; n];
    let mut discovered = vec![usize::MAX; n];
    let mut frontier: Vec<usize> = Vec::new();
    let mut clock = 0usize;
    let mut size = 0usize;

    while size < target {
        let next = frontier
            .iter()
            .enumerate()
            .max_by(|(_, &a), (_, &b)| gain[a].cmp(&gain[b]).then(discovered[b].cmp(&discovered[a])))
            .map(|(i, &u)| (i, u));
        let u = match next {
            Some((i, u)) => {
                frontier.swap_remove(i);
                u
            }
            None => pseudo_peripheral(g, assignment, rng),
        };
        assignment[u] = part;
        size += 1;
        for &v in g.neighbors(u) {
            if assignment[v] != free {
                continue;
            }
            if discovered[v] == usize::MAX {
                discovered[v] = clock;
                clock += 1;
                frontier.push(v);
            }
            gain[v] += 1;
        }
    }
}

/// One pass over boundary nodes moving each to the neighbouring part that
/// most reduces the cut, subject to the size window.
fn refine(g: &SparseGraph, assignment: &mut [usize], parts: usize, lo: usize, hi: usize) {
    let mut sizes = vec![0usize; parts];
    for &p in assignment.iter() {
        sizes[p] += 1;
    }
    let mut links = vec![0usize; parts];
    for u in 0..g.num_nodes() {
        let home = assignment[u];
        links.iter_mut().for_each(|l| *l = 0);
        for &v in g.neighbors(u) {
            links[assignment[v]] += 1;
        }
        let mut best = home;
        for p in 0..parts {
            if p != home && links[p] > links[best] && sizes[p] < hi && sizes[home] > lo {
                best = p;
            }
        }
        if best != home {
            assignment[u] = best;
            sizes[home] -= 1;
            sizes[best] += 1;
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PartitionFile {
    format_version: u32,
    assignment: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PartitionInput {
    Versioned(PartitionFile),
    Bare(Vec<usize>),
}

/// Reads a precomputed assignment: either `{"format_version": 1, "assignment": [...]}`
/// or a bare JSON array. Entries must lie in `[0, parts)` and cover `n` nodes.
pub fn load_partition(path: impl AsRef<Path>, n: usize, parts: usize) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let parsed: PartitionInput = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let assignment = match parsed {
        PartitionInput::Versioned(f) if f.format_version != PARTITION_FORMAT_VERSION => {
            return Err(Error::Validation(format!(
                "unsupported partition format_version {}",
                f.format_version
            )))
        }
        PartitionInput::Versioned(f) => f.assignment,
        PartitionInput::Bare(a) => a,
    };
    if assignment.len() != n {
        return Err(Error::Validation(format!(
            "partition has {} entries, dataset has {n} nodes",
            assignment.len()
        )));
    }
    if let Some(bad) = assignment.iter().find(|&&p| p >= parts) {
        return Err(Error::Validation(format!("partition entry {bad} outside [0, {parts})")));
    }
    Ok(assignment)
}

pub fn save_partition(assignment: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let file = PartitionFile {
        format_version: PARTITION_FORMAT_VERSION,
        assignment: assignment.to_vec(),
    };
    fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}
