//! K-means and Ward hierarchical clustering, silhouette and Davies–Bouldin
//! validation, and model selection over algorithms and cluster counts.
//!
//! Cluster labels are 0-based throughout.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::FeatureMatrix;
use crate::rng::stream_rng;

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_RESTARTS: usize = 10;
const MAX_LLOYD_ITERATIONS: usize = 300;
const DISPLACEMENT_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("cluster count {k} outside [2, {n}]")]
    BadK { k: usize, n: usize },
    #[error("at least one restart is required")]
    NoRestarts,
    #[error("cannot form {k} nonempty clusters: only {distinct} distinct rows")]
    Degenerate { k: usize, distinct: usize },
    #[error("a score needs at least two clusters")]
    SingleCluster,
    #[error("clusters {0} and {1} have coincident centroids")]
    CoincidentCentroids(usize, usize),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Kmeans,
    HierarchicalWard,
}

impl std::str::FromStr for Algorithm {
    type Err = ClusterError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kmeans" => Ok(Algorithm::Kmeans),
            "hierarchical-ward" | "hierarchical" | "ward" => Ok(Algorithm::HierarchicalWard),
            other => Err(ClusterError::Invalid(format!("unknown algorithm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub algorithm: Algorithm,
    pub k: usize,
    pub sc: Option<f64>,
    pub dbi: Option<f64>,
    pub objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub algorithm: Algorithm,
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum over points of the Euclidean distance to their centroid.
    pub objective: f64,
    /// Sum of squared distances to centroids.
    pub sse: f64,
    pub sc: f64,
    pub dbi: f64,
    pub seed: Option<u64>,
    /// Sum of squared distances after each Lloyd iteration of the winning restart.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sse_trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub score_table: Vec<ScoreRow>,
    pub format_version: u32,
}

impl ClusterModel {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == cluster).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

fn check_k(n: usize, k: usize) -> Result<(), ClusterError> {
    if k < 2 || k > n {
        return Err(ClusterError::BadK { k, n });
    }
    Ok(())
}

fn distinct_rows(data: &[Vec<f64>]) -> usize {
    let mut rows: Vec<&Vec<f64>> = data.iter().collect();
    rows.sort_by(|a, b| a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    rows.dedup();
    rows.len()
}

/// Cluster means; empty clusters get an empty vector.
pub fn centroids_of(data: &[Vec<f64>], assignments: &[usize], k: usize) -> Vec<Vec<f64>> {
    let r = data.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; r]; k];
    let mut counts = vec![0usize; k];
    for (x, &a) in data.iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(x) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| if c == 0 { Vec::new() } else { s.into_iter().map(|v| v / c as f64).collect() })
        .collect()
}

/// Relabel so that clusters are numbered in order of first appearance.
fn canonical(assignments: &[usize], k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    for &a in assignments {
        if map[a] == usize::MAX {
            map[a] = next;
            next += 1;
        }
    }
    (assignments.iter().map(|&a| map[a]).collect(), map)
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        // strict comparison keeps the lowest index on ties
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

struct LloydRun {
    assignments: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    sse: f64,
    trace: Vec<f64>,
}

fn kmeans_pp(data: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut centers = vec![data[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(data[pick].clone());
        for (i, x) in data.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, &centers[centers.len() - 1]));
        }
    }
    centers
}

/// Give every empty cluster the point farthest from its own centroid.
fn repair_empty(
    data: &[Vec<f64>],
    assignments: &mut [usize],
    centroids: &mut [Vec<f64>],
) -> Result<(), ClusterError> {
    let k = centroids.len();
    let n = data.len();
    for _attempt in 0..=n {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = (0..k).find(|&j| counts[j] == 0) else { return Ok(()) };
        let candidate = (0..n)
            .filter(|&i| counts[assignments[i]] > 1)
            .map(|i| (i, sq_dist(&data[i], &centroids[assignments[i]])))
            .filter(|(_, d)| *d > 0.0)
            .fold(None::<(usize, f64)>, |b, c| match b {
                Some(b) if b.1 >= c.1 => Some(b),
                _ => Some(c),
            });
        let Some((i, _)) = candidate else { break };
        centroids[empty] = data[i].clone();
        assignments[i] = empty;
    }
    Err(ClusterError::Degenerate { k, distinct: distinct_rows(data) })
}

fn sse_of(data: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    data.iter().zip(assignments).map(|(x, &a)| sq_dist(x, &centroids[a])).sum()
}

fn lloyd(data: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Result<LloydRun, ClusterError> {
    let mut centroids = kmeans_pp(data, k, rng);
    let mut assignments = vec![0; data.len()];
    let mut trace: Vec<f64> = Vec::new();
    for _ in 0..MAX_LLOYD_ITERATIONS {
        for (i, x) in data.iter().enumerate() {
            assignments[i] = nearest(x, &centroids).0;
        }
        repair_empty(data, &mut assignments, &mut centroids)?;
        let updated = centroids_of(data, &assignments, k);
        let shift = centroids.iter().zip(&updated).map(|(a, b)| dist(a, b)).fold(0.0, f64::max);
        centroids = updated;
        let sse = sse_of(data, &assignments, &centroids);
        if let Some(&prev) = trace.last() {
            assert!(
                sse <= prev + 1e-9 * prev.max(1e-300),
                "Lloyd objective increased from {prev} to {sse}"
            );
        }
        trace.push(sse);
        if shift < DISPLACEMENT_TOL {
            break;
        }
    }
    Ok(LloydRun { sse: *trace.last().unwrap(), assignments, centroids, trace })
}

/// Best of `restarts` k-means++ seeded Lloyd runs; deterministic given `seed`.
pub fn kmeans(fm: &FeatureMatrix, k: usize, seed: u64, restarts: usize) -> Result<ClusterModel, ClusterError> {
    kmeans_rows(&fm.values, k, seed, restarts)
}

pub fn kmeans_rows(data: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<ClusterModel, ClusterError> {
    check_k(data.len(), k)?;
    if restarts == 0 {
        return Err(ClusterError::NoRestarts);
    }
    let runs: Vec<Result<LloydRun, ClusterError>> = (0..restarts)
        .into_par_iter()
        .map(|r| lloyd(data, k, &mut stream_rng(seed, r as u64)))
        .collect();
    let mut best: Option<LloydRun> = None;
    for run in runs {
        let run = run?;
        if best.as_ref().is_none_or(|b| run.sse < b.sse) {
            best = Some(run);
        }
    }
    let best = best.unwrap();
    let (assignments, map) = canonical(&best.assignments, k);
    let mut centroids = vec![Vec::new(); k];
    for (old, c) in best.centroids.into_iter().enumerate() {
        centroids[map[old]] = c;
    }
    finish(data, Algorithm::Kmeans, k, assignments, centroids, Some(seed), best.trace)
}

fn finish(
    data: &[Vec<f64>],
    algorithm: Algorithm,
    k: usize,
    assignments: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    seed: Option<u64>,
    sse_trace: Vec<f64>,
) -> Result<ClusterModel, ClusterError> {
    let objective = data.iter().zip(&assignments).map(|(x, &a)| dist(x, &centroids[a])).sum();
    let sse = sse_of(data, &assignments, &centroids);
    let sc = silhouette_rows(data, &assignments)?;
    let dbi = davies_bouldin_rows(data, &assignments)?;
    Ok(ClusterModel {
        algorithm,
        k,
        assignments,
        centroids,
        objective,
        sse,
        sc,
        dbi,
        seed,
        sse_trace,
        score_table: Vec::new(),
        format_version: FORMAT_VERSION,
    })
}

/// Agglomerative clustering with Ward linkage, cut at `k` clusters.
pub fn hierarchical(fm: &FeatureMatrix, k: usize) -> Result<ClusterModel, ClusterError> {
    hierarchical_rows(&fm.values, k)
}

pub fn hierarchical_rows(data: &[Vec<f64>], k: usize) -> Result<ClusterModel, ClusterError> {
    let n = data.len();
    check_k(n, k)?;
    let labels = ward_labels(data, k);
    let (assignments, _) = canonical(&labels, n);
    let centroids = centroids_of(data, &assignments, k);
    finish(data, Algorithm::HierarchicalWard, k, assignments, centroids, None, Vec::new())
}

/// Ward merges on the increase in error sum of squares, with a cached
/// nearest neighbour per active cluster. Ties go to the lowest index pair.
/// Returns, per point, the lowest original index of its cluster.
fn ward_labels(data: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = data.len();
    let mut d = vec![0.0; n * n];
    d.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for j in 0..n {
            row[j] = 0.5 * sq_dist(&data[i], &data[j]);
        }
    });
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut parent: Vec<usize> = (0..n).collect();
    let nn_of = |i: usize, d: &[f64], active: &[bool]| -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for j in 0..n {
            if j != i && active[j] && d[i * n + j] < best.1 {
                best = (j, d[i * n + j]);
            }
        }
        best
    };
    let mut nn: Vec<(usize, f64)> = (0..n).map(|i| nn_of(i, &d, &active)).collect();
    for _ in 0..(n - k) {
        let mut pick = (usize::MAX, usize::MAX, f64::INFINITY);
        for i in 0..n {
            if !active[i] {
                continue;
            }
            let (j, v) = nn[i];
            let (a, b) = (i.min(j), i.max(j));
            if v < pick.2 || (v == pick.2 && (a, b) < (pick.0, pick.1)) {
                pick = (a, b, v);
            }
        }
        let (a, b, dab) = pick;
        let (na, nb) = (size[a] as f64, size[b] as f64);
        for m in 0..n {
            if !active[m] || m == a || m == b {
                continue;
            }
            let nm = size[m] as f64;
            let v = ((nm + na) * d[m * n + a] + (nm + nb) * d[m * n + b] - nm * dab) / (nm + na + nb);
            d[m * n + a] = v;
            d[a * n + m] = v;
        }
        active[b] = false;
        size[a] += size[b];
        parent[b] = a;
        nn[a] = nn_of(a, &d, &active);
        for m in 0..n {
            if !active[m] || m == a {
                continue;
            }
            if nn[m].0 == a || nn[m].0 == b {
                nn[m] = nn_of(m, &d, &active);
            } else {
                let v = d[m * n + a];
                if v < nn[m].1 || (v == nn[m].1 && a < nn[m].0) {
                    nn[m] = (a, v);
                }
            }
        }
    }
    (0..n)
        .map(|mut i| {
            while parent[i] != i {
                i = parent[i];
            }
            i
        })
        .collect()
}

fn group_indices(assignments: &[usize]) -> Vec<Vec<usize>> {
    let mut ids: HashMap<usize, usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, &a) in assignments.iter().enumerate() {
        let g = *ids.entry(a).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    groups
}

/// Mean silhouette; points alone in their cluster score 0.
pub fn silhouette(fm: &FeatureMatrix, assignments: &[usize]) -> Result<f64, ClusterError> {
    silhouette_rows(&fm.values, assignments)
}

pub fn silhouette_rows(data: &[Vec<f64>], assignments: &[usize]) -> Result<f64, ClusterError> {
    if data.len() != assignments.len() {
        return Err(ClusterError::Invalid("one label per row required".into()));
    }
    let groups = group_indices(assignments);
    if groups.len() < 2 {
        return Err(ClusterError::SingleCluster);
    }
    let label: Vec<usize> = {
        let mut l = vec![0; data.len()];
        for (g, members) in groups.iter().enumerate() {
            for &i in members {
                l[i] = g;
            }
        }
        l
    };
    let total: f64 = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let own = label[i];
            if groups[own].len() == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; groups.len()];
            for (j, x) in data.iter().enumerate() {
                if j != i {
                    sums[label[j]] += dist(&data[i], x);
                }
            }
            let a = sums[own] / (groups[own].len() - 1) as f64;
            let b = (0..groups.len())
                .filter(|&g| g != own)
                .map(|g| sums[g] / groups[g].len() as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 { (b - a) / m } else { 0.0 }
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok(total / data.len() as f64)
}

pub fn davies_bouldin(fm: &FeatureMatrix, assignments: &[usize]) -> Result<f64, ClusterError> {
    davies_bouldin_rows(&fm.values, assignments)
}

pub fn davies_bouldin_rows(data: &[Vec<f64>], assignments: &[usize]) -> Result<f64, ClusterError> {
    if data.len() != assignments.len() {
        return Err(ClusterError::Invalid("one label per row required".into()));
    }
    let groups = group_indices(assignments);
    let k = groups.len();
    if k < 2 {
        return Err(ClusterError::SingleCluster);
    }
    let r = data[0].len();
    let centroids: Vec<Vec<f64>> = groups
        .iter()
        .map(|m| {
            let mut c = vec![0.0; r];
            for &i in m {
                for (s, v) in c.iter_mut().zip(&data[i]) {
                    *s += v;
                }
            }
            c.iter_mut().for_each(|v| *v /= m.len() as f64);
            c
        })
        .collect();
    let spread: Vec<f64> = groups
        .iter()
        .zip(&centroids)
        .map(|(m, c)| m.iter().map(|&i| dist(&data[i], c)).sum::<f64>() / m.len() as f64)
        .collect();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0_f64;
        for j in 0..k {
            if i == j {
                continue;
            }
            let sep = dist(&centroids[i], &centroids[j]);
            if sep == 0.0 {
                let (a, b) = (i.min(j), i.max(j));
                return Err(ClusterError::CoincidentCentroids(assignments[groups[a][0]], assignments[groups[b][0]]));
            }
            worst = worst.max((spread[i] + spread[j]) / sep);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// Try every (algorithm, k) cell and keep the best by silhouette (higher),
/// then Davies–Bouldin (lower), then smaller k. Cells that fail, or ask for
/// more clusters than rows, are recorded in the score table and skipped.
pub fn select_model(
    fm: &FeatureMatrix,
    k_range: (usize, usize),
    algorithms: &[Algorithm],
    seed: u64,
    restarts: usize,
) -> Result<ClusterModel, ClusterError> {
    select_model_rows(&fm.values, k_range, algorithms, seed, restarts)
}

pub fn select_model_rows(
    data: &[Vec<f64>],
    k_range: (usize, usize),
    algorithms: &[Algorithm],
    seed: u64,
    restarts: usize,
) -> Result<ClusterModel, ClusterError> {
    let (kmin, kmax) = k_range;
    if kmin < 2 || kmin > kmax || algorithms.is_empty() {
        return Err(ClusterError::Invalid(format!(
            "empty search space: k in [{kmin}, {kmax}] with {} algorithms",
            algorithms.len()
        )));
    }
    if kmin > data.len() {
        return Err(ClusterError::BadK { k: kmin, n: data.len() });
    }
    let mut algos = algorithms.to_vec();
    algos.sort();
    algos.dedup();
    let cells: Vec<(Algorithm, usize)> =
        algos.iter().flat_map(|&a| (kmin..=kmax.min(data.len())).map(move |k| (a, k))).collect();
    let results: Vec<Result<ClusterModel, ClusterError>> = cells
        .par_iter()
        .map(|&(a, k)| match a {
            Algorithm::Kmeans => kmeans_rows(data, k, seed, restarts),
            Algorithm::HierarchicalWard => hierarchical_rows(data, k),
        })
        .collect();
    let mut table = Vec::with_capacity(cells.len());
    let mut best: Option<ClusterModel> = None;
    let mut first_error = None;
    for (&(algorithm, k), res) in cells.iter().zip(results) {
        match res {
            Ok(m) => {
                table.push(ScoreRow { algorithm, k, sc: Some(m.sc), dbi: Some(m.dbi), objective: Some(m.objective), error: None });
                let better = match &best {
                    None => true,
                    Some(b) => m.sc > b.sc || (m.sc == b.sc && (m.dbi < b.dbi || (m.dbi == b.dbi && m.k < b.k))),
                };
                if better {
                    best = Some(m);
                }
            }
            Err(e) => {
                table.push(ScoreRow { algorithm, k, sc: None, dbi: None, objective: None, error: Some(e.to_string()) });
                first_error.get_or_insert(e);
            }
        }
    }
    match best {
        Some(mut m) => {
            m.score_table = table;
            Ok(m)
        }
        None => Err(first_error.unwrap()),
    }
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len() as f64;
    let mut table: HashMap<(usize, usize), f64> = HashMap::new();
    let mut ra: HashMap<usize, f64> = HashMap::new();
    let mut rb: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *ra.entry(x).or_default() += 1.0;
        *rb.entry(y).or_default() += 1.0;
    }
    let c2 = |v: f64| v * (v - 1.0) / 2.0;
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sa: f64 = ra.values().map(|&v| c2(v)).sum();
    let sb: f64 = rb.values().map(|&v| c2(v)).sum();
    let expected = sa * sb / c2(n);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
