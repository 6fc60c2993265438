//! Adaptive segmentation: customers start in their tariff groups (or in the
//! previous period's groups), each group is sub-clustered on its normalized
//! load profiles, and the sub-clusters are merged into a fixed number of
//! final groups either by centroid proximity or by fitted demand-model
//! coefficients.

use std::collections::{BTreeMap, HashMap};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{
    centroids_of, kmeans_rows, select_model, select_model_rows, Algorithm, ClusterError, ClusterModel, ScoreRow,
    DEFAULT_RESTARTS,
};
use crate::demand::{fit_demand_model, DemandError, DemandModel, FitHistory, DEFAULT_LAMBDA};
use crate::ingest::{build_attributes, normalize, AttributeMode, FeatureMatrix, IngestError, ReadingSet, TariffSeries};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("{0}")]
    Invalid(String),
    #[error("group {group} has {size} customers, fewer than the smallest cluster count {k_min}")]
    GroupTooSmall { group: String, size: usize, k_min: usize },
    #[error("cannot merge {profiles} sub-clusters into {g_final} groups")]
    TooFewProfiles { profiles: usize, g_final: usize },
    #[error("group {group}: {source}")]
    Cluster {
        group: String,
        #[source]
        source: ClusterError,
    },
    #[error("sub-cluster {profile}: {source}")]
    Fit {
        profile: String,
        #[source]
        source: DemandError,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeStrategy {
    Centroid,
    Model,
}

impl std::str::FromStr for MergeStrategy {
    type Err = SegmentationError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "centroid" => Ok(MergeStrategy::Centroid),
            "model" => Ok(MergeStrategy::Model),
            other => Err(SegmentationError::Invalid(format!("unknown merge strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationConfig {
    #[serde(default = "default_k_range")]
    pub k_range: (usize, usize),
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
    #[serde(default = "default_g_final")]
    pub g_final: usize,
    #[serde(default = "default_merge")]
    pub merge: MergeStrategy,
    /// Weight centroids by sub-cluster size in the centroid merge.
    #[serde(default)]
    pub size_weighted: bool,
    #[serde(default = "default_attributes")]
    pub attributes: AttributeMode,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
    /// Label of the period; defaults to the covered date range.
    #[serde(default)]
    pub period: Option<String>,
}

fn default_k_range() -> (usize, usize) {
    (2, 6)
}
fn default_algorithms() -> Vec<Algorithm> {
    vec![Algorithm::Kmeans, Algorithm::HierarchicalWard]
}
fn default_g_final() -> usize {
    4
}
fn default_merge() -> MergeStrategy {
    MergeStrategy::Centroid
}
fn default_attributes() -> AttributeMode {
    AttributeMode::MonthlyAverage
}
fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}
fn default_restarts() -> usize {
    DEFAULT_RESTARTS
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            k_range: default_k_range(),
            algorithms: default_algorithms(),
            g_final: default_g_final(),
            merge: default_merge(),
            size_weighted: false,
            attributes: default_attributes(),
            lambda: default_lambda(),
            restarts: default_restarts(),
            seed: 0,
            period: None,
        }
    }
}

/// Customers of one initial group with their clustering attributes.
#[derive(Debug, Clone)]
pub struct InitialGroup {
    pub name: String,
    pub tariff_group: String,
    pub features: FeatureMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubClusterProfile {
    /// Initial group the sub-cluster was carved from.
    pub parent: String,
    pub tariff_group: String,
    pub index: usize,
    pub centroid: Vec<f64>,
    pub size: usize,
    pub members: Vec<String>,
    #[serde(skip)]
    pub days: Vec<NaiveDate>,
    /// Summed raw consumption of the members, one row per day.
    #[serde(skip)]
    pub aggregate_series: Vec<Vec<f64>>,
}

impl SubClusterProfile {
    pub fn label(&self) -> String {
        format!("{}#{}", self.parent, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub initial_group: String,
    pub sub_cluster: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub period: String,
    pub final_groups: usize,
    pub group_names: Vec<String>,
    /// Customer id to final group, numbered from 1.
    pub membership: BTreeMap<String, usize>,
    /// Sub-clusters making up each final group.
    pub lineage: Vec<Vec<LineageEntry>>,
    pub profiles: Vec<SubClusterProfile>,
    pub sub_models: BTreeMap<String, ClusterModel>,
    pub merge_strategy: MergeStrategy,
    pub size_weighted: bool,
    /// Silhouette and Davies–Bouldin of the merge at other group counts.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub merge_scores: Vec<ScoreRow>,
    /// Models fitted per sub-cluster when merging by model.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sub_fits: Vec<DemandModel>,
    /// Customers without consumption, left out of every group.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unassigned: Vec<String>,
    pub seed: u64,
    pub format_version: u32,
}

impl SegmentationResult {
    pub fn group_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.final_groups];
        for &g in self.membership.values() {
            s[g - 1] += 1;
        }
        s
    }

    /// Member ids of final group `g` (numbered from 1), sorted.
    pub fn members(&self, g: usize) -> Vec<String> {
        self.membership.iter().filter(|(_, &v)| v == g).map(|(k, _)| k.clone()).collect()
    }

    /// Conservation checks: every group nonempty, lineage sizes add up.
    pub fn validate(&self) -> Result<(), SegmentationError> {
        if self.lineage.len() != self.final_groups || self.group_names.len() != self.final_groups {
            return Err(SegmentationError::Invalid("lineage and group count disagree".into()));
        }
        if let Some((c, g)) = self.membership.iter().find(|(_, &g)| g == 0 || g > self.final_groups) {
            return Err(SegmentationError::Invalid(format!("customer {c} has group {g} outside 1..={}", self.final_groups)));
        }
        for (g, size) in self.group_sizes().into_iter().enumerate() {
            let lin: usize = self.lineage[g].iter().map(|e| e.size).sum();
            if size == 0 || lin != size {
                return Err(SegmentationError::Invalid(format!(
                    "group {} has {size} members but lineage accounts for {lin}",
                    g + 1
                )));
            }
        }
        Ok(())
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a, stable across runs and platforms
    let h = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    seed ^ h
}

fn profile_of(
    group: &InitialGroup,
    raw: &ReadingSet,
    index: usize,
    rows: &[usize],
    centroid: Vec<f64>,
) -> Result<SubClusterProfile, SegmentationError> {
    let members: Vec<String> = rows.iter().map(|&r| group.features.customers[r].clone()).collect();
    let idx = members
        .iter()
        .map(|id| raw.customer_index(id).ok_or_else(|| SegmentationError::Invalid(format!("customer {id} has no readings"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SubClusterProfile {
        parent: group.name.clone(),
        tariff_group: group.tariff_group.clone(),
        index,
        centroid,
        size: members.len(),
        members,
        days: raw.days.clone(),
        aggregate_series: raw.aggregate(&idx),
    })
}

/// Run model selection inside every initial group independently.
pub fn sub_cluster(
    groups: &[InitialGroup],
    raw: &ReadingSet,
    k_range: (usize, usize),
    algorithms: &[Algorithm],
    seed: u64,
    restarts: usize,
) -> Result<(Vec<SubClusterProfile>, BTreeMap<String, ClusterModel>), SegmentationError> {
    if groups.is_empty() {
        return Err(SegmentationError::Invalid("no groups to sub-cluster".into()));
    }
    let r = groups[0].features.attribute_length();
    if let Some(g) = groups.iter().find(|g| g.features.attribute_length() != r) {
        return Err(SegmentationError::Invalid(format!("group {} has {} attributes, expected {r}", g.name, g.features.attribute_length())));
    }
    for g in groups {
        if g.features.n_rows() < k_range.0 {
            return Err(SegmentationError::GroupTooSmall { group: g.name.clone(), size: g.features.n_rows(), k_min: k_range.0 });
        }
    }
    let fitted: Vec<(Vec<SubClusterProfile>, ClusterModel)> = groups
        .par_iter()
        .map(|g| {
            let mut model = select_model(&g.features, k_range, algorithms, name_seed(seed, &g.name), restarts)
                .map_err(|source| SegmentationError::Cluster { group: g.name.clone(), source })?;
            model.sse_trace.clear();
            let profiles = (0..model.k)
                .map(|c| profile_of(g, raw, c, &model.members(c), model.centroids[c].clone()))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((profiles, model))
        })
        .collect::<Result<_, SegmentationError>>()?;
    let mut profiles = Vec::new();
    let mut models = BTreeMap::new();
    for (g, (p, m)) in groups.iter().zip(fitted) {
        profiles.extend(p);
        models.insert(g.name.clone(), m);
    }
    Ok((profiles, models))
}

fn relabel_first_appearance(labels: &[usize]) -> Vec<usize> {
    let mut map = HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// Partition profile rows into `g_final` groups with k-means. Identical rows
/// always share a group; `weights` replicate rows to weight the means.
fn partition(
    rows: &[Vec<f64>],
    weights: Option<&[usize]>,
    g_final: usize,
    seed: u64,
    restarts: usize,
) -> Result<Vec<usize>, SegmentationError> {
    let n = rows.len();
    if g_final == 0 || g_final > n {
        return Err(SegmentationError::TooFewProfiles { profiles: n, g_final });
    }
    if g_final == n {
        return Ok((0..n).collect());
    }
    let mut unique: Vec<Vec<f64>> = Vec::new();
    let mut weight: Vec<usize> = Vec::new();
    let mut of_row = Vec::with_capacity(n);
    for (i, row) in rows.iter().enumerate() {
        let w = weights.map_or(1, |w| w[i]);
        match unique.iter().position(|u| u == row) {
            Some(j) => {
                weight[j] += w;
                of_row.push(j);
            }
            None => {
                of_row.push(unique.len());
                unique.push(row.clone());
                weight.push(w);
            }
        }
    }
    let u = unique.len();
    let unique_labels: Vec<usize> = if g_final == 1 {
        vec![0; u]
    } else if u < g_final {
        return Err(SegmentationError::Cluster {
            group: "merge".into(),
            source: ClusterError::Degenerate { k: g_final, distinct: u },
        });
    } else if u == g_final {
        (0..u).collect()
    } else if weights.is_some() {
        let mut data = Vec::new();
        let mut first = Vec::with_capacity(u);
        for (row, &w) in unique.iter().zip(&weight) {
            first.push(data.len());
            data.extend(std::iter::repeat_n(row.clone(), w.max(1)));
        }
        let m = kmeans_rows(&data, g_final, seed, restarts)
            .map_err(|source| SegmentationError::Cluster { group: "merge".into(), source })?;
        first.iter().map(|&i| m.assignments[i]).collect()
    } else {
        kmeans_rows(&unique, g_final, seed, restarts)
            .map_err(|source| SegmentationError::Cluster { group: "merge".into(), source })?
            .assignments
    };
    Ok(relabel_first_appearance(&of_row.iter().map(|&j| unique_labels[j]).collect::<Vec<_>>()))
}

/// Scores of the merge at every group count between 2 and one less than
/// the number of distinct rows.
fn merge_scores(rows: &[Vec<f64>], seed: u64, restarts: usize) -> Vec<ScoreRow> {
    let mut unique: Vec<Vec<f64>> = Vec::new();
    for r in rows {
        if !unique.contains(r) {
            unique.push(r.clone());
        }
    }
    if unique.len() < 3 {
        return Vec::new();
    }
    select_model_rows(&unique, (2, unique.len() - 1), &[Algorithm::Kmeans], seed, restarts)
        .map(|m| m.score_table)
        .unwrap_or_default()
}

fn assemble(
    profiles: Vec<SubClusterProfile>,
    labels: &[usize],
    strategy: MergeStrategy,
    size_weighted: bool,
    seed: u64,
) -> SegmentationResult {
    let g = labels.iter().max().map_or(0, |m| m + 1);
    let mut membership = BTreeMap::new();
    let mut lineage = vec![Vec::new(); g];
    for (p, &l) in profiles.iter().zip(labels) {
        for m in &p.members {
            membership.insert(m.clone(), l + 1);
        }
        lineage[l].push(LineageEntry { initial_group: p.parent.clone(), sub_cluster: p.index, size: p.size });
    }
    let period = match (profiles.first().and_then(|p| p.days.first()), profiles.first().and_then(|p| p.days.last())) {
        (Some(a), Some(b)) => format!("{a}..{b}"),
        _ => String::new(),
    };
    SegmentationResult {
        period,
        final_groups: g,
        group_names: (1..=g).map(|i| format!("G{i}")).collect(),
        membership,
        lineage,
        profiles,
        sub_models: BTreeMap::new(),
        merge_strategy: strategy,
        size_weighted,
        merge_scores: Vec::new(),
        sub_fits: Vec::new(),
        unassigned: Vec::new(),
        seed,
        format_version: FORMAT_VERSION,
    }
}

/// Group sub-clusters whose centroids are close, one observation per
/// sub-cluster unless `size_weighted`.
pub fn merge_by_centroid(
    profiles: Vec<SubClusterProfile>,
    g_final: usize,
    seed: u64,
    size_weighted: bool,
) -> Result<SegmentationResult, SegmentationError> {
    let rows: Vec<Vec<f64>> = profiles.iter().map(|p| p.centroid.clone()).collect();
    let sizes: Vec<usize> = profiles.iter().map(|p| p.size).collect();
    let labels = partition(&rows, size_weighted.then_some(&sizes[..]), g_final, seed, DEFAULT_RESTARTS)?;
    let mut out = assemble(profiles, &labels, MergeStrategy::Centroid, size_weighted, seed);
    out.merge_scores = merge_scores(&rows, seed, DEFAULT_RESTARTS);
    Ok(out)
}

/// Standardized per-customer coefficient vectors `(α, β) / size`.
fn coefficient_rows(fits: &[DemandModel], sizes: &[usize]) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = fits
        .iter()
        .zip(sizes)
        .map(|(m, &s)| m.alpha.iter().chain(m.beta.iter().flatten()).map(|v| v / s as f64).collect())
        .collect();
    let n = rows.len() as f64;
    let dims = rows.first().map_or(0, Vec::len);
    for j in 0..dims {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let sd = (rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n).sqrt();
        for r in rows.iter_mut() {
            r[j] = if sd > 1e-12 * (1.0 + mean.abs()) { (r[j] - mean) / sd } else { 0.0 };
        }
    }
    rows
}

/// Fit a demand model to each sub-cluster and group sub-clusters with
/// similar standardized coefficients.
pub fn merge_by_model(
    profiles: Vec<SubClusterProfile>,
    tariffs: &BTreeMap<String, TariffSeries>,
    g_final: usize,
    lambda: f64,
    seed: u64,
) -> Result<SegmentationResult, SegmentationError> {
    if g_final == 0 || g_final > profiles.len() {
        return Err(SegmentationError::TooFewProfiles { profiles: profiles.len(), g_final });
    }
    let fits: Vec<DemandModel> = profiles
        .par_iter()
        .map(|p| {
            let t = tariffs
                .get(&p.tariff_group)
                .ok_or_else(|| SegmentationError::Invalid(format!("no tariff for group {}", p.tariff_group)))?;
            let prices = t.on_days(&p.days)?;
            let fit = FitHistory::new(prices, p.aggregate_series.clone())
                .and_then(|h| fit_demand_model(&p.label(), &h, lambda));
            fit.map_err(|source| SegmentationError::Fit { profile: p.label(), source })
        })
        .collect::<Result<_, _>>()?;
    let sizes: Vec<usize> = profiles.iter().map(|p| p.size).collect();
    let rows = coefficient_rows(&fits, &sizes);
    let labels = partition(&rows, None, g_final, seed, DEFAULT_RESTARTS)?;
    let mut out = assemble(profiles, &labels, MergeStrategy::Model, false, seed);
    out.merge_scores = merge_scores(&rows, seed, DEFAULT_RESTARTS);
    out.sub_fits = fits;
    Ok(out)
}

/// Bootstrap grouping: the tariff group, or the previous period's group
/// within each tariff group when a prior result is given.
fn initial_group_name(id: &str, tariff: &str, prior: Option<&SegmentationResult>) -> String {
    match prior.and_then(|p| p.membership.get(id).map(|&g| &p.group_names[g - 1])) {
        Some(g) => format!("{g}/{tariff}"),
        None => tariff.to_string(),
    }
}

/// One segmentation period: attributes, sub-clustering, merge.
///
/// With a prior result, initial groups that are smaller than the smallest
/// cluster count are kept whole as a single sub-cluster.
pub fn run_cycle(
    rs: &ReadingSet,
    tariffs: &BTreeMap<String, TariffSeries>,
    customer_groups: &BTreeMap<String, String>,
    config: &SegmentationConfig,
    prior: Option<&SegmentationResult>,
) -> Result<SegmentationResult, SegmentationError> {
    let (norm, unassigned) = normalize(rs);
    if norm.n_customers() == 0 {
        return Err(SegmentationError::Invalid("no customers with consumption".into()));
    }
    let fm = build_attributes(&norm, &config.attributes)?;
    let mut cells: BTreeMap<String, (String, Vec<usize>)> = BTreeMap::new();
    for (row, id) in fm.customers.iter().enumerate() {
        let tariff = customer_groups
            .get(id)
            .ok_or_else(|| SegmentationError::Invalid(format!("customer {id} has no tariff group")))?;
        let name = initial_group_name(id, tariff, prior);
        cells.entry(name).or_insert_with(|| (tariff.clone(), Vec::new())).1.push(row);
    }
    for (tariff, _) in cells.values() {
        let t = tariffs
            .get(tariff)
            .ok_or_else(|| SegmentationError::Invalid(format!("no tariff series for group {tariff}")))?;
        if t.slots_per_day != rs.slots_per_day {
            return Err(SegmentationError::Invalid(format!(
                "tariff {tariff} has {} slots per day, readings have {}",
                t.slots_per_day, rs.slots_per_day
            )));
        }
        t.on_days(&rs.days)?;
    }
    let k_min = config.k_range.0;
    let mut groups = Vec::new();
    let mut whole = Vec::new();
    for (name, (tariff, rows)) in cells {
        let g = InitialGroup { name, tariff_group: tariff, features: fm.select_rows(&rows) };
        if prior.is_some() && rows.len() < k_min {
            whole.push(g);
        } else {
            groups.push(g);
        }
    }
    let (mut profiles, sub_models) = if groups.is_empty() {
        (Vec::new(), BTreeMap::new())
    } else {
        sub_cluster(&groups, rs, config.k_range, &config.algorithms, config.seed, config.restarts)?
    };
    for g in &whole {
        log::warn!("group {} has {} customers; kept as one sub-cluster", g.name, g.features.n_rows());
        let rows: Vec<usize> = (0..g.features.n_rows()).collect();
        let centroid = centroids_of(&g.features.values, &vec![0; rows.len()], 1).remove(0);
        profiles.push(profile_of(g, rs, 0, &rows, centroid)?);
    }
    let mut out = match config.merge {
        MergeStrategy::Centroid => merge_by_centroid(profiles, config.g_final, config.seed, config.size_weighted)?,
        MergeStrategy::Model => merge_by_model(profiles, tariffs, config.g_final, config.lambda, config.seed)?,
    };
    out.sub_models = sub_models;
    out.unassigned = unassigned;
    if let Some(p) = &config.period {
        out.period = p.clone();
    }
    out.validate()?;
    Ok(out)
}

/// Demand history of final group `g` (numbered from 1). Members on
/// different tariffs form separate cells; each cell's summed demand is
/// scaled to the whole group's size and the cells are pooled day by day.
pub fn group_fit_history(
    result: &SegmentationResult,
    g: usize,
    rs: &ReadingSet,
    tariffs: &BTreeMap<String, TariffSeries>,
    customer_groups: &BTreeMap<String, String>,
) -> Result<FitHistory, SegmentationError> {
    let members = result.members(g);
    if members.is_empty() {
        return Err(SegmentationError::Invalid(format!("group {g} has no members")));
    }
    let mut cells: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for id in &members {
        let idx = rs
            .customer_index(id)
            .ok_or_else(|| SegmentationError::Invalid(format!("customer {id} has no readings")))?;
        let tariff = customer_groups
            .get(id)
            .ok_or_else(|| SegmentationError::Invalid(format!("customer {id} has no tariff group")))?;
        cells.entry(tariff).or_default().push(idx);
    }
    let n = members.len() as f64;
    let parts = cells
        .into_iter()
        .map(|(tariff, idx)| {
            let t = tariffs
                .get(tariff)
                .ok_or_else(|| SegmentationError::Invalid(format!("no tariff series for group {tariff}")))?;
            let scale = n / idx.len() as f64;
            let mut demand = rs.aggregate(&idx);
            demand.iter_mut().flatten().for_each(|v| *v *= scale);
            FitHistory::new(t.on_days(&rs.days)?, demand)
                .map_err(|source| SegmentationError::Fit { profile: format!("G{g}/{tariff}"), source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let hist = if parts.len() == 1 { parts.into_iter().next().unwrap() } else { FitHistory::pooled(parts).map_err(|source| SegmentationError::Fit { profile: format!("G{g}"), source })? };
    Ok(hist)
}

/// One demand model per final group, named after the group.
pub fn fit_group_models(
    result: &SegmentationResult,
    rs: &ReadingSet,
    tariffs: &BTreeMap<String, TariffSeries>,
    customer_groups: &BTreeMap<String, String>,
    lambda: f64,
) -> Result<Vec<DemandModel>, SegmentationError> {
    (1..=result.final_groups)
        .into_par_iter()
        .map(|g| {
            let hist = group_fit_history(result, g, rs, tariffs, customer_groups)?;
            let name = &result.group_names[g - 1];
            fit_demand_model(name.as_str(), &hist, lambda)
                .map_err(|source| SegmentationError::Fit { profile: name.clone(), source })
        })
        .collect()
}

/// Share of common customers whose group changes between two results, under
/// the group matching that maximizes agreement.
pub fn membership_churn(a: &SegmentationResult, b: &SegmentationResult) -> f64 {
    let common: Vec<(usize, usize)> =
        a.membership.iter().filter_map(|(c, &ga)| b.membership.get(c).map(|&gb| (ga - 1, gb - 1))).collect();
    if common.is_empty() {
        return 0.0;
    }
    let mut table = vec![vec![0usize; b.final_groups]; a.final_groups];
    for &(x, y) in &common {
        table[x][y] += 1;
    }
    let matched = best_matching(&table);
    1.0 - matched as f64 / common.len() as f64
}

/// Maximum-weight matching of rows to columns, exhaustive over subsets.
fn best_matching(table: &[Vec<usize>]) -> usize {
    let cols = table.first().map_or(0, Vec::len);
    if cols > 20 {
        // greedy fallback for very large group counts
        let mut used = vec![false; cols];
        let mut total = 0;
        for row in table {
            if let Some((j, v)) = row.iter().enumerate().filter(|(j, _)| !used[*j]).max_by_key(|(_, v)| **v) {
                used[j] = true;
                total += v;
            }
        }
        return total;
    }
    // dp over rows and the set of used columns
    let mut dp: HashMap<u32, usize> = HashMap::from([(0, 0)]);
    for row in table {
        let mut next = dp.clone();
        for (&mask, &v) in &dp {
            for (j, &w) in row.iter().enumerate() {
                if mask & (1 << j) == 0 {
                    let e = next.entry(mask | (1 << j)).or_insert(0);
                    *e = (*e).max(v + w);
                }
            }
        }
        dp = next;
    }
    dp.into_values().max().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::adjusted_rand_index;
    use crate::rng::stream_rng;
    use crate::synthgen::{generate_population, generate_readings, generate_tariffs, SynthConfig};
    use rand::Rng;

    fn profile(parent: &str, index: usize, centroid: Vec<f64>, members: &[&str]) -> SubClusterProfile {
        SubClusterProfile {
            parent: parent.into(),
            tariff_group: parent.into(),
            index,
            centroid,
            size: members.len(),
            members: members.iter().map(|s| s.to_string()).collect(),
            days: Vec::new(),
            aggregate_series: Vec::new(),
        }
    }

    fn spread_profiles() -> Vec<SubClusterProfile> {
        vec![
            profile("TA", 0, vec![0.0, 0.0], &["a", "b"]),
            profile("TA", 1, vec![10.0, 0.0], &["c"]),
            profile("TB", 0, vec![0.1, 0.0], &["d", "e", "f"]),
            profile("TB", 1, vec![10.1, 0.2], &["g"]),
            profile("TC", 0, vec![5.0, 9.0], &["h"]),
        ]
    }

    #[test]
    fn centroid_merge_groups_neighbours() {
        let r = merge_by_centroid(spread_profiles(), 3, 1, false).unwrap();
        r.validate().unwrap();
        assert_eq!(r.membership["a"], r.membership["d"]);
        assert_eq!(r.membership["c"], r.membership["g"]);
        assert_ne!(r.membership["a"], r.membership["h"]);
        assert_eq!(r.group_sizes().iter().sum::<usize>(), 8);
        assert_eq!(r.lineage.iter().map(Vec::len).sum::<usize>(), 5);
        assert!(!r.merge_scores.is_empty());
    }

    #[test]
    fn identity_merge() {
        for weighted in [false, true] {
            let r = merge_by_centroid(spread_profiles(), 5, 1, weighted).unwrap();
            assert_eq!(r.final_groups, 5);
            assert!(r.lineage.iter().all(|l| l.len() == 1));
            assert_eq!(r.membership["a"], 1);
            assert_eq!(r.membership["h"], 5);
        }
    }

    #[test]
    fn too_many_groups_rejected() {
        assert!(matches!(
            merge_by_centroid(spread_profiles(), 6, 1, false),
            Err(SegmentationError::TooFewProfiles { profiles: 5, g_final: 6 })
        ));
    }

    #[test]
    fn identical_centroids_share_a_group() {
        let mut rng = stream_rng(3, 0);
        for trial in 0..30 {
            let mut ps: Vec<SubClusterProfile> = (0..6)
                .map(|i| profile("T", i, vec![rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)], &[]))
                .collect();
            ps[4].centroid = ps[1].centroid.clone();
            for (i, p) in ps.iter_mut().enumerate() {
                p.members = vec![format!("c{i}")];
                p.size = 1;
            }
            for g in 1..6 {
                let r = merge_by_centroid(ps.clone(), g, trial, trial % 2 == 0).unwrap();
                assert_eq!(r.membership["c1"], r.membership["c4"], "trial {trial}, g {g}");
            }
        }
    }

    #[test]
    fn size_weighting_changes_pairing() {
        // 0, 3, 6.2 on a line: unweighted pairs 0 with 3, a heavy 0 pulls 3 to 6.2
        let members: Vec<String> = (0..12).map(|i| format!("m{i}")).collect();
        let mk = |i: usize, x: f64, ids: &[String]| SubClusterProfile {
            size: ids.len(),
            members: ids.to_vec(),
            ..profile("T", i, vec![x], &[])
        };
        let ps = vec![mk(0, 0.0, &members[..10]), mk(1, 3.0, &members[10..11]), mk(2, 6.2, &members[11..])];
        let plain = merge_by_centroid(ps.clone(), 2, 4, false).unwrap();
        assert_eq!(plain.membership["m0"], plain.membership["m10"]);
        let weighted = merge_by_centroid(ps, 2, 4, true).unwrap();
        weighted.validate().unwrap();
        assert_eq!(weighted.membership["m10"], weighted.membership["m11"]);
        assert_ne!(weighted.membership["m0"], weighted.membership["m10"]);
    }

    #[test]
    fn churn_is_permutation_invariant() {
        let a = merge_by_centroid(spread_profiles(), 3, 1, false).unwrap();
        let mut b = a.clone();
        for v in b.membership.values_mut() {
            *v = 4 - *v;
        }
        assert_eq!(membership_churn(&a, &b), 0.0);
        *b.membership.get_mut("h").unwrap() = b.membership["a"];
        assert!((membership_churn(&a, &b) - 1.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn matching_oracle() {
        let mut rng = stream_rng(9, 0);
        for _ in 0..50 {
            let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
            let t: Vec<Vec<usize>> = (0..r).map(|_| (0..c).map(|_| rng.random_range(0..20)).collect()).collect();
            // brute force over injective assignments of rows to columns or nothing
            fn brute(t: &[Vec<usize>], row: usize, used: &mut Vec<bool>) -> usize {
                if row == t.len() {
                    return 0;
                }
                let mut best = brute(t, row + 1, used);
                for j in 0..used.len() {
                    if !used[j] {
                        used[j] = true;
                        best = best.max(t[row][j] + brute(t, row + 1, used));
                        used[j] = false;
                    }
                }
                best
            }
            assert_eq!(best_matching(&t), brute(&t, 0, &mut vec![false; c]));
        }
    }

    fn population(n_per_type: usize, days: usize, seed: u64) -> (ReadingSet, BTreeMap<String, TariffSeries>, BTreeMap<String, String>, Vec<usize>) {
        let cfg = SynthConfig::fixture();
        let truth = generate_population(&cfg, n_per_type, seed).unwrap().with_tariff_groups(&["TA", "TB"]);
        let start = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        let tariffs = generate_tariffs(&["TA", "TB"], start, days, 24, (3.0, 25.0), seed + 1).unwrap();
        let rs = generate_readings(&truth, &tariffs, days, seed + 2).unwrap();
        let groups = truth.customers.iter().cloned().zip(truth.tariff_groups.iter().cloned()).collect();
        (rs, tariffs, groups, truth.labels)
    }

    fn ari(r: &SegmentationResult, rs: &ReadingSet, labels: &[usize]) -> f64 {
        let pred: Vec<usize> = rs.customers.iter().map(|c| r.membership[c]).collect();
        adjusted_rand_index(&pred, labels)
    }

    #[test]
    fn cycle_recovers_archetypes() {
        let (rs, tariffs, groups, labels) = population(40, 40, 5);
        let cfg = SegmentationConfig { g_final: 3, k_range: (2, 5), ..Default::default() };
        let r = run_cycle(&rs, &tariffs, &groups, &cfg, None).unwrap();
        assert_eq!(r.membership.len(), rs.n_customers());
        assert!(ari(&r, &rs, &labels) >= 0.9);
        assert!(r.sub_models.keys().eq(["TA", "TB"].iter()));
        let again = run_cycle(&rs, &tariffs, &groups, &cfg, None).unwrap();
        assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&again).unwrap());

        let next = run_cycle(&rs, &tariffs, &groups, &cfg, Some(&r)).unwrap();
        assert!(membership_churn(&r, &next) < 0.05);
        assert!(next.sub_models.keys().all(|k| k.contains('/')));
    }

    #[test]
    fn model_merge_recovers_archetypes() {
        let (rs, tariffs, groups, labels) = population(40, 40, 6);
        let cfg = SegmentationConfig { g_final: 3, k_range: (2, 5), merge: MergeStrategy::Model, lambda: 1.0, ..Default::default() };
        let r = run_cycle(&rs, &tariffs, &groups, &cfg, None).unwrap();
        assert!(ari(&r, &rs, &labels) >= 0.9, "ari {}", ari(&r, &rs, &labels));
        assert_eq!(r.sub_fits.len(), r.profiles.len());
    }

    #[test]
    fn group_models_follow_archetypes() {
        // noiseless readings and a segmentation equal to the truth labels
        let mut cfg = SynthConfig::fixture();
        cfg.archetypes.iter_mut().for_each(|a| a.noise_sd = 0.0);
        let truth = generate_population(&cfg, 6, 2).unwrap().with_tariff_groups(&["TA", "TB"]);
        let start = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
        let tariffs = generate_tariffs(&["TA", "TB"], start, 40, 24, (3.0, 25.0), 3).unwrap();
        let rs = generate_readings(&truth, &tariffs, 40, 4).unwrap();
        let groups: BTreeMap<String, String> =
            truth.customers.iter().cloned().zip(truth.tariff_groups.iter().cloned()).collect();
        let profiles: Vec<SubClusterProfile> = (0..3)
            .map(|a| {
                let ids: Vec<&str> = (0..truth.customers.len())
                    .filter(|&c| truth.labels[c] == a)
                    .map(|c| truth.customers[c].as_str())
                    .collect();
                profile("T", a, vec![a as f64], &ids)
            })
            .collect();
        let seg = merge_by_centroid(profiles, 3, 0, false).unwrap();
        let models = fit_group_models(&seg, &rs, &tariffs, &groups, 1.0).unwrap();
        for (a, m) in models.iter().enumerate() {
            let t = &truth.models[a];
            let err = m
                .alpha
                .iter()
                .zip(&t.alpha)
                .chain(m.beta.iter().flatten().zip(t.beta.iter().flatten()))
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1e-6, "archetype {a}: {err}");
        }
    }

    #[test]
    fn missing_tariff_group_is_an_error() {
        let (rs, tariffs, mut groups, _) = population(5, 5, 1);
        let cfg = SegmentationConfig { g_final: 2, ..Default::default() };
        let first = rs.customers[0].clone();
        groups.remove(&first);
        assert!(matches!(run_cycle(&rs, &tariffs, &groups, &cfg, None), Err(SegmentationError::Invalid(m)) if m.contains(&first)));
    }

    #[test]
    fn identical_group_cannot_be_split() {
        let fm = FeatureMatrix::from_rows(vec![vec![1.0, 1.0]; 4]).unwrap();
        let rs = ReadingSet::new(
            fm.customers.clone(),
            vec![NaiveDate::from_ymd_opt(2024, 1, 1).unwrap()],
            2,
            vec![1.0; 8],
        )
        .unwrap();
        let g = InitialGroup { name: "T".into(), tariff_group: "T".into(), features: fm };
        let err = sub_cluster(&[g.clone()], &rs, (2, 2), &[Algorithm::Kmeans], 0, 3).unwrap_err();
        assert!(matches!(err, SegmentationError::Cluster { .. }));
        let err = sub_cluster(&[g], &rs, (5, 6), &[Algorithm::Kmeans], 0, 3).unwrap_err();
        assert!(matches!(err, SegmentationError::GroupTooSmall { size: 4, k_min: 5, .. }));
    }
}
