//! Synthetic customer populations with known linear demand models.
//!
//! Each archetype has a per-customer base profile (kWh per slot at the
//! reference price). Its elasticities are built from a shared base: the
//! self-elasticity of hour h is proportional to the base consumption of that
//! hour, cross-elasticities decay with circular hour distance, and any
//! column whose cross terms outweigh its self term has those cross terms
//! scaled down so the column sum is zero. Intercepts are set so demand at the
//! reference price equals the base profile.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demand::{DemandError, DemandModel};
use crate::ingest::{IngestError, ReadingSet, TariffSeries};
use crate::rng::stream_rng;

const FIXTURE: &str = include_str!("../fixtures/archetypes.json");

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{0}")]
    Invalid(String),
    #[error("no tariff for group `{0}`")]
    MissingTariff(String),
    #[error(transparent)]
    Demand(#[from] DemandError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeSpec {
    pub name: String,
    pub base_profile: Vec<f64>,
    pub self_scale: f64,
    pub cross_scale: f64,
    pub noise_sd: f64,
}

/// Shared elasticity base plus the archetypes built on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub reference_price: f64,
    /// Relative demand drop per `reference_price` cents of own-price rise.
    pub self_elasticity: f64,
    /// Relative demand gain per `reference_price` cents of other-hour price rise,
    /// spread over the other hours.
    pub cross_elasticity: f64,
    pub cross_decay_hours: f64,
    pub archetypes: Vec<ArchetypeSpec>,
    /// Base wholesale cost shape, cents/kWh.
    pub cost_shape: Vec<f64>,
}

impl SynthConfig {
    /// The shipped IS / SC / SCS fixture (hourly, 24 slots).
    pub fn fixture() -> Self {
        serde_json::from_str(FIXTURE).expect("bundled fixture is valid")
    }

    pub fn archetype(&self, name: &str) -> Option<&ArchetypeSpec> {
        self.archetypes.iter().find(|a| a.name == name)
    }

    /// Per-customer ground-truth model of one archetype.
    pub fn customer_model(&self, spec: &ArchetypeSpec) -> Result<DemandModel, SynthError> {
        let b = &spec.base_profile;
        let hz = b.len();
        if hz == 0 || b.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(SynthError::Invalid(format!("archetype {}: base profile must be positive", spec.name)));
        }
        if !(spec.self_scale >= 0.0 && spec.cross_scale >= 0.0 && spec.noise_sd >= 0.0) {
            return Err(SynthError::Invalid(format!("archetype {}: scales must be nonnegative", spec.name)));
        }
        let p_ref = self.reference_price;
        let circ = |h: usize, l: usize| {
            let d = h.abs_diff(l);
            d.min(hz - d) as f64
        };
        let mut beta = vec![vec![0.0; hz]; hz];
        for h in 0..hz {
            beta[h][h] = -spec.self_scale * self.self_elasticity * b[h] / p_ref;
            let w: Vec<f64> = (0..hz)
                .map(|l| if l == h { 0.0 } else { (-circ(h, l) / self.cross_decay_hours).exp() })
                .collect();
            let total: f64 = w.iter().sum();
            for l in 0..hz {
                if l != h && total > 0.0 {
                    beta[h][l] = spec.cross_scale * self.cross_elasticity * b[h] * w[l] / (total * p_ref);
                }
            }
        }
        for h in 0..hz {
            let cross: f64 = (0..hz).filter(|&l| l != h).map(|l| beta[l][h]).sum();
            let own = -beta[h][h];
            if cross > own {
                let f = if cross > 0.0 { own / cross } else { 0.0 };
                for (l, row) in beta.iter_mut().enumerate() {
                    if l != h {
                        row[h] *= f;
                    }
                }
            }
        }
        let alpha = (0..hz).map(|h| b[h] - beta[h].iter().sum::<f64>() * p_ref).collect();
        Ok(DemandModel::new(spec.name.clone(), alpha, beta, 1.0)?)
    }
}

/// Ground truth of a generated population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub specs: Vec<ArchetypeSpec>,
    /// Per-archetype model of the whole archetype group (n_per_type customers).
    pub models: Vec<DemandModel>,
    pub customers: Vec<String>,
    /// Archetype index of each customer.
    pub labels: Vec<usize>,
    /// Tariff group each customer is billed under.
    pub tariff_groups: Vec<String>,
    pub n_per_type: usize,
    pub seed: u64,
}

impl SyntheticTruth {
    /// Bill customers round-robin under the given tariff groups, interleaved
    /// so every group holds every archetype.
    pub fn with_tariff_groups(mut self, groups: &[&str]) -> Self {
        if !groups.is_empty() {
            self.tariff_groups = (0..self.customers.len()).map(|i| groups[i % groups.len()].to_string()).collect();
        }
        self
    }

    pub fn archetype_names(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.name.clone()).collect()
    }
}

/// `n_per_type` customers per archetype, all billed under tariff group `T0`.
pub fn generate_population(
    config: &SynthConfig,
    n_per_type: usize,
    seed: u64,
) -> Result<SyntheticTruth, SynthError> {
    if config.archetypes.is_empty() {
        return Err(SynthError::Invalid("empty archetype list".into()));
    }
    if n_per_type == 0 {
        return Err(SynthError::Invalid("n_per_type must be at least 1".into()));
    }
    let hz = config.archetypes[0].base_profile.len();
    if config.archetypes.iter().any(|a| a.base_profile.len() != hz) {
        return Err(SynthError::Invalid("archetype profiles differ in length".into()));
    }
    let mut models = Vec::with_capacity(config.archetypes.len());
    for spec in &config.archetypes {
        let m = config.customer_model(spec)?;
        let scale = n_per_type as f64;
        let alpha = m.alpha.iter().map(|v| v * scale).collect();
        let beta = m.beta.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        models.push(DemandModel::new(spec.name.clone(), alpha, beta, 1.0)?);
    }
    let mut customers = Vec::new();
    let mut labels = Vec::new();
    for (a, spec) in config.archetypes.iter().enumerate() {
        for i in 0..n_per_type {
            customers.push(format!("{}-{:05}", spec.name, i));
            labels.push(a);
        }
    }
    let tariff_groups = vec!["T0".to_string(); customers.len()];
    Ok(SyntheticTruth {
        specs: config.archetypes.clone(),
        models,
        customers,
        labels,
        tariff_groups,
        n_per_type,
        seed,
    })
}

/// Forward-simulate each customer on `days` days of its tariff group's
/// prices, with mean-one lognormal noise per slot, floored at zero.
pub fn generate_readings(
    truth: &SyntheticTruth,
    tariffs: &BTreeMap<String, TariffSeries>,
    days: usize,
    seed: u64,
) -> Result<ReadingSet, SynthError> {
    let mut calendar: Option<Vec<NaiveDate>> = None;
    for g in &truth.tariff_groups {
        let t = tariffs.get(g).ok_or_else(|| SynthError::MissingTariff(g.clone()))?;
        if t.days.len() < days {
            return Err(SynthError::Invalid(format!("tariff {g} covers {} of {days} days", t.days.len())));
        }
        let window = &t.days[..days];
        match &calendar {
            None => calendar = Some(window.to_vec()),
            Some(c) if c.as_slice() != window => {
                return Err(SynthError::Invalid(format!("tariff {g} uses a different calendar")));
            }
            _ => {}
        }
    }
    let calendar = calendar.ok_or_else(|| SynthError::Invalid("empty population".into()))?;
    let hz = truth.models[0].horizon;
    let n = truth.n_per_type as f64;
    let rows: Vec<Vec<f64>> = (0..truth.customers.len())
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let spec = &truth.specs[truth.labels[c]];
            let model = &truth.models[truth.labels[c]];
            let prices = &tariffs[&truth.tariff_groups[c]].prices;
            let sd = spec.noise_sd;
            let mut row = Vec::with_capacity(days * hz);
            for p in prices.iter().take(days) {
                for v in model.predict_unchecked(p) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    row.push((v / n * (sd * z - 0.5 * sd * sd).exp()).max(0.0));
                }
            }
            row
        })
        .collect();
    Ok(ReadingSet::new(truth.customers.clone(), calendar, hz, rows.concat())?)
}

/// Daily tariffs with every slot drawn uniformly from `[low, high]`.
pub fn generate_tariffs(
    groups: &[&str],
    start: NaiveDate,
    days: usize,
    slots: usize,
    (low, high): (f64, f64),
    seed: u64,
) -> Result<BTreeMap<String, TariffSeries>, SynthError> {
    if !(low > 0.0 && high >= low) {
        return Err(SynthError::Invalid(format!("price range [{low}, {high}] must be positive")));
    }
    let calendar: Vec<NaiveDate> = start.iter_days().take(days).collect();
    let mut out = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        let mut rng = stream_rng(seed, i as u64);
        let prices = (0..days)
            .map(|_| (0..slots).map(|_| if high > low { rng.random_range(low..=high) } else { low }).collect())
            .collect();
        out.insert(g.to_string(), TariffSeries::new(*g, calendar.clone(), prices)?);
    }
    Ok(out)
}

/// Wholesale cost series: the base shape times independent lognormal
/// factors `exp(noise_sd · z)` per slot.
pub fn generate_costs(days: usize, base_shape: &[f64], noise_sd: f64, seed: u64) -> Result<Vec<Vec<f64>>, SynthError> {
    if base_shape.is_empty() || base_shape.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(SynthError::Invalid("cost base shape must be positive".into()));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(SynthError::Invalid(format!("noise sd {noise_sd} must be nonnegative")));
    }
    let mut rng = stream_rng(seed, 0);
    Ok((0..days)
        .map(|_| {
            base_shape
                .iter()
                .map(|b| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    b * (noise_sd * z).exp()
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::check_market_consistency;
    use approx::assert_abs_diff_eq;

    fn start() -> NaiveDate {
        NaiveDate::from_ymd_opt(2024, 1, 1).unwrap()
    }

    #[test]
    fn fixture_truths_are_consistent() {
        let cfg = SynthConfig::fixture();
        let truth = generate_population(&cfg, 1000, 1).unwrap();
        assert_eq!(truth.customers.len(), 3000);
        for m in &truth.models {
            assert!(check_market_consistency(m).is_consistent(), "{}", m.group);
        }
    }

    #[test]
    fn insensitive_archetype_has_zero_beta() {
        let mut cfg = SynthConfig::fixture();
        cfg.archetypes[0].self_scale = 0.0;
        let m = cfg.customer_model(&cfg.archetypes[0]).unwrap();
        assert!(m.beta.iter().flatten().all(|v| *v == 0.0));
        assert_eq!(m.alpha, cfg.archetypes[0].base_profile);
    }

    #[test]
    fn cross_scale_raises_off_diagonal_mass() {
        let cfg = SynthConfig::fixture();
        let mut sc = cfg.archetype("SC").unwrap().clone();
        let mut scs = sc.clone();
        scs.cross_scale = sc.cross_scale * 4.0;
        sc.name = "a".into();
        scs.name = "b".into();
        let mass = |m: &DemandModel| -> f64 {
            (0..m.horizon).flat_map(|h| (0..m.horizon).filter(move |&l| l != h).map(move |l| (h, l))).map(|(h, l)| m.beta[h][l]).sum()
        };
        assert!(mass(&cfg.customer_model(&scs).unwrap()) > mass(&cfg.customer_model(&sc).unwrap()));
    }

    #[test]
    fn reference_price_reproduces_base_profile() {
        let cfg = SynthConfig::fixture();
        for spec in &cfg.archetypes {
            let m = cfg.customer_model(spec).unwrap();
            let r = m.predict(&vec![cfg.reference_price; 24]).unwrap();
            for (a, b) in r.iter().zip(&spec.base_profile) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_constant_prices_repeat_daily() {
        let mut cfg = SynthConfig::fixture();
        cfg.archetypes.iter_mut().for_each(|a| a.noise_sd = 0.0);
        let truth = generate_population(&cfg, 3, 2).unwrap();
        let tariffs = generate_tariffs(&["T0"], start(), 4, 24, (10.0, 10.0), 0).unwrap();
        let rs = generate_readings(&truth, &tariffs, 4, 3).unwrap();
        for c in 0..rs.n_customers() {
            let row = rs.customer_values(c);
            for d in 1..4 {
                assert_eq!(&row[..24], &row[d * 24..(d + 1) * 24]);
            }
        }
    }

    #[test]
    fn raising_one_price_raises_neighbours_under_shifting_truth() {
        let cfg = SynthConfig::fixture();
        let m = cfg.customer_model(cfg.archetype("SCS").unwrap()).unwrap();
        let base = vec![10.0; 24];
        let mut high = base.clone();
        high[12] = 20.0;
        let (r0, r1) = (m.predict(&base).unwrap(), m.predict(&high).unwrap());
        assert!(r1[11] > r0[11] && r1[13] > r0[13]);
        assert!(r1[12] < r0[12]);
    }

    #[test]
    fn readings_require_tariffs() {
        let truth = generate_population(&SynthConfig::fixture(), 2, 0).unwrap().with_tariff_groups(&["TA", "TB"]);
        let tariffs = generate_tariffs(&["TA"], start(), 3, 24, (5.0, 15.0), 0).unwrap();
        assert!(matches!(generate_readings(&truth, &tariffs, 3, 0), Err(SynthError::MissingTariff(g)) if g == "TB"));
    }

    #[test]
    fn readings_are_seeded() {
        let truth = generate_population(&SynthConfig::fixture(), 4, 5).unwrap();
        let tariffs = generate_tariffs(&["T0"], start(), 3, 24, (5.0, 15.0), 1).unwrap();
        let a = generate_readings(&truth, &tariffs, 3, 9).unwrap();
        let b = generate_readings(&truth, &tariffs, 3, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.values.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn costs_noiseless_and_seeded() {
        let shape = SynthConfig::fixture().cost_shape;
        let c = generate_costs(5, &shape, 0.0, 1).unwrap();
        assert!(c.iter().all(|d| d == &shape));
        assert_eq!(generate_costs(5, &shape, 0.2, 7).unwrap(), generate_costs(5, &shape, 0.2, 7).unwrap());
        assert!(generate_costs(2, &[1.0, 0.0], 0.1, 0).is_err());
    }

    #[test]
    fn cost_mean_matches_lognormal_moment() {
        let shape = vec![2.0, 5.0, 8.0];
        let sd = 0.3;
        let c = generate_costs(10_000, &shape, sd, 11).unwrap();
        for (h, b) in shape.iter().enumerate() {
            let mean = c.iter().map(|d| d[h]).sum::<f64>() / 10_000.0;
            let expected = b * (sd * sd / 2.0).exp();
            assert!((mean / expected - 1.0).abs() < 0.01, "{mean} vs {expected}");
        }
    }

    #[test]
    fn empty_specs_rejected() {
        let mut cfg = SynthConfig::fixture();
        cfg.archetypes.clear();
        assert!(generate_population(&cfg, 10, 0).is_err());
        assert!(generate_population(&SynthConfig::fixture(), 0, 0).is_err());
    }
}
