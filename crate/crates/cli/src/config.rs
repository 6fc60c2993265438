//! Pipeline configuration file (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use segprice::clustering::{Algorithm, DEFAULT_RESTARTS};
use segprice::demand::DEFAULT_LAMBDA;
use segprice::ingest::AttributeMode;
use segprice::pricing::{PricingConfig, DEFAULT_P_MAX, DEFAULT_STARTS};
use segprice::segmentation::{MergeStrategy, SegmentationConfig};

use crate::error::CliError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "format_version")]
    pub format_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub segmentation: SegmentSection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub pricing: PricingSection,
    #[serde(default)]
    pub benchmark: BenchmarkSection,
}

fn format_version() -> u32 {
    FORMAT_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub readings: PathBuf,
    pub tariffs: PathBuf,
    /// `customer_id,group` file giving each customer's tariff group.
    pub customer_groups: PathBuf,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Ignore unknown CSV columns.
    #[serde(default)]
    pub lax: bool,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentSection {
    pub k_range: [usize; 2],
    pub algorithms: Vec<Algorithm>,
    pub g_final: usize,
    pub merge: MergeStrategy,
    pub size_weighted: bool,
    pub attributes: AttributeMode,
    pub restarts: usize,
    pub period: Option<String>,
}

impl Default for SegmentSection {
    fn default() -> Self {
        let d = SegmentationConfig::default();
        Self {
            k_range: [d.k_range.0, d.k_range.1],
            algorithms: d.algorithms,
            g_final: d.g_final,
            merge: d.merge,
            size_weighted: d.size_weighted,
            attributes: d.attributes,
            restarts: DEFAULT_RESTARTS,
            period: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub lambda: f64,
    /// Slots per day used for fitting and pricing; readings are resampled.
    pub horizon: usize,
}

impl Default for FitSection {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA, horizon: 24 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PricingSection {
    pub p_min: Option<f64>,
    pub p_max: f64,
    pub flat_price: Option<f64>,
    pub revenue_cap: Option<f64>,
    pub starts: usize,
    /// Wholesale cost per slot, cents/kWh.
    pub cost: Vec<f64>,
}

impl Default for PricingSection {
    fn default() -> Self {
        Self { p_min: None, p_max: DEFAULT_P_MAX, flat_price: None, revenue_cap: None, starts: DEFAULT_STARTS, cost: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSection {
    pub runs: usize,
    /// Log-scale standard deviation of the per-run cost draws.
    pub cost_noise_sd: f64,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self { runs: 10, cost_noise_sd: 0.1 }
    }
}

impl PipelineConfig {
    /// Read, resolve relative paths against the file's directory, validate.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.readings, &mut cfg.paths.tariffs, &mut cfg.paths.customer_groups, &mut cfg.paths.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        if self.format_version != FORMAT_VERSION {
            return bad(format!("unsupported format_version {}", self.format_version));
        }
        let s = &self.segmentation;
        if s.k_range[0] < 2 || s.k_range[0] > s.k_range[1] {
            return bad(format!("segmentation.k_range {:?} must satisfy 2 <= min <= max", s.k_range));
        }
        if s.algorithms.is_empty() {
            return bad("segmentation.algorithms is empty".into());
        }
        if s.g_final == 0 {
            return bad("segmentation.g_final must be at least 1".into());
        }
        if s.restarts == 0 {
            return bad("segmentation.restarts must be at least 1".into());
        }
        if !(self.fit.lambda > 0.0 && self.fit.lambda <= 1.0) {
            return bad(format!("fit.lambda {} outside (0, 1]", self.fit.lambda));
        }
        if self.fit.horizon == 0 {
            return bad("fit.horizon must be positive".into());
        }
        let p = &self.pricing;
        if !(p.p_max.is_finite() && p.p_max > 0.0) {
            return bad(format!("pricing.p_max {} must be positive", p.p_max));
        }
        if p.starts == 0 {
            return bad("pricing.starts must be at least 1".into());
        }
        if p.cost.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return bad("pricing.cost must be finite and nonnegative".into());
        }
        if !p.cost.is_empty() && p.cost.len() != self.fit.horizon {
            return bad(format!("pricing.cost has {} entries, horizon is {}", p.cost.len(), self.fit.horizon));
        }
        if self.benchmark.runs == 0 {
            return bad("benchmark.runs must be at least 1".into());
        }
        if !(self.benchmark.cost_noise_sd.is_finite() && self.benchmark.cost_noise_sd >= 0.0) {
            return bad("benchmark.cost_noise_sd must be nonnegative".into());
        }
        Ok(())
    }

    /// SHA-256 of the effective configuration after overrides, leaving out
    /// the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.output = PathBuf::new();
        let canonical = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn segmentation_config(&self) -> SegmentationConfig {
        let s = &self.segmentation;
        SegmentationConfig {
            k_range: (s.k_range[0], s.k_range[1]),
            algorithms: s.algorithms.clone(),
            g_final: s.g_final,
            merge: s.merge,
            size_weighted: s.size_weighted,
            attributes: s.attributes.clone(),
            lambda: self.fit.lambda,
            restarts: s.restarts,
            seed: self.seed,
            period: s.period.clone(),
        }
    }

    pub fn pricing_config(&self) -> PricingConfig {
        let p = &self.pricing;
        PricingConfig {
            p_min: p.p_min,
            p_max: p.p_max,
            flat_price: p.flat_price,
            revenue_cap: p.revenue_cap,
            starts: p.starts,
        }
    }

    pub fn cost(&self) -> Result<Vec<f64>, CliError> {
        if self.pricing.cost.is_empty() {
            return Err(CliError::Validation("pricing.cost is required for pricing".into()));
        }
        Ok(self.pricing.cost.clone())
    }
}
