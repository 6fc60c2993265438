use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use segprice::demand::DemandModel;
use segprice::ingest::{
    load_customer_groups, load_readings, load_tariffs, resample, write_customer_groups, write_tariffs_csv, ReadingSet,
    TariffSeries,
};
use segprice::pricing::{
    benchmark_variants, build_problem, solve_multiple, solve_uniform, BenchmarkReport, CostGenerator, PricingSolution,
};
use segprice::segmentation::{fit_group_models, run_cycle, SegmentationResult};
use segprice::synthgen::{generate_population, generate_readings, generate_tariffs, SynthConfig, SyntheticTruth};

use crate::config::{PipelineConfig, FORMAT_VERSION};
use crate::error::CliError;

pub struct Invocation {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub lax: bool,
}

impl Invocation {
    fn load(&self) -> Result<PipelineConfig, CliError> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.paths.output = o.clone();
        }
        cfg.paths.lax |= self.lax;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Meta {
    pub kind: String,
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub generated_at: String,
}

impl Meta {
    fn new(kind: &str, cfg: &PipelineConfig) -> Self {
        Self {
            kind: kind.into(),
            format_version: FORMAT_VERSION,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            generated_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SegmentationArtifact {
    pub meta: Meta,
    pub segmentation: SegmentationResult,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelsArtifact {
    pub meta: Meta,
    pub lambda: f64,
    pub models: Vec<DemandModel>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PricingArtifact {
    pub meta: Meta,
    pub cost: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub multiple: Option<PricingSolution>,
    pub uniform: PricingSolution,
    /// Relative profit gain of per-group over uniform prices.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub improvement: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BenchmarkArtifact {
    pub meta: Meta,
    pub reports: Vec<BenchmarkReport>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf, CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Validation(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    Ok(path.to_path_buf())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn create_file(path: &Path) -> Result<std::fs::File, CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::File::create(path).map_err(|e| CliError::io(path, e))
}

struct Inputs {
    readings: ReadingSet,
    tariffs: BTreeMap<String, TariffSeries>,
    groups: BTreeMap<String, String>,
}

fn load_inputs(cfg: &PipelineConfig) -> Result<Inputs, CliError> {
    let lax = cfg.paths.lax;
    let tariffs = load_tariffs(&cfg.paths.tariffs, lax)?;
    let groups = load_customer_groups(&cfg.paths.customer_groups, lax)?;
    let (mut readings, report) = load_readings(&cfg.paths.readings, lax)?;
    if !report.dropped_customers.is_empty() {
        log::warn!("dropped {} customers with too many missing slots", report.dropped_customers.len());
    }
    if readings.slots_per_day != cfg.fit.horizon {
        readings = resample(&readings, cfg.fit.horizon)?;
    }
    Ok(Inputs { readings, tariffs, groups })
}

pub fn segment(inv: &Invocation, g_final: Option<usize>, prior: Option<&Path>) -> Result<Vec<PathBuf>, CliError> {
    let mut cfg = inv.load()?;
    if let Some(g) = g_final {
        cfg.segmentation.g_final = g;
    }
    cfg.validate()?;
    let prior = prior.map(read_json::<SegmentationArtifact>).transpose()?;
    let inputs = load_inputs(&cfg)?;
    let result = run_cycle(
        &inputs.readings,
        &inputs.tariffs,
        &inputs.groups,
        &cfg.segmentation_config(),
        prior.as_ref().map(|p| &p.segmentation),
    )?;
    let artifact = SegmentationArtifact { meta: Meta::new("segmentation", &cfg), segmentation: result };
    Ok(vec![write_json(&cfg.paths.output.join("segmentation.json"), &artifact)?])
}

pub fn fit(inv: &Invocation, segmentation: Option<&Path>, lambda: Option<f64>) -> Result<Vec<PathBuf>, CliError> {
    let mut cfg = inv.load()?;
    if let Some(l) = lambda {
        cfg.fit.lambda = l;
    }
    cfg.validate()?;
    let seg_path = segmentation.map_or_else(|| cfg.paths.output.join("segmentation.json"), Path::to_path_buf);
    let seg: SegmentationArtifact = read_json(&seg_path)?;
    seg.segmentation.validate()?;
    let inputs = load_inputs(&cfg)?;
    let models = fit_group_models(&seg.segmentation, &inputs.readings, &inputs.tariffs, &inputs.groups, cfg.fit.lambda)?;
    let artifact = ModelsArtifact { meta: Meta::new("models", &cfg), lambda: cfg.fit.lambda, models };
    Ok(vec![write_json(&cfg.paths.output.join("models.json"), &artifact)?])
}

fn load_models(cfg: &PipelineConfig, models: Option<&Path>) -> Result<Vec<DemandModel>, CliError> {
    let path = models.map_or_else(|| cfg.paths.output.join("models.json"), Path::to_path_buf);
    let artifact: ModelsArtifact = read_json(&path)?;
    if artifact.models.is_empty() {
        return Err(CliError::Validation(format!("{}: no models", path.display())));
    }
    Ok(artifact.models)
}

fn apply_pricing_overrides(cfg: &mut PipelineConfig, flat_price: Option<f64>, revenue_cap: Option<f64>) {
    if flat_price.is_some() {
        cfg.pricing.flat_price = flat_price;
    }
    if revenue_cap.is_some() {
        cfg.pricing.revenue_cap = revenue_cap;
    }
}

pub fn price(
    inv: &Invocation,
    models: Option<&Path>,
    flat_price: Option<f64>,
    revenue_cap: Option<f64>,
    uniform_only: bool,
) -> Result<Vec<PathBuf>, CliError> {
    let mut cfg = inv.load()?;
    apply_pricing_overrides(&mut cfg, flat_price, revenue_cap);
    cfg.validate()?;
    let models = load_models(&cfg, models)?;
    let cost = cfg.cost()?;
    let problem = build_problem(models, cost.clone(), &cfg.pricing_config())?;
    let uniform = solve_uniform(&problem, cfg.seed)?;
    let multiple = if uniform_only { None } else { Some(solve_multiple(&problem, cfg.seed)?) };
    let improvement = multiple
        .as_ref()
        .filter(|_| uniform.profit != 0.0)
        .map(|m| (m.profit - uniform.profit) / uniform.profit.abs());
    let out = &cfg.paths.output;
    let mut written = Vec::new();
    let csv_of = |sol: &PricingSolution, name: &str| -> Result<PathBuf, CliError> {
        let path = out.join(name);
        sol.write_plot_csv(&cost, create_file(&path)?).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    };
    if let Some(m) = &multiple {
        written.push(csv_of(m, "prices.csv")?);
    }
    written.push(csv_of(&uniform, "prices_uniform.csv")?);
    let artifact = PricingArtifact { meta: Meta::new("pricing", &cfg), cost: cost.clone(), multiple, uniform, improvement };
    written.insert(0, write_json(&out.join("pricing.json"), &artifact)?);
    Ok(written)
}

pub fn benchmark(
    inv: &Invocation,
    models: Option<&Path>,
    runs: Option<usize>,
    flat_price: Option<f64>,
    revenue_cap: Option<f64>,
) -> Result<Vec<PathBuf>, CliError> {
    let mut cfg = inv.load()?;
    apply_pricing_overrides(&mut cfg, flat_price, revenue_cap);
    if let Some(r) = runs {
        cfg.benchmark.runs = r;
    }
    cfg.validate()?;
    let models = load_models(&cfg, models)?;
    let costs = CostGenerator { base_shape: cfg.cost()?, noise_sd: cfg.benchmark.cost_noise_sd };
    let reports = benchmark_variants(&models, &cfg.pricing_config(), cfg.benchmark.runs, &costs, cfg.seed)?;
    let artifact = BenchmarkArtifact { meta: Meta::new("benchmark", &cfg), reports };
    Ok(vec![write_json(&cfg.paths.output.join("benchmark.json"), &artifact)?])
}

#[derive(Debug, Serialize)]
struct TruthArtifact<'a> {
    format_version: u32,
    seed: u64,
    archetypes: Vec<String>,
    models: &'a [DemandModel],
    /// Customer id to archetype name.
    labels: BTreeMap<&'a str, &'a str>,
}

pub fn synth(
    out: &Path,
    seed: u64,
    n_per_type: usize,
    days: usize,
    tariff_groups: &[String],
    noiseless: bool,
) -> Result<Vec<PathBuf>, CliError> {
    if tariff_groups.is_empty() || tariff_groups.iter().any(String::is_empty) {
        return Err(CliError::Validation("tariff group names must be nonempty".into()));
    }
    let mut synth_cfg = SynthConfig::fixture();
    if noiseless {
        synth_cfg.archetypes.iter_mut().for_each(|a| a.noise_sd = 0.0);
    }
    let names: Vec<&str> = tariff_groups.iter().map(String::as_str).collect();
    let truth: SyntheticTruth = generate_population(&synth_cfg, n_per_type, seed)?.with_tariff_groups(&names);
    let hz = synth_cfg.cost_shape.len();
    let start = NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date");
    let tariffs = generate_tariffs(&names, start, days, hz, (3.0, 25.0), seed.wrapping_add(1))?;
    let readings = generate_readings(&truth, &tariffs, days, seed.wrapping_add(2))?;

    let mut written = Vec::new();
    let path = out.join("readings.csv");
    readings.write_csv(create_file(&path)?).map_err(|e| CliError::io(&path, e))?;
    written.push(path);
    let path = out.join("tariffs.csv");
    write_tariffs_csv(&tariffs, create_file(&path)?).map_err(|e| CliError::io(&path, e))?;
    written.push(path);
    let groups: BTreeMap<String, String> =
        truth.customers.iter().cloned().zip(truth.tariff_groups.iter().cloned()).collect();
    let path = out.join("groups.csv");
    write_customer_groups(&groups, create_file(&path)?).map_err(|e| CliError::io(&path, e))?;
    written.push(path);

    let names_of = truth.archetype_names();
    let labels = truth.customers.iter().zip(&truth.labels).map(|(c, &l)| (c.as_str(), names_of[l].as_str())).collect();
    let t = TruthArtifact { format_version: FORMAT_VERSION, seed, archetypes: names_of.clone(), models: &truth.models, labels };
    written.push(write_json(&out.join("truth.json"), &t)?);

    let cost: Vec<String> = synth_cfg.cost_shape.iter().map(|c| c.to_string()).collect();
    let toml = format!(
        "seed = {seed}\n\n[paths]\nreadings = \"readings.csv\"\ntariffs = \"tariffs.csv\"\ncustomer_groups = \"groups.csv\"\noutput = \"out\"\n\n\
         [segmentation]\nk_range = [2, 6]\ng_final = 4\nmerge = \"centroid\"\n\n[fit]\nlambda = 1.0\nhorizon = {hz}\n\n\
         [pricing]\np_max = 25.0\nflat_price = 10.0\nstarts = 32\ncost = [{}]\n\n[benchmark]\nruns = 10\ncost_noise_sd = 0.1\n",
        cost.join(", ")
    );
    let path = out.join("pipeline.toml");
    std::fs::write(&path, toml).map_err(|e| CliError::io(&path, e))?;
    written.push(path);
    Ok(written)
}
