//! Smart-meter and tariff CSV loading, resampling, normalization and
//! clustering attributes.
//!
//! Reading files have the header `customer_id,date,slot,kwh` and tariff files
//! `group,date,slot,price_cents`; dates are ISO-8601 and slots 0-based.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Customers missing more than this share of their slots are dropped.
pub const MAX_MISSING_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("{0}")]
    Header(String),
    #[error("no data rows")]
    Empty,
    #[error("line {line}: duplicate key ({key})")]
    Duplicate { line: u64, key: String },
    #[error("incompatible slot counts: {from} -> {to}")]
    Resample { from: usize, to: usize },
    #[error("{0}")]
    Invalid(String),
}

impl From<csv::Error> for IngestError {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map_or(0, |p| p.line());
        IngestError::Malformed { line, message: e.to_string() }
    }
}

/// Dense per-customer, per-day, per-slot energy in kWh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadingSet {
    pub customers: Vec<String>,
    pub days: Vec<NaiveDate>,
    pub slots_per_day: usize,
    /// Row-major `[customer][day][slot]`.
    pub values: Vec<f64>,
}

impl ReadingSet {
    pub fn new(
        customers: Vec<String>,
        days: Vec<NaiveDate>,
        slots_per_day: usize,
        values: Vec<f64>,
    ) -> Result<Self, IngestError> {
        if values.len() != customers.len() * days.len() * slots_per_day {
            return Err(IngestError::Invalid(format!(
                "{} values for {}×{}×{}",
                values.len(),
                customers.len(),
                days.len(),
                slots_per_day
            )));
        }
        if days.windows(2).any(|w| w[0] >= w[1]) {
            return Err(IngestError::Invalid("days must be strictly increasing".into()));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(IngestError::Invalid(format!("reading {v} is negative or not finite")));
        }
        let unique: BTreeSet<&String> = customers.iter().collect();
        if unique.len() != customers.len() {
            return Err(IngestError::Invalid("duplicate customer identifier".into()));
        }
        Ok(Self { customers, days, slots_per_day, values })
    }

    pub fn n_customers(&self) -> usize {
        self.customers.len()
    }

    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    fn stride(&self) -> usize {
        self.days.len() * self.slots_per_day
    }

    pub fn get(&self, customer: usize, day: usize, slot: usize) -> f64 {
        self.values[customer * self.stride() + day * self.slots_per_day + slot]
    }

    /// All readings of one customer, day-major.
    pub fn customer_values(&self, customer: usize) -> &[f64] {
        let s = self.stride();
        &self.values[customer * s..(customer + 1) * s]
    }

    pub fn customer_index(&self, id: &str) -> Option<usize> {
        self.customers.iter().position(|c| c == id)
    }

    /// Restriction to the listed customers, in the given order.
    pub fn select_customers(&self, indices: &[usize]) -> ReadingSet {
        let mut values = Vec::with_capacity(indices.len() * self.stride());
        for &i in indices {
            values.extend_from_slice(self.customer_values(i));
        }
        ReadingSet {
            customers: indices.iter().map(|&i| self.customers[i].clone()).collect(),
            days: self.days.clone(),
            slots_per_day: self.slots_per_day,
            values,
        }
    }

    /// Restriction to days `start..start + len`.
    pub fn select_days(&self, start: usize, len: usize) -> Result<ReadingSet, IngestError> {
        if start + len > self.n_days() || len == 0 {
            return Err(IngestError::Invalid(format!(
                "day window {start}..{} outside {} days",
                start + len,
                self.n_days()
            )));
        }
        let h = self.slots_per_day;
        let mut values = Vec::with_capacity(self.n_customers() * len * h);
        for c in 0..self.n_customers() {
            let row = self.customer_values(c);
            values.extend_from_slice(&row[start * h..(start + len) * h]);
        }
        Ok(ReadingSet {
            customers: self.customers.clone(),
            days: self.days[start..start + len].to_vec(),
            slots_per_day: h,
            values,
        })
    }

    /// Summed consumption of the listed customers, one row per day.
    pub fn aggregate(&self, indices: &[usize]) -> Vec<Vec<f64>> {
        let h = self.slots_per_day;
        let mut out = vec![vec![0.0; h]; self.n_days()];
        for &c in indices {
            let row = self.customer_values(c);
            for (d, day) in out.iter_mut().enumerate() {
                for (s, v) in day.iter_mut().enumerate() {
                    *v += row[d * h + s];
                }
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), IngestError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["customer_id", "date", "slot", "kwh"])?;
        for (c, id) in self.customers.iter().enumerate() {
            for (d, day) in self.days.iter().enumerate() {
                for s in 0..self.slots_per_day {
                    let v = self.get(c, d, s);
                    wr.write_record([id.clone(), day.to_string(), s.to_string(), v.to_string()])?;
                }
            }
        }
        wr.flush().map_err(|e| IngestError::Io { path: "<writer>".into(), source: e })
    }
}

/// Per-group prices in cents/kWh, one row per day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TariffSeries {
    pub group: String,
    pub days: Vec<NaiveDate>,
    pub slots_per_day: usize,
    pub prices: Vec<Vec<f64>>,
}

impl TariffSeries {
    pub fn new(group: impl Into<String>, days: Vec<NaiveDate>, prices: Vec<Vec<f64>>) -> Result<Self, IngestError> {
        let group = group.into();
        let h = prices.first().map_or(0, Vec::len);
        if prices.len() != days.len() || prices.iter().any(|r| r.len() != h) || h == 0 {
            return Err(IngestError::Invalid(format!("tariff {group}: ragged price matrix")));
        }
        if days.windows(2).any(|w| w[0] >= w[1]) {
            return Err(IngestError::Invalid(format!("tariff {group}: days not increasing")));
        }
        if let Some(v) = prices.iter().flatten().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(IngestError::Invalid(format!("tariff {group}: price {v} is not positive")));
        }
        Ok(Self { group, days, slots_per_day: h, prices })
    }

    /// Prices on the given days, which must all be covered.
    pub fn on_days(&self, days: &[NaiveDate]) -> Result<Vec<Vec<f64>>, IngestError> {
        let index: HashMap<NaiveDate, usize> = self.days.iter().enumerate().map(|(i, d)| (*d, i)).collect();
        days.iter()
            .map(|d| {
                index.get(d).map(|&i| self.prices[i].clone()).ok_or_else(|| {
                    IngestError::Invalid(format!("tariff {} has no prices for {d}", self.group))
                })
            })
            .collect()
    }
}

pub fn write_tariffs_csv<W: Write>(tariffs: &BTreeMap<String, TariffSeries>, w: W) -> Result<(), IngestError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["group", "date", "slot", "price_cents"])?;
    for t in tariffs.values() {
        for (d, day) in t.days.iter().enumerate() {
            for (s, p) in t.prices[d].iter().enumerate() {
                wr.write_record([t.group.clone(), day.to_string(), s.to_string(), p.to_string()])?;
            }
        }
    }
    wr.flush().map_err(|e| IngestError::Io { path: "<writer>".into(), source: e })
}

/// Feature vectors for clustering, one row per customer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub customers: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub attribute_labels: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(customers: Vec<String>, values: Vec<Vec<f64>>, attribute_labels: Vec<String>) -> Result<Self, IngestError> {
        let r = attribute_labels.len();
        if values.len() != customers.len() {
            return Err(IngestError::Invalid("one feature row per customer required".into()));
        }
        if values.iter().any(|row| row.len() != r || row.iter().any(|v| !v.is_finite())) {
            return Err(IngestError::Invalid(format!("feature rows must have {r} finite entries")));
        }
        Ok(Self { customers, values, attribute_labels })
    }

    /// Unlabelled matrix, for tests and synthetic inputs.
    pub fn from_rows(values: Vec<Vec<f64>>) -> Result<Self, IngestError> {
        let r = values.first().map_or(0, Vec::len);
        let customers = (0..values.len()).map(|i| i.to_string()).collect();
        let labels = (0..r).map(|j| format!("x{j}")).collect();
        Self::new(customers, values, labels)
    }

    pub fn n_rows(&self) -> usize {
        self.values.len()
    }

    pub fn attribute_length(&self) -> usize {
        self.attribute_labels.len()
    }

    pub fn select_rows(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            customers: indices.iter().map(|&i| self.customers[i].clone()).collect(),
            values: indices.iter().map(|&i| self.values[i].clone()).collect(),
            attribute_labels: self.attribute_labels.clone(),
        }
    }
}

/// What happened to the raw rows while building a [`ReadingSet`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: usize,
    pub dropped_customers: Vec<String>,
    pub imputed_slots: usize,
}

fn column_map(headers: &csv::StringRecord, required: &[&str], lax: bool) -> Result<Vec<usize>, IngestError> {
    if let Some(unknown) = headers.iter().find(|h| !required.contains(&h.trim())) {
        if !lax {
            return Err(IngestError::Header(format!("unknown column `{unknown}` (use lax mode to ignore)")));
        }
    }
    required
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| IngestError::Header(format!("missing column `{name}`")))
        })
        .collect()
}

fn field<'r>(rec: &'r csv::StringRecord, idx: usize, line: u64, name: &str) -> Result<&'r str, IngestError> {
    rec.get(idx)
        .map(str::trim)
        .ok_or_else(|| IngestError::Malformed { line, message: format!("missing field `{name}`") })
}

fn parse_date(s: &str, line: u64) -> Result<NaiveDate, IngestError> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|e| IngestError::Malformed { line, message: format!("bad date `{s}`: {e}") })
}

fn parse_slot(s: &str, line: u64) -> Result<usize, IngestError> {
    s.parse().map_err(|_| IngestError::Malformed { line, message: format!("bad slot `{s}`") })
}

fn parse_value(s: &str, line: u64, what: &str) -> Result<f64, IngestError> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(IngestError::Malformed { line, message: format!("bad {what} `{s}`") }),
    }
}

fn open(path: &Path) -> Result<std::fs::File, IngestError> {
    std::fs::File::open(path).map_err(|e| IngestError::Io { path: path.display().to_string(), source: e })
}

fn date_range(min: NaiveDate, max: NaiveDate) -> Vec<NaiveDate> {
    min.iter_days().take_while(|d| *d <= max).collect()
}

pub fn load_readings(path: &Path, lax: bool) -> Result<(ReadingSet, IngestReport), IngestError> {
    read_readings(open(path)?, lax)
}

/// Parse reading CSV. The day grid is the full calendar range between the
/// first and last date present; slots run to the largest slot seen.
pub fn read_readings<R: Read>(input: R, lax: bool) -> Result<(ReadingSet, IngestReport), IngestError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let cols = column_map(rdr.headers()?, &["customer_id", "date", "slot", "kwh"], lax)?;
    let mut raw: HashMap<(String, NaiveDate, usize), f64> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = field(&rec, cols[0], line, "customer_id")?.to_string();
        if id.is_empty() {
            return Err(IngestError::Malformed { line, message: "empty customer_id".into() });
        }
        let date = parse_date(field(&rec, cols[1], line, "date")?, line)?;
        let slot = parse_slot(field(&rec, cols[2], line, "slot")?, line)?;
        let kwh = parse_value(field(&rec, cols[3], line, "kwh")?, line, "kwh")?;
        if kwh < 0.0 {
            return Err(IngestError::Malformed { line, message: format!("negative kwh {kwh}") });
        }
        if !seen.contains_key(&id) {
            seen.insert(id.clone(), order.len());
            order.push(id.clone());
        }
        let key = (id, date, slot);
        if raw.contains_key(&key) {
            return Err(IngestError::Duplicate { line, key: format!("{}, {}, {}", key.0, key.1, key.2) });
        }
        raw.insert(key, kwh);
        rows += 1;
    }
    if rows == 0 {
        return Err(IngestError::Empty);
    }
    let min = raw.keys().map(|k| k.1).min().unwrap();
    let max = raw.keys().map(|k| k.1).max().unwrap();
    let days = date_range(min, max);
    let h = raw.keys().map(|k| k.2).max().unwrap() + 1;
    let total = days.len() * h;

    let mut report = IngestReport { rows, ..Default::default() };
    let mut customers = Vec::new();
    let mut values = Vec::new();
    for id in order {
        let mut row: Vec<Option<f64>> = Vec::with_capacity(total);
        for day in &days {
            for s in 0..h {
                row.push(raw.get(&(id.clone(), *day, s)).copied());
            }
        }
        let missing = row.iter().filter(|v| v.is_none()).count();
        if missing as f64 > MAX_MISSING_FRACTION * total as f64 {
            log::warn!("dropping customer {id}: {missing} of {total} slots missing");
            report.dropped_customers.push(id);
            continue;
        }
        let overall: Vec<f64> = row.iter().flatten().copied().collect();
        let fallback = median(overall);
        let slot_medians: Vec<f64> = (0..h)
            .map(|s| {
                let v: Vec<f64> = (0..days.len()).filter_map(|d| row[d * h + s]).collect();
                if v.is_empty() { fallback } else { median(v) }
            })
            .collect();
        for (i, v) in row.into_iter().enumerate() {
            values.push(v.unwrap_or_else(|| {
                report.imputed_slots += 1;
                slot_medians[i % h]
            }));
        }
        customers.push(id);
    }
    if customers.is_empty() {
        return Err(IngestError::Invalid("every customer exceeded the missing-data limit".into()));
    }
    Ok((ReadingSet::new(customers, days, h, values)?, report))
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) }
}

pub fn load_tariffs(path: &Path, lax: bool) -> Result<BTreeMap<String, TariffSeries>, IngestError> {
    read_tariffs(open(path)?, lax)
}

/// Parse tariff CSV; every group must price every slot of every day it lists.
pub fn read_tariffs<R: Read>(input: R, lax: bool) -> Result<BTreeMap<String, TariffSeries>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let cols = column_map(rdr.headers()?, &["group", "date", "slot", "price_cents"], lax)?;
    let mut raw: BTreeMap<String, BTreeMap<NaiveDate, BTreeMap<usize, f64>>> = BTreeMap::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let group = field(&rec, cols[0], line, "group")?.to_string();
        let date = parse_date(field(&rec, cols[1], line, "date")?, line)?;
        let slot = parse_slot(field(&rec, cols[2], line, "slot")?, line)?;
        let price = parse_value(field(&rec, cols[3], line, "price_cents")?, line, "price_cents")?;
        if price <= 0.0 {
            return Err(IngestError::Malformed { line, message: format!("price {price} must be positive") });
        }
        let day = raw.entry(group.clone()).or_default().entry(date).or_default();
        if day.insert(slot, price).is_some() {
            return Err(IngestError::Duplicate { line, key: format!("{group}, {date}, {slot}") });
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(IngestError::Empty);
    }
    let mut out = BTreeMap::new();
    for (group, by_day) in raw {
        let h = by_day.values().flat_map(|s| s.keys()).max().unwrap() + 1;
        let mut days = Vec::new();
        let mut prices = Vec::new();
        for (date, slots) in by_day {
            if slots.len() != h {
                return Err(IngestError::Invalid(format!(
                    "tariff {group} on {date}: {} of {h} slots priced",
                    slots.len()
                )));
            }
            days.push(date);
            prices.push(slots.into_values().collect());
        }
        out.insert(group.clone(), TariffSeries::new(group, days, prices)?);
    }
    Ok(out)
}

pub fn load_customer_groups(path: &Path, lax: bool) -> Result<BTreeMap<String, String>, IngestError> {
    read_customer_groups(open(path)?, lax)
}

/// Parse the `customer_id,group` file assigning each customer to a tariff group.
pub fn read_customer_groups<R: Read>(input: R, lax: bool) -> Result<BTreeMap<String, String>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let cols = column_map(rdr.headers()?, &["customer_id", "group"], lax)?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = field(&rec, cols[0], line, "customer_id")?;
        let group = field(&rec, cols[1], line, "group")?;
        if id.is_empty() || group.is_empty() {
            return Err(IngestError::Malformed { line, message: "empty customer_id or group".into() });
        }
        if out.insert(id.to_string(), group.to_string()).is_some() {
            return Err(IngestError::Duplicate { line, key: id.to_string() });
        }
    }
    if out.is_empty() {
        return Err(IngestError::Empty);
    }
    Ok(out)
}

pub fn write_customer_groups<W: Write>(groups: &BTreeMap<String, String>, w: W) -> Result<(), IngestError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["customer_id", "group"])?;
    for (c, g) in groups {
        wr.write_record([c, g])?;
    }
    wr.flush().map_err(|e| IngestError::Io { path: "<writer>".into(), source: e })?;
    Ok(())
}

/// Change the number of slots per day, conserving daily energy: adjacent
/// slots are summed when downsampling and split evenly when upsampling.
pub fn resample(rs: &ReadingSet, target_slots: usize) -> Result<ReadingSet, IngestError> {
    let from = rs.slots_per_day;
    if target_slots == 0 || (from % target_slots != 0 && target_slots % from != 0) {
        return Err(IngestError::Resample { from, to: target_slots });
    }
    let days = rs.n_customers() * rs.n_days();
    let mut values = Vec::with_capacity(days * target_slots);
    for day in rs.values.chunks(from) {
        if from >= target_slots {
            let f = from / target_slots;
            values.extend(day.chunks(f).map(|c| c.iter().sum::<f64>()));
        } else {
            let f = target_slots / from;
            for v in day {
                values.extend(std::iter::repeat_n(v / f as f64, f));
            }
        }
    }
    Ok(ReadingSet { values, slots_per_day: target_slots, ..rs.clone() })
}

/// Divide each customer's readings by their mean per-slot consumption over
/// the whole window. Customers with zero consumption are dropped and
/// returned separately.
pub fn normalize(rs: &ReadingSet) -> (ReadingSet, Vec<String>) {
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    for c in 0..rs.n_customers() {
        if rs.customer_values(c).iter().sum::<f64>() > 0.0 {
            keep.push(c);
        } else {
            log::warn!("customer {} has zero consumption; not normalized", rs.customers[c]);
            dropped.push(rs.customers[c].clone());
        }
    }
    let mut out = rs.select_customers(&keep);
    let s = out.stride();
    for row in out.values.chunks_mut(s) {
        let mean = row.iter().sum::<f64>() / s as f64;
        // already unit mean: leave untouched so normalizing twice is exact
        if (mean - 1.0).abs() > 1e-13 {
            for v in row.iter_mut() {
                *v /= mean;
            }
        }
    }
    (out, dropped)
}

/// Normalized profiles flattened into one feature row per customer, with
/// `date/slot` labels.
pub fn normalize_profiles(rs: &ReadingSet) -> FeatureMatrix {
    let (n, _) = normalize(rs);
    let labels = n
        .days
        .iter()
        .flat_map(|d| (0..n.slots_per_day).map(move |s| format!("{d}/{s}")))
        .collect();
    let values = (0..n.n_customers()).map(|c| n.customer_values(c).to_vec()).collect();
    FeatureMatrix { customers: n.customers, values, attribute_labels: labels }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum AttributeMode {
    /// Every slot of `days` consecutive days starting at day `start`.
    HourlyWindow { start: usize, days: usize },
    /// Per-slot average over each calendar month present.
    MonthlyAverage,
    /// Per-day average over each group of slots.
    TouSegmentAverage { segments: Vec<Vec<usize>> },
}

impl AttributeMode {
    /// Conventional three-band split of a 24-slot day: night, shoulder, peak.
    pub fn default_tou() -> Self {
        let night: Vec<usize> = (0..8).chain(23..24).collect();
        let day: Vec<usize> = (8..17).chain(19..23).collect();
        let peak: Vec<usize> = (17..19).collect();
        AttributeMode::TouSegmentAverage { segments: vec![night, day, peak] }
    }
}

/// Clustering attributes from an already-normalized reading set.
pub fn build_attributes(rs: &ReadingSet, mode: &AttributeMode) -> Result<FeatureMatrix, IngestError> {
    let h = rs.slots_per_day;
    let n = rs.n_customers();
    let (labels, values): (Vec<String>, Vec<Vec<f64>>) = match mode {
        AttributeMode::HourlyWindow { start, days } => {
            if *days == 0 || start + days > rs.n_days() {
                return Err(IngestError::Invalid(format!(
                    "window of {days} days from day {start} exceeds the {} available",
                    rs.n_days()
                )));
            }
            let labels = rs.days[*start..start + days]
                .iter()
                .flat_map(|d| (0..h).map(move |s| format!("{d}/{s}")))
                .collect();
            let values = (0..n)
                .map(|c| rs.customer_values(c)[start * h..(start + days) * h].to_vec())
                .collect();
            (labels, values)
        }
        AttributeMode::MonthlyAverage => {
            let mut months: BTreeMap<(i32, u32), Vec<usize>> = BTreeMap::new();
            for (d, day) in rs.days.iter().enumerate() {
                months.entry((day.year(), day.month())).or_default().push(d);
            }
            let labels = months
                .keys()
                .flat_map(|(y, m)| (0..h).map(move |s| format!("{y:04}-{m:02}/{s}")))
                .collect();
            let values = (0..n)
                .map(|c| {
                    let row = rs.customer_values(c);
                    months
                        .values()
                        .flat_map(|ds| {
                            (0..h).map(move |s| ds.iter().map(|d| row[d * h + s]).sum::<f64>() / ds.len() as f64)
                        })
                        .collect()
                })
                .collect();
            (labels, values)
        }
        AttributeMode::TouSegmentAverage { segments } => {
            if segments.is_empty() || segments.iter().any(|s| s.is_empty() || s.iter().any(|&i| i >= h)) {
                return Err(IngestError::Invalid(format!(
                    "time-of-use segments must be nonempty slot lists below {h}"
                )));
            }
            let labels = rs
                .days
                .iter()
                .flat_map(|d| (0..segments.len()).map(move |k| format!("{d}/seg{k}")))
                .collect();
            let values = (0..n)
                .map(|c| {
                    let row = rs.customer_values(c);
                    (0..rs.n_days())
                        .flat_map(|d| {
                            segments
                                .iter()
                                .map(move |seg| seg.iter().map(|&s| row[d * h + s]).sum::<f64>() / seg.len() as f64)
                        })
                        .collect()
                })
                .collect();
            (labels, values)
        }
    };
    FeatureMatrix::new(rs.customers.clone(), values, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn csv_for(customers: &[&str], days: &[&str], slots: usize, skip: impl Fn(&str, usize) -> bool) -> String {
        let mut s = String::from("customer_id,date,slot,kwh\n");
        for c in customers {
            for (di, d) in days.iter().enumerate() {
                for h in 0..slots {
                    if !skip(c, di * slots + h) {
                        s += &format!("{c},{d},{h},{}\n", 0.5 + h as f64 * 0.01);
                    }
                }
            }
        }
        s
    }

    #[test]
    fn complete_file_passes_through() {
        let text = csv_for(&["a", "b"], &["2024-01-01", "2024-01-02"], 48, |_, _| false);
        let (rs, report) = read_readings(text.as_bytes(), false).unwrap();
        assert_eq!((rs.n_customers(), rs.n_days(), rs.slots_per_day), (2, 2, 48));
        assert_eq!(report.imputed_slots, 0);
        assert_eq!(rs.get(1, 1, 10), 0.6);
    }

    #[test]
    fn sparse_customer_dropped_and_gaps_imputed() {
        let days = ["2024-01-01", "2024-01-02", "2024-01-03"];
        // a misses 30%, b misses one slot
        let text = csv_for(&["a", "b"], &days, 10, |c, i| (c == "a" && i % 10 < 3) || (c == "b" && i == 12));
        let (rs, report) = read_readings(text.as_bytes(), false).unwrap();
        assert_eq!(rs.customers, vec!["b".to_string()]);
        assert_eq!(report.dropped_customers, vec!["a".to_string()]);
        assert_eq!(report.imputed_slots, 1);
        assert_eq!(rs.get(0, 1, 2), 0.52);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = "customer_id,date,slot,kwh\na,2024-01-01,0,1.0\na,2024-13-01,1,1.0\n";
        match read_readings(bad.as_bytes(), false) {
            Err(IngestError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let dup = "customer_id,date,slot,kwh\na,2024-01-01,0,1.0\na,2024-01-01,0,2.0\n";
        assert!(matches!(read_readings(dup.as_bytes(), false), Err(IngestError::Duplicate { line: 3, .. })));
        assert!(matches!(read_readings("customer_id,date,slot,kwh\n".as_bytes(), false), Err(IngestError::Empty)));
    }

    #[test]
    fn unknown_columns_need_lax() {
        let text = "customer_id,date,slot,kwh,meter\na,2024-01-01,0,1.0,x\n";
        assert!(matches!(read_readings(text.as_bytes(), false), Err(IngestError::Header(_))));
        assert_eq!(read_readings(text.as_bytes(), true).unwrap().0.n_customers(), 1);
        let missing = "customer_id,date,kwh\na,2024-01-01,1.0\n";
        assert!(matches!(read_readings(missing.as_bytes(), true), Err(IngestError::Header(_))));
    }

    #[test]
    fn tariffs_round_trip() {
        let mut map = BTreeMap::new();
        let t = TariffSeries::new("TA", vec![date("2024-01-01"), date("2024-01-02")], vec![vec![10.0, 12.5], vec![9.0, 11.0]])
            .unwrap();
        map.insert("TA".to_string(), t.clone());
        let mut buf = Vec::new();
        write_tariffs_csv(&map, &mut buf).unwrap();
        let back = read_tariffs(buf.as_slice(), false).unwrap();
        assert_eq!(back["TA"], t);
        let gap = "group,date,slot,price_cents\nTA,2024-01-01,0,10\nTA,2024-01-01,1,10\nTA,2024-01-02,0,10\n";
        assert!(read_tariffs(gap.as_bytes(), false).is_err());
        let zero = "group,date,slot,price_cents\nTA,2024-01-01,0,0\n";
        assert!(matches!(read_tariffs(zero.as_bytes(), false), Err(IngestError::Malformed { line: 2, .. })));
    }

    fn uniform(n: usize, d: usize, h: usize, v: f64) -> ReadingSet {
        let days = date_range(date("2024-01-01"), date("2024-01-01") + chrono::Days::new(d as u64 - 1));
        ReadingSet::new((0..n).map(|i| format!("c{i}")).collect(), days, h, vec![v; n * d * h]).unwrap()
    }

    #[test]
    fn resample_examples() {
        let rs = uniform(1, 1, 48, 0.5);
        let down = resample(&rs, 24).unwrap();
        assert_eq!(down.values, vec![1.0; 24]);
        let up = resample(&uniform(1, 1, 24, 1.0), 48).unwrap();
        assert_eq!(up.values, vec![0.5; 48]);
        assert!(matches!(resample(&rs, 7), Err(IngestError::Resample { .. })));
    }

    #[test]
    fn normalization_examples() {
        let fm = normalize_profiles(&uniform(2, 2, 3, 2.0));
        assert!(fm.values.iter().flatten().all(|v| *v == 1.0));
        let rs = ReadingSet::new(vec!["a".into()], vec![date("2024-01-01")], 2, vec![1.0, 3.0]).unwrap();
        assert_eq!(normalize_profiles(&rs).values[0], vec![0.5, 1.5]);
        let zero = ReadingSet::new(vec!["a".into(), "z".into()], vec![date("2024-01-01")], 2, vec![1.0, 3.0, 0.0, 0.0])
            .unwrap();
        let (n, dropped) = normalize(&zero);
        assert_eq!(n.customers, vec!["a".to_string()]);
        assert_eq!(dropped, vec!["z".to_string()]);
    }

    #[test]
    fn attribute_counts() {
        let dec_jan = ReadingSet {
            days: date_range(date("2023-12-01"), date("2024-01-31")),
            ..uniform(2, 62, 24, 1.0)
        };
        assert_eq!(build_attributes(&dec_jan, &AttributeMode::MonthlyAverage).unwrap().attribute_length(), 48);
        let week = uniform(2, 7, 24, 1.0);
        let fm = build_attributes(&week, &AttributeMode::HourlyWindow { start: 0, days: 7 }).unwrap();
        assert_eq!(fm.attribute_length(), 168);
        assert!(build_attributes(&week, &AttributeMode::HourlyWindow { start: 2, days: 7 }).is_err());
        let month = uniform(2, 30, 24, 1.0);
        assert_eq!(build_attributes(&month, &AttributeMode::default_tou()).unwrap().attribute_length(), 90);
    }

    fn arb_readings() -> impl Strategy<Value = ReadingSet> {
        (1usize..4, 1usize..5, prop::sample::select(vec![2usize, 4, 6, 12, 24, 48])).prop_flat_map(|(n, d, h)| {
            prop::collection::vec(0.0..5.0f64, n * d * h).prop_map(move |mut v| {
                // keep every customer's total positive
                for c in 0..n {
                    v[c * d * h] += 0.1;
                }
                ReadingSet::new(
                    (0..n).map(|i| format!("c{i}")).collect(),
                    date_range(date("2024-02-27"), date("2024-02-27") + chrono::Days::new(d as u64 - 1)),
                    h,
                    v,
                )
                .unwrap()
            })
        })
    }

    #[test]
    fn customer_groups_round_trip() {
        let text = "customer_id,group\nc1,TA\nc2,TB\n";
        let g = read_customer_groups(text.as_bytes(), false).unwrap();
        assert_eq!(g["c2"], "TB");
        let mut buf = Vec::new();
        write_customer_groups(&g, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), text);
        let dup = "customer_id,group\nc1,TA\nc1,TB\n";
        assert!(matches!(read_customer_groups(dup.as_bytes(), false), Err(IngestError::Duplicate { line: 3, .. })));
        assert!(matches!(read_customer_groups("customer_id,group\n".as_bytes(), false), Err(IngestError::Empty)));
    }

    proptest! {
        #[test]
        fn resampling_conserves_daily_energy(rs in arb_readings(), target in prop::sample::select(vec![1usize, 2, 3, 4, 6, 12, 24, 48, 96])) {
            let h = rs.slots_per_day;
            prop_assume!(h % target == 0 || target % h == 0);
            let out = resample(&rs, target).unwrap();
            for (a, b) in rs.values.chunks(h).zip(out.values.chunks(target)) {
                let (ta, tb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
                prop_assert!((ta - tb).abs() <= 1e-9 * ta.abs().max(1e-300));
            }
        }

        #[test]
        fn normalized_rows_have_unit_mean(rs in arb_readings()) {
            let fm = normalize_profiles(&rs);
            for row in &fm.values {
                let mean = row.iter().sum::<f64>() / row.len() as f64;
                prop_assert!((mean - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn normalization_is_idempotent(rs in arb_readings()) {
            let (once, _) = normalize(&rs);
            let (twice, _) = normalize(&once);
            for (a, b) in once.values.iter().zip(&twice.values) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn attribute_length_closed_form(days in 1usize..70, start_offset in 0i64..400) {
            let first = date("2023-01-01") + chrono::Days::new(start_offset as u64);
            let rs = ReadingSet {
                days: date_range(first, first + chrono::Days::new(days as u64 - 1)),
                ..uniform(1, days, 24, 1.0)
            };
            let months: BTreeSet<(i32, u32)> = rs.days.iter().map(|d| (d.year(), d.month())).collect();
            prop_assert_eq!(build_attributes(&rs, &AttributeMode::MonthlyAverage).unwrap().attribute_length(), 24 * months.len());
            prop_assert_eq!(build_attributes(&rs, &AttributeMode::HourlyWindow { start: 0, days }).unwrap().attribute_length(), 24 * days);
            prop_assert_eq!(build_attributes(&rs, &AttributeMode::default_tou()).unwrap().attribute_length(), 3 * days);
        }
    }
}
