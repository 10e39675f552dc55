//! Spatiotemporal panel: sites observed monthly before and after a universal
//! intervention, with a static dose per site.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AdtError, Result};
use crate::frame::{Column, FeatureFrame};

/// Feature name for the integer month index.
pub const FEATURE_MONTH: &str = "t";
/// Feature name for the site fixed effect (categorical).
pub const FEATURE_SITE: &str = "site";
/// Feature name for the province fixed effect (categorical).
pub const FEATURE_PROVINCE: &str = "province";
/// Feature name for the (quantile) dose.
pub const FEATURE_DOSE: &str = "dose";

#[derive(Debug, Clone, PartialEq)]
pub struct SiteRecord {
    pub site_id: String,
    pub lon: f64,
    pub lat: f64,
    pub province: String,
    /// Untransformed exposure index as read from the sites table.
    pub raw_dose: f64,
    /// Values aligned with [`PanelDataset::static_names`].
    pub static_covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Index into [`PanelDataset::sites`].
    pub site: usize,
    pub t: u32,
    pub y: f64,
    /// Values aligned with [`PanelDataset::time_names`].
    pub time_covariates: Vec<f64>,
}

/// Long-format panel. Immutable once validated.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub sites: Vec<SiteRecord>,
    pub static_names: Vec<String>,
    pub time_names: Vec<String>,
    pub observations: Vec<Observation>,
    /// Dose per site in [0, 1], aligned with `sites`.
    pub dose: Vec<f64>,
    /// First post-intervention month.
    pub t0: u32,
    /// Last month.
    pub t_max: u32,
    province_codes: Vec<u32>,
    n_provinces: u32,
}

impl PanelDataset {
    pub fn new(
        sites: Vec<SiteRecord>,
        static_names: Vec<String>,
        time_names: Vec<String>,
        observations: Vec<Observation>,
        dose: Vec<f64>,
        t0: u32,
        t_max: u32,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &sites {
            if !seen.insert(s.site_id.as_str()) {
                return Err(AdtError::DuplicateSite(s.site_id.clone()));
            }
            if !(-90.0..=90.0).contains(&s.lat) || !(-180.0..=180.0).contains(&s.lon) {
                return Err(AdtError::InvalidPanel(format!(
                    "site `{}` has invalid coordinates ({}, {})",
                    s.site_id, s.lon, s.lat
                )));
            }
            if s.static_covariates.len() != static_names.len() {
                return Err(AdtError::InvalidPanel(format!(
                    "site `{}` has {} static covariates, expected {}",
                    s.site_id,
                    s.static_covariates.len(),
                    static_names.len()
                )));
            }
            if !s.raw_dose.is_finite() || s.static_covariates.iter().any(|v| !v.is_finite()) {
                return Err(AdtError::InvalidPanel(format!(
                    "site `{}` has a non-finite value",
                    s.site_id
                )));
            }
        }
        if sites.is_empty() {
            return Err(AdtError::InvalidPanel("no sites".into()));
        }
        if dose.len() != sites.len() {
            return Err(AdtError::InvalidPanel("dose must be defined for every site".into()));
        }
        if dose.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(AdtError::InvalidPanel("dose values must lie in [0, 1]".into()));
        }
        if t0 < 2 || t0 > t_max {
            return Err(AdtError::InvalidPanel(format!(
                "treatment month T0={t0} must satisfy 1 < T0 <= T={t_max}"
            )));
        }
        let mut keys = HashSet::with_capacity(observations.len());
        for (row, o) in observations.iter().enumerate() {
            if o.site >= sites.len() {
                return Err(AdtError::UnknownSite(format!("#{}", o.site)));
            }
            if o.t < 1 || o.t > t_max {
                return Err(AdtError::InvalidPanel(format!(
                    "month {} outside 1..={t_max} (row {row})",
                    o.t
                )));
            }
            if !keys.insert((o.site, o.t)) {
                return Err(AdtError::DuplicateKey {
                    site: sites[o.site].site_id.clone(),
                    t: o.t,
                });
            }
            if !o.y.is_finite() {
                return Err(AdtError::NonFinite {
                    column: "y".into(),
                    row,
                });
            }
            if o.time_covariates.len() != time_names.len() {
                return Err(AdtError::InvalidPanel(format!(
                    "row {row} has {} time covariates, expected {}",
                    o.time_covariates.len(),
                    time_names.len()
                )));
            }
            if let Some(k) = o.time_covariates.iter().position(|v| !v.is_finite()) {
                return Err(AdtError::NonFinite {
                    column: time_names[k].clone(),
                    row,
                });
            }
        }
        let n_post = observations.iter().filter(|o| o.t >= t0).count();
        if n_post == 0 || n_post == observations.len() {
            return Err(AdtError::InvalidPanel(
                "both pre- and post-intervention periods must contain observations".into(),
            ));
        }

        let mut provinces: Vec<&str> = sites.iter().map(|s| s.province.as_str()).collect();
        provinces.sort_unstable();
        provinces.dedup();
        let lookup: HashMap<&str, u32> = provinces
            .iter()
            .enumerate()
            .map(|(i, p)| (*p, i as u32))
            .collect();
        let province_codes = sites.iter().map(|s| lookup[s.province.as_str()]).collect();
        let n_provinces = provinces.len() as u32;

        Ok(PanelDataset {
            sites,
            static_names,
            time_names,
            observations,
            dose,
            t0,
            t_max,
            province_codes,
            n_provinces,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn n_rows(&self) -> usize {
        self.observations.len()
    }

    #[inline]
    pub fn is_post(&self, row: usize) -> bool {
        self.observations[row].t >= self.t0
    }

    pub fn post_rows(&self) -> Vec<usize> {
        (0..self.n_rows()).filter(|&r| self.is_post(r)).collect()
    }

    pub fn pre_rows(&self) -> Vec<usize> {
        (0..self.n_rows()).filter(|&r| !self.is_post(r)).collect()
    }

    /// Row indices grouped by site.
    pub fn rows_by_site(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_sites()];
        for (r, o) in self.observations.iter().enumerate() {
            out[o.site].push(r);
        }
        out
    }

    /// Fraction of rows in the post-intervention period, the estimate of P(B=1).
    pub fn post_fraction(&self) -> f64 {
        self.post_rows().len() as f64 / self.n_rows() as f64
    }

    /// True when every site has exactly one row per month.
    pub fn is_balanced(&self) -> bool {
        let mut counts = vec![0u32; self.n_sites()];
        for o in &self.observations {
            counts[o.site] += 1;
        }
        counts.iter().all(|&c| c == self.t_max)
    }

    pub fn outcomes(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.y).collect()
    }

    /// Dose of the site owning `row`.
    #[inline]
    pub fn row_dose(&self, row: usize) -> f64 {
        self.dose[self.observations[row].site]
    }

    pub fn province_code(&self, site: usize) -> u32 {
        self.province_codes[site]
    }

    pub fn n_provinces(&self) -> u32 {
        self.n_provinces
    }

    /// Names accepted by [`PanelDataset::feature_frame`].
    pub fn available_features(&self) -> Vec<String> {
        let mut out = vec![
            FEATURE_MONTH.to_string(),
            FEATURE_SITE.to_string(),
            FEATURE_PROVINCE.to_string(),
            FEATURE_DOSE.to_string(),
        ];
        out.extend(self.static_names.iter().cloned());
        out.extend(self.time_names.iter().cloned());
        out
    }

    /// Build a feature table for the given rows. When `dose_override` is set,
    /// the `dose` feature takes that constant value in every row.
    pub fn feature_frame(
        &self,
        names: &[String],
        rows: &[usize],
        dose_override: Option<f64>,
    ) -> Result<FeatureFrame> {
        let mut columns = Vec::with_capacity(names.len());
        for name in names {
            let col = match name.as_str() {
                FEATURE_MONTH => Column::Numeric(
                    rows.iter()
                        .map(|&r| self.observations[r].t as f64)
                        .collect(),
                ),
                FEATURE_SITE => Column::Categorical {
                    codes: rows
                        .iter()
                        .map(|&r| self.observations[r].site as u32)
                        .collect(),
                    n_levels: self.n_sites() as u32,
                },
                FEATURE_PROVINCE => Column::Categorical {
                    codes: rows
                        .iter()
                        .map(|&r| self.province_codes[self.observations[r].site])
                        .collect(),
                    n_levels: self.n_provinces,
                },
                FEATURE_DOSE => Column::Numeric(match dose_override {
                    Some(d) => vec![d; rows.len()],
                    None => rows.iter().map(|&r| self.row_dose(r)).collect(),
                }),
                other => {
                    if let Some(k) = self.static_names.iter().position(|n| n == other) {
                        Column::Numeric(
                            rows.iter()
                                .map(|&r| {
                                    self.sites[self.observations[r].site].static_covariates[k]
                                })
                                .collect(),
                        )
                    } else if let Some(k) = self.time_names.iter().position(|n| n == other) {
                        Column::Numeric(
                            rows.iter()
                                .map(|&r| self.observations[r].time_covariates[k])
                                .collect(),
                        )
                    } else {
                        return Err(AdtError::Config(format!("unknown feature `{other}`")));
                    }
                }
            };
            columns.push(col);
        }
        FeatureFrame::new(names.to_vec(), columns)
    }

    /// Copy of the panel with new outcome values, one per row.
    pub fn with_outcomes(&self, y: &[f64]) -> Result<PanelDataset> {
        if y.len() != self.n_rows() {
            return Err(AdtError::InvalidInput("outcome length mismatch".into()));
        }
        let mut out = self.clone();
        for (o, &v) in out.observations.iter_mut().zip(y) {
            if !v.is_finite() {
                return Err(AdtError::InvalidInput("non-finite outcome".into()));
            }
            o.y = v;
        }
        Ok(out)
    }

    /// Pseudo-treatment panel for a pre-trends check: rows from the true
    /// post-period are dropped, months in `[t_a, t_b]` become the new post
    /// period, and months after `t_b` are dropped.
    pub fn pseudo_treatment(&self, t_a: u32, t_b: u32) -> Result<PanelDataset> {
        if t_a > t_b {
            return Err(AdtError::InvalidInput(format!(
                "pseudo window {t_a}:{t_b} is empty"
            )));
        }
        if t_b >= self.t0 {
            return Err(AdtError::InvalidInput(format!(
                "pseudo window {t_a}:{t_b} overlaps the post-intervention period starting at month {}",
                self.t0
            )));
        }
        if t_a < 2 {
            return Err(AdtError::InvalidInput(
                "pseudo window must leave at least one pre-window month".into(),
            ));
        }
        let observations = self
            .observations
            .iter()
            .filter(|o| o.t <= t_b)
            .cloned()
            .collect();
        PanelDataset::new(
            self.sites.clone(),
            self.static_names.clone(),
            self.time_names.clone(),
            observations,
            self.dose.clone(),
            t_a,
            t_b,
        )
    }

    pub fn distances(&self) -> DistanceMatrix {
        great_circle_distances(&self.sites)
    }
}

/// Average-rank quantile transform: rank / N, ties sharing their mean rank.
pub fn quantile_transform(raw: &[f64]) -> Result<Vec<f64>> {
    let n = raw.len();
    if n < 2 {
        return Err(AdtError::InvalidInput(
            "quantile transform needs at least two values".into(),
        ));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(AdtError::InvalidInput("non-finite raw dose".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| raw[a].total_cmp(&raw[b]));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && raw[order[j + 1]] == raw[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            out[k] = avg_rank / n as f64;
        }
        i = j + 1;
    }
    Ok(out)
}

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Haversine distance in km.
pub fn haversine_km(lon1: f64, lat1: f64, lon2: f64, lat2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

/// Symmetric matrix of pairwise great-circle distances (km).
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = f(i, j);
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        DistanceMatrix { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }
}

pub fn great_circle_distances(sites: &[SiteRecord]) -> DistanceMatrix {
    DistanceMatrix::from_fn(sites.len(), |i, j| {
        haversine_km(sites[i].lon, sites[i].lat, sites[j].lon, sites[j].lat)
    })
}

fn default_site_id() -> String {
    "site_id".into()
}
fn default_lon() -> String {
    "lon".into()
}
fn default_lat() -> String {
    "lat".into()
}
fn default_province() -> String {
    "province".into()
}
fn default_raw_dose() -> String {
    "dose".into()
}
fn default_t() -> String {
    "t".into()
}
fn default_y() -> String {
    "y".into()
}

/// How the raw dose column becomes the dose used by the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DoseTransform {
    #[default]
    Quantile,
    /// Raw values are used as-is and must already lie in [0, 1].
    Identity,
}

/// Column mapping for the sites table and the monthly panel table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelSchema {
    #[serde(default = "default_site_id")]
    pub site_id: String,
    #[serde(default = "default_lon")]
    pub lon: String,
    #[serde(default = "default_lat")]
    pub lat: String,
    #[serde(default = "default_province")]
    pub province: String,
    #[serde(default = "default_raw_dose")]
    pub raw_dose: String,
    #[serde(default)]
    pub static_covariates: Vec<String>,
    #[serde(default = "default_t")]
    pub t: String,
    #[serde(default = "default_y")]
    pub y: String,
    #[serde(default)]
    pub time_covariates: Vec<String>,
    pub t0: u32,
    /// Number of months; inferred from the data when absent.
    #[serde(default)]
    pub t_max: Option<u32>,
    #[serde(default)]
    pub dose_transform: DoseTransform,
}

impl PanelSchema {
    pub fn new(t0: u32) -> Self {
        PanelSchema {
            site_id: default_site_id(),
            lon: default_lon(),
            lat: default_lat(),
            province: default_province(),
            raw_dose: default_raw_dose(),
            static_covariates: Vec::new(),
            t: default_t(),
            y: default_y(),
            time_covariates: Vec::new(),
            t0,
            t_max: None,
            dose_transform: DoseTransform::Quantile,
        }
    }
}

/// Rows dropped during ingestion because a required field was empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub rejected_site_rows: usize,
    pub rejected_observation_rows: usize,
    /// Observations dropped because their site row was rejected.
    pub orphaned_observation_rows: usize,
}

impl LoadReport {
    pub fn total_rejected(&self) -> usize {
        self.rejected_site_rows + self.rejected_observation_rows + self.orphaned_observation_rows
    }
}

fn is_missing(field: &str) -> bool {
    let f = field.trim();
    f.is_empty() || f.eq_ignore_ascii_case("na")
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| AdtError::MissingColumn(name.to_string()))
}

fn parse_f64(field: &str, column: &str, row: usize) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| AdtError::Csv {
        path: Default::default(),
        message: format!("cannot parse `{field}` in column `{column}` (row {row})"),
    })?;
    if !v.is_finite() {
        return Err(AdtError::NonFinite {
            column: column.to_string(),
            row,
        });
    }
    Ok(v)
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| AdtError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn csv_err(path: &Path, e: csv::Error) -> AdtError {
    AdtError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Read and validate a panel from a sites table and a monthly observations table.
pub fn load_panel(
    sites_path: &Path,
    panel_path: &Path,
    schema: &PanelSchema,
) -> Result<(PanelDataset, LoadReport)> {
    let mut report = LoadReport::default();

    let mut reader = open_csv(sites_path)?;
    let headers = reader.headers().map_err(|e| csv_err(sites_path, e))?.clone();
    let i_id = column_index(&headers, &schema.site_id)?;
    let i_lon = column_index(&headers, &schema.lon)?;
    let i_lat = column_index(&headers, &schema.lat)?;
    let i_prov = column_index(&headers, &schema.province)?;
    let i_dose = column_index(&headers, &schema.raw_dose)?;
    let i_static = schema
        .static_covariates
        .iter()
        .map(|c| column_index(&headers, c))
        .collect::<Result<Vec<_>>>()?;

    let mut sites = Vec::new();
    let mut rejected_ids = HashSet::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(sites_path, e))?;
        let required = [i_id, i_lon, i_lat, i_prov, i_dose]
            .into_iter()
            .chain(i_static.iter().copied());
        let mut missing = false;
        for i in required {
            if rec.get(i).map_or(true, is_missing) {
                missing = true;
            }
        }
        if missing {
            report.rejected_site_rows += 1;
            if let Some(id) = rec.get(i_id).filter(|f| !is_missing(f)) {
                rejected_ids.insert(id.to_string());
            }
            continue;
        }
        let static_covariates = i_static
            .iter()
            .zip(&schema.static_covariates)
            .map(|(&i, name)| parse_f64(&rec[i], name, row))
            .collect::<Result<Vec<_>>>()?;
        sites.push(SiteRecord {
            site_id: rec[i_id].to_string(),
            lon: parse_f64(&rec[i_lon], &schema.lon, row)?,
            lat: parse_f64(&rec[i_lat], &schema.lat, row)?,
            province: rec[i_prov].to_string(),
            raw_dose: parse_f64(&rec[i_dose], &schema.raw_dose, row)?,
            static_covariates,
        });
    }
    let mut index = HashMap::with_capacity(sites.len());
    for (k, s) in sites.iter().enumerate() {
        if index.insert(s.site_id.clone(), k).is_some() {
            return Err(AdtError::DuplicateSite(s.site_id.clone()));
        }
    }

    let mut reader = open_csv(panel_path)?;
    let headers = reader.headers().map_err(|e| csv_err(panel_path, e))?.clone();
    let j_id = column_index(&headers, &schema.site_id)?;
    let j_t = column_index(&headers, &schema.t)?;
    let j_y = column_index(&headers, &schema.y)?;
    let j_time = schema
        .time_covariates
        .iter()
        .map(|c| column_index(&headers, c))
        .collect::<Result<Vec<_>>>()?;

    let mut observations = Vec::new();
    let mut keys = HashSet::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(panel_path, e))?;
        let required = [j_id, j_t, j_y].into_iter().chain(j_time.iter().copied());
        if required.clone().any(|i| rec.get(i).map_or(true, is_missing)) {
            report.rejected_observation_rows += 1;
            continue;
        }
        let id = &rec[j_id];
        let site = match index.get(id) {
            Some(&s) => s,
            None if rejected_ids.contains(id) => {
                report.orphaned_observation_rows += 1;
                continue;
            }
            None => return Err(AdtError::UnknownSite(id.to_string())),
        };
        let t: u32 = rec[j_t].trim().parse().map_err(|_| AdtError::Csv {
            path: panel_path.to_path_buf(),
            message: format!("month `{}` is not a positive integer (row {row})", &rec[j_t]),
        })?;
        if !keys.insert((site, t)) {
            return Err(AdtError::DuplicateKey {
                site: id.to_string(),
                t,
            });
        }
        let time_covariates = j_time
            .iter()
            .zip(&schema.time_covariates)
            .map(|(&i, name)| parse_f64(&rec[i], name, row))
            .collect::<Result<Vec<_>>>()?;
        observations.push(Observation {
            site,
            t,
            y: parse_f64(&rec[j_y], &schema.y, row)?,
            time_covariates,
        });
    }
    if report.total_rejected() > 0 {
        log::warn!(
            "rejected {} site rows and {} observation rows with missing fields ({} observations of rejected sites dropped)",
            report.rejected_site_rows,
            report.rejected_observation_rows,
            report.orphaned_observation_rows
        );
    }

    let t_max = schema
        .t_max
        .unwrap_or_else(|| observations.iter().map(|o| o.t).max().unwrap_or(0));
    let raw: Vec<f64> = sites.iter().map(|s| s.raw_dose).collect();
    let dose = match schema.dose_transform {
        DoseTransform::Quantile => quantile_transform(&raw)?,
        DoseTransform::Identity => raw,
    };
    let panel = PanelDataset::new(
        sites,
        schema.static_covariates.clone(),
        schema.time_covariates.clone(),
        observations,
        dose,
        schema.t0,
        t_max,
    )?;
    Ok((panel, report))
}

/// Write the panel back out as a sites table and an observations table using
/// the schema's column names. Floats use shortest round-trip formatting, so
/// reloading reproduces the panel exactly.
pub fn write_panel(
    panel: &PanelDataset,
    sites_path: &Path,
    panel_path: &Path,
    schema: &PanelSchema,
) -> Result<()> {
    let mut w = csv::Writer::from_path(sites_path).map_err(|e| csv_err(sites_path, e))?;
    let mut header = vec![
        schema.site_id.clone(),
        schema.lon.clone(),
        schema.lat.clone(),
        schema.province.clone(),
        schema.raw_dose.clone(),
    ];
    header.extend(panel.static_names.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(sites_path, e))?;
    for s in &panel.sites {
        let mut rec = vec![
            s.site_id.clone(),
            s.lon.to_string(),
            s.lat.to_string(),
            s.province.clone(),
            s.raw_dose.to_string(),
        ];
        rec.extend(s.static_covariates.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(sites_path, e))?;
    }
    w.flush().map_err(|e| AdtError::io(sites_path, e))?;

    let mut w = csv::Writer::from_path(panel_path).map_err(|e| csv_err(panel_path, e))?;
    let mut header = vec![schema.site_id.clone(), schema.t.clone(), schema.y.clone()];
    header.extend(panel.time_names.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(panel_path, e))?;
    for o in &panel.observations {
        let mut rec = vec![
            panel.sites[o.site].site_id.clone(),
            o.t.to_string(),
            o.y.to_string(),
        ];
        rec.extend(o.time_covariates.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(panel_path, e))?;
    }
    w.flush().map_err(|e| AdtError::io(panel_path, e))?;
    Ok(())
}

/// Per-site lookup of site ids to indices.
pub fn site_index(panel: &PanelDataset) -> BTreeMap<String, usize> {
    panel
        .sites
        .iter()
        .enumerate()
        .map(|(i, s)| (s.site_id.clone(), i))
        .collect()
}
