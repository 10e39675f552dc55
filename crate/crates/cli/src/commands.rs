use std::path::{Path, PathBuf};

use adt_core::bootstrap::{bootstrap_adt, spatial_diagnostics, BootstrapConfig, BootstrapResult, SpatialDiagnostics};
use adt_core::estimator::{estimate_adt, estimate_pretrends, summarize_curve, CurveSummary, PointEstimate};
use adt_core::panel::{load_panel, write_panel, LoadReport, PanelDataset, PanelSchema};
use adt_core::rng::derive_seed;
use adt_core::sim::{
    self, generate_covariates, mean_surface, simulate_outcome, CampaignConfig, DgpCoefficients, Method,
    NoiseField, ScenarioResult, SimScale, SimScenario,
};
use adt_core::variogram::Correlation;
use serde::Serialize;

use crate::config::{check_window, RunConfig};
use crate::output::{self, CURVE_FILE, DRAWS_FILE, FIT_FILE, MANIFEST_FILE, VARIOGRAM_FILE};
use crate::{CliError, CliResult};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Seed labels for the two random stages of a run.
const LABEL_ESTIMATE: u64 = 1;
const LABEL_BOOTSTRAP: u64 = 2;

#[derive(Debug, Clone, Default)]
pub struct EstimateOptions {
    pub config: PathBuf,
    /// Overrides the configured pre-trends window.
    pub pretrends: Option<[u32; 2]>,
    /// Overrides the configured output directory.
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct EstimateOutcome {
    pub dir: PathBuf,
    pub point: PointEstimate,
    pub boot: BootstrapResult,
    pub summary: CurveSummary,
}

#[derive(Debug, Serialize)]
struct RunInfo {
    command: String,
    version: String,
    /// Derived seeds, hex encoded.
    estimation_seed: String,
    bootstrap_seed: String,
    sites: usize,
    rows: usize,
    post_rows: usize,
    rows_rejected: usize,
    bandwidth: f64,
    psi_0: f64,
    p_post: f64,
    ratio_cap: Option<f64>,
    bootstrap_requested: Option<usize>,
    bootstrap_retried: Option<usize>,
    bootstrap_failed: Option<usize>,
    outputs: Vec<String>,
    correlation: Option<Correlation>,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    run: RunInfo,
    summary: Option<CurveSummary>,
    config: &'a RunConfig,
}

fn hex(seed: u64) -> String {
    format!("{seed:#018x}")
}

/// Load, override and validate a configuration, then read its panel.
fn prepare(opts: &EstimateOptions) -> CliResult<(RunConfig, PanelDataset, LoadReport)> {
    let mut cfg = RunConfig::load(&opts.config)?;
    if let Some(w) = opts.pretrends {
        cfg.pretrends = Some(w);
    }
    if let Some(dir) = &opts.output {
        cfg.output_dir = absolute(dir)?;
    }
    cfg.validate()?;
    let (panel, report) = load_panel(&cfg.data.sites, &cfg.data.panel, &cfg.columns).map_err(CliError::Input)?;
    if report.total_rejected() > 0 {
        log::warn!(
            "dropped {} site rows and {} observation rows with missing values",
            report.rejected_site_rows,
            report.rejected_observation_rows + report.orphaned_observation_rows
        );
    }
    if let Some([a, b]) = cfg.pretrends {
        check_window(a, b, panel.t0)?;
    }
    log::info!(
        "loaded {} sites, {} rows, months 1..={} with t0 = {}",
        panel.n_sites(),
        panel.n_rows(),
        panel.t_max,
        panel.t0
    );
    Ok((cfg, panel, report))
}

fn absolute(p: &Path) -> CliResult<PathBuf> {
    if p.is_absolute() {
        return Ok(p.to_path_buf());
    }
    let cwd = std::env::current_dir().map_err(|e| CliError::io(Path::new("."), e))?;
    Ok(cwd.join(p))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Point estimate on the full panel, or on the pseudo-treatment panel when a
/// pre-trends window is set. Returns the panel the estimate refers to.
fn point_estimate(cfg: &RunConfig, panel: PanelDataset) -> CliResult<(PanelDataset, PointEstimate)> {
    let seed = derive_seed(cfg.seed, &[LABEL_ESTIMATE]);
    match cfg.pretrends {
        Some([a, b]) => {
            log::info!("pre-trends run on months {a}..={b}");
            Ok(estimate_pretrends(&panel, &cfg.estimator, (a, b), seed)?)
        }
        None => {
            let point = estimate_adt(&panel, &cfg.estimator, seed)?;
            Ok((panel, point))
        }
    }
}

/// Variogram diagnostics for display. Spatial runs reuse the bootstrap's;
/// otherwise they are computed with every configured family.
fn diagnostics_for_output(
    panel: &PanelDataset,
    point: &PointEstimate,
    cfg: &BootstrapConfig,
    boot: &BootstrapResult,
) -> Option<SpatialDiagnostics> {
    if let Some(d) = &boot.diagnostics {
        return Some(d.clone());
    }
    match spatial_diagnostics(panel, point, &panel.distances(), cfg) {
        Ok(d) => Some(d),
        Err(e) => {
            log::warn!("variogram diagnostics unavailable: {e}");
            None
        }
    }
}

fn write_diagnostics(dir: &Path, d: &SpatialDiagnostics, outputs: &mut Vec<String>) -> CliResult<()> {
    output::write_variogram(&dir.join(VARIOGRAM_FILE), &d.variogram)?;
    output::write_fits(&dir.join(FIT_FILE), &d.fits, &d.chosen)?;
    output::write_text(
        &dir.join("variogram.svg"),
        &output::variogram_plot(&d.variogram, &d.fits).render(),
    )?;
    outputs.extend([VARIOGRAM_FILE.into(), FIT_FILE.into(), "variogram.svg".into()]);
    Ok(())
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> CliResult<()> {
    let text = toml::to_string(manifest).map_err(|e| CliError::Config(format!("manifest serialization: {e}")))?;
    output::write_text(&dir.join(MANIFEST_FILE), &text)
}

fn run_info(command: &str, cfg: &RunConfig, panel: &PanelDataset, report: &LoadReport, point: &PointEstimate) -> RunInfo {
    RunInfo {
        command: command.into(),
        version: VERSION.into(),
        estimation_seed: hex(derive_seed(cfg.seed, &[LABEL_ESTIMATE])),
        bootstrap_seed: hex(derive_seed(cfg.seed, &[LABEL_BOOTSTRAP])),
        sites: panel.n_sites(),
        rows: panel.n_rows(),
        post_rows: point.pseudo.post_rows.len(),
        rows_rejected: report.total_rejected(),
        bandwidth: point.curve.bandwidth,
        psi_0: point.curve.psi_0,
        p_post: point.pseudo.p_post,
        ratio_cap: point.pseudo.ratio_cap,
        bootstrap_requested: None,
        bootstrap_retried: None,
        bootstrap_failed: None,
        outputs: Vec::new(),
        correlation: None,
    }
}

/// Estimate the curve, bootstrap its intervals and write the run directory.
pub fn cmd_estimate(opts: &EstimateOptions) -> CliResult<EstimateOutcome> {
    let (cfg, panel, report) = prepare(opts)?;
    let (panel, point) = point_estimate(&cfg, panel)?;
    log::info!("bandwidth {:.4}, psi_0 {:.4}", point.curve.bandwidth, point.curve.psi_0);
    let boot = bootstrap_adt(&panel, &point, &cfg.bootstrap, derive_seed(cfg.seed, &[LABEL_BOOTSTRAP]))?;
    let summary = summarize_curve(&boot.curve, &panel);

    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    output::write_curve(&dir.join(CURVE_FILE), &boot.curve)?;
    output::write_draws(&dir.join(DRAWS_FILE), &boot.curve.delta, &boot.draws)?;
    let title = match cfg.pretrends {
        Some([a, b]) => format!("Pre-trends estimate, months {a}-{b}"),
        None => "Average dose effect on the treated".to_string(),
    };
    output::write_text(&dir.join("adt_curve.svg"), &output::curve_plot(&boot.curve, &title).render())?;
    let mut outputs = vec![CURVE_FILE.to_string(), DRAWS_FILE.into(), "adt_curve.svg".into()];
    let diag = diagnostics_for_output(&panel, &point, &cfg.bootstrap, &boot);
    if let Some(d) = &diag {
        write_diagnostics(&dir, d, &mut outputs)?;
    }

    let command = if cfg.pretrends.is_some() { "pretrends" } else { "estimate" };
    let mut run = run_info(command, &cfg, &panel, &report, &point);
    run.bootstrap_requested = Some(boot.draws.requested);
    run.bootstrap_retried = Some(boot.draws.retried);
    run.bootstrap_failed = Some(boot.draws.failed);
    run.correlation = boot.diagnostics.as_ref().map(|d| d.chosen);
    outputs.push(MANIFEST_FILE.into());
    run.outputs = outputs;
    write_manifest(
        &dir,
        &RunManifest {
            run,
            summary: Some(summary.clone()),
            config: &cfg,
        },
    )?;
    Ok(EstimateOutcome {
        dir,
        point,
        boot,
        summary,
    })
}

/// Empirical residual variogram and every configured family fit, without a
/// bootstrap.
pub fn cmd_variogram(opts: &EstimateOptions) -> CliResult<(PathBuf, SpatialDiagnostics)> {
    let (cfg, panel, report) = prepare(opts)?;
    let (panel, point) = point_estimate(&cfg, panel)?;
    let fit_cfg = BootstrapConfig {
        correlation: None,
        ..cfg.bootstrap.clone()
    };
    let diag = spatial_diagnostics(&panel, &point, &panel.distances(), &fit_cfg)?;
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    let mut outputs = Vec::new();
    write_diagnostics(&dir, &diag, &mut outputs)?;
    let mut run = run_info("variogram", &cfg, &panel, &report, &point);
    run.correlation = Some(diag.chosen);
    outputs.push(MANIFEST_FILE.into());
    run.outputs = outputs;
    write_manifest(
        &dir,
        &RunManifest {
            run,
            summary: None,
            config: &cfg,
        },
    )?;
    Ok((dir, diag))
}

#[derive(Debug, Clone)]
pub struct SimulateOptions {
    pub scenario: String,
    pub scale: SimScale,
    pub seed: u64,
    pub output: PathBuf,
    /// Second scenario run with the same seed for a side-by-side table.
    pub compare: Option<String>,
}

#[derive(Debug, Serialize)]
struct SimManifest<'a> {
    command: &'static str,
    version: &'static str,
    seed: u64,
    scenarios: Vec<&'a SimScenario>,
    campaign: &'a CampaignConfig,
}

/// Run a simulation scenario (and optionally a comparison scenario sharing
/// its seed) and write metric tables and plots.
pub fn cmd_simulate(opts: &SimulateOptions) -> CliResult<Vec<ScenarioResult>> {
    let config = |e: adt_core::AdtError| CliError::Config(e.to_string());
    let mut scenarios = vec![SimScenario::by_name(&opts.scenario).map_err(config)?];
    if let Some(c) = &opts.compare {
        scenarios.push(SimScenario::by_name(c).map_err(config)?);
    }
    let s = opts.scale;
    if s.n_replicates == 0 || s.n_boot == 0 || s.n_sites < 10 || s.n_months < 8 {
        return Err(CliError::Config(format!(
            "simulation needs positive replicate and bootstrap counts, at least 10 sites and 8 months, got {s:?}"
        )));
    }
    let campaign = CampaignConfig::new(opts.scale);
    let dir = &opts.output;
    create_dir(dir)?;

    let mut results = Vec::new();
    for sc in &scenarios {
        log::info!(
            "scenario {}: {} replicates of {} sites x {} months, {} bootstrap draws",
            sc.name,
            s.n_replicates,
            s.n_sites,
            s.n_months,
            s.n_boot
        );
        let r = sim::run_scenario(sc, &campaign, opts.seed)?;
        let sub = dir.join(&sc.name);
        create_dir(&sub)?;
        for m in [Method::Spatial, Method::NonSpatial] {
            output::write_metrics(&sub.join(format!("metrics_{}.csv", m.name())), &r.truth, r.metrics(m))?;
        }
        output::write_replicates(&sub.join("replicates.csv"), &r.records)?;
        output::write_text(&sub.join("coverage.svg"), &output::coverage_plot(&r).render())?;
        output::write_text(&sub.join("truth.svg"), &output::truth_plot(&r).render())?;
        for m in [Method::Spatial, Method::NonSpatial] {
            let t = r.metrics(m);
            log::info!(
                "{} {}: mean coverage {:.3}, mean width {:.3}, mean MAE {:.3}",
                sc.name,
                m.name(),
                t.mean_coverage(),
                t.mean_width(),
                t.mean_mae()
            );
        }
        results.push(r);
    }
    output::write_summary(&dir.join("summary.csv"), &results.iter().collect::<Vec<_>>())?;
    if let [a, b] = results.as_slice() {
        write_comparison(&dir.join("comparison.csv"), a, b)?;
    }
    let text = toml::to_string(&SimManifest {
        command: "simulate",
        version: VERSION,
        seed: opts.seed,
        scenarios: scenarios.iter().collect(),
        campaign: &campaign,
    })
    .map_err(|e| CliError::Config(format!("manifest serialization: {e}")))?;
    output::write_text(&dir.join(MANIFEST_FILE), &text)?;
    Ok(results)
}

/// Metric-by-metric comparison of two scenarios run with the same seed.
fn write_comparison(path: &Path, a: &ScenarioResult, b: &ScenarioResult) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, std::io::Error::other(e)))?;
    let err = |e: csv::Error| CliError::io(path, std::io::Error::other(e));
    let header = [
        "method".to_string(),
        "metric".into(),
        a.scenario.name.clone(),
        b.scenario.name.clone(),
        "ratio".into(),
    ];
    w.write_record(&header).map_err(err)?;
    for m in [Method::Spatial, Method::NonSpatial] {
        let (ta, tb) = (a.metrics(m), b.metrics(m));
        let rows = [
            ("mean_coverage", ta.mean_coverage(), tb.mean_coverage()),
            ("tail_coverage", ta.tail_coverage(), tb.tail_coverage()),
            ("mean_width", ta.mean_width(), tb.mean_width()),
            ("mean_mae", ta.mean_mae(), tb.mean_mae()),
        ];
        for (name, va, vb) in rows {
            w.write_record([
                m.name().to_string(),
                name.to_string(),
                va.to_string(),
                vb.to_string(),
                (va / vb).to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Demo panel size: 50 sites observed for 96 months, intervention from month
/// 73.
pub const DEMO_SITES: usize = 50;
pub const DEMO_MONTHS: u32 = 96;
const DEMO_SEED: u64 = 20_240_601;
pub const DEMO_CONFIG: &str = include_str!("../demo/demo.toml");

/// Write the bundled synthetic demo dataset and its run configuration.
pub fn cmd_demo_data(out: &Path) -> CliResult<()> {
    create_dir(out)?;
    let skeleton = generate_covariates(DEMO_SITES, DEMO_MONTHS, DEMO_SEED)?;
    let (mu, _) = mean_surface(&skeleton, &DgpCoefficients::default())?;
    let scenario = SimScenario::by_name("s1")?;
    let field = NoiseField::new(&skeleton.distances(), scenario.range_km)?;
    let panel = simulate_outcome(&skeleton, &mu, &field, &scenario, derive_seed(DEMO_SEED, &[1]))?;
    let mut schema = PanelSchema::new(panel.t0);
    schema.static_covariates = panel.static_names.clone();
    schema.time_covariates = panel.time_names.clone();
    write_panel(&panel, &out.join("sites.csv"), &out.join("panel.csv"), &schema)?;
    output::write_text(&out.join("demo.toml"), DEMO_CONFIG)
}
