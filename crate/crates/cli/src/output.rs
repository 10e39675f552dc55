//! CSV tables and plots written by the commands. Floats use Rust's shortest
//! round-trip formatting, so equal values always produce equal bytes.

use std::path::Path;

use adt_core::bootstrap::BootstrapDraws;
use adt_core::estimator::AdtCurve;
use adt_core::sim::{Method, MetricsTable, ReplicateRecord, ScenarioResult};
use adt_core::variogram::{Correlation, CorrelationModel, EmpiricalVariogram};

use crate::svg::{Band, Mark, Plot, Series, PALETTE};
use crate::{CliError, CliResult};

pub const CURVE_FILE: &str = "adt_curve.csv";
pub const DRAWS_FILE: &str = "bootstrap_draws.csv";
pub const VARIOGRAM_FILE: &str = "variogram.csv";
pub const FIT_FILE: &str = "correlation_fit.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";

fn table(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<()> {
    let csv_err = |e: csv::Error| CliError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// One row per grid point: `delta, psi, psi_d, psi_0, ci_lo, ci_hi`. The
/// interval columns are empty when no bootstrap ran.
pub fn write_curve(path: &Path, curve: &AdtCurve) -> CliResult<()> {
    let rows = (0..curve.delta.len()).map(|k| {
        vec![
            curve.delta[k].to_string(),
            curve.psi[k].to_string(),
            curve.psi_d[k].to_string(),
            curve.psi_0.to_string(),
            opt(curve.ci_lo.as_ref().map(|v| v[k])),
            opt(curve.ci_hi.as_ref().map(|v| v[k])),
        ]
    });
    table(path, &["delta", "psi", "psi_d", "psi_0", "ci_lo", "ci_hi"], rows)
}

/// Long format: one row per successful replicate and grid point.
pub fn write_draws(path: &Path, delta: &[f64], draws: &BootstrapDraws) -> CliResult<()> {
    let rows = draws.draws.iter().enumerate().flat_map(|(r, psi)| {
        delta
            .iter()
            .zip(psi)
            .map(move |(d, p)| vec![r.to_string(), d.to_string(), p.to_string()])
    });
    table(path, &["draw", "delta", "psi"], rows)
}

pub fn write_variogram(path: &Path, v: &EmpiricalVariogram) -> CliResult<()> {
    let rows = (0..v.bins.len()).map(|k| vec![v.bins[k].to_string(), v.gamma[k].to_string(), v.counts[k].to_string()]);
    table(path, &["distance_km", "gamma", "pairs"], rows)
}

/// Named parameters of a correlation function, in a fixed column order.
pub fn correlation_params(c: &Correlation) -> [Option<f64>; 5] {
    match *c {
        Correlation::Exponential { range } | Correlation::Linear { range } | Correlation::Spherical { range } => {
            [Some(range), None, None, None, None]
        }
        Correlation::Matern { range, smoothness } => [Some(range), Some(smoothness), None, None, None],
        Correlation::Power { scale, exponent, sill } => [None, None, Some(scale), Some(exponent), Some(sill)],
    }
}

/// Fitted families best first, with the one used for the weights flagged.
/// A fixed correlation with no fits is written as a single row with empty
/// fit statistics.
pub fn write_fits(path: &Path, fits: &[CorrelationModel], chosen: &Correlation) -> CliResult<()> {
    let row = |c: &Correlation, rank: String, rmse: String, sigma2: String| {
        let mut r = vec![c.family().name().to_string(), rank, rmse, sigma2];
        r.extend(correlation_params(c).into_iter().map(opt));
        r.push((c == chosen).to_string());
        r
    };
    let mut rows: Vec<Vec<String>> = fits
        .iter()
        .enumerate()
        .map(|(i, m)| row(&m.correlation, (i + 1).to_string(), m.rmse.to_string(), m.sigma2.to_string()))
        .collect();
    if !fits.iter().any(|m| &m.correlation == chosen) {
        rows.push(row(chosen, String::new(), String::new(), String::new()));
    }
    table(
        path,
        &["family", "rank", "rmse", "sigma2", "range_km", "smoothness", "scale", "exponent", "sill", "chosen"],
        rows,
    )
}

pub fn write_metrics(path: &Path, truth: &[f64], m: &MetricsTable) -> CliResult<()> {
    let rows = (0..m.delta.len()).map(|k| {
        vec![
            m.delta[k].to_string(),
            truth[k].to_string(),
            m.bias[k].to_string(),
            m.mae[k].to_string(),
            m.coverage[k].to_string(),
            m.width[k].to_string(),
            m.debiased_coverage[k].to_string(),
        ]
    });
    table(
        path,
        &["delta", "truth", "bias", "mae", "coverage", "width", "debiased_coverage"],
        rows,
    )
}

pub const SUMMARY_HEADER: [&str; 10] = [
    "scenario",
    "method",
    "mean_coverage",
    "min_coverage",
    "tail_coverage",
    "debiased_tail_coverage",
    "mean_width",
    "mean_mae",
    "estimates",
    "intervals",
];

pub fn summary_row(scenario: &str, m: &MetricsTable) -> Vec<String> {
    vec![
        scenario.to_string(),
        m.method.name().to_string(),
        m.mean_coverage().to_string(),
        m.min_coverage().to_string(),
        m.tail_coverage().to_string(),
        m.debiased_tail_coverage().to_string(),
        m.mean_width().to_string(),
        m.mean_mae().to_string(),
        m.n_estimates.to_string(),
        m.n_intervals.to_string(),
    ]
}

/// Scenario-level metrics, one row per scenario and method.
pub fn write_summary(path: &Path, results: &[&ScenarioResult]) -> CliResult<()> {
    let rows = results.iter().flat_map(|r| {
        [Method::Spatial, Method::NonSpatial]
            .into_iter()
            .map(|m| summary_row(&r.scenario.name, r.metrics(m)))
    });
    table(path, &SUMMARY_HEADER, rows)
}

pub fn write_replicates(path: &Path, records: &[ReplicateRecord]) -> CliResult<()> {
    let rows = records.iter().map(|r| {
        vec![
            r.replicate.to_string(),
            opt(r.bandwidth),
            r.family.clone().unwrap_or_default(),
            r.spatial.is_some().to_string(),
            r.non_spatial.is_some().to_string(),
            r.errors.join("; "),
        ]
    });
    table(
        path,
        &["replicate", "bandwidth", "family", "spatial_ci", "non_spatial_ci", "errors"],
        rows,
    )
}

/// Point estimate with its pointwise band and a zero reference line.
pub fn curve_plot(curve: &AdtCurve, title: &str) -> Plot {
    let mut plot = Plot {
        title: title.to_string(),
        x_label: "dose quantile".into(),
        y_label: "ADT".into(),
        hlines: vec![0.0],
        ..Plot::default()
    };
    if let (Some(lo), Some(hi)) = (&curve.ci_lo, &curve.ci_hi) {
        plot.bands.push(Band {
            name: "95% CI".into(),
            x: curve.delta.clone(),
            lo: lo.clone(),
            hi: hi.clone(),
            color: PALETTE[0],
        });
    }
    plot.series.push(Series {
        name: "estimate".into(),
        x: curve.delta.clone(),
        y: curve.psi.clone(),
        color: PALETTE[0],
        mark: Mark::Line,
    });
    plot
}

/// Empirical semivariances with each fitted model averaged over its bins.
pub fn variogram_plot(v: &EmpiricalVariogram, fits: &[CorrelationModel]) -> Plot {
    let mut plot = Plot {
        title: "Residual variogram".into(),
        x_label: "distance (km)".into(),
        y_label: "semivariance".into(),
        ..Plot::default()
    };
    plot.series.push(Series {
        name: "empirical".into(),
        x: v.bins.clone(),
        y: v.gamma.clone(),
        color: "#000000",
        mark: Mark::Points,
    });
    for (i, m) in fits.iter().enumerate() {
        let y = (0..v.bins.len())
            .map(|k| v.bin_model(k, |d| m.sigma2 * (1.0 - m.correlation.corr(d))))
            .collect();
        plot.series.push(Series {
            name: m.correlation.family().name().into(),
            x: v.bins.clone(),
            y,
            color: PALETTE[i % PALETTE.len()],
            mark: if i == 0 { Mark::Line } else { Mark::DashedLine },
        });
    }
    plot
}

/// Pointwise coverage of both methods against the nominal level.
pub fn coverage_plot(r: &ScenarioResult) -> Plot {
    Plot {
        title: format!("Coverage, scenario {}", r.scenario.name),
        x_label: "dose quantile".into(),
        y_label: "coverage".into(),
        hlines: vec![0.95],
        bands: Vec::new(),
        series: [Method::Spatial, Method::NonSpatial]
            .into_iter()
            .enumerate()
            .map(|(i, m)| Series {
                name: m.name().replace('_', "-"),
                x: r.delta.clone(),
                y: r.metrics(m).coverage.clone(),
                color: PALETTE[i],
                mark: Mark::Line,
            })
            .collect(),
    }
}

/// True curve against the mean estimate.
pub fn truth_plot(r: &ScenarioResult) -> Plot {
    let mean: Vec<f64> = r.truth.iter().zip(&r.spatial.bias).map(|(t, b)| t + b).collect();
    Plot {
        title: format!("True and mean estimated curve, scenario {}", r.scenario.name),
        x_label: "dose quantile".into(),
        y_label: "ADT".into(),
        hlines: vec![0.0],
        bands: Vec::new(),
        series: vec![
            Series {
                name: "truth".into(),
                x: r.delta.clone(),
                y: r.truth.clone(),
                color: "#000000",
                mark: Mark::Line,
            },
            Series {
                name: "mean estimate".into(),
                x: r.delta.clone(),
                y: mean,
                color: PALETTE[1],
                mark: Mark::DashedLine,
            },
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_table_has_empty_intervals_without_bootstrap() {
        let dir = tempfile::tempdir().unwrap();
        let curve = AdtCurve {
            delta: vec![0.0, 1.0],
            psi: vec![0.5, 1.5],
            psi_d: vec![1.0, 2.0],
            psi_0: 0.5,
            bandwidth: 0.1,
            ci_lo: None,
            ci_hi: None,
            draws: Vec::new(),
        };
        let p = dir.path().join("c.csv");
        write_curve(&p, &curve).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "delta,psi,psi_d,psi_0,ci_lo,ci_hi\n0,0.5,1,0.5,,\n1,1.5,2,0.5,,\n");
    }

    #[test]
    fn fixed_correlation_gets_its_own_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        let chosen = Correlation::Matern {
            range: 3.85,
            smoothness: 5.0,
        };
        write_fits(&p, &[], &chosen).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "matern,,,,3.85,5,,,,true");
    }
}
