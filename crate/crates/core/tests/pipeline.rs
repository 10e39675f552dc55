use adt_core::bootstrap::{bootstrap_adt, BootstrapConfig};
use adt_core::estimator::{estimate_adt, estimate_pretrends, summarize_curve};
use adt_core::panel::{load_panel, write_panel, PanelDataset, PanelSchema};
use adt_core::sim::{
    generate_covariates, mean_surface, sim_estimator_config, simulate_outcome, true_adt, DgpCoefficients, NoiseField,
    SimScenario,
};

const SEED: u64 = 515;

fn simulated_panel() -> PanelDataset {
    let skeleton = generate_covariates(40, 16, SEED).unwrap();
    let (mu, _) = mean_surface(&skeleton, &DgpCoefficients::default()).unwrap();
    let scenario = SimScenario::by_name("s1").unwrap();
    let field = NoiseField::new(&skeleton.distances(), scenario.range_km).unwrap();
    simulate_outcome(&skeleton, &mu, &field, &scenario, SEED).unwrap()
}

fn schema(t0: u32) -> PanelSchema {
    toml::from_str(&format!(
        "t0 = {t0}\nstatic_covariates = [\"pop\"]\ntime_covariates = [\"temp\", \"precip\", \"fires\", \"time\"]"
    ))
    .unwrap()
}

#[test]
fn csv_round_trip_then_estimate_and_bootstrap() {
    let panel = simulated_panel();
    let dir = tempfile::tempdir().unwrap();
    let (sites, obs) = (dir.path().join("sites.csv"), dir.path().join("panel.csv"));
    write_panel(&panel, &sites, &obs, &schema(panel.t0)).unwrap();
    let (loaded, report) = load_panel(&sites, &obs, &schema(panel.t0)).unwrap();
    assert_eq!(report.total_rejected(), 0);
    assert_eq!(loaded.outcomes(), panel.outcomes());
    assert_eq!(loaded.dose, panel.dose);

    let cfg = sim_estimator_config(10, 5);
    let point = estimate_adt(&loaded, &cfg, 1).unwrap();
    let c = &point.curve;
    assert_eq!(c.delta.len(), 101);
    for k in 0..c.delta.len() {
        assert!((c.psi[k] - (c.psi_d[k] - c.psi_0)).abs() < 1e-12);
    }
    let truth = true_adt(&loaded, &DgpCoefficients::default(), &c.delta).unwrap();
    let interior_mae = (10..=90).map(|k| (c.psi[k] - truth[k]).abs()).sum::<f64>() / 81.0;
    assert!(interior_mae < 3.0, "interior MAE {interior_mae}");

    let boot_cfg = BootstrapConfig {
        n_boot: 12,
        spatial: false,
        ..BootstrapConfig::default()
    };
    let boot = bootstrap_adt(&loaded, &point, &boot_cfg, 2).unwrap();
    let (lo, hi) = (boot.curve.ci_lo.as_ref().unwrap(), boot.curve.ci_hi.as_ref().unwrap());
    assert!(lo.iter().zip(hi).all(|(a, b)| a <= b));
    assert_eq!(boot.curve.psi, c.psi);
    let again = bootstrap_adt(&loaded, &point, &boot_cfg, 2).unwrap();
    assert_eq!(again.curve.ci_lo, boot.curve.ci_lo);

    let s = summarize_curve(&boot.curve, &loaded);
    assert!(s.average_effect.is_finite());
}

#[test]
fn pretrends_run_only_sees_pre_period_rows() {
    let panel = simulated_panel();
    let cfg = sim_estimator_config(10, 5);
    let (pseudo, point) = estimate_pretrends(&panel, &cfg, (9, 10), 3).unwrap();
    assert_eq!(pseudo.t0, 9);
    assert_eq!(pseudo.t_max, 10);
    assert!(pseudo.observations.iter().all(|o| o.t < panel.t0));
    assert_eq!(point.curve.delta.len(), 101);
    assert!(estimate_pretrends(&panel, &cfg, (9, panel.t0), 3).is_err());
}
