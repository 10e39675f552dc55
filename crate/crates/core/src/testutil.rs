//! Fixtures shared by unit tests.

use rand::Rng as _;

use crate::panel::{Observation, PanelDataset, SiteRecord};

/// Panel with one static covariate `x`, one monthly covariate `z`, and the
/// dose and outcome supplied by closures.
pub fn synthetic_panel(
    n_sites: usize,
    t_max: u32,
    t0: u32,
    seed: u64,
    dose_of: impl Fn(f64, &mut crate::rng::Rng) -> f64,
    y_of: impl Fn(f64, f64, f64, bool, &mut crate::rng::Rng) -> f64,
) -> PanelDataset {
    let mut rng = crate::rng::substream(seed, &[]);
    let mut sites = Vec::new();
    let mut dose = Vec::new();
    for i in 0..n_sites {
        let x: f64 = rng.gen::<f64>() * 2.0 - 1.0;
        dose.push(dose_of(x, &mut rng).clamp(0.0, 1.0));
        sites.push(SiteRecord {
            site_id: format!("s{i}"),
            lon: 100.0 + rng.gen::<f64>() * 5.0,
            lat: -5.0 + rng.gen::<f64>() * 3.0,
            province: format!("p{}", i % 4),
            raw_dose: 0.0,
            static_covariates: vec![x],
        });
    }
    let mut obs = Vec::new();
    for (i, s) in sites.iter().enumerate() {
        for t in 1..=t_max {
            let z: f64 = rng.gen();
            let y = y_of(s.static_covariates[0], dose[i], z, t >= t0, &mut rng);
            obs.push(Observation {
                site: i,
                t,
                y,
                time_covariates: vec![z],
            });
        }
    }
    PanelDataset::new(sites, vec!["x".into()], vec!["z".into()], obs, dose, t0, t_max).unwrap()
}
