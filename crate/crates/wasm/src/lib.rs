//! Browser bindings. Every export returns a JSON string; errors come back
//! as `{"error": "..."}` so the page can show them inline.

use memsgd::evolution::{run, RunOptions};
use memsgd::stability::{self, Memory1Point};
use memsgd::{build_power_law, PowerLawSpec, Recording, Schedule, SeParams, Spectrum};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Curve {
    name: String,
    times: Vec<u64>,
    values: Vec<f64>,
    diverged_at: Option<u64>,
}

#[derive(Serialize)]
struct Curves {
    initial_loss: f64,
    curves: Vec<Curve>,
}

fn to_json<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

fn spectrum(nu: f64, zeta: f64, size: usize) -> Result<Spectrum, String> {
    build_power_law(&PowerLawSpec::new(nu, zeta, size)).map_err(|e| e.to_string())
}

/// Expected loss of SGD, AM1 and Jacobi heavy ball on a power-law problem
/// with batch size `batch` (0 means full batch).
#[wasm_bindgen]
pub fn loss_curves(nu: f64, zeta: f64, size: usize, batch: u32, horizon: u32) -> String {
    to_json(loss_curves_impl(nu, zeta, size, batch, horizon as u64))
}

fn loss_curves_impl(nu: f64, zeta: f64, size: usize, batch: u32, horizon: u64) -> Result<Curves, String> {
    if !(1..=200_000).contains(&horizon) || !(1..=5000).contains(&size) {
        return Err("horizon must be in [1, 200000] and size in [1, 5000]".into());
    }
    let s = spectrum(nu, zeta, size)?;
    let se = if batch == 0 { SeParams::noiseless() } else { SeParams::gaussian(batch) };
    let opts = RunOptions { record: Recording::Geometric { ratio: 1.05 } };
    let schedules = [
        ("SGD", Schedule::gd(0.25)),
        ("AM1", Schedule::Am1(memsgd::Am1::benchmark(nu))),
        ("Jacobi HB", Schedule::jacobi_hb(0.25)),
    ];
    let curves = schedules
        .into_iter()
        .map(|(name, sched)| {
            let t = run(&s, &sched, &se, horizon, opts);
            Curve { name: name.into(), times: t.times, values: t.values, diverged_at: t.diverged_at }
        })
        .collect();
    Ok(Curves { initial_loss: s.initial_loss(), curves })
}

#[derive(Serialize)]
struct StabilityMap {
    deltas: Vec<f64>,
    alpha_effs: Vec<f64>,
    /// Row-major over `deltas`; `null` where unstable.
    noise_sum: Vec<Option<f64>>,
}

/// Strict stability and `U'_Sigma` on a log grid of `(delta, alpha_eff)` at
/// fixed `q0`.
#[wasm_bindgen]
pub fn stability_map(nu: f64, zeta: f64, size: usize, q0: f64, batch: u32, n: usize) -> String {
    to_json(stability_map_impl(nu, zeta, size, q0, batch, n))
}

fn stability_map_impl(nu: f64, zeta: f64, size: usize, q0: f64, batch: u32, n: usize) -> Result<StabilityMap, String> {
    if !(2..=80).contains(&n) || !(1..=5000).contains(&size) || batch == 0 {
        return Err("grid size must be in [2, 80], size in [1, 5000], batch >= 1".into());
    }
    let s = spectrum(nu, zeta, size)?;
    let logspace = |lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (n - 1) as f64)).collect() };
    let deltas = logspace(-4.0, 0.0);
    let alpha_effs = logspace(-1.0, 3.0);
    let points: Vec<Memory1Point> = deltas
        .iter()
        .flat_map(|&d| alpha_effs.iter().map(move |&a| Memory1Point::new(d, a, q0)))
        .collect();
    let noise_sum = stability::region_scan(&s, &points, 1.0, batch)
        .into_iter()
        .map(|r| (r.stable && r.u_prime_sigma.is_finite()).then_some(r.u_prime_sigma))
        .collect();
    Ok(StabilityMap { deltas, alpha_effs, noise_sum })
}

/// Roots of the memory-1 characteristic polynomial for `lambda` on a grid
/// in `(0, lambda_max]`, with the circle or line they lie on.
#[wasm_bindgen]
pub fn eigen_locus(delta: f64, alpha_eff: f64, q0: f64, lambda_max: f64, n: usize) -> String {
    let r = if !(1..=10_000).contains(&n) || !(lambda_max > 0.0) {
        Err("need 1 <= n <= 10000 and lambda_max > 0".to_string())
    } else {
        let p = Memory1Point::new(delta, alpha_eff, q0);
        let lambdas: Vec<f64> = (1..=n).map(|i| lambda_max * i as f64 / n as f64).collect();
        #[derive(Serialize)]
        struct Out {
            locus: stability::Locus,
            stable: bool,
            reason: Option<String>,
        }
        let verdict = stability::strict_stability(&p, lambda_max);
        Ok(Out {
            locus: stability::eigenvalue_locus(&p, &lambdas),
            stable: verdict.is_stable(),
            reason: match verdict {
                stability::Stability::Stable => None,
                stability::Stability::Unstable(r) => Some(r.to_string()),
            },
        })
    };
    to_json(r)
}
