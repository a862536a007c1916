//! Signal and noise propagators and the loss expansion built from them.
//!
//! With `A_lambda Z = S Z S^T - (tau2/|B|) lambda^2 (w^T Z w) v v^T`:
//!
//! ```text
//! V_t  = sum_k lambda_k c_k^2 <e00,  A^{t-1} e00>     V'_t uses w w^T on the left
//! U_t  = tau1/|B| sum_k lambda_k^2 <e00, A^{t-1} v v^T>  U'_t likewise
//! ```
//!
//! Arrays are stored 0-based: index `i` holds the propagator at `t = i + 1`.

use crate::algorithm::{MemoryParams, Schedule};
use crate::error::{Error, Result};
use crate::evolution::{run_fingerprint, Engine, LossTrajectory, SeParams};
use crate::kernel::{self, StepCtx, SweepOut};
use crate::spectrum::{build_power_law, PowerLawSpec, Spectrum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;
use std::io::Write;

/// `v[t]`, `v_prime[t]` hold `V_t`, `V'_t` for `t >= 0`; `u[j]`, `u_prime[j]`
/// hold `U_{j+1}`, `U'_{j+1}` (the noise propagators start at `t = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct PropagatorSeries {
    pub v: Vec<f64>,
    pub v_prime: Vec<f64>,
    pub u: Vec<f64>,
    pub u_prime: Vec<f64>,
}

impl PropagatorSeries {
    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "V", "V'", "U", "U'"])?;
        for t in 0..self.len() {
            let (u, up) = if t == 0 { (0.0, 0.0) } else { (self.u[t - 1], self.u_prime[t - 1]) };
            wtr.write_record([
                t.to_string(),
                format!("{:e}", self.v[t]),
                format!("{:e}", self.v_prime[t]),
                format!("{u:e}"),
                format!("{up:e}"),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

struct Flat {
    base: Vec<f64>,
    v: Vec<f64>,
    w: Vec<f64>,
}

fn flat(p: &MemoryParams) -> Flat {
    Flat {
        base: p.base_matrix().transpose().as_slice().to_vec(),
        v: p.v().as_slice().to_vec(),
        w: p.w().as_slice().to_vec(),
    }
}

/// The first `horizon` terms of each propagator for stationary parameters.
pub fn compute_propagators(s: &Spectrum, params: &MemoryParams, se: &SeParams, horizon: usize) -> PropagatorSeries {
    let n = params.memory() + 1;
    let k = s.len();
    let f = flat(params);
    let lambdas = s.lambdas();
    let w_lam: Vec<f64> = lambdas.iter().zip(s.coeffs_sq()).map(|(l, c)| l * c).collect();
    let w_noise: Vec<f64> = lambdas.iter().map(|l| se.tau1_over_b() * l * l).collect();

    let mut signal = vec![0.0; k * n * n];
    let mut noise = vec![0.0; k * n * n];
    for kk in 0..k {
        signal[kk * n * n] = 1.0;
        for i in 0..n {
            for j in 0..n {
                noise[kk * n * n + i * n + j] = f.v[i] * f.v[j];
            }
        }
    }
    let mut out = PropagatorSeries {
        v: Vec::with_capacity(horizon),
        v_prime: Vec::with_capacity(horizon),
        u: Vec::with_capacity(horizon),
        u_prime: Vec::with_capacity(horizon),
    };
    if horizon == 0 {
        return out;
    }
    let mut scratch = Vec::with_capacity(k);
    let (mut q, mut z) = (vec![0.0; k], vec![0.0; k]);
    let mut record = |blocks: &[f64], q: &mut [f64], z: &mut [f64], weights: &[f64], a: &mut Vec<f64>, b: &mut Vec<f64>| {
        for (kk, blk) in blocks.chunks_exact(n * n).enumerate() {
            z[kk] = blk[0];
            q[kk] = kernel::quad_form(blk, &f.w);
        }
        a.push(kernel::weighted_sum(weights, z, &mut scratch));
        b.push(kernel::weighted_sum(weights, q, &mut scratch));
    };
    record(&signal, &mut q, &mut z, &w_lam, &mut out.v, &mut out.v_prime);
    record(&noise, &mut q, &mut z, &w_noise, &mut out.u, &mut out.u_prime);

    let ctx = StepCtx {
        base: &f.base,
        v: &f.v,
        w: &f.w,
        w_next: &f.w,
        noise: 0.0,
        tau2b: se.tau2_over_b(),
    };
    let mut scratch = Vec::with_capacity(k);
    for _ in 1..horizon {
        for (blocks, weights, a, b) in [
            (&mut signal, &w_lam, &mut out.v, &mut out.v_prime),
            (&mut noise, &w_noise, &mut out.u, &mut out.u_prime),
        ] {
            kernel::sweep(n, blocks, lambdas, None, &ctx, SweepOut { quad: &mut q, z00: &mut z });
            a.push(kernel::weighted_sum(weights, &z, &mut scratch));
            b.push(kernel::weighted_sum(weights, &q, &mut scratch));
        }
    }
    out
}

/// Rebuilds `L_0..=L_horizon` from stationary propagators. Needs
/// `series.len() >= horizon + 1`. The recursion is sequential in `t`.
pub fn loss_from_expansion(series: &PropagatorSeries, horizon: usize) -> Result<LossTrajectory> {
    if series.len() < horizon + 1 {
        return Err(Error::InvalidParameter(format!(
            "expansion to t = {horizon} needs {} propagator terms, have {}",
            horizon + 1,
            series.len()
        )));
    }
    let mut lp = Vec::with_capacity(horizon + 1);
    let mut traj = LossTrajectory::new(Engine::Expansion, String::new());
    for t in 0..=horizon {
        let mut acc_p = 0.5 * series.v_prime[t];
        let mut acc = 0.5 * series.v[t];
        for (s, l) in lp.iter().enumerate() {
            acc_p += series.u_prime[t - s - 1] * l;
            acc += series.u[t - s - 1] * l;
        }
        lp.push(acc_p);
        traj.push(t as u64, acc);
    }
    Ok(traj)
}

/// Two-time propagators of a nonstationary schedule, with step `t` using
/// `params(t)`:
///
/// ```text
/// V_t     = sum lambda c^2 <e00, A_{t-1} ... A_0 e00>
/// U_{t,s} = tau1/|B| sum lambda^2 <e00, A_{t-1} ... A_{s+1} v_s v_s^T>
/// L_t     = V_t / 2 + sum_{s<t} U_{t,s} L'_s
/// ```
///
/// and primed versions with `w_t w_t^T` on the left. Memory is `O(T^2)`.
#[derive(Clone, Debug)]
pub struct TwoTimePropagators {
    pub v: Vec<f64>,
    pub v_prime: Vec<f64>,
    /// `u[t][s]` for `s < t`.
    pub u: Vec<Vec<f64>>,
    pub u_prime: Vec<Vec<f64>>,
}

pub fn compute_two_time_propagators(s: &Spectrum, sched: &Schedule, se: &SeParams, horizon: usize) -> TwoTimePropagators {
    let n = sched.memory() + 1;
    let k = s.len();
    let lambdas = s.lambdas();
    let flats: Vec<Flat> = (0..=horizon as u64).map(|t| flat(&sched.params(t))).collect();
    let w_lam: Vec<f64> = lambdas.iter().zip(s.coeffs_sq()).map(|(l, c)| l * c).collect();
    let w_noise: Vec<f64> = lambdas.iter().map(|l| se.tau1_over_b() * l * l).collect();
    let mut scratch = Vec::new();
    let (mut q, mut z) = (vec![0.0; k], vec![0.0; k]);

    // Evolves a seed from step `from` to `horizon`, calling `emit(t, z00, quad)`.
    let mut evolve = |seed: Vec<f64>, from: usize, weights: &[f64], emit: &mut dyn FnMut(usize, f64, f64)| {
        let mut blocks = seed;
        for (kk, blk) in blocks.chunks_exact(n * n).enumerate() {
            z[kk] = blk[0];
            q[kk] = kernel::quad_form(blk, &flats[from].w);
        }
        emit(from, kernel::weighted_sum(weights, &z, &mut scratch), kernel::weighted_sum(weights, &q, &mut scratch));
        for t in from..horizon {
            let f = &flats[t];
            let ctx = StepCtx {
                base: &f.base,
                v: &f.v,
                w: &f.w,
                w_next: &flats[t + 1].w,
                noise: 0.0,
                tau2b: se.tau2_over_b(),
            };
            kernel::sweep(n, &mut blocks, lambdas, None, &ctx, SweepOut { quad: &mut q, z00: &mut z });
            emit(t + 1, kernel::weighted_sum(weights, &z, &mut scratch), kernel::weighted_sum(weights, &q, &mut scratch));
        }
    };

    let mut out = TwoTimePropagators {
        v: vec![0.0; horizon + 1],
        v_prime: vec![0.0; horizon + 1],
        u: vec![vec![]; horizon + 1],
        u_prime: vec![vec![]; horizon + 1],
    };
    let mut seed = vec![0.0; k * n * n];
    for kk in 0..k {
        seed[kk * n * n] = 1.0;
    }
    {
        let (v, vp) = (&mut out.v, &mut out.v_prime);
        evolve(seed, 0, &w_lam, &mut |t, a, b| {
            v[t] = a;
            vp[t] = b;
        });
    }
    for t in 1..=horizon {
        out.u[t] = vec![0.0; t];
        out.u_prime[t] = vec![0.0; t];
    }
    for s in 0..horizon {
        // The noise injected at step s enters Z_{s+1} as lambda v_s v_s^T, so
        // the seed is v_s v_s^T placed at time s + 1.
        let f = &flats[s];
        let mut seed = vec![0.0; k * n * n];
        for kk in 0..k {
            for i in 0..n {
                for j in 0..n {
                    seed[kk * n * n + i * n + j] = f.v[i] * f.v[j];
                }
            }
        }
        let (u, up) = (&mut out.u, &mut out.u_prime);
        evolve(seed, s + 1, &w_noise, &mut |t, a, b| {
            u[t][s] = a;
            up[t][s] = b;
        });
    }
    out
}

/// Loss from two-time propagators, `t = 0..=horizon`.
pub fn loss_from_two_time(p: &TwoTimePropagators) -> LossTrajectory {
    let horizon = p.v.len() - 1;
    let mut lp: Vec<f64> = Vec::with_capacity(horizon + 1);
    let mut traj = LossTrajectory::new(Engine::Expansion, String::new());
    for t in 0..=horizon {
        let mut acc_p = 0.5 * p.v_prime[t];
        let mut acc = 0.5 * p.v[t];
        for (s, l) in lp.iter().enumerate() {
            acc_p += p.u_prime[t][s] * l;
            acc += p.u[t][s] * l;
        }
        lp.push(acc_p);
        traj.push(t as u64, acc);
    }
    traj
}

/// Stationary expansion run with the same bookkeeping as `evolution::run`.
pub fn run_expansion(s: &Spectrum, sched: &Schedule, se: &SeParams, horizon: u64) -> Result<LossTrajectory> {
    let mut traj = match sched.stationary_params() {
        Some(p) => loss_from_expansion(&compute_propagators(s, &p, se, horizon as usize + 1), horizon as usize)?,
        None => loss_from_two_time(&compute_two_time_propagators(s, sched, se, horizon as usize)),
    };
    traj.fingerprint = run_fingerprint(Engine::Expansion, s, sched, &format!("{se:?}"), horizon);
    let l0 = s.initial_loss();
    if let Some(t) = traj.first_exceeding(crate::evolution::DIVERGENCE_FACTOR * l0) {
        traj.diverged_at = Some(t);
    }
    Ok(traj)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailMode {
    Truncate,
    Geometric,
}

/// Infinite sums of the four propagators with how they were obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagatorSums {
    pub u_sigma: f64,
    pub u_prime_sigma: f64,
    pub v_sigma: f64,
    pub v_prime_sigma: f64,
    /// Terms summed explicitly; `None` for the closed-form resolvent.
    pub terms: Option<usize>,
    /// Whether a geometric tail was added, per `[U, U', V, V']`.
    pub tail_applied: [bool; 4],
}

fn tail(xs: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 12 {
        return None;
    }
    let ratios: Vec<f64> = (n - 10..n).map(|i| xs[i] / xs[i - 1]).collect();
    let r = *ratios.last().unwrap();
    if !(r > 0.0 && r < 1.0) {
        return None;
    }
    let stable = ratios.iter().all(|x| ((x - r) / r).abs() <= 0.01);
    stable.then(|| xs[n - 1] * r / (1.0 - r))
}

pub fn propagator_sums(series: &PropagatorSeries, mode: TailMode) -> PropagatorSums {
    let sum = |xs: &[f64]| -> (f64, bool) {
        let mut total = kernel::pairwise_sum(xs);
        if mode == TailMode::Geometric {
            if let Some(t) = tail(xs) {
                total += t;
                return (total, true);
            }
        }
        (total, false)
    };
    let (u, a) = sum(&series.u);
    let (up, b) = sum(&series.u_prime);
    let (v, c) = sum(&series.v);
    let (vp, d) = sum(&series.v_prime);
    PropagatorSums {
        u_sigma: u,
        u_prime_sigma: up,
        v_sigma: v,
        v_prime_sigma: vp,
        terms: Some(series.len()),
        tail_applied: [a, b, c, d],
    }
}

/// Matrix of `A_lambda` acting on row-major flattened blocks.
pub fn a_operator(params: &MemoryParams, lam: f64, se: &SeParams) -> DMatrix<f64> {
    let n = params.memory() + 1;
    let s = params.s_matrix(lam);
    let v = params.v();
    let w = params.w();
    let c = se.tau2_over_b() * lam * lam;
    DMatrix::from_fn(n * n, n * n, |r, col| {
        let (i, j) = (r / n, r % n);
        let (k, l) = (col / n, col % n);
        s[(i, k)] * s[(j, l)] - c * v[i] * v[j] * w[k] * w[l]
    })
}

pub fn a_spectral_radius(params: &MemoryParams, lam: f64, se: &SeParams) -> f64 {
    if se.tau2 == 0.0 {
        return params.spectral_radius(lam).powi(2);
    }
    a_operator(params, lam, se)
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Exact infinite sums over the finite spectrum via `(1 - A_lambda)^{-1}`.
pub fn resolvent_sums(s: &Spectrum, params: &MemoryParams, se: &SeParams) -> Result<PropagatorSums> {
    let n = params.memory() + 1;
    let v = params.v();
    let w = params.w();
    let mut e00 = DVector::zeros(n * n);
    e00[0] = 1.0;
    let vv = DVector::from_fn(n * n, |r, _| v[r / n] * v[r % n]);
    let ww = DVector::from_fn(n * n, |r, _| w[r / n] * w[r % n]);
    let k = s.len();
    let (mut u, mut up, mut vs, mut vps) = (vec![0.0; k], vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    for (kk, (&lam, &c2)) in s.lambdas().iter().zip(s.coeffs_sq()).enumerate() {
        let rho = a_spectral_radius(params, lam, se);
        if !(rho < 1.0) {
            return Err(Error::UnstableEigenvalue {
                k: kk,
                lam,
                reason: format!("spectral radius of A_lambda is {rho}"),
            });
        }
        let m = DMatrix::identity(n * n, n * n) - a_operator(params, lam, se);
        let lu = m.lu();
        let xs = lu.solve(&e00).ok_or(Error::SingularMemory)?;
        let xn = lu.solve(&vv).ok_or(Error::SingularMemory)?;
        vs[kk] = lam * c2 * xs[0];
        vps[kk] = lam * c2 * ww.dot(&xs);
        u[kk] = se.tau1_over_b() * lam * lam * xn[0];
        up[kk] = se.tau1_over_b() * lam * lam * ww.dot(&xn);
    }
    Ok(PropagatorSums {
        u_sigma: kernel::pairwise_sum(&u),
        u_prime_sigma: kernel::pairwise_sum(&up),
        v_sigma: kernel::pairwise_sum(&vs),
        v_prime_sigma: kernel::pairwise_sum(&vps),
        terms: None,
        tail_applied: [false; 4],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    SignalDominated,
    NoiseDominated,
    Boundary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub alpha_eff: f64,
    pub c_v: f64,
    pub xi_v: f64,
    pub c_u: f64,
    pub xi_u: f64,
    pub regime: Regime,
    pub sums: PropagatorSums,
    /// `U'_Sigma >= 1`: the loss is predicted to blow up.
    pub divergent: bool,
    /// Predicted `L_t t^xi` with `xi` the exponent of the regime.
    pub loss_constant: f64,
    pub loss_exponent: f64,
}

impl Predictions {
    pub fn v_at(&self, t: f64) -> f64 {
        self.c_v * t.powf(-self.xi_v)
    }

    pub fn u_at(&self, t: f64) -> f64 {
        self.c_u * t.powf(-self.xi_u)
    }
}

/// Power-law asymptotics of the propagators and the loss for stationary
/// parameters. The sums are evaluated exactly on the truncated spectrum.
pub fn asymptotic_predictions(spec: &PowerLawSpec, params: &MemoryParams, se: &SeParams) -> Result<Predictions> {
    spec.validate()?;
    let PowerLawSpec { nu, zeta, big_lambda, .. } = *spec;
    if nu <= 0.5 {
        return Err(Error::ImmediateDivergence { nu });
    }
    let alpha_eff = params.effective_learning_rate()?;
    let q = spec.tail_constant();
    let c_v = q * gamma(zeta + 1.0) * (2.0 * alpha_eff).powf(-zeta);
    let c_u = (alpha_eff * big_lambda).powf(1.0 / nu) * se.tau1 * gamma(2.0 - 1.0 / nu)
        / (se.batch_size as f64 * nu)
        * 2f64.powf(1.0 / nu - 2.0);
    let xi_u = 2.0 - 1.0 / nu;
    let regime = if zeta < xi_u {
        Regime::SignalDominated
    } else if zeta > xi_u {
        Regime::NoiseDominated
    } else {
        Regime::Boundary
    };
    let sums = resolvent_sums(&build_power_law(spec)?, params, se)?;
    let (u, up) = (sums.u_sigma, sums.u_prime_sigma);
    let factor = 1.0 - up + u;
    let (loss_constant, loss_exponent) = match regime {
        Regime::NoiseDominated => (factor * sums.v_prime_sigma * c_u / (2.0 * (1.0 - up).powi(2)), xi_u),
        _ => (factor * c_v / (2.0 * (1.0 - up)), zeta),
    };
    Ok(Predictions {
        alpha_eff,
        c_v,
        xi_v: zeta,
        c_u,
        xi_u,
        regime,
        sums,
        divergent: up >= 1.0,
        loss_constant,
        loss_exponent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::{run, RunOptions};

    fn small() -> Spectrum {
        build_power_law(&PowerLawSpec::new(2.0, 0.7, 30)).unwrap()
    }

    #[test]
    fn first_terms() {
        let s = small();
        let p = MemoryParams::memory1(0.3, 0.4, 0.2, -0.1, 0.5);
        let se = SeParams::new(1.5, 0.0, 3).unwrap();
        let ser = compute_propagators(&s, &p, &se, 3);
        let sum_l2: f64 = s.lambdas().iter().map(|l| l * l).sum();
        let ac = 0.4 * -0.1 - 0.3;
        assert!((ser.v[0] - s.signal_mass()).abs() < 1e-14);
        assert!((ser.v_prime[0] - s.signal_mass()).abs() < 1e-14);
        assert!((ser.u_prime[0] - 0.5 * ac * ac * sum_l2).abs() < 1e-14);
    }

    #[test]
    fn gd_closed_form() {
        let s = small();
        let alpha = 0.6;
        let ser = compute_propagators(&s, &MemoryParams::gd(alpha), &SeParams::new(1.0, 0.0, 1).unwrap(), 40);
        for t in 1..=40 {
            let want: f64 = s
                .lambdas()
                .iter()
                .zip(s.coeffs_sq())
                .map(|(l, c)| l * c * (1.0 - alpha * l).powi(2 * (t as i32 - 1)))
                .sum();
            assert!((ser.v[t - 1] - want).abs() <= 1e-13 * want);
        }
    }

    #[test]
    fn hb_noise_matches_matrix_powers() {
        let s = small();
        let p = MemoryParams::hb(0.3, 0.7);
        let se = SeParams::new(1.0, 0.0, 2).unwrap();
        let ser = compute_propagators(&s, &p, &se, 60);
        for t in [1usize, 2, 10, 60] {
            let mut want = 0.0;
            for &lam in s.lambdas() {
                let sm = p.s_matrix(lam);
                let st = sm.pow(t as u32 - 1);
                let x = &st * p.v();
                want += 0.5 * lam * lam * x[0] * x[0];
            }
            assert!((ser.u[t - 1] - want).abs() <= 1e-12 * want.abs().max(1e-300));
            assert_eq!(ser.u[t - 1], ser.u_prime[t - 1]);
        }
    }

    #[test]
    fn expansion_small_cases() {
        let s = small();
        let p = MemoryParams::hb(0.3, 0.5);
        let se = SeParams::new(1.0, -0.5, 1).unwrap();
        let ser = compute_propagators(&s, &p, &se, 10);
        let tr = loss_from_expansion(&ser, 9).unwrap();
        assert_eq!(tr.values[0], 0.5 * ser.v[0]);
        assert!((tr.values[1] - 0.5 * (ser.v[1] + ser.u[0] * ser.v_prime[0])).abs() < 1e-15);
        assert!(loss_from_expansion(&ser, 10).is_err());
    }

    #[test]
    fn expansion_matches_evolution_with_memory_vector() {
        let s = small();
        let p = MemoryParams::memory1(0.3, 0.4, 0.2, -0.1, 0.5);
        let sched = Schedule::stationary("custom", p);
        let se = SeParams::new(1.0, -0.5, 1).unwrap();
        let a = run_expansion(&s, &sched, &se, 150).unwrap();
        let b = run(&s, &sched, &se, 150, RunOptions::default());
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() <= 1e-10 * y);
        }
    }

    #[test]
    fn two_time_matches_evolution() {
        let s = small();
        let se = SeParams::gaussian(2);
        for sched in [Schedule::Am1(crate::Am1::benchmark(2.0)), Schedule::averaged_gd(0.5), Schedule::jacobi_hb(0.4)] {
            let a = run_expansion(&s, &sched, &se, 80).unwrap();
            let b = run(&s, &sched, &se, 80, RunOptions::default());
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() <= 1e-10 * y, "{}: {x} vs {y}", sched.name());
            }
        }
    }

    #[test]
    fn geometric_series_sum() {
        let xs: Vec<f64> = (1..=30).map(|t| 0.5f64.powi(t)).collect();
        let ser = PropagatorSeries { v: xs.clone(), v_prime: xs.clone(), u: xs.clone(), u_prime: xs };
        let a = propagator_sums(&ser, TailMode::Truncate);
        let b = propagator_sums(&ser, TailMode::Geometric);
        assert!((a.u_sigma - 1.0).abs() < 1e-6);
        assert!((b.u_sigma - 1.0).abs() < 1e-12);
        assert!(b.tail_applied[0] && !a.tail_applied[0]);
    }

    #[test]
    fn tail_refused_for_unstable_ratios() {
        let xs: Vec<f64> = (1..=30).map(|t| 1.0 / (t * t) as f64).collect();
        let ser = PropagatorSeries { v: xs.clone(), v_prime: xs.clone(), u: xs.clone(), u_prime: xs };
        assert_eq!(propagator_sums(&ser, TailMode::Geometric).tail_applied, [false; 4]);
    }

    #[test]
    fn zero_noise_sum() {
        let ser = compute_propagators(&small(), &MemoryParams::gd(0.5), &SeParams::noiseless(), 50);
        assert_eq!(propagator_sums(&ser, TailMode::Truncate).u_sigma, 0.0);
    }

    #[test]
    fn batch_scaling_is_exact() {
        let s = small();
        let p = MemoryParams::hb(0.2, 0.6);
        let a = compute_propagators(&s, &p, &SeParams::new(1.0, 0.0, 1).unwrap(), 30);
        let b = compute_propagators(&s, &p, &SeParams::new(1.0, 0.0, 4).unwrap(), 30);
        for (x, y) in a.u.iter().zip(&b.u) {
            assert!((x / y - 4.0).abs() < 1e-13);
        }
    }

    #[test]
    fn nonnegative_propagators() {
        let s = small();
        let se = SeParams::new(1.0, -0.8, 1).unwrap();
        assert!(se.nonneg_propagators());
        let ser = compute_propagators(&s, &MemoryParams::memory1_from_alpha1(0.2, 2.0, 0.3), &se, 300);
        for xs in [&ser.v, &ser.v_prime, &ser.u, &ser.u_prime] {
            assert!(xs.iter().all(|&x| x >= -1e-12));
        }
    }

    #[test]
    fn resolvent_agrees_with_long_truncation() {
        let s = small();
        let p = MemoryParams::hb(0.5, 0.5);
        let se = SeParams::new(1.0, -0.3, 1).unwrap();
        let exact = resolvent_sums(&s, &p, &se).unwrap();
        let ser = compute_propagators(&s, &p, &se, 20_000);
        let trunc = propagator_sums(&ser, TailMode::Truncate);
        assert!((exact.u_sigma - trunc.u_sigma).abs() < 1e-9);
        assert!((exact.u_prime_sigma - trunc.u_prime_sigma).abs() < 1e-9);
    }

    #[test]
    fn regimes() {
        let p = MemoryParams::gd(0.25);
        let se = SeParams::new(1.0, 0.0, 1).unwrap();
        let a = asymptotic_predictions(&PowerLawSpec::new(3.0, 0.5, 500), &p, &se).unwrap();
        assert_eq!(a.regime, Regime::SignalDominated);
        let b = asymptotic_predictions(&PowerLawSpec::new(2.0, 1.8, 500), &p, &se).unwrap();
        assert_eq!(b.regime, Regime::NoiseDominated);
        assert_eq!(b.xi_u, 1.5);
        assert!(matches!(
            asymptotic_predictions(&PowerLawSpec::new(0.5, 0.5, 500), &p, &se),
            Err(Error::ImmediateDivergence { .. })
        ));
    }
}
