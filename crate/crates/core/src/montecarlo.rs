//! Mini-batch SGD with memory on Gaussian data, sampled directly.
//!
//! Features are `x = sqrt(lambda) * g` with `g` standard normal, drawn by
//! Box-Muller from a seeded ChaCha8 stream, so every step consumes a fixed
//! number of random words and runs replay bit-for-bit.

use crate::algorithm::Schedule;
use crate::evolution::{run_fingerprint, Engine, LossTrajectory, Recorder, Recording, DIVERGENCE_FACTOR};
use crate::kernel;
use crate::spectrum::Spectrum;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::Write;

/// Standard normals in pairs via Box-Muller.
struct Normals {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Normals {
    fn new(seed: u64) -> Self {
        Normals { rng: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.rng.random::<f64>();
        let u2 = self.rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(r * s);
        r * c
    }
}

/// One SGD trajectory from `w_0 = 0`, `u_0 = 0` with population loss
/// `1/2 sum lambda_k (w_k - w*_k)^2` recorded per `record`.
pub fn sgd_run(s: &Spectrum, sched: &Schedule, batch_size: u32, horizon: u64, seed: u64, record: Recording) -> LossTrajectory {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let extra = format!("B={batch_size} seed={seed}");
    let mut traj = LossTrajectory::new(Engine::MonteCarlo, run_fingerprint(Engine::MonteCarlo, s, sched, &extra, horizon));
    let k = s.len();
    let m = sched.memory();
    let lambdas = s.lambdas();
    let sqrt_l: Vec<f64> = lambdas.iter().map(|l| l.sqrt()).collect();
    // Work with the error e = w - w*, starting at -c.
    let mut e: Vec<f64> = s.coeffs_sq().iter().map(|c| -c.sqrt()).collect();
    let mut u = vec![0.0; k * m];
    let mut u_next = vec![0.0; k * m];
    let mut eval = vec![0.0; k];
    let mut grad = vec![0.0; k];
    let mut x = vec![0.0; k];
    let mut sq = vec![0.0; k];
    let mut normals = Normals::new(seed);
    let mut rec = Recorder::new(record, horizon);
    let inv_b = 1.0 / batch_size as f64;

    let loss = |e: &[f64], sq: &mut Vec<f64>| {
        for ((q, ei), l) in sq.iter_mut().zip(e).zip(lambdas) {
            *q = ei * ei * l;
        }
        0.5 * kernel::pairwise_sum(sq)
    };
    let l0 = loss(&e, &mut sq);
    let limit = DIVERGENCE_FACTOR * l0;
    if rec.wants(0) {
        traj.push(0, l0);
    }
    let stationary = sched.stationary_params();
    for t in 0..horizon {
        let owned;
        let p = match &stationary {
            Some(p) => p,
            None => {
                owned = sched.params(t);
                &owned
            }
        };
        // Gradient evaluation point e + U a.
        eval.copy_from_slice(&e);
        for j in 0..m {
            let aj = p.a[j];
            if aj != 0.0 {
                for (v, uj) in eval.iter_mut().zip(&u[j * k..(j + 1) * k]) {
                    *v += aj * uj;
                }
            }
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        for _ in 0..batch_size {
            let mut dot = 0.0;
            for ((xi, sl), v) in x.iter_mut().zip(&sqrt_l).zip(&eval) {
                *xi = sl * normals.next();
                dot += *xi * v;
            }
            let f = dot * inv_b;
            for (g, xi) in grad.iter_mut().zip(&x) {
                *g += f * xi;
            }
        }
        // e' = e - alpha g + U b, U' = g c^T + U D^T, reusing `eval` for U b.
        eval.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..m {
            let bj = p.b[j];
            for (v, uj) in eval.iter_mut().zip(&u[j * k..(j + 1) * k]) {
                *v += bj * uj;
            }
        }
        for ((ei, g), ub) in e.iter_mut().zip(&grad).zip(&eval) {
            *ei += ub - p.alpha * g;
        }
        if m > 0 {
            for i in 0..m {
                let col = &mut u_next[i * k..(i + 1) * k];
                for (r, val) in col.iter_mut().enumerate() {
                    let mut acc = grad[r] * p.c[i];
                    for j in 0..m {
                        acc += u[j * k + r] * p.d[(i, j)];
                    }
                    *val = acc;
                }
            }
            std::mem::swap(&mut u, &mut u_next);
        }
        let l = loss(&e, &mut sq);
        if !(l <= limit) {
            traj.push(t + 1, l);
            traj.diverged_at = Some(t + 1);
            return traj;
        }
        if rec.wants(t + 1) {
            traj.push(t + 1, l);
        }
    }
    traj
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnsembleResult {
    pub times: Vec<u64>,
    /// Infinite at times where some seed has diverged.
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_alive: Vec<usize>,
    pub n_seeds: usize,
    pub n_diverged: usize,
    pub fingerprint: String,
}

impl EnsembleResult {
    pub fn write_csv<W: Write>(&self, w: W) -> crate::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "mean", "stderr", "n_alive"])?;
        for i in 0..self.times.len() {
            wtr.write_record([
                self.times[i].to_string(),
                format!("{:e}", self.mean[i]),
                format!("{:e}", self.stderr[i]),
                self.n_alive[i].to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// The mean as a trajectory, cut at the first step where a seed diverged.
    pub fn mean_trajectory(&self) -> LossTrajectory {
        let mut traj = LossTrajectory::new(Engine::MonteCarlo, self.fingerprint.clone());
        for ((&t, &m), &a) in self.times.iter().zip(&self.mean).zip(&self.n_alive) {
            traj.push(t, m);
            if a < self.n_seeds {
                traj.diverged_at = Some(t);
                break;
            }
        }
        traj
    }
}

/// Mean and standard error over seeds `base_seed + i`. The reduction order
/// is fixed, so results do not depend on the worker count.
pub fn ensemble(
    s: &Spectrum,
    sched: &Schedule,
    batch_size: u32,
    horizon: u64,
    n_seeds: usize,
    base_seed: u64,
    record: Recording,
) -> EnsembleResult {
    assert!(n_seeds >= 2, "an ensemble needs at least two seeds");
    let one = |i: usize| sgd_run(s, sched, batch_size, horizon, base_seed.wrapping_add(i as u64), record);
    #[cfg(feature = "parallel")]
    let runs: Vec<LossTrajectory> = {
        use rayon::prelude::*;
        (0..n_seeds).into_par_iter().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let runs: Vec<LossTrajectory> = (0..n_seeds).map(one).collect();

    let times = record.times(horizon);
    let n_diverged = runs.iter().filter(|r| r.diverged_at.is_some()).count();
    let mut mean = Vec::with_capacity(times.len());
    let mut stderr = Vec::with_capacity(times.len());
    let mut n_alive = Vec::with_capacity(times.len());
    let mut cursors = vec![0usize; n_seeds];
    let mut vals = Vec::with_capacity(n_seeds);
    let mut scratch = Vec::new();
    for &t in &times {
        vals.clear();
        for (r, cur) in runs.iter().zip(cursors.iter_mut()) {
            if r.diverged_at.is_some_and(|d| d <= t) {
                continue;
            }
            while r.times[*cur] < t {
                *cur += 1;
            }
            vals.push(r.values[*cur]);
        }
        n_alive.push(vals.len());
        if vals.len() < n_seeds {
            mean.push(f64::INFINITY);
            stderr.push(f64::INFINITY);
            continue;
        }
        let n = n_seeds as f64;
        let mu = kernel::pairwise_sum(&vals) / n;
        scratch.clear();
        scratch.extend(vals.iter().map(|v| (v - mu) * (v - mu)));
        let var = kernel::pairwise_sum(&scratch) / (n - 1.0);
        mean.push(mu);
        stderr.push((var / n).sqrt());
    }
    let fingerprint = crate::evolution::fingerprint(&[
        &runs[0].fingerprint,
        &format!("seeds={n_seeds} base={base_seed}"),
    ]);
    EnsembleResult { times, mean, stderr, n_alive, n_seeds, n_diverged, fingerprint }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SigmaFit {
    pub tau1: f64,
    pub tau2: f64,
    /// Frobenius norm of the estimate minus the fitted SE form.
    pub residual: f64,
    /// `Tr(HC) H` and `HCH` are collinear (rank-one `H`, or `C = 0`); only
    /// `tau1 - tau2` is identified and the minimum-norm pair is returned.
    pub degenerate: bool,
}

/// Estimates `E[<x,Cx> x x^T] - HCH` for `x ~ N(0, diag(h))` and fits
/// `tau1 Tr(HC) H - tau2 HCH` by least squares.
pub fn empirical_sigma_check(h: &[f64], c: &DMatrix<f64>, n_samples: usize, seed: u64) -> SigmaFit {
    let d = h.len();
    assert!(c.nrows() == d && c.ncols() == d, "C must match H");
    let sqrt_h: Vec<f64> = h.iter().map(|x| x.sqrt()).collect();
    let mut normals = Normals::new(seed);
    let mut acc = DMatrix::<f64>::zeros(d, d);
    let mut x = vec![0.0; d];
    for _ in 0..n_samples {
        for (xi, s) in x.iter_mut().zip(&sqrt_h) {
            *xi = s * normals.next();
        }
        let mut q = 0.0;
        for i in 0..d {
            for j in 0..d {
                q += x[i] * c[(i, j)] * x[j];
            }
        }
        for i in 0..d {
            for j in 0..d {
                acc[(i, j)] += q * x[i] * x[j];
            }
        }
    }
    let hm = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(h));
    let hch = &hm * c * &hm;
    let est = acc / n_samples as f64 - &hch;
    let a = (&hm * c).trace() * &hm;
    let bm = -&hch;
    let (aa, ab, bb) = (a.dot(&a), a.dot(&bm), bm.dot(&bm));
    let (ya, yb) = (a.dot(&est), bm.dot(&est));
    let det = aa * bb - ab * ab;
    let scale = aa * bb;
    let (tau1, tau2, degenerate) = if scale == 0.0 || det.abs() <= 1e-10 * scale {
        // bm = kappa a: only tau1 + kappa tau2 is identified.
        if aa > 0.0 {
            let kappa = ab / aa;
            let k = ya / aa;
            (k / (1.0 + kappa * kappa), k * kappa / (1.0 + kappa * kappa), true)
        } else if bb > 0.0 {
            (0.0, yb / bb, true)
        } else {
            (0.0, 0.0, true)
        }
    } else {
        ((bb * ya - ab * yb) / det, (aa * yb - ab * ya) / det, false)
    };
    let fit = tau1 * &a + tau2 * &bm;
    SigmaFit { tau1, tau2, residual: (est - fit).norm(), degenerate }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::{run, run_noiseless, RunOptions, SeParams};

    fn small() -> Spectrum {
        Spectrum::new((1..=8).map(|k| (k as f64).powi(-2)).collect(), (1..=8).map(|k| (k as f64).powi(-2)).collect()).unwrap()
    }

    #[test]
    fn box_muller_moments() {
        let mut n = Normals::new(1);
        let xs: Vec<f64> = (0..200_000).map(|_| n.next()).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
        let kurt = xs.iter().map(|x| x.powi(4)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.01);
        assert!((kurt - 3.0).abs() < 0.05);
    }

    #[test]
    fn deterministic_per_seed() {
        let s = small();
        let sched = Schedule::hb(0.3, 0.5);
        let a = sgd_run(&s, &sched, 2, 50, 9, Recording::Every);
        let b = sgd_run(&s, &sched, 2, 50, 9, Recording::Every);
        let c = sgd_run(&s, &sched, 2, 50, 10, Recording::Every);
        assert_eq!(a, b);
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn large_batch_is_noiseless() {
        // Single-run relative fluctuations scale like alpha sqrt(2/B); 1% needs B near 1e6.
        let s = small();
        let sched = Schedule::gd(0.5);
        let mc = sgd_run(&s, &sched, 1_000_000, 100, 3, Recording::Every);
        let det = run_noiseless(&s, &sched, 100, RunOptions::default());
        for (a, b) in mc.values.iter().zip(&det.values) {
            assert!((a - b).abs() <= 0.01 * b, "{a} vs {b}");
        }
    }

    #[test]
    fn single_eigenvalue_matches_evolution() {
        // E[(1 - alpha x^2)^2] = 1 - 2 alpha + 3 alpha^2 = 3/4 for alpha = 1/2.
        let s = Spectrum::new(vec![1.0], vec![1.0]).unwrap();
        let sched = Schedule::gd(0.5);
        let det = run(&s, &sched, &SeParams::gaussian(1), 50, RunOptions::default());
        for (t, v) in det.values.iter().enumerate() {
            assert!((v - 0.5 * 0.75f64.powi(t as i32)).abs() <= 1e-15);
        }
        // The per-seed loss has relative variance (41/9)^t, so only short
        // horizons are resolvable by sampling.
        let ens = ensemble(&s, &sched, 1, 4, 20_000, 100, Recording::Every);
        for i in 0..=4 {
            let diff = (ens.mean[i] - det.values[i]).abs();
            assert!(diff <= 3.0 * ens.stderr[i] + 1e-12, "t = {i}: {diff} > 3 * {}", ens.stderr[i]);
        }
    }

    #[test]
    fn ensemble_is_reproducible() {
        let s = small();
        let sched = Schedule::gd(0.5);
        let a = ensemble(&s, &sched, 1, 30, 16, 5, Recording::Every);
        let b = ensemble(&s, &sched, 1, 30, 16, 5, Recording::Every);
        assert_eq!(a, b);
        assert!(a.stderr.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn stderr_scales() {
        let s = crate::spectrum::build_power_law(&crate::spectrum::PowerLawSpec::new(3.0, 0.5, 32)).unwrap();
        let sched = Schedule::gd(0.25);
        let a = ensemble(&s, &sched, 1, 50, 400, 0, Recording::Every);
        let b = ensemble(&s, &sched, 1, 50, 1600, 10_000, Recording::Every);
        let ratio = a.stderr[50] / b.stderr[50];
        assert!((ratio - 2.0).abs() <= 0.4, "ratio {ratio}");
    }

    #[test]
    fn divergence_flagged() {
        let s = small();
        let d = sgd_run(&s, &Schedule::gd(5.0), 1, 1000, 0, Recording::Every);
        assert!(d.diverged_at.is_some());
        let e = ensemble(&s, &Schedule::gd(5.0), 1, 1000, 4, 0, Recording::Every);
        assert_eq!(e.n_diverged, 4);
        assert!(e.mean.last().unwrap().is_infinite());
    }

    #[test]
    fn sigma_check_gaussian() {
        let h = [1.0, 0.5, 0.2];
        let c = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.1, 0.2, 0.8, -0.3, 0.1, -0.3, 0.6]);
        let fit = empirical_sigma_check(&h, &c, 1_000_000, 42);
        assert!((fit.tau1 - 1.0).abs() < 0.05, "{fit:?}");
        assert!((fit.tau2 + 1.0).abs() < 0.05, "{fit:?}");
        assert!(!fit.degenerate);
    }

    #[test]
    fn sigma_check_zero_and_rank_one() {
        let fit = empirical_sigma_check(&[1.0, 0.5], &DMatrix::zeros(2, 2), 1000, 1);
        assert_eq!((fit.tau1, fit.tau2, fit.residual), (0.0, 0.0, 0.0));
        assert!(fit.degenerate);
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let fit = empirical_sigma_check(&[1.0, 0.0], &c, 200_000, 1);
        assert!(fit.degenerate);
        // Only tau1 - tau2 is pinned; it equals 2 for Gaussian data.
        assert!((fit.tau1 - fit.tau2 - 2.0).abs() < 0.1, "{fit:?}");
    }
}
