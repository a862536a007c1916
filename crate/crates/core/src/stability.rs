//! Stability analysis of memory-1 methods in the `(delta, alpha_eff, q0)` chart.
//!
//! Any memory-1 method has characteristic polynomial
//! `x^2 - x (2 - delta - lambda (delta alpha_eff + q0)) + 1 - delta - lambda q0`,
//! so these three numbers decide stability; `q1 = -q0 - delta alpha_eff`.

use crate::algorithm::{quadratic_roots, Am1, MemoryParams, MultistepCoeffs};
use crate::error::{Error, Result};
use crate::evolution::SeParams;
use crate::kernel;
use crate::propagators::a_operator;
use crate::spectrum::Spectrum;
use nalgebra::{Complex, DVector};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;

/// Default slack for the asymptotic `O(1)` conditions.
pub const DEFAULT_SLACK: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Memory1Point {
    pub delta: f64,
    pub alpha_eff: f64,
    pub q0: f64,
}

impl Memory1Point {
    pub fn new(delta: f64, alpha_eff: f64, q0: f64) -> Self {
        Memory1Point { delta, alpha_eff, q0 }
    }

    pub fn q1(&self) -> f64 {
        -self.q0 - self.delta * self.alpha_eff
    }

    pub fn coeffs(&self) -> MultistepCoeffs {
        MultistepCoeffs {
            p: vec![self.delta - 1.0, 2.0 - self.delta],
            q: vec![self.q0, self.q1()],
        }
    }

    /// Canonical matrix-form realization, valid for every `delta`.
    pub fn params(&self) -> MemoryParams {
        self.coeffs().from_multistep().expect("p sums to one by construction")
    }

    /// Reads the chart coordinates off memory-1 parameters.
    pub fn from_params(p: &MemoryParams) -> Result<Self> {
        if p.memory() != 1 {
            return Err(Error::InvalidParameter(format!("expected memory 1, got {}", p.memory())));
        }
        let ms = p.to_multistep();
        let delta = 1.0 - p.d[(0, 0)];
        Ok(Memory1Point {
            delta,
            alpha_eff: -(ms.q[0] + ms.q[1]) / delta,
            q0: ms.q[0],
        })
    }

    /// Roots of the characteristic polynomial at `lam`.
    pub fn roots(&self, lam: f64) -> [Complex<f64>; 2] {
        let tr = 2.0 - self.delta - lam * (self.delta * self.alpha_eff + self.q0);
        let det = 1.0 - self.delta - lam * self.q0;
        quadratic_roots(tr, det)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstabilityReason {
    /// `delta` outside `(0, 2)`.
    DNotStrictlyStable,
    NonPositiveAlphaEff,
    /// `-q0 >= delta / lambda_max`.
    NegativeQ0TooLarge,
    /// `delta alpha_eff >= (4 - 2 delta) / lambda_max - 2 q0`.
    AlphaEffTooLarge,
}

impl fmt::Display for InstabilityReason {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(match self {
            InstabilityReason::DNotStrictlyStable => "D not strictly stable (need 0 < delta < 2)",
            InstabilityReason::NonPositiveAlphaEff => "alpha_eff must be positive",
            InstabilityReason::NegativeQ0TooLarge => "-q0 >= delta / lambda_max",
            InstabilityReason::AlphaEffTooLarge => "delta alpha_eff >= (4 - 2 delta) / lambda_max - 2 q0",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "verdict", content = "reason")]
pub enum Stability {
    Stable,
    Unstable(InstabilityReason),
}

impl Stability {
    pub fn is_stable(&self) -> bool {
        matches!(self, Stability::Stable)
    }
}

/// Whether `D` and every `S_lambda`, `0 < lambda <= lambda_max`, are strictly stable.
pub fn strict_stability(p: &Memory1Point, lambda_max: f64) -> Stability {
    use InstabilityReason::*;
    let Memory1Point { delta, alpha_eff, q0 } = *p;
    if !(delta > 0.0 && delta < 2.0) {
        Stability::Unstable(DNotStrictlyStable)
    } else if !(alpha_eff > 0.0) {
        Stability::Unstable(NonPositiveAlphaEff)
    } else if !(-q0 < delta / lambda_max) {
        Stability::Unstable(NegativeQ0TooLarge)
    } else if !(delta * alpha_eff < (4.0 - 2.0 * delta) / lambda_max - 2.0 * q0) {
        Stability::Unstable(AlphaEffTooLarge)
    } else {
        Stability::Stable
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LocusShape {
    /// Non-real roots satisfy `|x - center| = radius`.
    Circle { center: f64, radius: f64 },
    /// `q1 = 0`: non-real roots lie on `Re x = re`.
    Line { re: f64 },
    /// `q1 <= -alpha_eff`: all roots real.
    Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocusPoint {
    pub lambda: f64,
    pub roots: [(f64, f64); 2],
    pub real: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Locus {
    pub points: Vec<LocusPoint>,
    pub shape: LocusShape,
}

pub fn eigenvalue_locus(p: &Memory1Point, lambdas: &[f64]) -> Locus {
    let q1 = p.q1();
    let shape = if q1 == 0.0 {
        LocusShape::Line { re: 1.0 - p.delta / 2.0 }
    } else if p.alpha_eff * (p.alpha_eff + q1) > 0.0 {
        LocusShape::Circle {
            center: -p.q0 / q1,
            radius: (p.delta * (p.alpha_eff * (p.alpha_eff + q1)).sqrt() / q1).abs(),
        }
    } else {
        LocusShape::Real
    };
    let points = lambdas
        .iter()
        .map(|&lam| {
            let r = p.roots(lam);
            LocusPoint {
                lambda: lam,
                roots: [(r[0].re, r[0].im), (r[1].re, r[1].im)],
                real: r[0].im == 0.0,
            }
        })
        .collect();
    Locus { points, shape }
}

/// Closed-form `R_lambda = sum_{t>=0} <w w^T, A^t v v^T>` for `tau2 = 0`.
pub fn r_lambda(p: &Memory1Point, lam: f64) -> Result<f64> {
    let Memory1Point { delta, alpha_eff, q0 } = *p;
    let den = lam * (delta + lam * q0) * (4.0 - 2.0 * delta - lam * (2.0 * q0 + delta * alpha_eff));
    if !(den > 0.0) || !strict_stability(p, lam).is_stable() {
        return Err(Error::Pole { lam, denominator: den });
    }
    let num = 2.0 * lam * q0 * q0 + (lam * q0 + 2.0 - delta) * delta * alpha_eff;
    Ok(num / den)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSum {
    /// `U'_Sigma = tau1/|B| sum lambda^2 R_lambda`.
    pub total: f64,
    /// Contributions from `lambda < delta/q0`, between, and `lambda > delta alpha_eff / q0^2`.
    pub regions: [f64; 3],
    /// `(delta/q0, delta alpha_eff/q0^2)`; absent when `q0 <= 0`.
    pub thresholds: Option<(f64, f64)>,
}

pub fn noise_stability_sum(s: &Spectrum, p: &Memory1Point, tau1: f64, batch_size: u32) -> Result<NoiseSum> {
    let scale = tau1 / batch_size as f64;
    let thresholds = (p.q0 > 0.0).then(|| (p.delta / p.q0, p.delta * p.alpha_eff / (p.q0 * p.q0)));
    let mut parts: [Vec<f64>; 3] = [vec![], vec![], vec![]];
    for (k, &lam) in s.lambdas().iter().enumerate() {
        if let Stability::Unstable(reason) = strict_stability(p, lam) {
            return Err(Error::UnstableEigenvalue { k, lam, reason: reason.to_string() });
        }
        let r = r_lambda(p, lam).map_err(|_| Error::UnstableEigenvalue {
            k,
            lam,
            reason: "R_lambda pole".into(),
        })?;
        let region = match thresholds {
            Some((a, _)) if lam < a => 0,
            Some((_, b)) if lam <= b => 1,
            Some(_) => 2,
            None => 0,
        };
        parts[region].push(scale * lam * lam * r);
    }
    // Accumulate from the smallest eigenvalue up.
    let sums = parts.map(|mut v| {
        v.reverse();
        kernel::pairwise_sum(&v)
    });
    Ok(NoiseSum {
        total: sums.iter().sum(),
        regions: sums,
        thresholds,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    /// `None` for quantities that are reported but not thresholded.
    pub pass: Option<bool>,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceleratedReport {
    pub slack: f64,
    pub conditions: Vec<Condition>,
}

impl AcceleratedReport {
    pub fn all_pass(&self) -> bool {
        self.conditions.iter().all(|c| c.pass != Some(false))
    }
}

/// Finite-spectrum surrogates of the conditions for a bounded noise sum as
/// `alpha_eff` grows, each compared with slack `slack`.
pub fn accelerated_region_check(s: &Spectrum, p: &Memory1Point, slack: f64) -> AcceleratedReport {
    let Memory1Point { delta, alpha_eff, q0 } = *p;
    let mut conditions = vec![
        Condition { name: "delta small".into(), pass: None, lhs: delta, rhs: f64::NAN },
        Condition { name: "q0 > 0".into(), pass: Some(q0 > 0.0), lhs: q0, rhs: 0.0 },
    ];
    if q0 > 0.0 {
        let l1 = delta / q0;
        let l2 = delta * alpha_eff / (q0 * q0);
        let low: Vec<f64> = s.lambdas().iter().rev().copied().filter(|&l| l < l1).collect();
        let low_sum = kernel::pairwise_sum(&low);
        let mid = s.lambdas().iter().filter(|&&l| l > l1 && l < l2).count() as f64;
        let rhs3 = slack / alpha_eff;
        let rhs4 = slack * q0 / (delta * alpha_eff);
        conditions.push(Condition {
            name: "sum of lambda below delta/q0 <= C/alpha_eff".into(),
            pass: Some(low_sum <= rhs3),
            lhs: low_sum,
            rhs: rhs3,
        });
        conditions.push(Condition {
            name: "count between thresholds <= C q0/(delta alpha_eff)".into(),
            pass: Some(mid <= rhs4),
            lhs: mid,
            rhs: rhs4,
        });
    } else {
        for name in ["sum of lambda below delta/q0 <= C/alpha_eff", "count between thresholds <= C q0/(delta alpha_eff)"] {
            conditions.push(Condition { name: name.into(), pass: Some(false), lhs: f64::INFINITY, rhs: f64::NAN });
        }
    }
    AcceleratedReport { slack, conditions }
}

/// Dominant eigenvalue of `A_lambda` (with `tau2 = 0`) by power iteration,
/// falling back to a dense eigensolve.
fn leading_a_eigenvalue(params: &MemoryParams, lam: f64) -> f64 {
    let a = a_operator(params, lam, &SeParams::noiseless());
    let n = a.nrows();
    let mut x = DVector::from_element(n, 1.0);
    x[0] += 1.0;
    x /= x.norm();
    for _ in 0..100_000 {
        let y = &a * &x;
        let next = x.dot(&y);
        let norm = y.norm();
        if norm == 0.0 || !norm.is_finite() {
            break;
        }
        let mu = next;
        x = y / norm;
        if (&a * &x - mu * &x).norm() <= 1e-13 {
            return mu;
        }
    }
    a.complex_eigenvalues()
        .iter()
        .max_by(|p, q| p.norm().total_cmp(&q.norm()))
        .map(|z| z.re)
        .unwrap_or(f64::NAN)
}

/// `d mu_A / d lambda` at `lambda -> 0+` by Richardson extrapolation.
pub fn leading_eigenvalue_slope(params: &MemoryParams) -> f64 {
    let hs = [1e-4, 5e-5, 2.5e-5];
    let g: Vec<f64> = hs.iter().map(|&h| (leading_a_eigenvalue(params, h) - 1.0) / h).collect();
    let r1 = [2.0 * g[1] - g[0], 2.0 * g[2] - g[1]];
    (4.0 * r1[1] - r1[0]) / 3.0
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Adiabatic {
    pub times: Vec<u64>,
    pub values: Vec<f64>,
    pub predicted_exponent: f64,
    /// The approximation is uncontrolled for `delta_bar >= 1`.
    pub warning: Option<String>,
}

/// `V_T ~ sum lambda c^2 exp(-2 lambda scale (T^(1+abar) - 1) / (1 + abar))`.
pub fn adiabatic_v(s: &Spectrum, am1: &Am1, times: &[u64]) -> Adiabatic {
    let e = 1.0 + am1.alpha_bar;
    let mut scratch = Vec::with_capacity(s.len());
    let values = times
        .iter()
        .map(|&t| {
            let x = 2.0 * am1.scale * ((t.max(1) as f64).powf(e) - 1.0) / e;
            scratch.clear();
            scratch.extend(s.lambdas().iter().zip(s.coeffs_sq()).rev().map(|(l, c)| l * c * (-l * x).exp()));
            kernel::pairwise_sum(&scratch)
        })
        .collect();
    let zeta = s.metadata().map_or(f64::NAN, |m| m.zeta);
    Adiabatic {
        times: times.to_vec(),
        values,
        predicted_exponent: zeta * e,
        warning: (am1.delta_bar >= 1.0).then(|| "delta_bar >= 1: adiabatic approximation not reliable".to_string()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub delta: f64,
    pub alpha_eff: f64,
    pub q0: f64,
    pub stable: bool,
    #[serde(rename = "U_prime_sigma")]
    pub u_prime_sigma: f64,
}

/// Stability verdict and noise sum on every grid point. Unstable points get
/// an infinite noise sum.
pub fn region_scan(s: &Spectrum, points: &[Memory1Point], tau1: f64, batch_size: u32) -> Vec<ScanRow> {
    let eval = |p: &Memory1Point| {
        let stable = strict_stability(p, s.lambda_max()).is_stable();
        let u = if stable {
            noise_stability_sum(s, p, tau1, batch_size).map_or(f64::INFINITY, |n| n.total)
        } else {
            f64::INFINITY
        };
        ScanRow { delta: p.delta, alpha_eff: p.alpha_eff, q0: p.q0, stable, u_prime_sigma: u }
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        points.par_iter().map(eval).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        points.iter().map(eval).collect()
    }
}

pub fn write_scan_csv<W: Write>(rows: &[ScanRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithm::Schedule;
    use crate::spectrum::{build_power_law, PowerLawSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stability_examples() {
        assert!(strict_stability(&Memory1Point::new(0.15, 4.0, 1.3), 1.0).is_stable());
        assert_eq!(
            strict_stability(&Memory1Point::new(0.25, 14.01, 0.0), 1.0),
            Stability::Unstable(InstabilityReason::AlphaEffTooLarge)
        );
        assert_eq!(
            strict_stability(&Memory1Point::new(2.5, 1.0, 0.0), 1.0),
            Stability::Unstable(InstabilityReason::DNotStrictlyStable)
        );
    }

    #[test]
    fn chart_round_trip() {
        let p = Memory1Point::new(0.15, 4.0, 1.3);
        let back = Memory1Point::from_params(&p.params()).unwrap();
        assert!((back.delta - 0.15).abs() < 1e-14);
        assert!((back.alpha_eff - 4.0).abs() < 1e-12);
        assert!((back.q0 - 1.3).abs() < 1e-14);
        let from_preset = Memory1Point::from_params(&Schedule::memory1(0.15, 4.0, 1.3).unwrap().params(0)).unwrap();
        assert!((from_preset.q0 - 1.3).abs() < 1e-12);
        // The chart roots match the matrix eigenvalues.
        for lam in [0.01, 0.2, 0.9] {
            let mut a = p.roots(lam).to_vec();
            let mut b = p.params().s_eigenvalues(lam);
            a.sort_by(|x, y| (x.re, x.im).partial_cmp(&(y.re, y.im)).unwrap());
            b.sort_by(|x, y| (x.re, x.im).partial_cmp(&(y.re, y.im)).unwrap());
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn circle_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid: Vec<f64> = (1..=200).map(|i| i as f64 / 200.0).collect();
        for _ in 0..200 {
            let p = Memory1Point::new(rng.random_range(0.01..1.9), rng.random_range(0.1..20.0), rng.random_range(-0.5..2.0));
            let loc = eigenvalue_locus(&p, &grid);
            let rhs = p.delta.powi(2) * p.alpha_eff * (p.alpha_eff + p.q1());
            for pt in &loc.points {
                if pt.real {
                    continue;
                }
                let x = Complex::new(pt.roots[0].0, pt.roots[0].1);
                let lhs = (p.q1() * x + p.q0).norm_sqr();
                assert!((lhs - rhs).abs() <= 1e-8 * rhs.abs().max(1.0));
                if let LocusShape::Circle { center, radius } = loc.shape {
                    assert!(((x - center).norm() - radius).abs() < 1e-8);
                } else {
                    panic!("non-real roots without a circle");
                }
            }
        }
    }

    #[test]
    fn real_roots_when_q1_very_negative() {
        let p = Memory1Point::new(0.5, 1.0, 0.6);
        assert!(p.q1() <= -p.alpha_eff);
        let grid: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        let loc = eigenvalue_locus(&p, &grid);
        assert!(loc.points.iter().all(|pt| pt.real));
        assert_eq!(loc.shape, LocusShape::Real);
    }

    #[test]
    fn hb_circle() {
        let loc = eigenvalue_locus(&Memory1Point::new(0.19, 3.0, 0.0), &[0.5]);
        match loc.shape {
            LocusShape::Circle { center, radius } => {
                assert_eq!(center, 0.0);
                assert!((radius - 0.81f64.sqrt()).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn line_when_q1_zero() {
        let loc = eigenvalue_locus(&Memory1Point::new(0.5, 2.0, -1.0), &[0.1]);
        assert_eq!(loc.shape, LocusShape::Line { re: 0.75 });
    }

    #[test]
    fn r_lambda_gd() {
        let r = r_lambda(&Memory1Point::new(1.0, 0.5, 0.0), 1.0).unwrap();
        assert!((r - 1.0 / 3.0).abs() < 1e-15);
        let series: f64 = (0..2000).map(|t| 0.25 * 0.25f64.powi(t)).sum();
        assert!((r - series).abs() < 1e-15);
    }

    #[test]
    fn r_lambda_pole() {
        let p = Memory1Point::new(0.5, 2.0, 0.2);
        let boundary = (4.0 - 2.0 * 0.5) / (2.0 * 0.2 + 0.5 * 2.0);
        let mut prev = 0.0;
        for i in 1..=20 {
            let lam = boundary * (1.0 - 0.5f64.powi(i));
            let r = r_lambda(&p, lam).unwrap();
            if i > 3 {
                assert!(r > prev);
            }
            prev = r;
        }
        assert!(matches!(r_lambda(&p, boundary * 1.01), Err(Error::Pole { .. })));
    }

    #[test]
    fn noise_sum_scaling_and_errors() {
        let s = build_power_law(&PowerLawSpec::new(3.0, 0.5, 1000)).unwrap();
        let p = Memory1Point::new(0.1, 2.0, 0.5);
        let a = noise_stability_sum(&s, &p, 1.0, 1).unwrap();
        let b = noise_stability_sum(&s, &p, 1.0, 2).unwrap();
        assert!((a.total - 2.0 * b.total).abs() < 1e-14 * a.total);
        let bad = Memory1Point::new(0.1, 50.0, 0.5);
        match noise_stability_sum(&s, &bad, 1.0, 1) {
            Err(Error::UnstableEigenvalue { k, .. }) => assert_eq!(k, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negative_q0_large_alpha_is_noisy() {
        let s = build_power_law(&PowerLawSpec::new(3.0, 0.5, 10_000)).unwrap();
        let p = Memory1Point::new(0.01, 100.0, -0.005);
        assert!(strict_stability(&p, s.lambda_max()).is_stable());
        assert!(noise_stability_sum(&s, &p, 1.0, 1).unwrap().total > 1.0);
    }

    #[test]
    fn three_regions_surrogates() {
        for delta in [1e-3, 1e-4, 1e-5] {
            let p = Memory1Point::new(delta, delta.powf(-0.5), 1.0);
            let (l1, l2) = (delta, delta.powf(0.5));
            let lams = (0..400).map(|i| 10f64.powf(-9.0 + 9.0 * i as f64 / 400.0)).filter(|&l| l <= 0.99);
            for lam in lams {
                let v = lam * lam * r_lambda(&p, lam).unwrap();
                let sur = if lam < l1 {
                    p.alpha_eff * lam
                } else if lam < l2 {
                    delta * p.alpha_eff / p.q0
                } else {
                    p.q0 * lam
                };
                let ratio = v / sur;
                assert!((1.0 / 20.0..=20.0).contains(&ratio), "lam {lam}: ratio {ratio}");
            }
        }
    }

    #[test]
    fn accelerated_family_sum_decreases() {
        let s = build_power_law(&PowerLawSpec::new(3.0, 0.5, 10_000)).unwrap();
        let h = 0.9 * (1.0 - 1.0 / 3.0) * 0.8;
        let mut prev = f64::INFINITY;
        for j in 1..=5 {
            let delta = 10f64.powi(-j);
            let p = Memory1Point::new(delta, delta.powf(-h), delta.powf(0.2));
            let total = noise_stability_sum(&s, &p, 1.0, 1).unwrap().total;
            assert!(total < prev, "j = {j}: {total} >= {prev}");
            prev = total;
        }
    }

    #[test]
    fn accelerated_point_noise_sum() {
        let s = build_power_law(&PowerLawSpec::new(3.0, 0.5, 10_000)).unwrap();
        let h = 0.5 * (1.0 - 1.0 / 3.0) * 0.8;
        let p = Memory1Point::new(1e-3, 1e-3f64.powf(-h), 1e-3f64.powf(0.2));
        assert!(noise_stability_sum(&s, &p, 1.0, 1).unwrap().total < 1.0);
        // With q0 = 1 the top region alone contributes about sum(lambda) > 1.
        let flat = Memory1Point::new(1e-3, 1e-3f64.powf(-h), 1.0);
        let n = noise_stability_sum(&s, &flat, 1.0, 1).unwrap();
        assert!(n.regions[2] > 1.0, "{n:?}");
    }

    #[test]
    fn accelerated_conditions() {
        let s = build_power_law(&PowerLawSpec::new(3.0, 0.5, 10_000)).unwrap();
        let hmax = (1.0 - 1.0 / 3.0) * 0.8;
        for delta in [1e-2, 1e-3, 1e-4] {
            let p = Memory1Point::new(delta, delta.powf(-0.5 * hmax), delta.powf(0.2));
            assert!(accelerated_region_check(&s, &p, DEFAULT_SLACK).all_pass());
        }
        let p = Memory1Point::new(1e-4, 1e-4f64.powf(-2.0 * hmax), 1e-4f64.powf(0.2));
        assert!(!accelerated_region_check(&s, &p, DEFAULT_SLACK).all_pass());
        let hb = Memory1Point::new(1e-3, 10.0, 0.0);
        let rep = accelerated_region_check(&s, &hb, DEFAULT_SLACK);
        assert_eq!(rep.conditions[1].pass, Some(false));
    }

    #[test]
    fn slopes() {
        let hb = MemoryParams::hb(0.1, 0.9);
        assert!((leading_eigenvalue_slope(&hb) + 2.0).abs() < 1e-3);
        let gd = MemoryParams::gd(0.3);
        assert!((leading_eigenvalue_slope(&gd) + 0.6).abs() < 1e-6);
    }

    #[test]
    fn adiabatic_exponent() {
        let s = build_power_law(&PowerLawSpec::new(3.0, 0.5, 100)).unwrap();
        let a = adiabatic_v(&s, &Am1::benchmark(3.0), &[1, 10]);
        assert!((a.predicted_exponent - 0.5 * (1.0 + 0.95 * 2.0 / 3.0)).abs() < 1e-12);
        assert!(a.warning.is_none());
        let flat = adiabatic_v(&s, &Am1::new(0.1, 0.1, 0.5, 0.0), &[1]);
        assert_eq!(flat.predicted_exponent, 0.5);
        assert!((a.values[0] - s.signal_mass()).abs() < 1e-14);
    }

    #[test]
    fn scan_csv_header() {
        let s = build_power_law(&PowerLawSpec::new(3.0, 0.5, 50)).unwrap();
        let rows = region_scan(&s, &[Memory1Point::new(0.1, 2.0, 0.3), Memory1Point::new(3.0, 2.0, 0.3)], 1.0, 1);
        assert!(rows[0].stable && !rows[1].stable);
        let mut buf = Vec::new();
        write_scan_csv(&rows, &mut buf).unwrap();
        assert!(buf.starts_with(b"delta,alpha_eff,q0,stable,U_prime_sigma\n"));
    }
}
