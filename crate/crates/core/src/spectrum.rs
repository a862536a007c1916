//! Discrete Hessian spectra and power-law families.
//!
//! A power-law spectrum uses `lambda_k = big_lambda * k^-nu` and target
//! amplitudes chosen so that `lambda_k c_k^2 = zeta nu Q big_lambda^zeta k^(-zeta nu - 1)`.
//! With that choice the tail mass below `lambda` is `Q lambda^zeta (1 + o(1))`,
//! and `sum c_k^2` grows without bound when `zeta < 1`.
//!
//! The alternative convention `c_k^2 = k^(-kappa-1)` is deliberately not
//! supported: it makes `sum c_k^2` finite for every exponent and shifts the
//! tail exponent by one.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerLawSpec {
    pub nu: f64,
    pub zeta: f64,
    #[serde(default = "one")]
    pub big_lambda: f64,
    #[serde(default = "default_size")]
    pub size: usize,
    /// Tail constant. Defaults to the value that makes `lambda_1 c_1^2 = 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
}

fn one() -> f64 {
    1.0
}

fn default_size() -> usize {
    10_000
}

impl PowerLawSpec {
    pub fn new(nu: f64, zeta: f64, size: usize) -> Self {
        PowerLawSpec {
            nu,
            zeta,
            big_lambda: 1.0,
            size,
            q: None,
        }
    }

    pub fn tail_constant(&self) -> f64 {
        self.q
            .unwrap_or_else(|| 1.0 / (self.zeta * self.nu * self.big_lambda.powf(self.zeta)))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::InvalidParameter(format!("nu must be > 0, got {}", self.nu)));
        }
        if !(self.zeta > 0.0 && self.zeta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "zeta must be > 0, got {}",
                self.zeta
            )));
        }
        if !(self.big_lambda > 0.0 && self.big_lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "big_lambda must be > 0, got {}",
                self.big_lambda
            )));
        }
        if self.size == 0 {
            return Err(Error::InvalidParameter("size must be >= 1".into()));
        }
        if let Some(q) = self.q {
            if !(q > 0.0 && q.is_finite()) {
                return Err(Error::InvalidParameter(format!("Q must be > 0, got {q}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    lambdas: Vec<f64>,
    coeffs_sq: Vec<f64>,
    metadata: Option<PowerLawSpec>,
}

impl Spectrum {
    pub fn new(lambdas: Vec<f64>, coeffs_sq: Vec<f64>) -> Result<Self> {
        if lambdas.len() != coeffs_sq.len() {
            return Err(Error::InvalidSpectrum(format!(
                "{} eigenvalues but {} coefficients",
                lambdas.len(),
                coeffs_sq.len()
            )));
        }
        for (k, &l) in lambdas.iter().enumerate() {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidSpectrum(format!("lambda[{k}] = {l} is not positive")));
            }
            if k > 0 && l >= lambdas[k - 1] {
                return Err(Error::InvalidSpectrum(format!(
                    "eigenvalues must be strictly decreasing, lambda[{k}] = {l} >= lambda[{}]",
                    k - 1
                )));
            }
        }
        for (k, &c) in coeffs_sq.iter().enumerate() {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::InvalidSpectrum(format!("coeff_sq[{k}] = {c} is invalid")));
            }
        }
        let s = Spectrum {
            lambdas,
            coeffs_sq,
            metadata: None,
        };
        if !s.signal_mass().is_finite() {
            return Err(Error::InvalidSpectrum("sum of lambda c^2 overflows".into()));
        }
        Ok(s)
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn coeffs_sq(&self) -> &[f64] {
        &self.coeffs_sq
    }

    pub fn metadata(&self) -> Option<&PowerLawSpec> {
        self.metadata.as_ref()
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambdas.first().copied().unwrap_or(0.0)
    }

    /// `sum_k lambda_k c_k^2`, accumulated from the smallest eigenvalue up.
    pub fn signal_mass(&self) -> f64 {
        self.lambdas
            .iter()
            .zip(&self.coeffs_sq)
            .rev()
            .map(|(l, c)| l * c)
            .sum()
    }

    /// Initial loss `L_0 = 1/2 sum lambda_k c_k^2` for `w_0 = 0`.
    pub fn initial_loss(&self) -> f64 {
        0.5 * self.signal_mass()
    }

    /// Keeps the first `k` eigenvalues.
    pub fn truncated(&self, k: usize) -> Spectrum {
        let k = k.min(self.len());
        Spectrum {
            lambdas: self.lambdas[..k].to_vec(),
            coeffs_sq: self.coeffs_sq[..k].to_vec(),
            metadata: self.metadata.clone().map(|mut m| {
                m.size = k;
                m
            }),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["lambda", "coeff_sq"])?;
        for (l, c) in self.lambdas.iter().zip(&self.coeffs_sq) {
            wtr.write_record([format!("{l:e}"), format!("{c:e}")])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Spectrum> {
        #[derive(Deserialize)]
        struct Row {
            lambda: f64,
            coeff_sq: f64,
        }
        let mut lambdas = Vec::new();
        let mut coeffs = Vec::new();
        for row in csv::Reader::from_reader(r).deserialize() {
            let row: Row = row?;
            lambdas.push(row.lambda);
            coeffs.push(row.coeff_sq);
        }
        Spectrum::new(lambdas, coeffs)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Spectrum> {
        Spectrum::read_csv(std::fs::File::open(path)?)
    }
}

pub fn build_power_law(spec: &PowerLawSpec) -> Result<Spectrum> {
    spec.validate()?;
    let PowerLawSpec {
        nu,
        zeta,
        big_lambda,
        size,
        ..
    } = *spec;
    let q = spec.tail_constant();
    let amp = zeta * nu * q * big_lambda.powf(zeta);
    let mut lambdas = Vec::with_capacity(size);
    let mut coeffs = Vec::with_capacity(size);
    for k in 1..=size {
        let kf = k as f64;
        let lam = big_lambda * kf.powf(-nu);
        lambdas.push(lam);
        coeffs.push(amp * kf.powf(-zeta * nu - 1.0) / lam);
    }
    let mut s = Spectrum::new(lambdas, coeffs)?;
    s.metadata = Some(PowerLawSpec {
        q: Some(q),
        ..spec.clone()
    });
    Ok(s)
}

/// `sum_{k : lambda_k < lam} lambda_k c_k^2`, accumulated smallest first.
pub fn tail_sum(s: &Spectrum, lam: f64) -> f64 {
    let start = s.lambdas.partition_point(|&l| l >= lam);
    s.lambdas[start..]
        .iter()
        .zip(&s.coeffs_sq[start..])
        .rev()
        .map(|(l, c)| l * c)
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergenceClass {
    Immediate,
    Eventual,
    ConvergentCandidate,
}

/// Classifies the infinite-dimensional extrapolation of a spectrum by whether
/// `sum lambda_k^2` and `sum lambda_k` converge. Without an explicit power
/// law, the exponent is estimated by a log-log regression of `lambda_k` on `k`.
pub fn classify_divergence(s: &Spectrum, extrapolate: Option<&PowerLawSpec>) -> DivergenceClass {
    let nu = match extrapolate.or(s.metadata()) {
        Some(spec) => Some(spec.nu),
        None => estimate_nu(s),
    };
    match nu {
        Some(nu) if nu <= 0.5 => DivergenceClass::Immediate,
        Some(nu) if nu <= 1.0 => DivergenceClass::Eventual,
        _ => DivergenceClass::ConvergentCandidate,
    }
}

fn estimate_nu(s: &Spectrum) -> Option<f64> {
    if s.len() < 2 {
        return None;
    }
    let pts: Vec<(f64, f64)> = s
        .lambdas
        .iter()
        .enumerate()
        .map(|(k, l)| (((k + 1) as f64).ln(), l.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(-sxy / sxx)
}
