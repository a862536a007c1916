//! Dense real polynomials in ascending coefficient order.

use nalgebra::{Complex, DMatrix};
use std::ops::{Add, Mul, Neg, Sub};

#[derive(Clone, Debug, PartialEq)]
pub struct Poly(pub Vec<f64>);

impl Poly {
    pub fn zero() -> Self {
        Poly(vec![])
    }

    pub fn constant(c: f64) -> Self {
        Poly(vec![c])
    }

    /// `x - r`.
    pub fn x_minus(r: f64) -> Self {
        Poly(vec![-r, 1.0])
    }

    /// Coefficient of `x^m`, zero past the stored length.
    pub fn coeff(&self, m: usize) -> f64 {
        self.0.get(m).copied().unwrap_or(0.0)
    }

    /// Coefficients padded or cut to exactly `len` entries.
    pub fn coeffs(&self, len: usize) -> Vec<f64> {
        (0..len).map(|m| self.coeff(m)).collect()
    }

    pub fn scale(&self, s: f64) -> Self {
        Poly(self.0.iter().map(|c| c * s).collect())
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn eval_complex(&self, x: Complex<f64>) -> Complex<f64> {
        self.0
            .iter()
            .rev()
            .fold(Complex::new(0.0, 0.0), |acc, &c| acc * x + c)
    }

    /// Roots via the companion matrix. Leading coefficient must be nonzero.
    pub fn roots(&self) -> Vec<Complex<f64>> {
        let mut c = self.0.clone();
        while c.len() > 1 && c[c.len() - 1] == 0.0 {
            c.pop();
        }
        let n = c.len().saturating_sub(1);
        if n == 0 {
            return vec![];
        }
        let lead = c[n];
        let mut comp = DMatrix::zeros(n, n);
        for i in 1..n {
            comp[(i, i - 1)] = 1.0;
        }
        for i in 0..n {
            comp[(i, n - 1)] = -c[i] / lead;
        }
        comp.complex_eigenvalues().iter().copied().collect()
    }

    /// Coefficients of the unique polynomial of degree `< xs.len()` through
    /// the given samples.
    pub fn interpolate(xs: &[f64], ys: &[f64]) -> Self {
        let n = xs.len();
        let vand = DMatrix::from_fn(n, n, |i, j| xs[i].powi(j as i32));
        let rhs = nalgebra::DVector::from_column_slice(ys);
        let sol = vand
            .lu()
            .solve(&rhs)
            .expect("interpolation nodes must be distinct");
        Poly(sol.iter().copied().collect())
    }
}

impl Add for &Poly {
    type Output = Poly;
    fn add(self, rhs: &Poly) -> Poly {
        let n = self.0.len().max(rhs.0.len());
        Poly((0..n).map(|m| self.coeff(m) + rhs.coeff(m)).collect())
    }
}

impl Sub for &Poly {
    type Output = Poly;
    fn sub(self, rhs: &Poly) -> Poly {
        let n = self.0.len().max(rhs.0.len());
        Poly((0..n).map(|m| self.coeff(m) - rhs.coeff(m)).collect())
    }
}

impl Mul for &Poly {
    type Output = Poly;
    fn mul(self, rhs: &Poly) -> Poly {
        if self.0.is_empty() || rhs.0.is_empty() {
            return Poly::zero();
        }
        let mut out = vec![0.0; self.0.len() + rhs.0.len() - 1];
        for (i, a) in self.0.iter().enumerate() {
            for (j, b) in rhs.0.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Poly(out)
    }
}

impl Neg for &Poly {
    type Output = Poly;
    fn neg(self) -> Poly {
        self.scale(-1.0)
    }
}

/// Determinant of a square matrix of polynomials by cofactor expansion along
/// the first row. Intended for sizes up to 4.
pub fn det(m: &[Vec<Poly>]) -> Poly {
    let n = m.len();
    match n {
        0 => Poly::constant(1.0),
        1 => m[0][0].clone(),
        2 => &(&m[0][0] * &m[1][1]) - &(&m[0][1] * &m[1][0]),
        _ => {
            let mut acc = Poly::zero();
            for j in 0..n {
                if m[0][j].0.iter().all(|&c| c == 0.0) {
                    continue;
                }
                let minor: Vec<Vec<Poly>> = m[1..]
                    .iter()
                    .map(|row| {
                        row.iter()
                            .enumerate()
                            .filter(|&(c, _)| c != j)
                            .map(|(_, p)| p.clone())
                            .collect()
                    })
                    .collect();
                let term = &m[0][j] * &det(&minor);
                acc = if j % 2 == 0 { &acc + &term } else { &acc - &term };
            }
            acc
        }
    }
}
