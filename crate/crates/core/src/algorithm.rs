//! Memory-M first-order methods in matrix form and in multistep form.
//!
//! One step of a memory-M method on a loss `L` reads
//!
//! ```text
//! w_{t+1} = w_t - alpha g_t + U_t b
//! U_{t+1} = g_t c^T + U_t D^T
//! g_t     = grad L(w_t + U_t a)
//! ```
//!
//! where the columns of `U_t` are the `M` auxiliary vectors. Restricted to an
//! eigenvector of the Hessian with eigenvalue `lambda`, the pair
//! `(w - w*, u)` evolves by the `(M+1) x (M+1)` matrix
//! `S_lambda = [[1, b^T], [0, D]] + lambda (-alpha; c)(1, a^T)`.

use crate::error::{Error, Result};
use crate::poly::{self, Poly};
use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryParams {
    pub alpha: f64,
    pub a: DVector<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub d: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultistepCoeffs {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl MemoryParams {
    pub fn new(
        alpha: f64,
        a: DVector<f64>,
        b: DVector<f64>,
        c: DVector<f64>,
        d: DMatrix<f64>,
    ) -> Result<Self> {
        let m = a.len();
        if b.len() != m || c.len() != m || d.nrows() != m || d.ncols() != m {
            return Err(Error::InvalidParameter(format!(
                "inconsistent memory sizes: a {}, b {}, c {}, D {}x{}",
                m,
                b.len(),
                c.len(),
                d.nrows(),
                d.ncols()
            )));
        }
        let finite = alpha.is_finite()
            && a.iter().chain(&b).chain(&c).chain(d.iter()).all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidParameter("non-finite memory parameter".into()));
        }
        Ok(MemoryParams { alpha, a, b, c, d })
    }

    /// Plain gradient descent, memory 0.
    pub fn gd(alpha: f64) -> Self {
        MemoryParams {
            alpha,
            a: DVector::zeros(0),
            b: DVector::zeros(0),
            c: DVector::zeros(0),
            d: DMatrix::zeros(0, 0),
        }
    }

    /// Memory-1 method from scalar entries.
    pub fn memory1(alpha: f64, a: f64, b: f64, c: f64, d: f64) -> Self {
        MemoryParams {
            alpha,
            a: DVector::from_element(1, a),
            b: DVector::from_element(1, b),
            c: DVector::from_element(1, c),
            d: DMatrix::from_element(1, 1, d),
        }
    }

    pub fn hb(alpha: f64, beta: f64) -> Self {
        Self::memory1(alpha, 0.0, beta, -alpha, beta)
    }

    /// Generalized memory-1 method in the `(delta, alpha_eff, q0)` chart:
    /// `u' = beta u - g`, `w' = w + alpha2 u' - alpha1 g` with `beta = 1 - delta`.
    pub fn memory1_from_alpha1(delta: f64, alpha_eff: f64, alpha1: f64) -> Self {
        let beta = 1.0 - delta;
        let alpha2 = delta * (alpha_eff - alpha1);
        Self::memory1(alpha1 + alpha2, 0.0, alpha2 * beta, -1.0, beta)
    }

    pub fn memory(&self) -> usize {
        self.a.len()
    }

    /// `(-alpha; c)`.
    pub fn v(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.memory() + 1);
        v[0] = -self.alpha;
        v.rows_mut(1, self.memory()).copy_from(&self.c);
        v
    }

    /// `(1; a)`.
    pub fn w(&self) -> DVector<f64> {
        let mut w = DVector::zeros(self.memory() + 1);
        w[0] = 1.0;
        w.rows_mut(1, self.memory()).copy_from(&self.a);
        w
    }

    /// `[[1, b^T], [0, D]]`, the part of `S_lambda` that does not depend on lambda.
    pub fn base_matrix(&self) -> DMatrix<f64> {
        let m = self.memory();
        let mut p = DMatrix::zeros(m + 1, m + 1);
        p[(0, 0)] = 1.0;
        p.view_mut((0, 1), (1, m)).copy_from(&self.b.transpose());
        p.view_mut((1, 1), (m, m)).copy_from(&self.d);
        p
    }

    pub fn s_matrix(&self, lam: f64) -> DMatrix<f64> {
        self.base_matrix() + lam * self.v() * self.w().transpose()
    }

    /// `det(x - D)`.
    fn det_x_minus_d(&self) -> Poly {
        let m = self.memory();
        if m <= 3 {
            poly::det(&x_minus_matrix(&self.d))
        } else {
            interpolate_det(m, |x| {
                (DMatrix::identity(m, m) * x - &self.d).determinant()
            })
        }
    }

    /// `det [[a^T c - alpha, a^T (1 - D) - b^T], [c, x - D]]`.
    fn q_poly(&self) -> Poly {
        let m = self.memory();
        let top_left = self.a.dot(&self.c) - self.alpha;
        let top_row = self.a.transpose() * (DMatrix::identity(m, m) - &self.d) - self.b.transpose();
        if m <= 3 {
            let lower = x_minus_matrix(&self.d);
            let mut rows = Vec::with_capacity(m + 1);
            let mut first = vec![Poly::constant(top_left)];
            first.extend(top_row.iter().map(|&v| Poly::constant(v)));
            rows.push(first);
            for i in 0..m {
                let mut row = vec![Poly::constant(self.c[i])];
                row.extend(lower[i].iter().cloned());
                rows.push(row);
            }
            poly::det(&rows)
        } else {
            interpolate_det(m + 1, |x| {
                let mut mat = DMatrix::zeros(m + 1, m + 1);
                mat[(0, 0)] = top_left;
                mat.view_mut((0, 1), (1, m)).copy_from(&top_row);
                mat.view_mut((1, 0), (m, 1)).copy_from(&self.c);
                mat.view_mut((1, 1), (m, m))
                    .copy_from(&(DMatrix::identity(m, m) * x - &self.d));
                mat.determinant()
            })
        }
    }

    /// Characteristic polynomial `chi(x, lambda)` of `S_lambda`, ascending
    /// coefficients, monic of degree `M + 1`.
    pub fn char_poly(&self, lam: f64) -> Poly {
        let m = self.memory();
        let mut chi = &(&Poly::x_minus(1.0) * &self.det_x_minus_d()) - &self.q_poly().scale(lam);
        chi.0.resize(m + 2, 0.0);
        chi.0[m + 1] = 1.0;
        chi
    }

    /// Eigenvalues of `S_lambda` with multiplicity.
    pub fn s_eigenvalues(&self, lam: f64) -> Vec<Complex<f64>> {
        match self.memory() {
            0 => vec![Complex::new(1.0 - self.alpha * lam, 0.0)],
            1 => {
                let s = self.s_matrix(lam);
                let tr = s[(0, 0)] + s[(1, 1)];
                let det = s[(0, 0)] * s[(1, 1)] - s[(0, 1)] * s[(1, 0)];
                quadratic_roots(tr, det).to_vec()
            }
            _ => self.s_matrix(lam).complex_eigenvalues().iter().copied().collect(),
        }
    }

    pub fn spectral_radius(&self, lam: f64) -> f64 {
        self.s_eigenvalues(lam)
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    pub fn to_multistep(&self) -> MultistepCoeffs {
        let m = self.memory();
        let dx = self.det_x_minus_d();
        let mut p = (&Poly::x_minus(1.0) * &dx).scale(-1.0);
        p.0.resize(m + 2, 0.0);
        p.0[m + 1] += 1.0;
        MultistepCoeffs {
            p: p.coeffs(m + 1),
            q: self.q_poly().coeffs(m + 1),
        }
    }

    /// `alpha - b^T (1 - D)^{-1} c`, cross-checked against the multistep formula.
    pub fn effective_learning_rate(&self) -> Result<f64> {
        let m = self.memory();
        if m == 0 {
            return Ok(self.alpha);
        }
        let one_minus_d = DMatrix::identity(m, m) - &self.d;
        let lu = one_minus_d.lu();
        let scale = self.d.norm().max(1.0);
        if lu.determinant().abs() < 1e-14 * scale.powi(m as i32) {
            return Err(Error::SingularMemory);
        }
        let x = lu.solve(&self.c).ok_or(Error::SingularMemory)?;
        let direct = self.alpha - self.b.dot(&x);
        let via_coeffs = self.to_multistep().effective_learning_rate()?;
        let tol = 1e-9 * direct.abs().max(via_coeffs.abs()).max(1e-300);
        debug_assert!(
            (direct - via_coeffs).abs() <= tol.max(1e-12),
            "effective learning rate formulas disagree: {direct} vs {via_coeffs}"
        );
        Ok(direct)
    }
}

fn x_minus_matrix(d: &DMatrix<f64>) -> Vec<Vec<Poly>> {
    let m = d.nrows();
    (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    if i == j {
                        Poly(vec![-d[(i, j)], 1.0])
                    } else {
                        Poly::constant(-d[(i, j)])
                    }
                })
                .collect()
        })
        .collect()
}

/// Recovers a degree-`deg` polynomial from `deg + 2` evaluations at spread nodes.
fn interpolate_det(deg: usize, f: impl Fn(f64) -> f64) -> Poly {
    let n = deg + 2;
    let xs: Vec<f64> = (0..n)
        .map(|j| 2.0 * (std::f64::consts::PI * (j as f64 + 0.5) / n as f64).cos())
        .collect();
    let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    let mut p = Poly::interpolate(&xs, &ys);
    p.0.truncate(deg + 1);
    p
}

/// Roots of `x^2 - tr x + det`.
pub fn quadratic_roots(tr: f64, det: f64) -> [Complex<f64>; 2] {
    let disc = tr * tr - 4.0 * det;
    if disc >= 0.0 {
        let sq = disc.sqrt();
        // Avoid cancellation in the smaller root.
        let big = 0.5 * (tr + tr.signum() * sq);
        let big = if big == 0.0 { 0.5 * sq } else { big };
        let small = if big != 0.0 { det / big } else { -0.5 * sq };
        [Complex::new(big, 0.0), Complex::new(small, 0.0)]
    } else {
        let im = 0.5 * (-disc).sqrt();
        [Complex::new(0.5 * tr, im), Complex::new(0.5 * tr, -im)]
    }
}

impl MultistepCoeffs {
    pub fn new(p: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        if p.len() != q.len() || p.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "p and q must share a nonzero length, got {} and {}",
                p.len(),
                q.len()
            )));
        }
        let sum: f64 = p.iter().sum();
        let scale = p.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
        if (sum - 1.0).abs() > 1e-12 * scale {
            return Err(Error::CoefficientSum { sum });
        }
        Ok(MultistepCoeffs { p, q })
    }

    pub fn memory(&self) -> usize {
        self.p.len() - 1
    }

    /// `sum q_m / (sum m p_m - M - 1)`.
    pub fn effective_learning_rate(&self) -> Result<f64> {
        let m = self.memory() as f64;
        let den: f64 = self
            .p
            .iter()
            .enumerate()
            .map(|(i, p)| i as f64 * p)
            .sum::<f64>()
            - m
            - 1.0;
        if den.abs() < 1e-14 {
            return Err(Error::SingularMemory);
        }
        Ok(self.q.iter().sum::<f64>() / den)
    }

    /// Canonical matrix form: `a = 0`, `b = e_1`, companion `D`.
    pub fn from_multistep(&self) -> Result<MemoryParams> {
        let checked = MultistepCoeffs::new(self.p.clone(), self.q.clone())?;
        let m = checked.memory();
        let alpha = -self.q[m];
        if m == 0 {
            return Ok(MemoryParams::gd(alpha));
        }
        let cum: Vec<f64> = self
            .p
            .iter()
            .scan(0.0, |acc, &x| {
                *acc += x;
                Some(*acc)
            })
            .collect();
        let mut d = DMatrix::zeros(m, m);
        for i in 0..m {
            d[(i, 0)] = -cum[m - 1 - i];
            if i + 1 < m {
                d[(i, i + 1)] = 1.0;
            }
        }
        // det(x - D) = x^M + sum_{i<M} cum[i] x^i for this layout.
        let mut dx = Poly(cum[..m].to_vec());
        dx.0.push(1.0);
        let r = &Poly(self.q.clone()) + &dx.scale(alpha);
        let c = DVector::from_fn(m, |i, _| r.coeff(m - 1 - i));
        let mut b = DVector::zeros(m);
        b[0] = 1.0;
        MemoryParams::new(alpha, DVector::zeros(m), b, c, d)
    }
}

/// Stationary or step-dependent family of memory parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    Stationary { name: String, params: MemoryParams },
    AveragedGd { alpha: f64 },
    JacobiHb { alpha: f64 },
    Am1(Am1),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Am1 {
    pub alpha1: f64,
    pub scale: f64,
    pub delta_bar: f64,
    pub alpha_bar: f64,
    #[serde(default = "default_delta_cap")]
    pub delta_cap: f64,
}

fn default_delta_cap() -> f64 {
    1.0
}

impl Am1 {
    pub fn new(alpha1: f64, scale: f64, delta_bar: f64, alpha_bar: f64) -> Self {
        Am1 {
            alpha1,
            scale,
            delta_bar,
            alpha_bar,
            delta_cap: 1.0,
        }
    }

    /// Configuration with `alpha_bar = delta_bar (1 - 1/nu)` and GD rate `0.1`.
    pub fn benchmark(nu: f64) -> Self {
        Am1::new(0.1, 0.1, 0.95, 0.95 * (1.0 - 1.0 / nu))
    }

    pub fn delta(&self, t: u64) -> f64 {
        let t = t.max(1) as f64;
        t.powf(-self.delta_bar).min(self.delta_cap)
    }

    pub fn alpha_eff(&self, t: u64) -> f64 {
        self.scale * (t.max(1) as f64).powf(self.alpha_bar)
    }

    pub fn params(&self, t: u64) -> MemoryParams {
        MemoryParams::memory1_from_alpha1(self.delta(t), self.alpha_eff(t), self.alpha1)
    }
}

impl Schedule {
    pub fn gd(alpha: f64) -> Self {
        Schedule::Stationary {
            name: format!("gd(alpha={alpha})"),
            params: MemoryParams::gd(alpha),
        }
    }

    /// Heavy ball. `|beta| >= 1` is accepted but never stable.
    pub fn hb(alpha: f64, beta: f64) -> Self {
        Schedule::Stationary {
            name: format!("hb(alpha={alpha}, beta={beta})"),
            params: MemoryParams::hb(alpha, beta),
        }
    }

    pub fn averaged_gd(alpha: f64) -> Self {
        Schedule::AveragedGd { alpha }
    }

    pub fn memory1(delta: f64, alpha_eff: f64, q0: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 2.0) {
            return Err(Error::InvalidParameter(format!(
                "delta must lie in (0, 2), got {delta}"
            )));
        }
        let beta = 1.0 - delta;
        let params = if beta == 0.0 {
            // alpha1 = q0 / beta is undefined; fall back to the canonical form.
            MultistepCoeffs::new(vec![delta - 1.0, 2.0 - delta], vec![q0, -q0 - delta * alpha_eff])?.from_multistep()?
        } else {
            MemoryParams::memory1_from_alpha1(delta, alpha_eff, q0 / beta)
        };
        Ok(Schedule::Stationary {
            name: format!("memory1(delta={delta}, alpha_eff={alpha_eff}, q0={q0})"),
            params,
        })
    }

    pub fn am1(alpha1: f64, scale: f64, delta_bar: f64, alpha_bar: f64) -> Self {
        Schedule::Am1(Am1::new(alpha1, scale, delta_bar, alpha_bar))
    }

    pub fn jacobi_hb(alpha: f64) -> Self {
        Schedule::JacobiHb { alpha }
    }

    pub fn stationary(name: impl Into<String>, params: MemoryParams) -> Self {
        Schedule::Stationary {
            name: name.into(),
            params,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Schedule::Stationary { name, .. } => name.clone(),
            Schedule::AveragedGd { alpha } => format!("averaged_gd(alpha={alpha})"),
            Schedule::JacobiHb { alpha } => format!("jacobi_hb(alpha={alpha})"),
            Schedule::Am1(a) => format!(
                "am1(alpha1={}, scale={}, delta_bar={}, alpha_bar={})",
                a.alpha1, a.scale, a.delta_bar, a.alpha_bar
            ),
        }
    }

    pub fn is_stationary(&self) -> bool {
        match self {
            Schedule::Stationary { .. } => true,
            Schedule::Am1(a) => a.delta_bar == 0.0 && a.alpha_bar == 0.0,
            _ => false,
        }
    }

    pub fn memory(&self) -> usize {
        match self {
            Schedule::Stationary { params, .. } => params.memory(),
            _ => 1,
        }
    }

    pub fn params(&self, t: u64) -> MemoryParams {
        match self {
            Schedule::Stationary { params, .. } => params.clone(),
            Schedule::AveragedGd { alpha } => {
                let tf = t as f64;
                let k = 1.0 / (tf + 1.0);
                MemoryParams::memory1(alpha * k, 1.0, k, -alpha * tf * k, tf * k)
            }
            Schedule::JacobiHb { alpha } => {
                let beta = if t <= 2 { 0.0 } else { 1.0 - 2.0 / t as f64 };
                MemoryParams::hb(*alpha, beta)
            }
            Schedule::Am1(a) => a.params(t),
        }
    }

    /// Parameters of a stationary schedule, `None` otherwise.
    pub fn stationary_params(&self) -> Option<MemoryParams> {
        self.is_stationary().then(|| self.params(0))
    }
}

/// Quadratic `L(w) = 1/2 (w - w*)^T H (w - w*)`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    pub hessian: DMatrix<f64>,
    pub optimum: DVector<f64>,
}

impl Quadratic {
    pub fn grad(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.hessian * (w - &self.optimum)
    }

    pub fn loss(&self, w: &DVector<f64>) -> f64 {
        let e = w - &self.optimum;
        0.5 * e.dot(&(&self.hessian * &e))
    }

    pub fn dim(&self) -> usize {
        self.optimum.len()
    }
}

/// One matrix-form step. `u` holds the memory vectors as columns.
pub fn memory_step(
    params: &MemoryParams,
    grad: impl Fn(&DVector<f64>) -> DVector<f64>,
    w: &DVector<f64>,
    u: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let g = grad(&(w + u * &params.a));
    let w_next = w - params.alpha * &g + u * &params.b;
    let u_next = &g * params.c.transpose() + u * params.d.transpose();
    (w_next, u_next)
}

/// Iterates in matrix form, returning `w_0, ..., w_steps`.
pub fn run_matrix_form(
    sched: &Schedule,
    grad: impl Fn(&DVector<f64>) -> DVector<f64>,
    w0: DVector<f64>,
    u0: DMatrix<f64>,
    steps: usize,
) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
    let mut ws = vec![w0];
    let mut us = vec![u0];
    for t in 0..steps {
        let (w, u) = memory_step(&sched.params(t as u64), &grad, &ws[t], &us[t]);
        ws.push(w);
        us.push(u);
    }
    (ws, us)
}

/// Extends `M + 1` starting iterates with the multistep recurrence up to
/// `w_steps`.
pub fn run_multistep(
    coeffs: &MultistepCoeffs,
    grad: impl Fn(&DVector<f64>) -> DVector<f64>,
    start: &[DVector<f64>],
    steps: usize,
) -> Vec<DVector<f64>> {
    let m = coeffs.memory();
    assert_eq!(start.len(), m + 1, "multistep needs M + 1 starting iterates");
    let mut ws: Vec<DVector<f64>> = start.to_vec();
    let mut gs: Vec<DVector<f64>> = ws.iter().map(&grad).collect();
    while ws.len() <= steps {
        let t = ws.len() - m - 1;
        let mut next = DVector::zeros(ws[0].len());
        for j in 0..=m {
            next += coeffs.p[j] * &ws[t + j] + coeffs.q[j] * &gs[t + j];
        }
        gs.push(grad(&next));
        ws.push(next);
    }
    ws.truncate(steps + 1);
    ws
}

/// Initial memory `u_0` for canonical parameters (`a = 0`, `b = e_1`) such
/// that the matrix form reproduces the given starting iterates `w_0..w_M`.
pub fn solve_initial_memory(
    params: &MemoryParams,
    grad: impl Fn(&DVector<f64>) -> DVector<f64>,
    start: &[DVector<f64>],
) -> DMatrix<f64> {
    let m = params.memory();
    let dim = start[0].len();
    let mut u0 = DMatrix::zeros(dim, m);
    for j in 1..=m {
        let (mut w, mut u) = (start[0].clone(), u0.clone());
        for _ in 0..j {
            (w, u) = memory_step(params, &grad, &w, &u);
        }
        let fix = &start[j] - &w;
        let mut col = u0.column_mut(j - 1);
        col += fix;
    }
    u0
}
