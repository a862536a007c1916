//! Exact expected-loss dynamics under the SE noise model.
//!
//! Each eigendirection `k` carries a symmetric `(M+1) x (M+1)` block `Z_k`,
//! the second moment of `(w - w*, u)` projected on that direction. One step
//! maps
//!
//! ```text
//! Z_k <- S Z_k S^T - (tau2/|B|) lambda_k^2 (w^T Z_k w) v v^T + s lambda_k v v^T
//! s    = (tau1/|B|) sum_j lambda_j w^T Z_j w
//! ```
//!
//! with `v = (-alpha; c)` and `w = (1; a)`. The loss is `1/2 sum lambda_k (Z_k)_00`.

use crate::algorithm::{MemoryParams, Schedule};
use crate::error::{Error, Result};
use crate::kernel::{self, StepCtx, SweepOut};
use crate::spectrum::Spectrum;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

/// Entries beyond this multiple of `L_0` count as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeParams {
    pub tau1: f64,
    pub tau2: f64,
    pub batch_size: u32,
}

impl SeParams {
    pub fn new(tau1: f64, tau2: f64, batch_size: u32) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
        }
        if !tau1.is_finite() || !tau2.is_finite() {
            return Err(Error::InvalidParameter("tau1 and tau2 must be finite".into()));
        }
        Ok(SeParams { tau1, tau2, batch_size })
    }

    pub fn noiseless() -> Self {
        SeParams { tau1: 0.0, tau2: 0.0, batch_size: 1 }
    }

    /// Exact noise map for centered Gaussian features.
    pub fn gaussian(batch_size: u32) -> Self {
        SeParams { tau1: 1.0, tau2: -1.0, batch_size }
    }

    /// True when every propagator is provably nonnegative.
    pub fn nonneg_propagators(&self) -> bool {
        self.tau1 >= 0.0 && self.tau2 <= 0.0
    }

    pub fn tau1_over_b(&self) -> f64 {
        self.tau1 / self.batch_size as f64
    }

    pub fn tau2_over_b(&self) -> f64 {
        self.tau2 / self.batch_size as f64
    }
}

/// `tau1 Tr(HC) H - tau2 H C H`.
pub fn sigma_se(c: &DMatrix<f64>, h: &DMatrix<f64>, se: &SeParams) -> DMatrix<f64> {
    let hc = h * c;
    hc.trace() * se.tau1 * h - se.tau2 * (&hc * h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Evolution,
    Expansion,
    MonteCarlo,
    Noiseless,
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(match self {
            Engine::Evolution => "evolution",
            Engine::Expansion => "expansion",
            Engine::MonteCarlo => "montecarlo",
            Engine::Noiseless => "noiseless",
        })
    }
}

impl std::str::FromStr for Engine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "evolution" => Ok(Engine::Evolution),
            "expansion" => Ok(Engine::Expansion),
            "montecarlo" => Ok(Engine::MonteCarlo),
            "noiseless" => Ok(Engine::Noiseless),
            _ => Err(Error::Config(format!("unknown engine {s:?}"))),
        }
    }
}

/// Which steps get stored in a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Recording {
    Every,
    /// Steps `ceil(ratio^n)` plus the endpoints.
    Geometric { ratio: f64 },
}

impl Default for Recording {
    fn default() -> Self {
        Recording::Every
    }
}

impl Recording {
    pub fn times(&self, horizon: u64) -> Vec<u64> {
        match *self {
            Recording::Every => (0..=horizon).collect(),
            Recording::Geometric { ratio } => {
                assert!(ratio > 1.0, "geometric recording ratio must exceed 1");
                let mut out = vec![0];
                let mut x = 1.0f64;
                while x.ceil() <= horizon as f64 {
                    let t = x.ceil() as u64;
                    if *out.last().unwrap() != t {
                        out.push(t);
                    }
                    x *= ratio;
                }
                if *out.last().unwrap() != horizon {
                    out.push(horizon);
                }
                out
            }
        }
    }
}

pub(crate) struct Recorder {
    times: Vec<u64>,
    next: usize,
}

impl Recorder {
    pub(crate) fn new(policy: Recording, horizon: u64) -> Self {
        Recorder { times: policy.times(horizon), next: 0 }
    }

    pub(crate) fn wants(&mut self, t: u64) -> bool {
        while self.next < self.times.len() && self.times[self.next] < t {
            self.next += 1;
        }
        self.next < self.times.len() && self.times[self.next] == t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossTrajectory {
    pub engine: Engine,
    pub times: Vec<u64>,
    pub values: Vec<f64>,
    pub diverged_at: Option<u64>,
    pub fingerprint: String,
}

impl LossTrajectory {
    pub fn new(engine: Engine, fingerprint: String) -> Self {
        LossTrajectory {
            engine,
            times: vec![],
            values: vec![],
            diverged_at: None,
            fingerprint,
        }
    }

    pub fn push(&mut self, t: u64, value: f64) {
        self.times.push(t);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn value_at(&self, t: u64) -> Option<f64> {
        self.times.binary_search(&t).ok().map(|i| self.values[i])
    }

    /// Largest recorded loss, infinite if a NaN was recorded.
    pub fn max_value(&self) -> f64 {
        self.values
            .iter()
            .fold(0.0f64, |m, &x| if x.is_nan() { f64::INFINITY } else { m.max(x) })
    }

    /// First recorded step whose loss exceeds `threshold`, or the divergence step.
    pub fn first_exceeding(&self, threshold: f64) -> Option<u64> {
        let hit = self
            .times
            .iter()
            .zip(&self.values)
            .find(|(_, &v)| !(v <= threshold))
            .map(|(&t, _)| t);
        match (hit, self.diverged_at) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "loss", "engine", "diverged_flag"])?;
        let engine = self.engine.to_string();
        for (&t, &v) in self.times.iter().zip(&self.values) {
            let flag = if self.diverged_at == Some(t) { "1" } else { "0" };
            wtr.write_record([t.to_string(), format!("{v:e}"), engine.clone(), flag.into()])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            t: u64,
            loss: f64,
            engine: String,
            diverged_flag: u8,
        }
        let mut traj = LossTrajectory::new(Engine::Evolution, String::new());
        for (i, row) in csv::Reader::from_reader(r).deserialize().enumerate() {
            let row: Row = row?;
            if i == 0 {
                traj.engine = row.engine.parse()?;
            }
            if row.diverged_flag != 0 && traj.diverged_at.is_none() {
                traj.diverged_at = Some(row.t);
            }
            traj.push(row.t, row.loss);
        }
        Ok(traj)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// FNV-1a digest of a run description.
pub fn fingerprint(parts: &[&str]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for b in part.bytes().chain(std::iter::once(0x1f)) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

pub(crate) fn run_fingerprint(engine: Engine, s: &Spectrum, sched: &Schedule, extra: &str, horizon: u64) -> String {
    let spec = format!(
        "K={} lsum={:e} mass={:e}",
        s.len(),
        s.lambdas().iter().sum::<f64>(),
        s.signal_mass()
    );
    fingerprint(&[&engine.to_string(), &spec, &sched.name(), extra, &horizon.to_string()])
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentState {
    dim: usize,
    blocks: Vec<f64>,
    step: u64,
    initial_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepStatus {
    Ok,
    Diverged,
}

impl MomentState {
    /// Block size `M + 1`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len() / (self.dim * self.dim)
    }

    /// Row-major block `Z_k`.
    pub fn block(&self, k: usize) -> &[f64] {
        let nn = self.dim * self.dim;
        &self.blocks[k * nn..(k + 1) * nn]
    }

    pub fn block_matrix(&self, k: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, self.block(k))
    }

    pub fn loss(&self, s: &Spectrum) -> f64 {
        let z00: Vec<f64> = self.blocks.iter().step_by(self.dim * self.dim).copied().collect();
        0.5 * kernel::weighted_sum(s.lambdas(), &z00, &mut Vec::new())
    }
}

/// `Z_k = c_k^2 e_00`, matching `w_0 = 0`, `u_0 = 0`.
pub fn init_state(s: &Spectrum, memory: usize) -> MomentState {
    let n = memory + 1;
    let mut blocks = vec![0.0; s.len() * n * n];
    for (k, &c) in s.coeffs_sq().iter().enumerate() {
        blocks[k * n * n] = c;
    }
    MomentState {
        dim: n,
        blocks,
        step: 0,
        initial_loss: s.initial_loss(),
    }
}

struct Flat {
    base: Vec<f64>,
    v: Vec<f64>,
    w: Vec<f64>,
}

impl Flat {
    fn new(p: &MemoryParams) -> Self {
        Flat {
            base: p.base_matrix().transpose().as_slice().to_vec(),
            v: p.v().as_slice().to_vec(),
            w: p.w().as_slice().to_vec(),
        }
    }
}

fn s_cache(s: &Spectrum, p: &MemoryParams) -> Vec<f64> {
    let f = Flat::new(p);
    let n = f.v.len();
    let mut out = Vec::with_capacity(s.len() * n * n);
    for &lam in s.lambdas() {
        for i in 0..n {
            for j in 0..n {
                out.push(f.base[i * n + j] + lam * f.v[i] * f.w[j]);
            }
        }
    }
    out
}

/// Advances the state by one step with fixed parameters.
pub fn step(state: &mut MomentState, s: &Spectrum, params: &MemoryParams, se: &SeParams) -> StepStatus {
    assert_eq!(state.dim, params.memory() + 1, "block size does not match memory");
    let f = Flat::new(params);
    let k = s.len();
    let quad: Vec<f64> = state.blocks.chunks_exact(state.dim * state.dim).map(|z| kernel::quad_form(z, &f.w)).collect();
    let noise = se.tau1_over_b() * kernel::weighted_sum(s.lambdas(), &quad, &mut Vec::new());
    let ctx = StepCtx {
        base: &f.base,
        v: &f.v,
        w: &f.w,
        w_next: &f.w,
        noise,
        tau2b: se.tau2_over_b(),
    };
    let (mut q, mut z) = (vec![0.0; k], vec![0.0; k]);
    let maxabs = kernel::sweep(state.dim, &mut state.blocks, s.lambdas(), None, &ctx, SweepOut { quad: &mut q, z00: &mut z });
    state.step += 1;
    if maxabs <= DIVERGENCE_FACTOR * state.initial_loss {
        StepStatus::Ok
    } else {
        StepStatus::Diverged
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub record: Recording,
}

/// Expected loss trajectory under the SE model, `t = 0..=horizon`.
pub fn run(s: &Spectrum, sched: &Schedule, se: &SeParams, horizon: u64, opts: RunOptions) -> LossTrajectory {
    let extra = format!("{se:?}");
    let mut traj = LossTrajectory::new(Engine::Evolution, run_fingerprint(Engine::Evolution, s, sched, &extra, horizon));
    let mut state = init_state(s, sched.memory());
    let n = state.dim;
    let k = s.len();
    let l0 = state.initial_loss;
    let limit = DIVERGENCE_FACTOR * l0;
    let lambdas = s.lambdas();
    let stationary = sched.stationary_params();
    let cache = stationary.as_ref().map(|p| s_cache(s, p));
    let fixed = stationary.as_ref().map(Flat::new);

    let mut rec = Recorder::new(opts.record, horizon);
    let mut scratch = Vec::with_capacity(k);
    let mut quad = vec![0.0; k];
    let mut z00 = vec![0.0; k];

    let mut cur = fixed.as_ref().map_or_else(|| Flat::new(&sched.params(0)), |f| Flat { base: f.base.clone(), v: f.v.clone(), w: f.w.clone() });
    for (q, z) in quad.iter_mut().zip(state.blocks.chunks_exact(n * n)) {
        *q = kernel::quad_form(z, &cur.w);
    }
    let mut noise = se.tau1_over_b() * kernel::weighted_sum(lambdas, &quad, &mut scratch);
    if rec.wants(0) {
        traj.push(0, l0);
    }
    for t in 0..horizon {
        let next = match fixed {
            Some(_) => None,
            None => Some(Flat::new(&sched.params(t + 1))),
        };
        let w_next = next.as_ref().map_or(&cur.w, |f| &f.w);
        let ctx = StepCtx {
            base: &cur.base,
            v: &cur.v,
            w: &cur.w,
            w_next,
            noise,
            tau2b: se.tau2_over_b(),
        };
        let maxabs = kernel::sweep(n, &mut state.blocks, lambdas, cache.as_deref(), &ctx, SweepOut { quad: &mut quad, z00: &mut z00 });
        state.step = t + 1;
        let loss = 0.5 * kernel::weighted_sum(lambdas, &z00, &mut scratch);
        noise = se.tau1_over_b() * kernel::weighted_sum(lambdas, &quad, &mut scratch);
        if !(maxabs <= limit) || !loss.is_finite() {
            traj.push(t + 1, loss);
            traj.diverged_at = Some(t + 1);
            return traj;
        }
        if rec.wants(t + 1) {
            traj.push(t + 1, loss);
        }
        if let Some(f) = next {
            cur = f;
        }
    }
    traj
}

/// Noiseless first-moment dynamics, `L_t = 1/2 sum lambda_k (Delta w_k)^2`.
pub fn run_noiseless(s: &Spectrum, sched: &Schedule, horizon: u64, opts: RunOptions) -> LossTrajectory {
    let mut traj = LossTrajectory::new(Engine::Noiseless, run_fingerprint(Engine::Noiseless, s, sched, "", horizon));
    let n = sched.memory() + 1;
    let lambdas = s.lambdas();
    let mut xs = vec![0.0; s.len() * n];
    for (k, &c) in s.coeffs_sq().iter().enumerate() {
        xs[k * n] = c.sqrt();
    }
    let l0 = s.initial_loss();
    let limit = (DIVERGENCE_FACTOR * l0).sqrt();
    let fixed = sched.stationary_params().map(|p| Flat::new(&p));
    let mut rec = Recorder::new(opts.record, horizon);
    let mut sq = vec![0.0; s.len()];
    let mut scratch = Vec::with_capacity(s.len());
    if rec.wants(0) {
        traj.push(0, l0);
    }
    for t in 0..horizon {
        let owned;
        let f = match &fixed {
            Some(f) => f,
            None => {
                owned = Flat::new(&sched.params(t));
                &owned
            }
        };
        let maxabs = kernel::sweep_vectors(n, &mut xs, lambdas, &f.base, &f.v, &f.w);
        for (q, x) in sq.iter_mut().zip(xs.chunks_exact(n)) {
            *q = x[0] * x[0];
        }
        let loss = 0.5 * kernel::weighted_sum(lambdas, &sq, &mut scratch);
        if !(maxabs <= limit) || !loss.is_finite() {
            traj.push(t + 1, loss);
            traj.diverged_at = Some(t + 1);
            return traj;
        }
        if rec.wants(t + 1) {
            traj.push(t + 1, loss);
        }
    }
    traj
}
