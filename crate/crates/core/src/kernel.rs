//! Per-eigenvalue block kernels shared by the moment evolution and the
//! propagator computation. Blocks are row-major `n x n` slices laid out back
//! to back; sizes up to 4 get fully unrolled code paths.

/// Eigenvalues per parallel task. Fixed so results never depend on the pool.
#[cfg(feature = "parallel")]
const CHUNK: usize = 256;

/// Everything a block update needs besides the block and its eigenvalue.
pub(crate) struct StepCtx<'a> {
    /// `[[1, b^T], [0, D]]`, row-major.
    pub base: &'a [f64],
    /// `(-alpha; c)`.
    pub v: &'a [f64],
    /// `(1; a)` of the current step.
    pub w: &'a [f64],
    /// `(1; a)` of the next step, used for the reported quadratic form.
    pub w_next: &'a [f64],
    /// Coefficient of `lambda v v^T` added to every block.
    pub noise: f64,
    /// `tau2 / |B|`.
    pub tau2b: f64,
}

/// Output of a sweep: per-block `w_next^T Z w_next` and `Z_00`, plus the
/// largest absolute entry seen (infinite if anything was NaN).
pub(crate) struct SweepOut<'a> {
    pub quad: &'a mut [f64],
    pub z00: &'a mut [f64],
}

#[inline(always)]
fn track(m: &mut f64, x: f64) {
    let a = x.abs();
    if !(a <= *m) {
        *m = if a.is_nan() { f64::INFINITY } else { a };
    }
}

#[inline(always)]
fn arr<const N: usize>(x: &[f64]) -> [f64; N] {
    let mut out = [0.0; N];
    out.copy_from_slice(&x[..N]);
    out
}

fn sweep_fixed<const N: usize>(
    blocks: &mut [f64],
    lambdas: &[f64],
    cache: Option<&[f64]>,
    ctx: &StepCtx,
    out: SweepOut,
) -> f64 {
    let v: [f64; N] = arr(ctx.v);
    let w: [f64; N] = arr(ctx.w);
    let wn: [f64; N] = arr(ctx.w_next);
    let mut base = [[0.0; N]; N];
    for i in 0..N {
        base[i] = arr(&ctx.base[i * N..]);
    }
    let mut maxabs = 0.0f64;
    for (k, z) in blocks.chunks_exact_mut(N * N).enumerate() {
        let lam = lambdas[k];
        let mut s = [[0.0; N]; N];
        match cache {
            Some(c) => {
                for i in 0..N {
                    s[i] = arr(&c[k * N * N + i * N..]);
                }
            }
            None => {
                for i in 0..N {
                    for j in 0..N {
                        s[i][j] = base[i][j] + lam * v[i] * w[j];
                    }
                }
            }
        }
        let mut zz = [[0.0; N]; N];
        for i in 0..N {
            zz[i] = arr(&z[i * N..]);
        }
        let mut q = 0.0;
        for i in 0..N {
            let mut r = 0.0;
            for j in 0..N {
                r += zz[i][j] * w[j];
            }
            q += w[i] * r;
        }
        let coef = lam * ctx.noise - ctx.tau2b * lam * lam * q;
        let mut t = [[0.0; N]; N];
        for i in 0..N {
            for j in 0..N {
                let mut acc = 0.0;
                for l in 0..N {
                    acc += s[i][l] * zz[l][j];
                }
                t[i][j] = acc;
            }
        }
        for i in 0..N {
            for j in i..N {
                let mut acc = coef * v[i] * v[j];
                for l in 0..N {
                    acc += t[i][l] * s[j][l];
                }
                zz[i][j] = acc;
                zz[j][i] = acc;
                track(&mut maxabs, acc);
            }
        }
        let mut qn = 0.0;
        for i in 0..N {
            z[i * N..(i + 1) * N].copy_from_slice(&zz[i]);
            let mut r = 0.0;
            for j in 0..N {
                r += zz[i][j] * wn[j];
            }
            qn += wn[i] * r;
        }
        out.quad[k] = qn;
        out.z00[k] = zz[0][0];
    }
    maxabs
}

fn sweep_dyn(
    n: usize,
    blocks: &mut [f64],
    lambdas: &[f64],
    cache: Option<&[f64]>,
    ctx: &StepCtx,
    out: SweepOut,
) -> f64 {
    let nn = n * n;
    let mut s = vec![0.0; nn];
    let mut t = vec![0.0; nn];
    let mut maxabs = 0.0f64;
    for (k, z) in blocks.chunks_exact_mut(nn).enumerate() {
        let lam = lambdas[k];
        match cache {
            Some(c) => s.copy_from_slice(&c[k * nn..(k + 1) * nn]),
            None => {
                for i in 0..n {
                    for j in 0..n {
                        s[i * n + j] = ctx.base[i * n + j] + lam * ctx.v[i] * ctx.w[j];
                    }
                }
            }
        }
        let q = quad_form(z, ctx.w);
        let coef = lam * ctx.noise - ctx.tau2b * lam * lam * q;
        for i in 0..n {
            for j in 0..n {
                t[i * n + j] = (0..n).map(|l| s[i * n + l] * z[l * n + j]).sum();
            }
        }
        for i in 0..n {
            for j in i..n {
                let acc = coef * ctx.v[i] * ctx.v[j]
                    + (0..n).map(|l| t[i * n + l] * s[j * n + l]).sum::<f64>();
                z[i * n + j] = acc;
                z[j * n + i] = acc;
                track(&mut maxabs, acc);
            }
        }
        out.quad[k] = quad_form(z, ctx.w_next);
        out.z00[k] = z[0];
    }
    maxabs
}

pub(crate) fn quad_form(z: &[f64], w: &[f64]) -> f64 {
    let n = w.len();
    let mut q = 0.0;
    for i in 0..n {
        let mut r = 0.0;
        for j in 0..n {
            r += z[i * n + j] * w[j];
        }
        q += w[i] * r;
    }
    q
}

fn sweep_serial(
    n: usize,
    blocks: &mut [f64],
    lambdas: &[f64],
    cache: Option<&[f64]>,
    ctx: &StepCtx,
    out: SweepOut,
) -> f64 {
    match n {
        1 => sweep_fixed::<1>(blocks, lambdas, cache, ctx, out),
        2 => sweep_fixed::<2>(blocks, lambdas, cache, ctx, out),
        3 => sweep_fixed::<3>(blocks, lambdas, cache, ctx, out),
        4 => sweep_fixed::<4>(blocks, lambdas, cache, ctx, out),
        _ => sweep_dyn(n, blocks, lambdas, cache, ctx, out),
    }
}

/// Applies `Z <- S Z S^T + (lambda noise - tau2b lambda^2 w^T Z w) v v^T` to
/// every block. Returns the largest absolute entry written.
pub(crate) fn sweep(
    n: usize,
    blocks: &mut [f64],
    lambdas: &[f64],
    cache: Option<&[f64]>,
    ctx: &StepCtx,
    out: SweepOut,
) -> f64 {
    #[cfg(feature = "parallel")]
    {
        if lambdas.len() > 2 * CHUNK && rayon::current_num_threads() > 1 {
            use rayon::prelude::*;
            let nn = n * n;
            let caches: Vec<Option<&[f64]>> = match cache {
                Some(c) => c.chunks(CHUNK * nn).map(Some).collect(),
                None => vec![None; lambdas.len().div_ceil(CHUNK)],
            };
            return blocks
                .par_chunks_mut(CHUNK * nn)
                .zip(lambdas.par_chunks(CHUNK))
                .zip(out.quad.par_chunks_mut(CHUNK))
                .zip(out.z00.par_chunks_mut(CHUNK))
                .zip(caches.into_par_iter())
                .map(|((((b, l), q), z), c)| {
                    sweep_serial(n, b, l, c, ctx, SweepOut { quad: q, z00: z })
                })
                .reduce(|| 0.0, |a, b| if a.is_nan() || b.is_nan() { f64::INFINITY } else { a.max(b) });
        }
    }
    sweep_serial(n, blocks, lambdas, cache, ctx, out)
}

/// First-moment sweep: `x <- base x + lambda v (w^T x)` for each eigenvalue.
/// Returns the largest absolute entry written.
pub(crate) fn sweep_vectors(
    n: usize,
    xs: &mut [f64],
    lambdas: &[f64],
    base: &[f64],
    v: &[f64],
    w: &[f64],
) -> f64 {
    let mut maxabs = 0.0f64;
    let mut y = vec![0.0; n];
    for (k, x) in xs.chunks_exact_mut(n).enumerate() {
        let proj: f64 = (0..n).map(|j| w[j] * x[j]).sum::<f64>() * lambdas[k];
        for i in 0..n {
            y[i] = proj * v[i] + (0..n).map(|j| base[i * n + j] * x[j]).sum::<f64>();
        }
        for i in 0..n {
            x[i] = y[i];
            track(&mut maxabs, y[i]);
        }
    }
    maxabs
}

/// Pairwise summation in a fixed tree order.
pub(crate) fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        acc
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

/// `sum_k weight_k values_k` in the fixed pairwise order, reusing `scratch`.
pub(crate) fn weighted_sum(weights: &[f64], values: &[f64], scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.extend(weights.iter().zip(values).map(|(w, v)| w * v));
    pairwise_sum(scratch)
}
