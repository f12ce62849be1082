//! Limited-memory BFGS with a strong-Wolfe cubic-interpolation line search.
//!
//! The optimizer keeps the `m` most recent curvature pairs `(s_k, y_k)` and
//! applies the two-loop recursion with the usual `s.y / y.y` initial Hessian
//! scaling. Pairs that fail the curvature condition are skipped rather than
//! stored. An optional positivity floor projects every trial point, which is
//! how conductivity iterates are kept elliptic; the projection is applied
//! inside the line search so accepted objective values are always evaluated
//! at feasible points and the trace stays non-increasing.

use std::collections::VecDeque;

use crate::error::Result;

const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const MAX_BRACKET: usize = 30;
const MAX_ZOOM: usize = 30;

/// Options for [`lbfgs_minimize`].
#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    /// Maximum number of iterations (K).
    pub max_iters: usize,
    /// History size m.
    pub memory: usize,
    /// Stop when the gradient infinity norm falls below this.
    pub grad_tol: f64,
    /// Project iterates onto `x >= floor` when set.
    pub positivity_floor: Option<f64>,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            max_iters: 100,
            memory: 10,
            grad_tol: 1e-10,
            positivity_floor: None,
        }
    }
}

/// One row of the optimization trace.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    pub misfit: f64,
    pub grad_norm: f64,
    pub step_length: f64,
    /// Number of coordinates clamped at the positivity floor.
    pub clamped: usize,
}

/// Why the optimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIters,
    GradientTolerance,
    LineSearchFailure,
}

/// Result of an L-BFGS run; `x` is the best (final) iterate.
#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub trace: Vec<IterationRecord>,
    pub stop: StopReason,
}

impl LbfgsResult {
    pub fn iterations(&self) -> usize {
        self.trace.len() - 1
    }
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Two-loop recursion: approximate `H_k g` with `H_0 = gamma I`.
fn two_loop_direction(history: &VecDeque<Pair>, grad: &[f64]) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for pair in history.iter().rev() {
        let alpha = pair.rho * dot(&pair.s, &q);
        axpy(&mut q, -alpha, &pair.y);
        alphas.push(alpha);
    }
    let gamma = history
        .back()
        .map(|p| 1.0 / (p.rho * dot(&p.y, &p.y)))
        .unwrap_or(1.0);
    for v in &mut q {
        *v *= gamma;
    }
    for (pair, alpha) in history.iter().zip(alphas.iter().rev()) {
        let beta = pair.rho * dot(&pair.y, &q);
        axpy(&mut q, alpha - beta, &pair.s);
    }
    for v in &mut q {
        *v = -*v;
    }
    q
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn project(x: &mut [f64], floor: Option<f64>) -> usize {
    match floor {
        None => 0,
        Some(f) => {
            let mut clamped = 0;
            for v in x.iter_mut() {
                if *v < f {
                    *v = f;
                    clamped += 1;
                }
            }
            clamped
        }
    }
}

struct Probe {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    dphi: f64,
    clamped: usize,
}

/// Minimize `objective` (returning value and gradient) from `x0`.
///
/// The returned trace always starts with the initial point and is
/// non-increasing in the objective. Line-search failure is not an error: the
/// run stops gracefully at the best iterate found.
pub fn lbfgs_minimize<F>(
    mut objective: F,
    x0: Vec<f64>,
    opts: &LbfgsOptions,
) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    assert!(opts.max_iters >= 1, "max_iters must be >= 1");
    assert!(opts.memory >= 1, "memory must be >= 1");

    let mut x = x0;
    let clamped0 = project(&mut x, opts.positivity_floor);
    let (mut f, mut g) = objective(&x)?;
    let mut trace = vec![IterationRecord {
        iteration: 0,
        misfit: f,
        grad_norm: inf_norm(&g),
        step_length: 0.0,
        clamped: clamped0,
    }];

    let mut history: VecDeque<Pair> = VecDeque::with_capacity(opts.memory);
    let mut stop = StopReason::MaxIters;

    if inf_norm(&g) <= opts.grad_tol {
        return Ok(LbfgsResult {
            x,
            value: f,
            trace,
            stop: StopReason::GradientTolerance,
        });
    }

    for iteration in 1..=opts.max_iters {
        let mut direction = two_loop_direction(&history, &g);
        let mut dphi0 = masked_slope(&x, &direction, &g, opts.positivity_floor);
        if !(dphi0 < 0.0) {
            // Not a descent direction (can happen right after heavy
            // clamping); fall back to steepest descent.
            history.clear();
            direction = g.iter().map(|v| -v).collect();
            dphi0 = masked_slope(&x, &direction, &g, opts.positivity_floor);
            if !(dphi0 < 0.0) {
                stop = StopReason::LineSearchFailure;
                break;
            }
        }

        let alpha0 = if history.is_empty() {
            (1.0 / inf_norm(&direction)).min(1.0)
        } else {
            1.0
        };

        let probe = line_search(&mut objective, &x, &direction, f, dphi0, alpha0, opts)?;
        let Some((alpha, probe)) = probe else {
            stop = StopReason::LineSearchFailure;
            break;
        };

        let s: Vec<f64> = probe.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = probe.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let s_norm = dot(&s, &s).sqrt();
        let y_norm = dot(&y, &y).sqrt();
        if sy > 1e-10 * s_norm * y_norm {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back(Pair {
                s,
                y,
                rho: 1.0 / sy,
            });
        }

        x = probe.x;
        f = probe.f;
        g = probe.g;
        trace.push(IterationRecord {
            iteration,
            misfit: f,
            grad_norm: inf_norm(&g),
            step_length: alpha,
            clamped: probe.clamped,
        });

        if inf_norm(&g) <= opts.grad_tol {
            stop = StopReason::GradientTolerance;
            break;
        }
    }

    Ok(LbfgsResult {
        x,
        value: f,
        trace,
        stop,
    })
}

/// Directional derivative of `f(P(x + a d))` at `a = 0`: clamped coordinates
/// contribute nothing.
fn masked_slope(x: &[f64], d: &[f64], g: &[f64], floor: Option<f64>) -> f64 {
    match floor {
        None => dot(g, d),
        Some(fl) => x
            .iter()
            .zip(d)
            .zip(g)
            .map(|((xi, di), gi)| {
                if *xi <= fl && *di < 0.0 {
                    0.0
                } else {
                    gi * di
                }
            })
            .sum(),
    }
}

/// Strong-Wolfe line search (bracket + cubic zoom). Returns the accepted step
/// and probe, or `None` when no acceptable step was found.
fn line_search<F>(
    objective: &mut F,
    x: &[f64],
    d: &[f64],
    f0: f64,
    dphi0: f64,
    alpha0: f64,
    opts: &LbfgsOptions,
) -> Result<Option<(f64, Probe)>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut eval = |alpha: f64| -> Result<Probe> {
        let mut xa: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect();
        let clamped = project(&mut xa, opts.positivity_floor);
        let (f, g) = objective(&xa)?;
        let dphi = masked_slope(&xa, d, &g, opts.positivity_floor);
        Ok(Probe {
            x: xa,
            f,
            g,
            dphi,
            clamped,
        })
    };

    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut dphi_prev = dphi0;
    let mut probe_prev: Option<Probe> = None;
    let mut alpha = alpha0;

    for i in 0..MAX_BRACKET {
        let probe = eval(alpha)?;
        if probe.f > f0 + WOLFE_C1 * alpha * dphi0 || (i > 0 && probe.f >= f_prev) {
            let lo = (alpha_prev, f_prev, dphi_prev, probe_prev);
            let hi = (alpha, probe.f, probe.dphi, Some(probe));
            return zoom(&mut eval, f0, dphi0, lo, hi);
        }
        if probe.dphi.abs() <= -WOLFE_C2 * dphi0 {
            return Ok(Some((alpha, probe)));
        }
        if probe.dphi >= 0.0 {
            let hi = (alpha_prev, f_prev, dphi_prev, probe_prev);
            let lo = (alpha, probe.f, probe.dphi, Some(probe));
            return zoom(&mut eval, f0, dphi0, lo, hi);
        }
        alpha_prev = alpha;
        f_prev = probe.f;
        dphi_prev = probe.dphi;
        probe_prev = Some(probe);
        alpha *= 2.0;
        if alpha > 1e12 {
            break;
        }
    }
    Ok(None)
}

type Endpoint = (f64, f64, f64, Option<Probe>);

/// Shrink a bracketing interval with cubic interpolation until strong Wolfe
/// holds. By construction `lo` satisfies the sufficient-decrease condition
/// (alpha 0, the start point, counts).
fn zoom<F>(
    eval: &mut F,
    f0: f64,
    dphi0: f64,
    lo: Endpoint,
    hi: Endpoint,
) -> Result<Option<(f64, Probe)>>
where
    F: FnMut(f64) -> Result<Probe>,
{
    let (mut alpha_lo, mut f_lo, mut dphi_lo, mut probe_lo) = lo;
    let (mut alpha_hi, mut f_hi, mut dphi_hi, _) = hi;

    for _ in 0..MAX_ZOOM {
        let alpha = cubic_step(alpha_lo, f_lo, dphi_lo, alpha_hi, f_hi, dphi_hi);
        let probe = eval(alpha)?;
        if probe.f > f0 + WOLFE_C1 * alpha * dphi0 || probe.f >= f_lo {
            alpha_hi = alpha;
            f_hi = probe.f;
            dphi_hi = probe.dphi;
        } else {
            if probe.dphi.abs() <= -WOLFE_C2 * dphi0 {
                return Ok(Some((alpha, probe)));
            }
            if probe.dphi * (alpha_hi - alpha_lo) >= 0.0 {
                alpha_hi = alpha_lo;
                f_hi = f_lo;
                dphi_hi = dphi_lo;
            }
            alpha_lo = alpha;
            f_lo = probe.f;
            dphi_lo = probe.dphi;
            probe_lo = Some(probe);
        }
        if (alpha_hi - alpha_lo).abs() <= 1e-14 * alpha_lo.abs().max(1.0) {
            break;
        }
    }
    // Interval collapsed. Accept the best Armijo point if it strictly
    // improves on f0; otherwise report failure.
    match probe_lo {
        Some(p) if p.f < f0 && alpha_lo > 0.0 => Ok(Some((alpha_lo, p))),
        _ => Ok(None),
    }
}

/// Cubic Hermite minimizer of the interval, safeguarded to stay strictly
/// inside; falls back to bisection when the cubic is degenerate.
fn cubic_step(a_lo: f64, f_lo: f64, d_lo: f64, a_hi: f64, f_hi: f64, d_hi: f64) -> f64 {
    let d1 = d_lo + d_hi - 3.0 * (f_lo - f_hi) / (a_lo - a_hi);
    let disc = d1 * d1 - d_lo * d_hi;
    let mid = 0.5 * (a_lo + a_hi);
    if disc < 0.0 {
        return mid;
    }
    let d2 = disc.sqrt() * (a_hi - a_lo).signum();
    let denom = d_hi - d_lo + 2.0 * d2;
    if denom.abs() < 1e-300 {
        return mid;
    }
    let alpha = a_hi - (a_hi - a_lo) * (d_hi + d2 - d1) / denom;
    let (lo, hi) = if a_lo < a_hi { (a_lo, a_hi) } else { (a_hi, a_lo) };
    let margin = 0.05 * (hi - lo);
    if !alpha.is_finite() || alpha <= lo + margin || alpha >= hi - margin {
        mid
    } else {
        alpha
    }
}
