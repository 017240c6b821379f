//! Equilibration: limited-memory quasi-Newton energy minimisation and
//! Jacobian-free Newton–Krylov force balance, plus decay profiles of relaxed fields.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{stencil_norm_nn, ReferenceConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Sup-norm tolerance on the gradient / residual.
    pub tol: f64,
    pub max_iter: usize,
    /// Armijo constant and approximate-Wolfe curvature bound.
    pub c1: f64,
    pub c2: f64,
    /// Largest displacement of any coordinate in one line-search trial.
    pub max_step: f64,
    pub history: usize,
    /// GMRES restart length and total inner-iteration budget per Newton step.
    pub krylov: usize,
    pub krylov_max: usize,
    /// Relative step of the finite-difference directional derivative.
    pub fd_step: f64,
    pub max_newton: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-8,
            max_iter: 20000,
            c1: 1e-4,
            c2: 0.9,
            max_step: 0.02,
            history: 20,
            krylov: 200,
            krylov_max: 4000,
            fd_step: 1e-6,
            max_newton: 60,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Converged,
    MaxIterations,
    LineSearchFailed,
    KrylovStagnation,
    Diverged,
}

/// One iteration-log row (`iter,energy_or_residual,gradnorm,step`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub value: f64,
    pub gradnorm: f64,
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub x: Vec<f64>,
    pub status: Status,
    pub iterations: usize,
    pub value: f64,
    pub gradnorm: f64,
    /// Total inner (Krylov) iterations, force-balance only.
    pub inner: usize,
    pub log: Vec<LogRow>,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.status == Status::Converged
    }

    pub fn write_log<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["iter", "energy_or_residual", "gradnorm", "step"])?;
        for r in &self.log {
            wr.write_record([
                r.iter.to_string(),
                format!("{:e}", r.value),
                format!("{:e}", r.gradnorm),
                format!("{:e}", r.step),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mask(v: &mut [f64], free: &[bool]) {
    for (x, f) in v.iter_mut().zip(free) {
        if !*f {
            *x = 0.0;
        }
    }
}

fn recoverable(e: &Error) -> bool {
    matches!(e, Error::Collision(_) | Error::Inadmissible | Error::Collapse(_))
}

/// L-BFGS over the free variables (`free` per variable) with a backtracking
/// line search accepting Armijo or approximate-Wolfe steps.
pub fn minimize(energy: &mut dyn FnMut(&[f64], &mut [f64]) -> Result<f64>, x0: &[f64], free: &[bool], cfg: &SolverConfig) -> Result<SolveReport> {
    if !(cfg.tol > 0.0) || free.len() != x0.len() {
        return Err(Error::InvalidInput("solver tolerance must be positive and the mask match the field".into()));
    }
    let n = x0.len();
    let mut x = x0.to_vec();
    mask(&mut x, free);
    let mut g = vec![0.0; n];
    let mut f = energy(&x, &mut g)?;
    mask(&mut g, free);
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut log = vec![LogRow {
        iter: 0,
        value: f,
        gradnorm: sup(&g),
        step: 0.0,
    }];
    let mut gt = vec![0.0; n];
    let mut xt = vec![0.0; n];
    for it in 0..cfg.max_iter {
        if sup(&g) < cfg.tol {
            return Ok(SolveReport {
                x,
                status: Status::Converged,
                iterations: it,
                value: f,
                gradnorm: sup(&g),
                inner: 0,
                log,
            });
        }
        // two-loop recursion
        let mut p: Vec<f64> = g.clone();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &p);
            p.iter_mut().zip(y).for_each(|(pi, yi)| *pi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = mem.back() {
            let gamma = dot(s, y) / dot(y, y);
            p.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &p);
            p.iter_mut().zip(s).for_each(|(pi, si)| *pi += (a - b) * si);
        }
        p.iter_mut().for_each(|v| *v = -*v);
        mask(&mut p, free);
        let mut slope = dot(&g, &p);
        if !(slope < 0.0) {
            mem.clear();
            p = g.iter().map(|v| -v).collect();
            slope = dot(&g, &p);
        }
        let mut alpha = (cfg.max_step / sup(&p)).min(1.0);
        let mut accepted = None;
        let pmax = sup(&p);
        while alpha * pmax > 1e-14 * (1.0 + sup(&x)) {
            for k in 0..n {
                xt[k] = x[k] + alpha * p[k];
            }
            match energy(&xt, &mut gt) {
                Ok(ft) => {
                    mask(&mut gt, free);
                    let dslope = dot(&gt, &p);
                    let armijo = ft <= f + cfg.c1 * alpha * slope;
                    // approximate Wolfe: exact in the derivative, tolerant in the value
                    let approx = ft <= f + 1e-10 * f.abs().max(1.0) && dslope >= cfg.c2 * slope && dslope <= -(1.0 - 2.0 * cfg.c1) * slope;
                    if ft.is_finite() && (armijo || approx) {
                        accepted = Some(ft);
                        break;
                    }
                }
                Err(e) if recoverable(&e) => {}
                Err(e) => return Err(e),
            }
            alpha *= 0.5;
        }
        let ft = match accepted {
            Some(ft) => ft,
            None => {
                return Ok(SolveReport {
                    x,
                    status: Status::LineSearchFailed,
                    iterations: it,
                    value: f,
                    gradnorm: sup(&g),
                    inner: 0,
                    log,
                })
            }
        };
        let s: Vec<f64> = p.iter().map(|v| alpha * v).collect();
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-14 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if mem.len() == cfg.history {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        std::mem::swap(&mut x, &mut xt);
        std::mem::swap(&mut g, &mut gt);
        f = ft;
        log.push(LogRow {
            iter: it + 1,
            value: f,
            gradnorm: sup(&g),
            step: alpha,
        });
    }
    let status = if sup(&g) < cfg.tol { Status::Converged } else { Status::MaxIterations };
    Ok(SolveReport {
        gradnorm: sup(&g),
        x,
        status,
        iterations: cfg.max_iter,
        value: f,
        inner: 0,
        log,
    })
}

/// Restarted GMRES for `A x = b` from `x = 0`; stops at `‖r‖₂ ≤ rtol·‖b‖₂`.
/// Returns the solution, the achieved relative residual and the iteration count.
pub fn gmres(apply: &mut dyn FnMut(&[f64], &mut [f64]) -> Result<()>, b: &[f64], rtol: f64, restart: usize, max_iter: usize) -> Result<(Vec<f64>, f64, usize)> {
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok((x, 0.0, 0));
    }
    let mut total = 0;
    let mut r = b.to_vec();
    let mut w = vec![0.0; n];
    loop {
        let beta = dot(&r, &r).sqrt();
        if beta <= rtol * bnorm || total >= max_iter {
            return Ok((x, beta / bnorm, total));
        }
        let m = restart.min(max_iter - total).max(1);
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|t| t / beta).collect()];
        let mut h = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut gvec = vec![0.0; m + 1];
        gvec[0] = beta;
        let mut k_done = 0;
        for k in 0..m {
            apply(&v[k], &mut w)?;
            total += 1;
            // modified Gram–Schmidt
            for (i, vi) in v.iter().enumerate() {
                let hij = dot(&w, vi);
                h[i][k] = hij;
                w.iter_mut().zip(vi).for_each(|(a, b)| *a -= hij * b);
            }
            let hn = dot(&w, &w).sqrt();
            h[k + 1][k] = hn;
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let den = h[k][k].hypot(h[k + 1][k]);
            if den == 0.0 {
                k_done = k;
                break;
            }
            cs[k] = h[k][k] / den;
            sn[k] = h[k + 1][k] / den;
            h[k][k] = den;
            h[k + 1][k] = 0.0;
            gvec[k + 1] = -sn[k] * gvec[k];
            gvec[k] *= cs[k];
            k_done = k + 1;
            if gvec[k + 1].abs() <= rtol * bnorm || hn == 0.0 {
                break;
            }
            v.push(w.iter().map(|t| t / hn).collect());
        }
        // back substitution
        let mut yk = vec![0.0; k_done];
        for i in (0..k_done).rev() {
            let s = gvec[i] - (i + 1..k_done).map(|j| h[i][j] * yk[j]).sum::<f64>();
            yk[i] = s / h[i][i];
        }
        for (i, yi) in yk.iter().enumerate() {
            x.iter_mut().zip(&v[i]).for_each(|(a, b)| *a += yi * b);
        }
        apply(&x, &mut w)?;
        total += 1;
        let prev = beta;
        r = b.iter().zip(&w).map(|(a, c)| a - c).collect();
        let now = dot(&r, &r).sqrt();
        if k_done == 0 || now >= prev * (1.0 - 1e-12) {
            return Ok((x, now / bnorm, total));
        }
    }
}

/// Newton–Krylov for `F(x) = 0` on the free variables; `F` is a force (so
/// `−F` is the residual gradient for conservative systems).
pub fn solve_force_balance(force: &mut dyn FnMut(&[f64], &mut [f64]) -> Result<()>, x0: &[f64], free: &[bool], cfg: &SolverConfig) -> Result<SolveReport> {
    if !(cfg.tol > 0.0) || free.len() != x0.len() {
        return Err(Error::InvalidInput("solver tolerance must be positive and the mask match the field".into()));
    }
    let n = x0.len();
    let mut x = x0.to_vec();
    mask(&mut x, free);
    let mut fx = vec![0.0; n];
    force(&x, &mut fx)?;
    mask(&mut fx, free);
    let mut norm2 = dot(&fx, &fx).sqrt();
    let mut log = vec![LogRow {
        iter: 0,
        value: norm2,
        gradnorm: sup(&fx),
        step: 0.0,
    }];
    let mut inner = 0;
    let mut growth = 0;
    let mut ft = vec![0.0; n];
    let mut xt = vec![0.0; n];
    for it in 0..cfg.max_newton {
        if sup(&fx) < cfg.tol {
            return Ok(SolveReport {
                x,
                status: Status::Converged,
                iterations: it,
                value: norm2,
                gradnorm: sup(&fx),
                inner,
                log,
            });
        }
        let xnorm = dot(&x, &x).sqrt();
        let eta = (0.5 * norm2).clamp(1e-6, 1e-2);
        // J v ≈ (F(x + εv) − F(x))/ε; solve J δ = −F
        let rhs: Vec<f64> = fx.iter().map(|v| -v).collect();
        let base = fx.clone();
        let mut probe = vec![0.0; n];
        let mut apply = |v: &[f64], out: &mut [f64]| -> Result<()> {
            let vn = dot(v, v).sqrt();
            if vn == 0.0 {
                out.iter_mut().for_each(|o| *o = 0.0);
                return Ok(());
            }
            let eps = cfg.fd_step * (1.0 + xnorm) / vn;
            for k in 0..n {
                probe[k] = x[k] + if free[k] { eps * v[k] } else { 0.0 };
            }
            force(&probe, out)?;
            mask(out, free);
            for k in 0..n {
                out[k] = (out[k] - base[k]) / eps;
            }
            Ok(())
        };
        let (delta, rel, k) = gmres(&mut apply, &rhs, eta, cfg.krylov, cfg.krylov_max)?;
        inner += k;
        if rel > 0.9 {
            return Ok(SolveReport {
                x,
                status: Status::KrylovStagnation,
                iterations: it,
                value: norm2,
                gradnorm: sup(&fx),
                inner,
                log,
            });
        }
        // residual-norm backtracking
        let mut lambda = (cfg.max_step / sup(&delta).max(1e-300)).min(1.0);
        let mut accepted = false;
        for _ in 0..12 {
            for k in 0..n {
                xt[k] = x[k] + lambda * delta[k];
            }
            match force(&xt, &mut ft) {
                Ok(()) => {
                    mask(&mut ft, free);
                    let nt = dot(&ft, &ft).sqrt();
                    if nt.is_finite() && nt <= (1.0 - 1e-4 * lambda) * norm2 {
                        accepted = true;
                        break;
                    }
                }
                Err(e) if recoverable(&e) => {}
                Err(e) => return Err(e),
            }
            lambda *= 0.5;
        }
        if !accepted {
            // take the shortest trial anyway if it is finite; count it as growth
            if force(&xt, &mut ft).is_err() {
                return Ok(SolveReport {
                    x,
                    status: Status::Diverged,
                    iterations: it,
                    value: norm2,
                    gradnorm: sup(&fx),
                    inner,
                    log,
                });
            }
            mask(&mut ft, free);
        }
        let nt = dot(&ft, &ft).sqrt();
        growth = if nt > norm2 { growth + 1 } else { 0 };
        std::mem::swap(&mut x, &mut xt);
        std::mem::swap(&mut fx, &mut ft);
        norm2 = nt;
        log.push(LogRow {
            iter: it + 1,
            value: norm2,
            gradnorm: sup(&fx),
            step: lambda,
        });
        if growth >= 5 || !norm2.is_finite() {
            return Ok(SolveReport {
                x,
                status: Status::Diverged,
                iterations: it + 1,
                value: norm2,
                gradnorm: sup(&fx),
                inner,
                log,
            });
        }
    }
    let status = if sup(&fx) < cfg.tol { Status::Converged } else { Status::MaxIterations };
    Ok(SolveReport {
        gradnorm: sup(&fx),
        x,
        status,
        iterations: cfg.max_newton,
        value: norm2,
        inner,
        log,
    })
}

/// Least-squares slope of `log y` against `log x` and its standard error.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = points.iter().filter(|(x, y)| *x > 0.0 && *y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = pts.len();
    if n < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let se = if n > 2 {
        let rss: f64 = pts.iter().map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2)).sum();
        (rss / (n as f64 - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Some((slope, se))
}

/// Annulus maxima of `|Du(ℓ)|_N` around `center` and a log-log slope over `window`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayProfile {
    /// `(radius of the maximising site, max |Du|_N)` per annulus.
    pub rows: Vec<(f64, f64)>,
    /// `None` when fewer than two nonzero annuli fall in the window.
    pub slope: Option<f64>,
    pub slope_se: Option<f64>,
}

pub fn decay_profile(config: &ReferenceConfig, u: &[f64], center: &[f64], width: f64, window: (f64, f64), mask: Option<&[bool]>) -> Result<DecayProfile> {
    let vals: Vec<(f64, f64)> = (0..config.len())
        .filter(|&i| mask.is_none_or(|m| m[i]))
        .map(|i| {
            let r = config.pos(i).iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            (r, stencil_norm_nn(config, u, i))
        })
        .collect();
    profile_from_values(&vals, width, window)
}

/// Decay profile of arbitrary per-site magnitudes `(radius, value)`.
pub fn profile_from_values(vals: &[(f64, f64)], width: f64, window: (f64, f64)) -> Result<DecayProfile> {
    if !(width > 0.0) {
        return Err(Error::InvalidInput("annulus width must be positive".into()));
    }
    let rmax = vals.iter().map(|v| v.0).fold(0.0, f64::max);
    let nbins = (rmax / width).floor() as usize + 1;
    let mut mx: Vec<Option<(f64, f64)>> = vec![None; nbins];
    for &(r, v) in vals {
        let b = (r / width).floor() as usize;
        if mx[b].is_none_or(|m| v > m.1) {
            mx[b] = Some((r, v));
        }
    }
    let rows: Vec<(f64, f64)> = mx.into_iter().flatten().collect();
    let inwin: Vec<(f64, f64)> = rows.iter().copied().filter(|(r, _)| *r >= window.0 && *r <= window.1).collect();
    if inwin.len() < 2 {
        return Err(Error::InvalidInput(format!("too few annuli ({}) in the fit window", inwin.len())));
    }
    let fit = loglog_slope(&inwin);
    Ok(DecayProfile {
        rows,
        slope: fit.map(|f| f.0),
        slope_se: fit.map(|f| f.1),
    })
}
