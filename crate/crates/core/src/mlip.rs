//! Linear invariant-feature site potential of body order ≤ 3:
//! `V(g; c) = Σ_B c_B B(g)` with pair features `Σ_j R_k(r_j)` and triplet
//! features `½ Σ_{j≠j'} R_{k₁}(r_j) R_{k₂}(r_{j'}) P_ℓ(cos θ_{jj'})`.
//!
//! In 2D the triplet sums use the density trick: `P_ℓ(cos θ)` is a finite
//! cosine series, so every triplet feature is a contraction of the channel sums
//! `A_{k,m} = Σ_j R_k(r_j) e^{imθ_j}` (linear in the neighbour count).  The
//! direct double sum is kept for general `d` and as a cross-check.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{ReferenceConfig, StencilView};
use crate::refmodel::{SiteModel, SitePotentialHandle};

/// Basis specification; the basis list is pair degrees `0..=k_pair` followed by
/// triplets `(k₁ ≤ k₂ ≤ k_trip, ℓ ≤ l_max)` in lexicographic order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub d: usize,
    pub k_pair: usize,
    pub k_trip: usize,
    pub l_max: usize,
    pub r_cut: f64,
    pub r_in: f64,
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec {
            d: 2,
            k_pair: 8,
            k_trip: 4,
            l_max: 4,
            r_cut: 2.5,
            r_in: 0.6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisFn {
    Pair { k: usize },
    Triplet { k1: usize, k2: usize, l: usize },
}

impl BasisSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_cut > self.r_in && self.r_in >= 0.0) || !(self.d == 2 || self.d == 3) {
            return Err(Error::InvalidInput(format!("invalid basis spec {self:?}")));
        }
        Ok(())
    }

    pub fn basis(&self) -> Vec<BasisFn> {
        let mut b: Vec<BasisFn> = (0..=self.k_pair).map(|k| BasisFn::Pair { k }).collect();
        for k1 in 0..=self.k_trip {
            for k2 in k1..=self.k_trip {
                for l in 0..=self.l_max {
                    b.push(BasisFn::Triplet { k1, k2, l });
                }
            }
        }
        b
    }

    pub fn n_basis(&self) -> usize {
        let nt = self.k_trip + 1;
        self.k_pair + 1 + nt * (nt + 1) / 2 * (self.l_max + 1)
    }

    fn n_radial(&self) -> usize {
        self.k_pair.max(self.k_trip) + 1
    }

    fn n_pair(&self) -> usize {
        self.k_pair + 1
    }

    /// Index of triplet `(k₁ ≤ k₂, ℓ)` in the basis list.
    fn trip_index(&self, k1: usize, k2: usize, l: usize) -> usize {
        let nt = self.k_trip + 1;
        // pairs (a, b) with a < k1 contribute (nt − a) each
        let before: usize = (0..k1).map(|a| nt - a).sum();
        self.n_pair() + (before + (k2 - k1)) * (self.l_max + 1) + l
    }
}

/// Radial values `R_k(r) = P_k(x(r)) (R_cut − r)²`, `k ≤ n−1`, and derivatives.
fn radial(spec: &BasisSpec, r: f64, n: usize, val: &mut [f64], der: &mut [f64]) {
    if r >= spec.r_cut {
        val[..n].iter_mut().for_each(|v| *v = 0.0);
        der[..n].iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let span = spec.r_cut - spec.r_in;
    let x = 2.0 * (r - spec.r_in) / span - 1.0;
    let dx = 2.0 / span;
    let env = (spec.r_cut - r).powi(2);
    let denv = -2.0 * (spec.r_cut - r);
    let (mut p0, mut p1) = (1.0, x);
    let (mut d0, mut d1) = (0.0, 1.0);
    for k in 0..n {
        let (p, dp) = if k == 0 { (p0, d0) } else { (p1, d1) };
        val[k] = p * env;
        der[k] = dp * dx * env + p * denv;
        if k >= 1 {
            let kk = k as f64;
            let p2 = ((2.0 * kk + 1.0) * x * p1 - kk * p0) / (kk + 1.0);
            let d2 = d0 + (2.0 * kk + 1.0) * p1;
            p0 = p1;
            p1 = p2;
            d0 = d1;
            d1 = d2;
        }
    }
}

/// `R_k(r)` for `k = 0..=max(k_pair, k_trip)`.
pub fn radial_basis(spec: &BasisSpec, r: f64) -> Vec<f64> {
    let n = spec.n_radial();
    let mut v = vec![0.0; n];
    let mut d = vec![0.0; n];
    radial(spec, r, n, &mut v, &mut d);
    v
}

/// `∂R_k/∂r`.
pub fn radial_basis_deriv(spec: &BasisSpec, r: f64) -> Vec<f64> {
    let n = spec.n_radial();
    let mut v = vec![0.0; n];
    let mut d = vec![0.0; n];
    radial(spec, r, n, &mut v, &mut d);
    d
}

/// Legendre `P_ℓ(t)` and `P'_ℓ(t)` for `ℓ ≤ l_max`.
fn legendre(t: f64, l_max: usize, p: &mut [f64], dp: &mut [f64]) {
    p[0] = 1.0;
    dp[0] = 0.0;
    if l_max >= 1 {
        p[1] = t;
        dp[1] = 1.0;
    }
    for l in 1..l_max {
        let lf = l as f64;
        p[l + 1] = ((2.0 * lf + 1.0) * t * p[l] - lf * p[l - 1]) / (lf + 1.0);
        dp[l + 1] = dp[l - 1] + (2.0 * lf + 1.0) * p[l];
    }
}

/// `P_ℓ(cos θ) = Σ_m c_{ℓm} cos(mθ)`, with `c` from `a_k = (2k)!/(4^k (k!)²)`.
fn cosine_series(l_max: usize) -> Vec<Vec<f64>> {
    let a: Vec<f64> = (0..=l_max)
        .map(|k| {
            let mut v = 1.0;
            for i in 1..=k {
                v *= (2 * i - 1) as f64 / (2 * i) as f64;
            }
            v
        })
        .collect();
    (0..=l_max)
        .map(|l| {
            let mut c = vec![0.0; l + 1];
            for k in 0..=l {
                let m = (l as i64 - 2 * k as i64).unsigned_abs() as usize;
                c[m] += a[k] * a[l - k];
            }
            c
        })
        .collect()
}

/// Present in-range neighbours as positions `ρ + g`, in canonical order.
fn neighbours(d: usize, rho: &[f64], g: &[f64], present: &[bool], r_cut: f64) -> Result<Vec<f64>> {
    let mut pts: Vec<[f64; 3]> = Vec::with_capacity(present.len());
    for s in 0..present.len() {
        if !present[s] {
            continue;
        }
        let mut p = [0.0; 3];
        for a in 0..d {
            p[a] = rho[s * d + a] + g[s * d + a];
        }
        let r = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r < 1e-8 {
            return Err(Error::Collision(r));
        }
        if r < r_cut {
            pts.push(p);
        }
    }
    pts.sort_by(|x, y| x[0].total_cmp(&y[0]).then(x[1].total_cmp(&y[1])).then(x[2].total_cmp(&y[2])));
    Ok(pts.iter().flat_map(|p| p[..d].to_vec()).collect())
}

/// Per-neighbour radial and angular tables for the 2D density trick.
struct Channels {
    n: usize,
    nr: usize,
    nm: usize,
    r: Vec<f64>,
    th: Vec<f64>,
    rv: Vec<f64>,
    rd: Vec<f64>,
    cs: Vec<f64>,
    sn: Vec<f64>,
    /// `C_{k,m}` and `S_{k,m}` channel sums.
    cc: Vec<f64>,
    ss: Vec<f64>,
}

impl Channels {
    fn new(spec: &BasisSpec, pts: &[f64]) -> Self {
        let n = pts.len() / 2;
        let nr = spec.n_radial();
        let nm = spec.l_max + 1;
        let mut ch = Channels {
            n,
            nr,
            nm,
            r: vec![0.0; n],
            th: vec![0.0; n],
            rv: vec![0.0; n * nr],
            rd: vec![0.0; n * nr],
            cs: vec![0.0; n * nm],
            sn: vec![0.0; n * nm],
            cc: vec![0.0; nr * nm],
            ss: vec![0.0; nr * nm],
        };
        for j in 0..n {
            let (x, y) = (pts[2 * j], pts[2 * j + 1]);
            let r = x.hypot(y);
            ch.r[j] = r;
            ch.th[j] = y.atan2(x);
            radial(spec, r, nr, &mut ch.rv[j * nr..(j + 1) * nr], &mut ch.rd[j * nr..(j + 1) * nr]);
            for m in 0..nm {
                let (s, c) = (m as f64 * ch.th[j]).sin_cos();
                ch.cs[j * nm + m] = c;
                ch.sn[j * nm + m] = s;
            }
        }
        for k in 0..nr {
            for m in 0..nm {
                let (mut c, mut s) = (0.0, 0.0);
                for j in 0..n {
                    c += ch.rv[j * nr + k] * ch.cs[j * nm + m];
                    s += ch.rv[j * nr + k] * ch.sn[j * nm + m];
                }
                ch.cc[k * nm + m] = c;
                ch.ss[k * nm + m] = s;
            }
        }
        ch
    }
}

/// Feature evaluator holding the basis spec and cosine-series table.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub spec: BasisSpec,
    cos_series: Vec<Vec<f64>>,
}

impl Descriptor {
    pub fn new(spec: BasisSpec) -> Result<Self> {
        spec.validate()?;
        let cos_series = cosine_series(spec.l_max);
        Ok(Descriptor { spec, cos_series })
    }

    pub fn n_basis(&self) -> usize {
        self.spec.n_basis()
    }

    /// `B(g)` for every basis function.
    pub fn features(&self, rho: &[f64], g: &[f64], present: &[bool], out: &mut [f64]) -> Result<()> {
        let sp = &self.spec;
        let pts = neighbours(sp.d, rho, g, present, sp.r_cut)?;
        if sp.d != 2 {
            return self.features_direct_pts(&pts, out, None);
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        let ch = Channels::new(sp, &pts);
        let (nr, nm) = (ch.nr, ch.nm);
        for k in 0..=sp.k_pair {
            out[k] = (0..ch.n).map(|j| ch.rv[j * nr + k]).sum();
        }
        for k1 in 0..=sp.k_trip {
            for k2 in k1..=sp.k_trip {
                let diag: f64 = (0..ch.n).map(|j| ch.rv[j * nr + k1] * ch.rv[j * nr + k2]).sum();
                for l in 0..=sp.l_max {
                    let mut s = 0.0;
                    for m in 0..=l {
                        s += self.cos_series[l][m] * (ch.cc[k1 * nm + m] * ch.cc[k2 * nm + m] + ch.ss[k1 * nm + m] * ch.ss[k2 * nm + m]);
                    }
                    out[sp.trip_index(k1, k2, l)] = 0.5 * (s - diag);
                }
            }
        }
        Ok(())
    }

    /// Direct `O(n²)` evaluation (any `d`), optionally with the Jacobian
    /// `jac[B][slot·d + a]` with respect to `g` (slots of `present`).
    pub fn features_direct(&self, rho: &[f64], g: &[f64], present: &[bool], out: &mut [f64], jac: Option<&mut [f64]>) -> Result<()> {
        let sp = &self.spec;
        let d = sp.d;
        let mut pts: Vec<(usize, Vec<f64>)> = Vec::new();
        for s in 0..present.len() {
            if !present[s] {
                continue;
            }
            let p: Vec<f64> = (0..d).map(|a| rho[s * d + a] + g[s * d + a]).collect();
            let r = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if r < 1e-8 {
                return Err(Error::Collision(r));
            }
            if r < sp.r_cut {
                pts.push((s, p));
            }
        }
        pts.sort_by(|x, y| x.1.iter().zip(&y.1).fold(std::cmp::Ordering::Equal, |o, (a, b)| o.then(a.total_cmp(b))));
        let flat: Vec<f64> = pts.iter().flat_map(|p| p.1.clone()).collect();
        let slots: Vec<usize> = pts.iter().map(|p| p.0).collect();
        let nv = present.len() * d;
        match jac {
            Some(j) => {
                j.iter_mut().for_each(|v| *v = 0.0);
                self.features_direct_pts(&flat, out, Some((j, &slots, nv)))
            }
            None => self.features_direct_pts(&flat, out, None),
        }
    }

    fn features_direct_pts(&self, pts: &[f64], out: &mut [f64], mut jac: Option<(&mut [f64], &[usize], usize)>) -> Result<()> {
        let sp = &self.spec;
        let d = sp.d;
        let n = pts.len() / d;
        let nr = sp.n_radial();
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut rv = vec![0.0; n * nr];
        let mut rd = vec![0.0; n * nr];
        let mut r = vec![0.0; n];
        for j in 0..n {
            r[j] = pts[j * d..(j + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
            radial(sp, r[j], nr, &mut rv[j * nr..(j + 1) * nr], &mut rd[j * nr..(j + 1) * nr]);
        }
        let unit = |j: usize, a: usize| pts[j * d + a] / r[j];
        for k in 0..=sp.k_pair {
            for j in 0..n {
                out[k] += rv[j * nr + k];
                if let Some((jm, slots, nv)) = jac.as_mut() {
                    for a in 0..d {
                        jm[k * *nv + slots[j] * d + a] += rd[j * nr + k] * unit(j, a);
                    }
                }
            }
        }
        let nl = sp.l_max + 1;
        let mut p = vec![0.0; nl];
        let mut dp = vec![0.0; nl];
        for j1 in 0..n {
            for j2 in 0..n {
                if j1 == j2 {
                    continue;
                }
                let t: f64 = (0..d).map(|a| unit(j1, a) * unit(j2, a)).sum::<f64>().clamp(-1.0, 1.0);
                legendre(t, sp.l_max, &mut p, &mut dp);
                for k1 in 0..=sp.k_trip {
                    for k2 in k1..=sp.k_trip {
                        let rr = 0.25 * (rv[j1 * nr + k1] * rv[j2 * nr + k2] + rv[j1 * nr + k2] * rv[j2 * nr + k1]);
                        for l in 0..nl {
                            let b = sp.trip_index(k1, k2, l);
                            out[b] += rr * p[l];
                            if let Some((jm, slots, nv)) = jac.as_mut() {
                                // ∂/∂x_{j1}: radial part and angle part (j2 handled by symmetry of the double sum)
                                let drr = 0.25 * (rd[j1 * nr + k1] * rv[j2 * nr + k2] + rd[j1 * nr + k2] * rv[j2 * nr + k1]);
                                for a in 0..d {
                                    let dt = (unit(j2, a) - t * unit(j1, a)) / r[j1];
                                    jm[b * *nv + slots[j1] * d + a] += 2.0 * (drr * p[l] * unit(j1, a) + rr * dp[l] * dt);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Features and Jacobian `jac[B][slot·d + a]` (2D: density trick).
    pub fn feature_jacobian(&self, rho: &[f64], g: &[f64], present: &[bool], out: &mut [f64], jac: &mut [f64]) -> Result<()> {
        let sp = &self.spec;
        if sp.d != 2 {
            return self.features_direct(rho, g, present, out, Some(jac));
        }
        let nv = present.len() * 2;
        // canonical order with slot bookkeeping
        let mut idx: Vec<(usize, [f64; 2])> = Vec::new();
        for s in 0..present.len() {
            if !present[s] {
                continue;
            }
            let p = [rho[2 * s] + g[2 * s], rho[2 * s + 1] + g[2 * s + 1]];
            let r = p[0].hypot(p[1]);
            if r < 1e-8 {
                return Err(Error::Collision(r));
            }
            if r < sp.r_cut {
                idx.push((s, p));
            }
        }
        idx.sort_by(|x, y| x.1[0].total_cmp(&y.1[0]).then(x.1[1].total_cmp(&y.1[1])));
        let pts: Vec<f64> = idx.iter().flat_map(|p| p.1).collect();
        let ch = Channels::new(sp, &pts);
        let (nr, nm) = (ch.nr, ch.nm);
        out.iter_mut().for_each(|v| *v = 0.0);
        jac.iter_mut().for_each(|v| *v = 0.0);
        // ∂/∂x via (∂r, ∂θ): x̂ and (−y, x)/r²
        let dirs: Vec<[f64; 4]> = (0..ch.n)
            .map(|j| {
                let (x, y, r) = (pts[2 * j], pts[2 * j + 1], ch.r[j]);
                [x / r, y / r, -y / (r * r), x / (r * r)]
            })
            .collect();
        for k in 0..=sp.k_pair {
            for j in 0..ch.n {
                out[k] += ch.rv[j * nr + k];
                let s = idx[j].0;
                jac[k * nv + 2 * s] += ch.rd[j * nr + k] * dirs[j][0];
                jac[k * nv + 2 * s + 1] += ch.rd[j * nr + k] * dirs[j][1];
            }
        }
        for k1 in 0..=sp.k_trip {
            for k2 in k1..=sp.k_trip {
                let diag: f64 = (0..ch.n).map(|j| ch.rv[j * nr + k1] * ch.rv[j * nr + k2]).sum();
                for l in 0..=sp.l_max {
                    let b = sp.trip_index(k1, k2, l);
                    let cl = &self.cos_series[l];
                    let mut s = 0.0;
                    for m in 0..=l {
                        s += cl[m] * (ch.cc[k1 * nm + m] * ch.cc[k2 * nm + m] + ch.ss[k1 * nm + m] * ch.ss[k2 * nm + m]);
                    }
                    out[b] = 0.5 * (s - diag);
                    for j in 0..ch.n {
                        let (ra, rb) = (ch.rv[j * nr + k1], ch.rv[j * nr + k2]);
                        let (da, db) = (ch.rd[j * nr + k1], ch.rd[j * nr + k2]);
                        let (mut dr, mut dth) = (0.0, 0.0);
                        for m in 0..=l {
                            let (c, sn) = (ch.cs[j * nm + m], ch.sn[j * nm + m]);
                            let (ca, sa, cb, sb) = (ch.cc[k1 * nm + m], ch.ss[k1 * nm + m], ch.cc[k2 * nm + m], ch.ss[k2 * nm + m]);
                            dr += cl[m] * (da * c * cb + ca * db * c + da * sn * sb + sa * db * sn);
                            let mf = m as f64;
                            dth += cl[m] * mf * (-ra * sn * cb - ca * rb * sn + ra * c * sb + sa * rb * c);
                        }
                        dr -= da * rb + ra * db;
                        let s_ = idx[j].0;
                        jac[b * nv + 2 * s_] += 0.5 * (dr * dirs[j][0] + dth * dirs[j][2]);
                        jac[b * nv + 2 * s_ + 1] += 0.5 * (dr * dirs[j][1] + dth * dirs[j][3]);
                    }
                }
            }
        }
        Ok(())
    }

    /// `Σ_B c_B B(g)` and its gradient by an adjoint contraction of the 2D channels.
    fn energy_grad_2d(&self, c: &[f64], rho: &[f64], g: &[f64], present: &[bool], grad: &mut [f64]) -> Result<f64> {
        let sp = &self.spec;
        let mut idx: Vec<(usize, [f64; 2])> = Vec::new();
        for s in 0..present.len() {
            if !present[s] {
                continue;
            }
            let p = [rho[2 * s] + g[2 * s], rho[2 * s + 1] + g[2 * s + 1]];
            let r = p[0].hypot(p[1]);
            if r < 1e-8 {
                return Err(Error::Collision(r));
            }
            if r < sp.r_cut {
                idx.push((s, p));
            }
        }
        idx.sort_by(|x, y| x.1[0].total_cmp(&y.1[0]).then(x.1[1].total_cmp(&y.1[1])));
        let pts: Vec<f64> = idx.iter().flat_map(|p| p.1).collect();
        let ch = Channels::new(sp, &pts);
        let (nr, nm) = (ch.nr, ch.nm);
        let nt = sp.k_trip + 1;
        // W_m[k1][k2] (full symmetric) and D[k1][k2] from the triplet coefficients
        let mut wm = vec![0.0; nm * nt * nt];
        let mut dd = vec![0.0; nt * nt];
        for k1 in 0..nt {
            for k2 in k1..nt {
                for l in 0..=sp.l_max {
                    let cb = 0.5 * c[sp.trip_index(k1, k2, l)];
                    for m in 0..=l {
                        let v = cb * self.cos_series[l][m];
                        wm[(m * nt + k1) * nt + k2] += v;
                        if k1 != k2 {
                            wm[(m * nt + k2) * nt + k1] += v;
                        }
                    }
                    dd[k1 * nt + k2] += cb;
                    if k1 != k2 {
                        dd[k2 * nt + k1] += cb;
                    }
                }
            }
        }
        let mut e = 0.0;
        for k in 0..=sp.k_pair {
            e += c[k] * (0..ch.n).map(|j| ch.rv[j * nr + k]).sum::<f64>();
        }
        // E_trip = Σ_m Σ_{k1,k2} W_m[k1,k2](C C + S S)/… : with W full symmetric the
        // quadratic form counts off-diagonal pairs twice, so halve those.
        let mut ec = vec![0.0; nt * nm];
        let mut es = vec![0.0; nt * nm];
        for m in 0..nm {
            for k1 in 0..nt {
                for k2 in 0..nt {
                    let w = wm[(m * nt + k1) * nt + k2] * if k1 == k2 { 1.0 } else { 0.5 };
                    let (c1, s1, c2, s2) = (ch.cc[k1 * nm + m], ch.ss[k1 * nm + m], ch.cc[k2 * nm + m], ch.ss[k2 * nm + m]);
                    e += w * (c1 * c2 + s1 * s2);
                    ec[k1 * nm + m] += w * c2;
                    es[k1 * nm + m] += w * s2;
                    ec[k2 * nm + m] += w * c1;
                    es[k2 * nm + m] += w * s1;
                }
            }
        }
        grad.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..ch.n {
            let mut de_r = vec![0.0; nr];
            let mut de_th = 0.0;
            for k in 0..=sp.k_pair {
                de_r[k] += c[k];
            }
            for k1 in 0..nt {
                let mut acc = 0.0;
                for m in 0..nm {
                    let (cs, sn) = (ch.cs[j * nm + m], ch.sn[j * nm + m]);
                    acc += ec[k1 * nm + m] * cs + es[k1 * nm + m] * sn;
                    de_th += ch.rv[j * nr + k1] * m as f64 * (-ec[k1 * nm + m] * sn + es[k1 * nm + m] * cs);
                }
                for k2 in 0..nt {
                    let w = dd[k1 * nt + k2] * if k1 == k2 { 1.0 } else { 0.5 };
                    // −Σ_j R_k1 R_k2 term, differentiated in both factors
                    acc -= 2.0 * w * ch.rv[j * nr + k2];
                }
                de_r[k1] += acc;
            }
            let dr: f64 = (0..nr).map(|k| de_r[k] * ch.rd[j * nr + k]).sum();
            let (x, y, r) = (pts[2 * j], pts[2 * j + 1], ch.r[j]);
            let s = idx[j].0;
            grad[2 * s] = dr * x / r - de_th * y / (r * r);
            grad[2 * s + 1] = dr * y / r + de_th * x / (r * r);
        }
        for k1 in 0..nt {
            for k2 in 0..nt {
                let w = dd[k1 * nt + k2] * if k1 == k2 { 1.0 } else { 0.5 };
                e -= w * (0..ch.n).map(|j| ch.rv[j * nr + k1] * ch.rv[j * nr + k2]).sum::<f64>();
            }
        }
        Ok(e)
    }
}

/// `B(g)` of an explicit stencil.
pub fn descriptors(spec: &BasisSpec, stencil: &StencilView) -> Result<Vec<f64>> {
    let desc = Descriptor::new(spec.clone())?;
    let mut out = vec![0.0; desc.n_basis()];
    desc.features(&stencil.rho, &stencil.du, &vec![true; stencil.len()], &mut out)?;
    Ok(out)
}

/// Linear potential `V(g; c) = Σ_B c_B B(g)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlip {
    pub desc: Descriptor,
    pub c: Vec<f64>,
}

impl Mlip {
    pub fn new(spec: BasisSpec, c: Vec<f64>) -> Result<Self> {
        let desc = Descriptor::new(spec)?;
        if c.len() != desc.n_basis() {
            return Err(Error::Alignment {
                expected: desc.n_basis(),
                got: c.len(),
            });
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite coefficient".into()));
        }
        Ok(Mlip { desc, c })
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.desc.spec
    }

    /// Potential file: basis spec, coefficients and provenance.
    pub fn to_json(&self, provenance: serde_json::Value) -> serde_json::Value {
        serde_json::json!({ "basis": self.desc.spec, "coefficients": self.c, "provenance": provenance })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let spec: BasisSpec = serde_json::from_value(v.get("basis").cloned().ok_or_else(|| Error::InvalidInput("missing basis".into()))?)?;
        let c: Vec<f64> = serde_json::from_value(
            v.get("coefficients")
                .cloned()
                .ok_or_else(|| Error::InvalidInput("missing coefficients".into()))?,
        )?;
        Mlip::new(spec, c)
    }
}

impl SiteModel for Mlip {
    fn d(&self) -> usize {
        self.desc.spec.d
    }

    fn label_radius(&self) -> f64 {
        self.desc.spec.r_cut + 1.0
    }

    fn cutoff(&self) -> f64 {
        self.desc.spec.r_cut
    }

    fn energy(&self, rho: &[f64], g: &[f64], present: &[bool]) -> Result<f64> {
        let mut f = vec![0.0; self.desc.n_basis()];
        self.desc.features(rho, g, present, &mut f)?;
        Ok(f.iter().zip(&self.c).map(|(a, b)| a * b).sum())
    }

    fn energy_grad(&self, rho: &[f64], g: &[f64], present: &[bool], grad: &mut [f64]) -> Result<f64> {
        if self.desc.spec.d == 2 {
            return self.desc.energy_grad_2d(&self.c, rho, g, present, grad);
        }
        let nb = self.desc.n_basis();
        let nv = present.len() * self.desc.spec.d;
        let mut f = vec![0.0; nb];
        let mut jac = vec![0.0; nb * nv];
        self.desc.features_direct(rho, g, present, &mut f, Some(&mut jac))?;
        for v in 0..nv {
            grad[v] = (0..nb).map(|b| self.c[b] * jac[b * nv + v]).sum();
        }
        Ok(f.iter().zip(&self.c).map(|(a, b)| a * b).sum())
    }
}

/// `V(g; c)` of an explicit stencil.
pub fn mlip_site_energy(spec: &BasisSpec, c: &[f64], stencil: &StencilView) -> Result<f64> {
    let m = Mlip::new(spec.clone(), c.to_vec())?;
    m.energy(&stencil.rho, &stencil.du, &vec![true; stencil.len()])
}

/// `−∇ Σ_ℓ V(Du(ℓ); c)` on a configuration.
pub fn mlip_forces(spec: &BasisSpec, c: &[f64], config: &ReferenceConfig, u: &[f64]) -> Result<Vec<f64>> {
    let m = std::sync::Arc::new(Mlip::new(spec.clone(), c.to_vec())?);
    let h = SitePotentialHandle::new(m, config, None)?;
    crate::refmodel::forces(&h, &vec![0.0; u.len()], u)
}

/// Feature channels of a descriptor as a multi-output "model" for derivative
/// extraction: gradient oracle returning `jac[B][var]`.
pub struct FeatureChannels<'a> {
    pub desc: &'a Descriptor,
}

impl FeatureChannels<'_> {
    pub fn jacobian(&self, rho: &[f64], g: &[f64], present: &[bool], feats: &mut [f64], jac: &mut [f64]) -> Result<()> {
        self.desc.feature_jacobian(rho, g, present, feats, jac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cb_taylor::homogeneous_labels;
    use crate::lattice::LatticeSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stencil(seed: u64, amp: f64) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
        let (_, rho) = homogeneous_labels(&LatticeSpec::triangular(), 3.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: Vec<f64> = (0..rho.len()).map(|_| rng.random_range(-amp..amp)).collect();
        let p = vec![true; rho.len() / 2];
        (rho, g, p)
    }

    #[test]
    fn radial_against_explicit_polynomials() {
        let sp = BasisSpec::default();
        let explicit = |k: usize, x: f64| match k {
            0 => 1.0,
            1 => x,
            2 => 0.5 * (3.0 * x * x - 1.0),
            3 => 0.5 * (5.0 * x.powi(3) - 3.0 * x),
            4 => (35.0 * x.powi(4) - 30.0 * x * x + 3.0) / 8.0,
            _ => unreachable!(),
        };
        for i in 0..10 {
            let r = 0.7 + 0.18 * i as f64;
            let v = radial_basis(&sp, r);
            let x = 2.0 * (r - 0.6) / 1.9 - 1.0;
            for k in 0..5 {
                assert!((v[k] - explicit(k, x) * (2.5 - r).powi(2)).abs() < 1e-14);
            }
        }
        assert!(radial_basis(&sp, 2.5).iter().all(|v| *v == 0.0));
        assert!(radial_basis(&sp, 3.0).iter().all(|v| *v == 0.0));
        assert!(radial_basis_deriv(&sp, 2.5 - 1e-12).iter().all(|v| v.abs() < 1e-9));
        let h = 1e-6;
        let (vp, vm, dv) = (radial_basis(&sp, 1.3 + h), radial_basis(&sp, 1.3 - h), radial_basis_deriv(&sp, 1.3));
        for k in 0..9 {
            assert!(((vp[k] - vm[k]) / (2.0 * h) - dv[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn cosine_series_reproduces_legendre() {
        let cs = cosine_series(6);
        let mut p = vec![0.0; 7];
        let mut dp = vec![0.0; 7];
        for th in [0.0, 0.3, 1.1, 2.5, 3.1] {
            legendre(f64::cos(th), 6, &mut p, &mut dp);
            for l in 0..=6 {
                let s: f64 = (0..=l).map(|m| cs[l][m] * (m as f64 * th).cos()).sum();
                assert!((s - p[l]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn density_trick_matches_direct_sum() {
        let desc = Descriptor::new(BasisSpec::default()).unwrap();
        assert_eq!(desc.n_basis(), 84);
        assert_eq!(BasisSpec::default().basis().len(), 84);
        let (rho, g, p) = stencil(1, 0.1);
        let nb = desc.n_basis();
        let (mut a, mut b) = (vec![0.0; nb], vec![0.0; nb]);
        desc.features(&rho, &g, &p, &mut a).unwrap();
        desc.features_direct(&rho, &g, &p, &mut b, None).unwrap();
        for k in 0..nb {
            assert!((a[k] - b[k]).abs() < 1e-11 * b[k].abs().max(1.0), "{k}: {} vs {}", a[k], b[k]);
        }
        for (i, bf) in BasisSpec::default().basis().iter().enumerate() {
            if let BasisFn::Triplet { k1, k2, l } = *bf {
                assert_eq!(BasisSpec::default().trip_index(k1, k2, l), i);
            }
        }
    }

    #[test]
    fn jacobians_and_energy_gradient() {
        let desc = Descriptor::new(BasisSpec::default()).unwrap();
        let (rho, g, p) = stencil(2, 0.1);
        let nb = desc.n_basis();
        let nv = g.len();
        let (mut f1, mut f2) = (vec![0.0; nb], vec![0.0; nb]);
        let (mut j1, mut j2) = (vec![0.0; nb * nv], vec![0.0; nb * nv]);
        desc.feature_jacobian(&rho, &g, &p, &mut f1, &mut j1).unwrap();
        desc.features_direct(&rho, &g, &p, &mut f2, Some(&mut j2)).unwrap();
        for k in 0..nb * nv {
            assert!((j1[k] - j2[k]).abs() < 1e-10 * j2[k].abs().max(1.0), "{k}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c: Vec<f64> = (0..nb).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = Mlip::new(BasisSpec::default(), c.clone()).unwrap();
        let mut gr = vec![0.0; nv];
        let e = m.energy_grad(&rho, &g, &p, &mut gr).unwrap();
        assert!((e - m.energy(&rho, &g, &p).unwrap()).abs() < 1e-11);
        for v in 0..nv {
            let jc: f64 = (0..nb).map(|b| c[b] * j1[b * nv + v]).sum();
            assert!((gr[v] - jc).abs() < 1e-10 * jc.abs().max(1.0));
            let mut gp = g.clone();
            let mut gm = g.clone();
            gp[v] += 1e-6;
            gm[v] -= 1e-6;
            let fd = (m.energy(&rho, &gp, &p).unwrap() - m.energy(&rho, &gm, &p).unwrap()) / 2e-6;
            assert!((fd - gr[v]).abs() < 1e-6 * gr[v].abs().max(1.0));
        }
    }

    #[test]
    fn invariances_and_linearity() {
        let desc = Descriptor::new(BasisSpec::default()).unwrap();
        let (rho, g, p) = stencil(4, 0.1);
        let nb = desc.n_basis();
        let mut f = vec![0.0; nb];
        desc.features(&rho, &g, &p, &mut f).unwrap();
        // rotation + reflection of the deformed positions
        for (th, refl) in [(0.9f64, false), (2.2, true)] {
            let (c, s) = (th.cos(), th.sin());
            let mut g2 = g.clone();
            for j in 0..p.len() {
                let mut y = [rho[2 * j] + g[2 * j], rho[2 * j + 1] + g[2 * j + 1]];
                if refl {
                    y[1] = -y[1];
                }
                g2[2 * j] = c * y[0] - s * y[1] - rho[2 * j];
                g2[2 * j + 1] = s * y[0] + c * y[1] - rho[2 * j + 1];
            }
            let mut f2 = vec![0.0; nb];
            desc.features(&rho, &g2, &p, &mut f2).unwrap();
            for k in 0..nb {
                assert!((f[k] - f2[k]).abs() < 1e-12 * f[k].abs().max(1.0));
            }
        }
        let c1: Vec<f64> = (0..nb).map(|k| (k as f64).sin()).collect();
        let c2: Vec<f64> = (0..nb).map(|k| (k as f64 * 0.3).cos()).collect();
        let mix: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let e = |c: &[f64]| Mlip::new(BasisSpec::default(), c.to_vec()).unwrap().energy(&rho, &g, &p).unwrap();
        assert!((e(&mix) - (2.0 * e(&c1) - 0.5 * e(&c2))).abs() < 1e-10);
        assert_eq!(e(&vec![0.0; nb]), 0.0);
        assert!(matches!(Mlip::new(BasisSpec::default(), vec![0.0; 3]), Err(Error::Alignment { .. })));
        let mut out = vec![1.0; nb];
        desc.features(&[], &[], &[], &mut out).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn smooth_cutoff_crossing() {
        let sp = BasisSpec::default();
        let nb = sp.n_basis();
        let c: Vec<f64> = (0..nb).map(|k| ((k * 7) as f64).sin()).collect();
        let m = Mlip::new(sp, c).unwrap();
        let rho = vec![1.0, 0.0, 0.0, 1.0];
        let p = vec![true, true];
        let at = |r: f64| {
            let g = vec![0.0, 0.0, 0.0, r - 1.0];
            let mut gr = vec![0.0; 4];
            let e = m.energy_grad(&rho, &g, &p, &mut gr).unwrap();
            (e, gr)
        };
        let (e1, _) = at(2.5 - 1e-6);
        let (e2, _) = at(2.5 + 1e-6);
        assert!((e1 - e2).abs() < 1e-8);
        // the envelope is C¹: forces vanish linearly in the distance to the cutoff
        let (_, g1) = at(2.5 - 1e-10);
        let (_, g2) = at(2.5 + 1e-10);
        assert!(g1.iter().zip(&g2).all(|(a, b)| (a - b).abs() < 1e-8));
    }

    #[test]
    fn three_dimensional_direct_path() {
        let sp = BasisSpec {
            d: 3,
            k_pair: 3,
            k_trip: 2,
            l_max: 2,
            ..BasisSpec::default()
        };
        let (_, rho) = homogeneous_labels(&LatticeSpec::cubic(), 2.0).unwrap();
        let nv = rho.len();
        let g: Vec<f64> = (0..nv).map(|k| 0.05 * (k as f64).sin()).collect();
        let p = vec![true; nv / 3];
        let c: Vec<f64> = (0..sp.n_basis()).map(|k| (k as f64).cos()).collect();
        let m = Mlip::new(sp, c).unwrap();
        let mut gr = vec![0.0; nv];
        m.energy_grad(&rho, &g, &p, &mut gr).unwrap();
        for v in (0..nv).step_by(5) {
            let mut gp = g.clone();
            let mut gm = g.clone();
            gp[v] += 1e-6;
            gm[v] -= 1e-6;
            let fd = (m.energy(&rho, &gp, &p).unwrap() - m.energy(&rho, &gm, &p).unwrap()) / 2e-6;
            assert!((fd - gr[v]).abs() < 1e-6 * gr[v].abs().max(1.0));
        }
    }
}
