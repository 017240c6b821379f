//! Far-field predictor for a straight edge dislocation: isotropic linear
//! elasticity with a branch cut, core regularisation and slip-corrected strains.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{ReferenceConfig, StencilTable};

/// Edge dislocation with Burgers vector `(b₁, 0)`, core `x̂` and core radius `r̂`.
/// The branch cut is `Γ = {x₂ = x̂₂, x₁ ≥ x̂₁}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DislocationSpec {
    pub b: Vec<f64>,
    pub core: Vec<f64>,
    pub r_hat: f64,
    pub nu: f64,
}

impl DislocationSpec {
    pub fn new(b1: f64, core: [f64; 2], r_hat: f64, nu: f64) -> Result<Self> {
        if !(nu > 0.0 && nu < 0.5) {
            return Err(Error::InvalidInput(format!("Poisson ratio must lie in (0, 0.5), got {nu}")));
        }
        if !(r_hat > 0.0) || b1 == 0.0 {
            return Err(Error::InvalidInput("need r_hat > 0 and b₁ ≠ 0".into()));
        }
        Ok(DislocationSpec {
            b: vec![b1, 0.0],
            core: core.to_vec(),
            r_hat,
            nu,
        })
    }

    #[inline]
    pub fn above(&self, x: &[f64]) -> bool {
        x[1] > self.core[1]
    }

    /// `Ω_Γ = {x₁ ≥ x̂₁ + r̂ + b₁}`, where strains are slip-corrected.
    #[inline]
    pub fn in_slip_region(&self, x: &[f64]) -> bool {
        x[0] >= self.core[0] + self.r_hat + self.b[0]
    }

    fn on_cut(&self, x: &[f64]) -> bool {
        (x[1] - self.core[1]).abs() < 1e-14 && x[0] >= self.core[0]
    }
}

/// Angle of `(dx, dy)` in `(0, 2π]`, so that the cut sits on the positive `x₁` axis.
#[inline]
fn arg(dx: f64, dy: f64) -> f64 {
    let t = dy.atan2(dx);
    if t <= 0.0 {
        t + 2.0 * PI
    } else {
        t
    }
}

/// Isotropic Volterra edge solution `u^lin(x)`; jumps by `−b` across `Γ` (upwards).
pub fn cle_edge_solution(spec: &DislocationSpec, x: &[f64]) -> Result<[f64; 2]> {
    if spec.on_cut(x) {
        return Err(Error::OnBranchCut(x.to_vec()));
    }
    let dx = x[0] - spec.core[0];
    let dy = x[1] - spec.core[1];
    let r2 = dx * dx + dy * dy;
    if r2 < 1e-28 {
        return Err(Error::OnBranchCut(x.to_vec()));
    }
    let nu = spec.nu;
    let b = spec.b[0];
    let th = arg(dx, dy);
    let u1 = b / (2.0 * PI) * (th + dx * dy / (2.0 * (1.0 - nu) * r2));
    let u2 = -b / (2.0 * PI) * ((1.0 - 2.0 * nu) / (4.0 * (1.0 - nu)) * r2.ln() + (dx * dx - dy * dy) / (4.0 * (1.0 - nu) * r2));
    Ok([u1, u2])
}

/// Smooth step `η(s) = 3s² − 2s³` clamped to `[0, 1]`.
#[inline]
pub fn eta(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else if s >= 1.0 {
        1.0
    } else {
        s * s * (3.0 - 2.0 * s)
    }
}

fn xi_shift(spec: &DislocationSpec, x: &[f64]) -> f64 {
    let dx = x[0] - spec.core[0];
    let dy = x[1] - spec.core[1];
    let r = (dx * dx + dy * dy).sqrt();
    if r == 0.0 {
        return 0.0;
    }
    spec.b[0] / (2.0 * PI) * eta(r / spec.r_hat) * arg(dx, dy)
}

/// `ξ(x) = x − b (1/2π) η(|x−x̂|/r̂) arg(x−x̂)`.
pub fn xi(spec: &DislocationSpec, x: &[f64]) -> [f64; 2] {
    [x[0] - xi_shift(spec, x), x[1]]
}

/// `ξ⁻¹(y)` by the fixed point `x ← y + b η arg/2π` (tolerance 1e-12, 50 iterations),
/// falling back to bisection on `[y₁, y₁ + b₁]`, which brackets the root since the
/// shift lies between 0 and `b₁`.
pub fn xi_inverse(spec: &DislocationSpec, y: &[f64]) -> Result<[f64; 2]> {
    let mut x = [y[0], y[1]];
    for _ in 0..50 {
        let next = y[0] + xi_shift(spec, &x);
        if (next - x[0]).abs() < 1e-12 {
            x[0] = next;
            return Ok(x);
        }
        x[0] = next;
    }
    let phi = |t: f64| t - xi_shift(spec, &[t, y[1]]) - y[0];
    let (mut lo, mut hi) = (y[0] + spec.b[0].min(0.0), y[0] + spec.b[0].max(0.0));
    if !(phi(lo) <= 0.0 && phi(hi) >= 0.0) {
        return Err(Error::FixedPoint(50));
    }
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if phi(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok([0.5 * (lo + hi), y[1]])
}

/// Core-regularised predictor `u₀(x) = u^lin(ξ⁻¹(x))`.
pub fn core_regularized_u0(spec: &DislocationSpec, x: &[f64]) -> Result<[f64; 2]> {
    let z = xi_inverse(spec, x)?;
    cle_edge_solution(spec, &z)
}

/// Predictor values and slip-corrected strains on a configuration.
#[derive(Clone, Debug)]
pub struct PredictorField {
    /// `u₀(ℓ)`, flat with stride 2.
    pub u0: Vec<f64>,
    /// Number of stencil labels per site in `strain`.
    pub m: usize,
    /// `e_ρ(ℓ)`, flat `[site][label][component]`; NaN where the neighbour is absent.
    pub strain: Vec<f64>,
}

/// `u₀` at every site of `config`.
pub fn predictor_on(config: &ReferenceConfig, spec: &DislocationSpec) -> Result<Vec<f64>> {
    let mut u0 = Vec::with_capacity(config.len() * 2);
    for i in 0..config.len() {
        u0.extend_from_slice(&core_regularized_u0(spec, config.pos(i))?);
    }
    Ok(u0)
}

/// `e_ρ(ℓ) = S*D_ρS₀u₀(ℓ)` on `Ω_Γ`, `D_ρu₀(ℓ)` elsewhere, for the first `m` labels.
///
/// The slip operators act as index remaps, which is exactly how the dislocation
/// [`StencilTable`] is built, so the strain is the table's gathered difference.
pub fn slip_strain(table: &StencilTable, u0: &[f64], m: usize) -> PredictorField {
    let d = table.d;
    let n = table.n_sites();
    let mut strain = vec![f64::NAN; n * m * d];
    let mut g = vec![0.0; m * d];
    let mut present = vec![false; m];
    for i in 0..n {
        table.gather(i, u0, m, &mut g, &mut present);
        for s in 0..m {
            if present[s] {
                strain[(i * m + s) * d..(i * m + s) * d + d].copy_from_slice(&g[s * d..s * d + d]);
            }
        }
    }
    PredictorField { u0: u0.to_vec(), m, strain }
}

/// Isotropic (Voigt) reduction of `ℂ = ∂²_F W_cb(I)` to a Poisson ratio
/// `ν = λ / (2(λ+μ))`.  `c` is the `(d×d)²` tensor, index `((i·d+j)·d+k)·d+l`.
pub fn poisson_from_cb(c: &[f64], d: usize) -> Result<f64> {
    if d != 2 || c.len() != 16 {
        return Err(Error::InvalidInput("poisson_from_cb expects a 2D fourth-order tensor".into()));
    }
    let at = |i: usize, j: usize, k: usize, l: usize| c[((i * d + j) * d + k) * d + l];
    // isotropic part from the two rotation invariants C_iikk and C_ijij
    let a: f64 = (0..2).flat_map(|i| (0..2).map(move |k| (i, k))).map(|(i, k)| at(i, i, k, k)).sum();
    let b: f64 = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| at(i, j, i, j)).sum();
    let mu = (2.0 * b - a) / 8.0;
    let lambda = a / 4.0 - mu;
    if !(mu > 0.0 && lambda + mu > 0.0) {
        return Err(Error::NonElliptic(format!("λ = {lambda:e}, μ = {mu:e}")));
    }
    Ok(lambda / (2.0 * (lambda + mu)))
}

/// Isotropic tensor `λδ_ijδ_kl + μ(δ_ikδ_jl + δ_ilδ_jk)` in 2D.
pub fn isotropic_tensor(lambda: f64, mu: f64) -> Vec<f64> {
    let dl = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
    let mut c = vec![0.0; 16];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    c[((i * 2 + j) * 2 + k) * 2 + l] = lambda * dl(i, j) * dl(k, l) + mu * (dl(i, k) * dl(j, l) + dl(i, l) * dl(j, k));
                }
            }
        }
    }
    c
}
