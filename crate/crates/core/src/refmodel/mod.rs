//! Reference ("QM") interaction models and the site-potential assembly shared
//! by every site model: energies, energy differences and forces.

mod eam;
mod tb;

use std::sync::Arc;

pub use eam::{eam_site_energy, relax_lattice_constant, Eam, EamParams};
pub use tb::{tb_band_energy, tb_energy_difference, tb_forces, tb_hamiltonian, tb_site_energies, tb_site_energy, TbParams};

use crate::error::{Error, Result};
use crate::lattice::{ReferenceConfig, StencilTable, StencilView};

/// A site potential `V(g)` acting on slot-labelled stencil differences.
///
/// `rho` holds the first `m` lattice labels of a [`StencilTable`] (flat, stride
/// `d`), `g` the differences `D_ρ u(ℓ)` per slot and `present` marks slots whose
/// neighbour exists.  Absent slots carry `g = 0` and must be ignored.
pub trait SiteModel: Send + Sync {
    fn d(&self) -> usize;
    /// Largest label norm the model needs to see.
    fn label_radius(&self) -> f64;
    /// Interaction range at the reference state (the label set adds slack for
    /// neighbours that move inside it).
    fn cutoff(&self) -> f64 {
        self.label_radius()
    }
    fn energy(&self, rho: &[f64], g: &[f64], present: &[bool]) -> Result<f64>;
    /// Energy and `∂V/∂g` (written into `grad`, same layout as `g`).
    fn energy_grad(&self, rho: &[f64], g: &[f64], present: &[bool], grad: &mut [f64]) -> Result<f64>;
}

/// A site model bound to a stencil table: `V_ℓ(Du(ℓ))` for every site of a
/// configuration, with the table's domain mask realising the restriction `V^Ω_ℓ`.
#[derive(Clone)]
pub struct SitePotentialHandle {
    pub model: Arc<dyn SiteModel>,
    pub table: Arc<StencilTable>,
    /// Number of leading table labels passed to the model.
    pub m: usize,
}

impl std::fmt::Debug for SitePotentialHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SitePotentialHandle")
            .field("m", &self.m)
            .field("sites", &self.table.n_sites())
            .finish()
    }
}

impl SitePotentialHandle {
    /// Builds a table of the model's label radius over `config`, restricted to `domain`.
    pub fn new(model: Arc<dyn SiteModel>, config: &ReferenceConfig, domain: Option<&[bool]>) -> Result<Self> {
        let table = StencilTable::build(config, model.label_radius(), domain)?;
        Self::with_table(model, Arc::new(table))
    }

    pub fn with_table(model: Arc<dyn SiteModel>, table: Arc<StencilTable>) -> Result<Self> {
        if model.d() != table.d {
            return Err(Error::InvalidInput(format!("model dimension {} vs table dimension {}", model.d(), table.d)));
        }
        let m = table.prefix(model.label_radius());
        if table.r_label + 1e-9 < model.label_radius() {
            return Err(Error::InvalidInput("stencil table narrower than the model's label radius".into()));
        }
        Ok(SitePotentialHandle { model, table, m })
    }

    pub fn n_sites(&self) -> usize {
        self.table.n_sites()
    }

    fn rho(&self) -> &[f64] {
        &self.table.labels[..self.m * self.table.d]
    }

    /// `V_ℓ(Dw(ℓ))`.
    pub fn site_energy(&self, site: usize, w: &[f64]) -> Result<f64> {
        let mut g = vec![0.0; self.m * self.table.d];
        let mut present = vec![false; self.m];
        self.table.gather(site, w, self.m, &mut g, &mut present);
        self.model.energy(self.rho(), &g, &present)
    }

    /// `Σ_{ℓ∈sites} V_ℓ(Dw(ℓ))`, accumulated in the given order.
    pub fn energy(&self, sites: &[usize], w: &[f64]) -> Result<f64> {
        let mut g = vec![0.0; self.m * self.table.d];
        let mut present = vec![false; self.m];
        let mut e = 0.0;
        for &i in sites {
            self.table.gather(i, w, self.m, &mut g, &mut present);
            e += self.model.energy(self.rho(), &g, &present)?;
        }
        Ok(e)
    }

    /// As [`energy`](Self::energy), adding `∂/∂w` of the sum into `grad`.
    pub fn energy_grad(&self, sites: &[usize], w: &[f64], grad: &mut [f64]) -> Result<f64> {
        let d = self.table.d;
        let mut g = vec![0.0; self.m * d];
        let mut gs = vec![0.0; self.m * d];
        let mut present = vec![false; self.m];
        let mut e = 0.0;
        for &i in sites {
            self.table.gather(i, w, self.m, &mut g, &mut present);
            e += self.model.energy_grad(self.rho(), &g, &present, &mut gs)?;
            self.scatter(i, &present, &gs, grad);
        }
        Ok(e)
    }

    /// Per-site energies `V_ℓ(Dw(ℓ))` in the given order.
    pub fn site_energies(&self, sites: &[usize], w: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.m * self.table.d];
        let mut present = vec![false; self.m];
        sites
            .iter()
            .map(|&i| {
                self.table.gather(i, w, self.m, &mut g, &mut present);
                self.model.energy(self.rho(), &g, &present)
            })
            .collect()
    }

    /// `Σ_k (V_{sites[k]}(w) − base[k])`, adding the gradient into `grad` when given;
    /// subtracting per site keeps the sum free of cancellation.
    pub fn energy_rel(&self, sites: &[usize], w: &[f64], base: &[f64], mut grad: Option<&mut [f64]>) -> Result<f64> {
        let d = self.table.d;
        let mut g = vec![0.0; self.m * d];
        let mut gs = vec![0.0; self.m * d];
        let mut present = vec![false; self.m];
        let mut e = 0.0;
        for (&i, b) in sites.iter().zip(base) {
            self.table.gather(i, w, self.m, &mut g, &mut present);
            let v = match grad.as_deref_mut() {
                Some(gr) => {
                    let v = self.model.energy_grad(self.rho(), &g, &present, &mut gs)?;
                    self.scatter(i, &present, &gs, gr);
                    v
                }
                None => self.model.energy(self.rho(), &g, &present)?,
            };
            e += v - b;
        }
        Ok(e)
    }

    /// Adds `Σ_s ∂V/∂g_s · ∂g_s/∂w` of one site into a full-field gradient.
    #[inline]
    pub fn scatter(&self, site: usize, present: &[bool], gs: &[f64], grad: &mut [f64]) {
        let d = self.table.d;
        for s in 0..self.m {
            if !present[s] {
                continue;
            }
            let j = self.table.neighbor(site, s).expect("present slot has a neighbour");
            for a in 0..d {
                grad[j * d + a] += gs[s * d + a];
                grad[site * d + a] -= gs[s * d + a];
            }
        }
    }

    /// Stencil view of one site (present slots only).
    pub fn view(&self, site: usize, w: &[f64]) -> StencilView {
        StencilView::from_table(&self.table, site, w, self.m)
    }

    pub fn all_sites(&self) -> Vec<usize> {
        (0..self.n_sites()).collect()
    }
}

fn check_fields(h: &SitePotentialHandle, u0: &[f64], u: &[f64]) -> Result<()> {
    let n = h.n_sites() * h.table.d;
    if u0.len() != n || u.len() != n {
        return Err(Error::InvalidInput(format!("field length {} / {} does not match {n}", u0.len(), u.len())));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Inadmissible);
    }
    Ok(())
}

/// `E(u) = Σ_ℓ V_ℓ(Du₀(ℓ) + Du(ℓ)) − V_ℓ(Du₀(ℓ))`.
pub fn energy_difference(h: &SitePotentialHandle, u0: &[f64], u: &[f64]) -> Result<f64> {
    check_fields(h, u0, u)?;
    let w: Vec<f64> = u0.iter().zip(u).map(|(a, b)| a + b).collect();
    let mut g = vec![0.0; h.m * h.table.d];
    let mut present = vec![false; h.m];
    let mut e = 0.0;
    for i in 0..h.n_sites() {
        h.table.gather(i, &w, h.m, &mut g, &mut present);
        let v1 = h.model.energy(h.rho(), &g, &present)?;
        h.table.gather(i, u0, h.m, &mut g, &mut present);
        let v0 = h.model.energy(h.rho(), &g, &present)?;
        e += v1 - v0;
    }
    Ok(e)
}

/// `F_ℓ = −∇_{u(ℓ)} E(u)`, flat with stride `d`.
pub fn forces(h: &SitePotentialHandle, u0: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    check_fields(h, u0, u)?;
    let w: Vec<f64> = u0.iter().zip(u).map(|(a, b)| a + b).collect();
    let mut grad = vec![0.0; w.len()];
    h.energy_grad(&h.all_sites(), &w, &mut grad)?;
    grad.iter_mut().for_each(|v| *v = -*v);
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{apply_vacancy, build_lattice, LatticeSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eam_handle(cfg: &ReferenceConfig) -> SitePotentialHandle {
        let model = Arc::new(Eam::new(EamParams::stress_free(&LatticeSpec::triangular()).unwrap(), 2));
        SitePotentialHandle::new(model, cfg, None).unwrap()
    }

    #[test]
    fn energy_difference_basics() {
        let cfg = build_lattice(&LatticeSpec::triangular(), 4.0).unwrap();
        let h = eam_handle(&cfg);
        let n = cfg.len() * 2;
        let z = vec![0.0; n];
        assert_eq!(energy_difference(&h, &z, &z).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-0.05..0.05)).collect();
        let shifted: Vec<f64> = u.iter().enumerate().map(|(k, v)| v + if k % 2 == 0 { 0.7 } else { -1.3 }).collect();
        let e = energy_difference(&h, &z, &u).unwrap();
        let es = energy_difference(&h, &z, &shifted).unwrap();
        assert!((e - es).abs() < 1e-12 * e.abs().max(1.0));
        // direct total-energy subtraction oracle on positions
        let total = |disp: &[f64]| -> f64 {
            let p = EamParams::stress_free(&LatticeSpec::triangular()).unwrap();
            let y: Vec<f64> = cfg.x.iter().zip(disp).map(|(a, b)| a + b).collect();
            let mut e = 0.0;
            for i in 0..cfg.len() {
                let mut rho_bar = 0.0;
                let mut pair = 0.0;
                for j in 0..cfg.len() {
                    if i == j || (cfg.pos(i)[0] - cfg.pos(j)[0]).hypot(cfg.pos(i)[1] - cfg.pos(j)[1]) > 3.5 + 1e-9 {
                        continue;
                    }
                    let r = (y[2 * i] - y[2 * j]).hypot(y[2 * i + 1] - y[2 * j + 1]);
                    pair += 0.5 * p.phi(r);
                    rho_bar += p.psi(r);
                }
                e += pair - p.c_e * rho_bar.sqrt();
            }
            e
        };
        let oracle = total(&u) - total(&z);
        assert!((e - oracle).abs() < 1e-10, "{e} vs {oracle}");
    }

    #[test]
    fn forces_match_finite_differences() {
        let cfg = build_lattice(&LatticeSpec::triangular(), 4.0).unwrap();
        let h = eam_handle(&cfg);
        let n = cfg.len() * 2;
        let z = vec![0.0; n];
        let f0 = forces(&h, &z, &z).unwrap();
        let hom = build_lattice(&LatticeSpec::triangular(), 12.0).unwrap();
        let hh = eam_handle(&hom);
        let fz = forces(&hh, &vec![0.0; hom.len() * 2], &vec![0.0; hom.len() * 2]).unwrap();
        let i0 = hom.find_site(&[0.0, 0.0]).unwrap();
        assert!(fz[2 * i0].abs() < 1e-12 && fz[2 * i0 + 1].abs() < 1e-12);
        assert!(f0.iter().all(|v| v.is_finite()));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-0.1..0.1)).collect();
        let f = forces(&h, &z, &u).unwrap();
        let step = 1e-6;
        for k in (0..n).step_by(3) {
            let mut up = u.clone();
            let mut um = u.clone();
            up[k] += step;
            um[k] -= step;
            let fd = -(energy_difference(&h, &z, &up).unwrap() - energy_difference(&h, &z, &um).unwrap()) / (2.0 * step);
            assert!((fd - f[k]).abs() < 1e-6 * f[k].abs().max(1.0), "{k}: {fd} vs {}", f[k]);
        }
    }

    #[test]
    fn vacancy_forces_are_local() {
        let hom = build_lattice(&LatticeSpec::triangular(), 14.0).unwrap();
        let cfg = apply_vacancy(&hom, &[0.0, 0.0]).unwrap();
        let h = eam_handle(&cfg);
        let z = vec![0.0; cfg.len() * 2];
        let f = forces(&h, &z, &z).unwrap();
        let mut near = 0.0f64;
        for i in 0..cfg.len() {
            let fi = f[2 * i].hypot(f[2 * i + 1]);
            let r = cfg.norm(i);
            // forces reach two cutoffs: the neighbours' densities see the vacancy
            if r > 5.0 + 1e-9 && r < 14.0 - 5.5 {
                assert!(fi < 1e-12, "site at {r}: {fi}");
            }
            if r < 2.5 {
                near = near.max(fi);
            }
        }
        assert!(near > 1e-3);
    }
}
