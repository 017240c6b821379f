use serde::{Deserialize, Serialize};

use super::SiteModel;
use crate::error::{Error, Result};
use crate::lattice::{LatticeSpec, StencilView};

/// Toy EAM: `V = ½Σ φ(r) + F(Σ ψ(r))` with
/// `φ = A_p e^{−p(r−1)} s(r)`, `ψ = e^{−q(r−1)} s(r)`, `F(ρ̄) = −C_e √ρ̄`
/// and `s` a C² quintic taper on `[R_cut − width, R_cut]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EamParams {
    pub a_p: f64,
    pub p: f64,
    pub q: f64,
    pub c_e: f64,
    pub r_cut: f64,
    pub width: f64,
}

impl EamParams {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.a_p, self.p, self.q, self.c_e, self.width].iter().all(|v| *v > 0.0) && self.r_cut >= 2.0 && self.width < self.r_cut;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid EAM parameters {self:?}")))
        }
    }

    /// Default shape (`A_p = 1, p = 5, q = 2.5, R_cut = 2.5`, width 0.4) with
    /// `C_e` chosen so that `spec` is stress free under uniform dilation.
    pub fn stress_free(spec: &LatticeSpec) -> Result<Self> {
        Self::stress_free_with(spec, 1.0, 5.0, 2.5, 2.5, 0.4)
    }

    pub fn stress_free_with(spec: &LatticeSpec, a_p: f64, p: f64, q: f64, r_cut: f64, width: f64) -> Result<Self> {
        let mut prm = EamParams {
            a_p,
            p,
            q,
            c_e: 1.0,
            r_cut,
            width,
        };
        prm.validate()?;
        // dE/da at a = 1: ½Σ r φ'(r) − C_e Σ r ψ'(r) / (2√ρ̄) = 0
        let mut x = vec![0.0; spec.d];
        let (mut a, mut b, mut rho) = (0.0, 0.0, 0.0);
        for k in spec.enumerate_ball(r_cut)? {
            if k == [0, 0, 0] {
                continue;
            }
            spec.point(&k, &mut x);
            let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            a += 0.5 * r * prm.dphi(r);
            b += r * prm.dpsi(r);
            rho += prm.psi(r);
        }
        prm.c_e = 2.0 * rho.sqrt() * a / b;
        prm.validate()?;
        Ok(prm)
    }

    /// Taper `s(r)` and `s'(r)`.
    #[inline]
    pub fn taper(&self, r: f64) -> (f64, f64) {
        let r0 = self.r_cut - self.width;
        if r <= r0 {
            (1.0, 0.0)
        } else if r >= self.r_cut {
            (0.0, 0.0)
        } else {
            let x = (r - r0) / self.width;
            let x2 = x * x;
            let s = 1.0 - x2 * x * (10.0 - 15.0 * x + 6.0 * x2);
            let ds = -30.0 * x2 * (1.0 - 2.0 * x + x2) / self.width;
            (s, ds)
        }
    }

    #[inline]
    pub fn phi(&self, r: f64) -> f64 {
        self.a_p * (-self.p * (r - 1.0)).exp() * self.taper(r).0
    }

    #[inline]
    pub fn dphi(&self, r: f64) -> f64 {
        let (s, ds) = self.taper(r);
        self.a_p * (-self.p * (r - 1.0)).exp() * (ds - self.p * s)
    }

    #[inline]
    pub fn psi(&self, r: f64) -> f64 {
        (-self.q * (r - 1.0)).exp() * self.taper(r).0
    }

    #[inline]
    pub fn dpsi(&self, r: f64) -> f64 {
        let (s, ds) = self.taper(r);
        (-self.q * (r - 1.0)).exp() * (ds - self.q * s)
    }

    /// Embedding `F(ρ̄)` and `F'(ρ̄)`; `F'(0)` is taken as 0.
    #[inline]
    pub fn embed(&self, rho: f64) -> (f64, f64) {
        if rho <= 0.0 {
            (0.0, 0.0)
        } else {
            let sq = rho.sqrt();
            (-self.c_e * sq, -0.5 * self.c_e / sq)
        }
    }
}

/// EAM bound to a dimension; labels are taken one lattice unit beyond the
/// cutoff so that neighbours moving into range are seen.
#[derive(Clone, Debug, PartialEq)]
pub struct Eam {
    pub params: EamParams,
    pub d: usize,
}

impl Eam {
    pub fn new(params: EamParams, d: usize) -> Self {
        Eam { params, d }
    }
}

/// `V(g)` for an explicit stencil.
pub fn eam_site_energy(params: &EamParams, stencil: &StencilView) -> Result<f64> {
    let present = vec![true; stencil.len()];
    Eam::new(params.clone(), stencil.d).energy(&stencil.rho, &stencil.du, &present)
}

impl SiteModel for Eam {
    fn d(&self) -> usize {
        self.d
    }

    fn label_radius(&self) -> f64 {
        self.params.r_cut + 1.0
    }

    fn cutoff(&self) -> f64 {
        self.params.r_cut
    }

    fn energy(&self, rho: &[f64], g: &[f64], present: &[bool]) -> Result<f64> {
        let d = self.d;
        let (mut pair, mut dens) = (0.0, 0.0);
        for s in 0..present.len() {
            if !present[s] {
                continue;
            }
            let r = (0..d).map(|a| (rho[s * d + a] + g[s * d + a]).powi(2)).sum::<f64>().sqrt();
            if r < 1e-8 {
                return Err(Error::Collision(r));
            }
            if r >= self.params.r_cut {
                continue;
            }
            pair += self.params.phi(r);
            dens += self.params.psi(r);
        }
        Ok(0.5 * pair + self.params.embed(dens).0)
    }

    fn energy_grad(&self, rho: &[f64], g: &[f64], present: &[bool], grad: &mut [f64]) -> Result<f64> {
        let d = self.d;
        let m = present.len();
        let mut r = [0.0f64; 256];
        let mut rbuf;
        let rr: &mut [f64] = if m <= 256 {
            &mut r[..m]
        } else {
            rbuf = vec![0.0; m];
            &mut rbuf
        };
        let (mut pair, mut dens) = (0.0, 0.0);
        for s in 0..m {
            rr[s] = f64::INFINITY;
            if !present[s] {
                continue;
            }
            let rs = (0..d).map(|a| (rho[s * d + a] + g[s * d + a]).powi(2)).sum::<f64>().sqrt();
            if rs < 1e-8 {
                return Err(Error::Collision(rs));
            }
            rr[s] = rs;
            if rs < self.params.r_cut {
                pair += self.params.phi(rs);
                dens += self.params.psi(rs);
            }
        }
        let (fe, dfe) = self.params.embed(dens);
        for s in 0..m {
            let rs = rr[s];
            let gs = &mut grad[s * d..s * d + d];
            if rs >= self.params.r_cut {
                gs.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            let c = (0.5 * self.params.dphi(rs) + dfe * self.params.dpsi(rs)) / rs;
            for a in 0..d {
                gs[a] = c * (rho[s * d + a] + g[s * d + a]);
            }
        }
        Ok(0.5 * pair + fe)
    }
}

/// Lattice constant minimising the per-site energy of `s·A` (golden section on `[0.8, 1.2]`).
pub fn relax_lattice_constant(params: &EamParams, spec: &LatticeSpec) -> Result<f64> {
    let per_site = |s: f64| -> Result<f64> {
        let sp = spec.scaled(s);
        let keys = sp.enumerate_ball(params.r_cut + 1.0)?;
        let mut x = vec![0.0; spec.d];
        let (mut pair, mut dens) = (0.0, 0.0);
        for k in keys.iter().filter(|k| **k != [0, 0, 0]) {
            sp.point(k, &mut x);
            let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            pair += params.phi(r);
            dens += params.psi(r);
        }
        Ok(0.5 * pair + params.embed(dens).0)
    };
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut lo, mut hi) = (0.8, 1.2);
    let mut c = hi - phi * (hi - lo);
    let mut e = lo + phi * (hi - lo);
    let (mut fc, mut fe) = (per_site(c)?, per_site(e)?);
    while hi - lo > 1e-10 {
        if fc < fe {
            hi = e;
            e = c;
            fe = fc;
            c = hi - phi * (hi - lo);
            fc = per_site(c)?;
        } else {
            lo = c;
            c = e;
            fc = fe;
            e = lo + phi * (hi - lo);
            fe = per_site(e)?;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_lattice, LatticeSpec};

    fn model() -> Eam {
        Eam::new(EamParams::stress_free(&LatticeSpec::triangular()).unwrap(), 2)
    }

    #[test]
    fn stress_free_constants() {
        let p = EamParams::stress_free(&LatticeSpec::triangular()).unwrap();
        // oracle: shells (6 at 1, 6 at √3, 6 at 2); taper inactive on all three
        let shells = [(6.0, 1.0f64), (6.0, 3f64.sqrt()), (6.0, 2.0)];
        let rho: f64 = shells.iter().map(|(n, r)| n * (-2.5 * (r - 1.0)).exp()).sum();
        let a: f64 = shells.iter().map(|(n, r)| 0.5 * n * r * -5.0 * (-5.0 * (r - 1.0)).exp()).sum();
        let b: f64 = shells.iter().map(|(n, r)| n * r * -2.5 * (-2.5 * (r - 1.0)).exp()).sum();
        assert!((p.c_e - 2.0 * rho.sqrt() * a / b).abs() < 1e-12);
        let a_min = relax_lattice_constant(&p, &LatticeSpec::triangular()).unwrap();
        assert!((a_min - 1.0).abs() < 1e-6, "{a_min}");
    }

    #[test]
    fn taper_is_c2() {
        let p = model().params;
        let r0 = p.r_cut - p.width;
        for r in [r0, p.r_cut] {
            let (s_lo, ds_lo) = p.taper(r - 1e-9);
            let (s_hi, ds_hi) = p.taper(r + 1e-9);
            assert!((s_lo - s_hi).abs() < 1e-8 && (ds_lo - ds_hi).abs() < 1e-7);
        }
        let h = 1e-6;
        for r in [2.15, 2.3, 2.45] {
            let fd = (p.taper(r + h).0 - p.taper(r - h).0) / (2.0 * h);
            assert!((fd - p.taper(r).1).abs() < 1e-8);
        }
    }

    #[test]
    fn site_energy_properties() {
        let m = model();
        let cfg = build_lattice(&LatticeSpec::triangular(), 5.0).unwrap();
        let table = crate::lattice::StencilTable::build(&cfg, 3.5, None).unwrap();
        let i0 = cfg.find_site(&[0.0, 0.0]).unwrap();
        let z = vec![0.0; cfg.len() * 2];
        let v = StencilView::from_table(&table, i0, &z, table.n_labels());
        let e0 = eam_site_energy(&m.params, &v).unwrap();
        assert!(e0.is_finite() && e0 < 0.0);
        // neighbour moved beyond the cutoff contributes nothing
        let mut far = v.clone();
        far.du[0] = 10.0;
        let mut gone = v.clone();
        gone.rho.drain(0..2);
        gone.du.drain(0..2);
        assert!((eam_site_energy(&m.params, &far).unwrap() - eam_site_energy(&m.params, &gone).unwrap()).abs() < 1e-14);
        // rigid rotation of the deformed stencil
        let mut w = v.clone();
        for (k, x) in w.du.iter_mut().enumerate() {
            *x = 0.03 * ((k as f64) * 1.7).sin();
        }
        let e = eam_site_energy(&m.params, &w).unwrap();
        let t: f64 = 0.7;
        let (c, s) = (t.cos(), t.sin());
        let mut rot = w.clone();
        for j in 0..w.len() {
            let y = [w.rho[2 * j] + w.du[2 * j], w.rho[2 * j + 1] + w.du[2 * j + 1]];
            let ry = [c * y[0] - s * y[1], s * y[0] + c * y[1]];
            rot.du[2 * j] = ry[0] - w.rho[2 * j];
            rot.du[2 * j + 1] = ry[1] - w.rho[2 * j + 1];
        }
        assert!((eam_site_energy(&m.params, &rot).unwrap() - e).abs() < 1e-12);
        // collision
        let mut col = v.clone();
        col.du[0] = -col.rho[0];
        col.du[1] = -col.rho[1];
        assert!(matches!(eam_site_energy(&m.params, &col), Err(Error::Collision(_))));
    }

    #[test]
    fn gradient_matches_fd() {
        let m = model();
        let cfg = build_lattice(&LatticeSpec::triangular(), 5.0).unwrap();
        let table = crate::lattice::StencilTable::build(&cfg, 3.5, None).unwrap();
        let i0 = cfg.find_site(&[0.0, 0.0]).unwrap();
        let nl = table.n_labels();
        let g: Vec<f64> = (0..nl * 2).map(|k| 0.05 * ((k as f64) * 0.37).cos()).collect();
        let present = vec![true; nl];
        let _ = i0;
        let mut grad = vec![0.0; nl * 2];
        m.energy_grad(&table.labels, &g, &present, &mut grad).unwrap();
        for k in 0..nl * 2 {
            let mut gp = g.clone();
            let mut gm = g.clone();
            gp[k] += 1e-6;
            gm[k] -= 1e-6;
            let fd = (m.energy(&table.labels, &gp, &present).unwrap() - m.energy(&table.labels, &gm, &present).unwrap()) / 2e-6;
            assert!((fd - grad[k]).abs() < 1e-8, "{k}: {fd} {}", grad[k]);
        }
    }
}
