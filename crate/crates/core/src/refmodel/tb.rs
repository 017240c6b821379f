use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::ReferenceConfig;

/// Single s-orbital tight binding with identity overlap.
///
/// On-site `a + bρ^{2/3} + cρ^{4/3} + dρ²` from the pseudo-density
/// `ρ_ℓ = Σ_k e^{−λ² r} f_c(r)`; hopping `(e + f r + g r²) e^{−h r} f_c(r)`;
/// `f_c(r) = 1/(1 + exp((r − R_c)/l_c + L_c))` for `r < R_c`, else 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TbParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub lambda: f64,
    pub e_h: f64,
    pub f_h: f64,
    pub g_h: f64,
    pub h_h: f64,
    pub r_c: f64,
    pub l_c: f64,
    pub big_l_c: f64,
    /// Spinless electrons per atom; 1 fills the band (closed shell).
    pub electrons_per_atom: f64,
}

impl Default for TbParams {
    fn default() -> Self {
        TbParams {
            a: 0.1,
            b: -0.3,
            c: 0.05,
            d: -0.002,
            lambda: 1.0,
            e_h: -1.0,
            f_h: 0.2,
            g_h: 0.0,
            h_h: 1.0,
            r_c: 3.8,
            l_c: 0.5,
            big_l_c: 5.0,
            electrons_per_atom: 1.0,
        }
    }
}

impl TbParams {
    #[inline]
    pub fn cutoff(&self, r: f64) -> f64 {
        if r >= self.r_c {
            0.0
        } else {
            1.0 / (1.0 + ((r - self.r_c) / self.l_c + self.big_l_c).exp())
        }
    }

    #[inline]
    pub fn hopping(&self, r: f64) -> f64 {
        (self.e_h + self.f_h * r + self.g_h * r * r) * (-self.h_h * r).exp() * self.cutoff(r)
    }

    #[inline]
    pub fn onsite(&self, rho: f64) -> f64 {
        self.a + self.b * rho.powf(2.0 / 3.0) + self.c * rho.powf(4.0 / 3.0) + self.d * rho * rho
    }
}

fn positions(config: &ReferenceConfig, u: &[f64]) -> Result<Vec<f64>> {
    if u.len() != config.x.len() {
        return Err(Error::InvalidInput("displacement length does not match configuration".into()));
    }
    Ok(config.x.iter().zip(u).map(|(a, b)| a + b).collect())
}

/// Dense Hamiltonian of the deformed configuration `x + u`.
pub fn tb_hamiltonian(p: &TbParams, config: &ReferenceConfig, u: &[f64]) -> Result<DMatrix<f64>> {
    let y = positions(config, u)?;
    let d = config.d();
    let n = config.len();
    let mut h = DMatrix::zeros(n, n);
    let mut rho = vec![0.0; n];
    for i in 0..n {
        for j in i + 1..n {
            let r = (0..d).map(|a| (y[i * d + a] - y[j * d + a]).powi(2)).sum::<f64>().sqrt();
            if r < 1e-8 {
                return Err(Error::Collision(r));
            }
            if r >= p.r_c {
                continue;
            }
            let w = (-p.lambda * p.lambda * r).exp() * p.cutoff(r);
            rho[i] += w;
            rho[j] += w;
            let t = p.hopping(r);
            h[(i, j)] = t;
            h[(j, i)] = t;
        }
    }
    for i in 0..n {
        h[(i, i)] = p.onsite(rho[i]);
    }
    if (0..n).any(|i| (0..i).any(|j| h[(i, j)] != h[(j, i)])) {
        return Err(Error::Eigen("non-symmetric Hamiltonian".into()));
    }
    Ok(h)
}

/// Occupations at zero temperature; a degenerate Fermi shell is filled evenly.
fn occupations(evals: &[f64], n_el: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..evals.len()).collect();
    order.sort_by(|&a, &b| evals[a].total_cmp(&evals[b]));
    let scale = evals.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * scale;
    let mut occ = vec![0.0; evals.len()];
    let mut left = n_el.min(evals.len() as f64);
    let mut k = 0;
    while k < order.len() && left > 1e-12 {
        let mut end = k + 1;
        while end < order.len() && evals[order[end]] - evals[order[k]] <= tol {
            end += 1;
        }
        let cnt = (end - k) as f64;
        let f = (left / cnt).min(1.0);
        for &s in &order[k..end] {
            occ[s] = f;
        }
        left -= f * cnt;
        k = end;
    }
    occ
}

/// Mulliken-type site energies `E_ℓ = Σ_s f_s λ_s [ψ_s]_ℓ²`.
pub fn tb_site_energies(p: &TbParams, config: &ReferenceConfig, u: &[f64]) -> Result<Vec<f64>> {
    let h = tb_hamiltonian(p, config, u)?;
    let n = h.nrows();
    let eig = SymmetricEigen::try_new(h, 1e-14, 0).ok_or_else(|| Error::Eigen("symmetric eigensolver did not converge".into()))?;
    let lam: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let occ = occupations(&lam, p.electrons_per_atom * n as f64);
    let mut e = vec![0.0; n];
    for s in 0..n {
        if occ[s] == 0.0 {
            continue;
        }
        let col = eig.eigenvectors.column(s);
        for l in 0..n {
            e[l] += occ[s] * lam[s] * col[l] * col[l];
        }
    }
    Ok(e)
}

pub fn tb_site_energy(p: &TbParams, config: &ReferenceConfig, u: &[f64], site: usize) -> Result<f64> {
    tb_site_energies(p, config, u)?
        .get(site)
        .copied()
        .ok_or_else(|| Error::InvalidInput(format!("no site {site}")))
}

/// Band energy `Σ_s f_s λ_s`.
pub fn tb_band_energy(p: &TbParams, config: &ReferenceConfig, u: &[f64]) -> Result<f64> {
    let h = tb_hamiltonian(p, config, u)?;
    let n = h.nrows();
    let lam: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
    let occ = occupations(&lam, p.electrons_per_atom * n as f64);
    Ok(lam.iter().zip(&occ).map(|(l, f)| l * f).sum())
}

pub fn tb_energy_difference(p: &TbParams, config: &ReferenceConfig, u0: &[f64], u: &[f64]) -> Result<f64> {
    let w: Vec<f64> = u0.iter().zip(u).map(|(a, b)| a + b).collect();
    Ok(tb_band_energy(p, config, &w)? - tb_band_energy(p, config, u0)?)
}

/// Forces by central differences of the band energy (step 1e-5).
pub fn tb_forces(p: &TbParams, config: &ReferenceConfig, u0: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    let h = 1e-5;
    let mut w: Vec<f64> = u0.iter().zip(u).map(|(a, b)| a + b).collect();
    let mut f = vec![0.0; w.len()];
    for k in 0..w.len() {
        let w0 = w[k];
        w[k] = w0 + h;
        let ep = tb_band_energy(p, config, &w)?;
        w[k] = w0 - h;
        let em = tb_band_energy(p, config, &w)?;
        w[k] = w0;
        f[k] = -(ep - em) / (2.0 * h);
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_lattice, LatticeSpec};

    #[test]
    fn partition_sums_to_band_energy() {
        let cfg = build_lattice(&LatticeSpec::triangular(), 3.0).unwrap();
        let z = vec![0.0; cfg.len() * 2];
        for n_el in [1.0, 0.5, 0.3] {
            let p = TbParams {
                electrons_per_atom: n_el,
                ..TbParams::default()
            };
            let e = tb_site_energies(&p, &cfg, &z).unwrap();
            let band = tb_band_energy(&p, &cfg, &z).unwrap();
            assert!((e.iter().sum::<f64>() - band).abs() < 1e-10 * band.abs().max(1.0));
        }
    }

    #[test]
    fn interior_sites_equal_and_local() {
        let p = TbParams::default();
        let cfg = build_lattice(&LatticeSpec::triangular(), 10.0).unwrap();
        let z = vec![0.0; cfg.len() * 2];
        let e = tb_site_energies(&p, &cfg, &z).unwrap();
        let i0 = cfg.find_site(&[0.0, 0.0]).unwrap();
        for i in 0..cfg.len() {
            if cfg.norm(i) < 10.0 - p.r_c - 0.5 {
                assert!((e[i] - e[i0]).abs() < 1e-8);
            }
        }
        // far atom perturbation
        let far = (0..cfg.len()).find(|&i| cfg.norm(i) > 4.0 * p.r_c - 6.0 && cfg.norm(i) > 9.0).unwrap();
        let mut u = z.clone();
        u[2 * far] = 0.05;
        let e2 = tb_site_energies(&p, &cfg, &u).unwrap();
        assert!((e2[i0] - e[i0]).abs() < 1e-6);
    }

    #[test]
    fn sensitivity_decays_exponentially() {
        let p = TbParams::default();
        let cfg = build_lattice(&LatticeSpec::triangular(), 6.0).unwrap();
        let z = vec![0.0; cfg.len() * 2];
        let i0 = cfg.find_site(&[0.0, 0.0]).unwrap();
        let h = 1e-5;
        let mut pts = Vec::new();
        for r in [1.0f64, 2.0, 3.0] {
            let k = cfg.find_site(&[r, 0.0]).unwrap();
            let mut up = z.clone();
            let mut um = z.clone();
            up[2 * k] = h;
            um[2 * k] = -h;
            let der = (tb_site_energies(&p, &cfg, &up).unwrap()[i0] - tb_site_energies(&p, &cfg, &um).unwrap()[i0]) / (2.0 * h);
            pts.push((r, der.abs().ln()));
        }
        let slope = (pts[2].1 - pts[0].1) / (pts[2].0 - pts[0].0);
        assert!(slope < 0.0, "{pts:?}");
    }

    #[test]
    fn forces_vanish_at_center_of_homogeneous_cluster() {
        let p = TbParams::default();
        let cfg = build_lattice(&LatticeSpec::triangular(), 5.0).unwrap();
        let z = vec![0.0; cfg.len() * 2];
        let f = tb_forces(&p, &cfg, &z, &z).unwrap();
        let i0 = cfg.find_site(&[0.0, 0.0]).unwrap();
        assert!(f[2 * i0].abs() < 1e-8 && f[2 * i0 + 1].abs() < 1e-8);
        assert!(tb_hamiltonian(&p, &cfg, &z).unwrap().nrows() == cfg.len());
    }
}
