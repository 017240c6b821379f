//! QM/MM domain decomposition, the interpolation `I^h`, energy-mixing hybrid
//! energies (with and without ghost-force correction) and force-mixing forces.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{build_lattice, Defect, DisplacementField, ReferenceConfig, StencilTable};
use crate::refmodel::{SiteModel, SitePotentialHandle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Qm,
    Mm,
    Ff,
}

impl Region {
    pub fn tag(self) -> &'static str {
        match self {
            Region::Qm => "QM",
            Region::Mm => "MM",
            Region::Ff => "FF",
        }
    }
}

/// Region radii and labels measured from the defect centre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub center: Vec<f64>,
    pub r_qm: f64,
    pub buffer: f64,
    pub r_mm: f64,
    pub region: Vec<Region>,
    /// MM sites within `buffer` of the QM ball.
    pub buf: Vec<bool>,
}

/// Defect centre: vacancy centre, dislocation core, or the origin.
pub fn defect_center(config: &ReferenceConfig) -> Vec<f64> {
    match &config.defect {
        Defect::Vacancy { center, .. } => center.clone(),
        Defect::EdgeDislocation(s) => s.core.to_vec(),
        Defect::None => vec![0.0; config.d()],
    }
}

fn dist(x: &[f64], c: &[f64]) -> f64 {
    x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

fn classify(x: &[f64], c: &[f64], r_qm: f64, buffer: f64, r_mm: f64) -> (Region, bool) {
    let r = dist(x, c);
    if r < r_qm {
        (Region::Qm, false)
    } else if r <= r_mm {
        (Region::Mm, r < r_qm + buffer)
    } else {
        (Region::Ff, false)
    }
}

pub fn decompose(config: &ReferenceConfig, r_qm: f64, buffer: f64, r_mm: f64) -> Result<Decomposition> {
    if !(config.r_def < r_qm) {
        return Err(Error::RadiusOrdering(format!("R_DEF = {} must be below R_QM = {r_qm}", config.r_def)));
    }
    if !(buffer >= 0.0 && r_qm + buffer <= r_mm && r_mm <= config.r_dom) {
        return Err(Error::RadiusOrdering(format!(
            "need R_QM + buffer <= R_MM <= R_DOM, got {r_qm} + {buffer}, {r_mm}, {}",
            config.r_dom
        )));
    }
    let center = defect_center(config);
    let (region, buf) = (0..config.len()).map(|i| classify(config.pos(i), &center, r_qm, buffer, r_mm)).unzip();
    Ok(Decomposition {
        center,
        r_qm,
        buffer,
        r_mm,
        region,
        buf,
    })
}

impl Decomposition {
    pub fn free_mask(&self) -> Vec<bool> {
        self.region.iter().map(|r| *r != Region::Ff).collect()
    }

    pub fn count(&self, r: Region) -> usize {
        self.region.iter().filter(|x| **x == r).count()
    }

    /// Region CSV rows `index,x,y[,z],region` (buffer sites tagged `BUF`).
    pub fn write_csv<W: std::io::Write>(&self, config: &ReferenceConfig, w: W) -> Result<()> {
        crate::lattice::write_sites_csv(config, &|i| if self.buf[i] { "BUF".to_string() } else { self.region[i].tag().to_string() }, w)
    }
}

/// Linear map from a defective configuration to a target lattice: common sites
/// are copied, target sites missing from the source take the average of their
/// present nearest neighbours.
#[derive(Clone, Debug, PartialEq)]
pub struct Interpolation {
    pub d: usize,
    pub n_src: usize,
    /// Per target site: weighted source sites.
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl Interpolation {
    pub fn new(src: &ReferenceConfig, target: &ReferenceConfig) -> Result<Self> {
        let mut rows = Vec::with_capacity(target.len());
        for i in 0..target.len() {
            let k = target.keys[i];
            if let Some(j) = src.index_of(&k) {
                rows.push(vec![(j, 1.0)]);
                continue;
            }
            let mut nb = Vec::new();
            for g in &target.generators {
                for s in [1i64, -1] {
                    if let Some(j) = src.index_of(&[k[0] + s * g[0], k[1] + s * g[1], k[2] + s * g[2]]) {
                        nb.push(j);
                    }
                }
            }
            if nb.is_empty() {
                return Err(Error::InvalidInput(format!("site {k:?} cannot be interpolated")));
            }
            let w = 1.0 / nb.len() as f64;
            rows.push(nb.into_iter().map(|j| (j, w)).collect());
        }
        Ok(Interpolation {
            d: src.d(),
            n_src: src.len(),
            rows,
        })
    }

    pub fn identity(n: usize, d: usize) -> Self {
        Interpolation {
            d,
            n_src: n,
            rows: (0..n).map(|i| vec![(i, 1.0)]).collect(),
        }
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut out = vec![0.0; self.rows.len() * d];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                for a in 0..d {
                    out[i * d + a] += w * u[j * d + a];
                }
            }
        }
        out
    }

    /// `g_src += (I^h)ᵀ g_target`.
    pub fn apply_transpose(&self, g: &[f64], out: &mut [f64]) {
        let d = self.d;
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                for a in 0..d {
                    out[j * d + a] += w * g[i * d + a];
                }
            }
        }
    }
}

/// `I^h u` on the homogeneous lattice of the same domain.
#[allow(non_snake_case)]
pub fn interpolate_Ih(config: &ReferenceConfig, u: &DisplacementField) -> Result<DisplacementField> {
    let hom = build_lattice(&config.spec, config.r_dom)?;
    let ip = Interpolation::new(config, &hom)?;
    let mut out = DisplacementField::from_vec(config.d(), ip.apply(&u.u));
    out.frozen = ip.rows.iter().map(|r| r.iter().all(|&(j, _)| u.frozen[j])).collect();
    Ok(out)
}

/// Hybrid problem without the dead load.
#[derive(Clone, Debug)]
struct Raw {
    d: usize,
    n: usize,
    qm: SitePotentialHandle,
    qm_sites: Vec<usize>,
    /// QM ∪ BUF sites (the restricted reference system).
    qmb_sites: Vec<usize>,
    mm: SitePotentialHandle,
    /// MM-lattice sites outside the QM ball whose stencils can see free sites.
    mm_sites: Vec<usize>,
    /// All MM-lattice sites whose stencils can see free sites.
    mm_all: Vec<usize>,
    interp: Interpolation,
    u0: Vec<f64>,
    u0_mm: Vec<f64>,
    /// Site energies at `u = 0`, aligned with `qm_sites` / `mm_sites`.
    base_qm: Vec<f64>,
    base_mm: Vec<f64>,
}

impl Raw {
    fn new(config: &ReferenceConfig, dec: &Decomposition, reference: Arc<dyn SiteModel>, mm: Arc<dyn SiteModel>, u0: Vec<f64>) -> Result<Self> {
        let d = config.d();
        let n = config.len();
        let (mm_config, interp) = match config.defect {
            Defect::Vacancy { .. } => {
                let hom = config.homogeneous_version()?;
                let ip = Interpolation::new(config, &hom)?;
                (hom, ip)
            }
            _ => (config.clone(), Interpolation::identity(n, d)),
        };
        let u0_mm = interp.apply(&u0);
        let qmb: Vec<bool> = (0..n).map(|i| dec.region[i] == Region::Qm || dec.buf[i]).collect();
        let qm = SitePotentialHandle::new(reference, config, Some(&qmb))?;
        let qm_sites: Vec<usize> = (0..n).filter(|&i| dec.region[i] == Region::Qm).collect();
        let qmb_sites: Vec<usize> = (0..n).filter(|&i| qmb[i]).collect();
        let mm_table = Arc::new(StencilTable::build(&mm_config, mm.label_radius(), None)?);
        let mmh = SitePotentialHandle::with_table(mm, mm_table)?;
        // free MM-lattice sites: any source row touching a free site
        let free = dec.free_mask();
        let free_mm: Vec<bool> = interp.rows.iter().map(|r| r.iter().any(|&(j, _)| free[j])).collect();
        let mm_all = mmh.table.sites_touching(&free_mm, mmh.m);
        let mm_sites: Vec<usize> = mm_all
            .iter()
            .copied()
            .filter(|&i| classify(mm_config.pos(i), &dec.center, dec.r_qm, dec.buffer, dec.r_mm).0 != Region::Qm)
            .collect();
        let base_qm = qm.site_energies(&qm_sites, &u0)?;
        let base_mm = mmh.site_energies(&mm_sites, &u0_mm)?;
        Ok(Raw {
            d,
            n,
            qm,
            qm_sites,
            qmb_sites,
            mm: mmh,
            mm_sites,
            mm_all,
            interp,
            u0,
            u0_mm,
            base_qm,
            base_mm,
        })
    }

    /// `Σ_QM ΔV^QM(w) + Σ_{MM∪FF} ΔV^MM(w_h)` relative to `u = 0`, optionally with its gradient in `u`.
    fn relative(&self, u: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
        if u.len() != self.n * self.d {
            return Err(Error::InvalidInput(format!("field length {} vs {}", u.len(), self.n * self.d)));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Inadmissible);
        }
        let w: Vec<f64> = self.u0.iter().zip(u).map(|(a, b)| a + b).collect();
        let iu = self.interp.apply(u);
        let wh: Vec<f64> = self.u0_mm.iter().zip(&iu).map(|(a, b)| a + b).collect();
        match grad {
            None => Ok(self.qm.energy_rel(&self.qm_sites, &w, &self.base_qm, None)? + self.mm.energy_rel(&self.mm_sites, &wh, &self.base_mm, None)?),
            Some(g) => {
                g.iter_mut().for_each(|v| *v = 0.0);
                let e1 = self.qm.energy_rel(&self.qm_sites, &w, &self.base_qm, Some(g))?;
                let mut gh = vec![0.0; wh.len()];
                let e2 = self.mm.energy_rel(&self.mm_sites, &wh, &self.base_mm, Some(&mut gh))?;
                self.interp.apply_transpose(&gh, g);
                Ok(e1 + e2)
            }
        }
    }
}

/// Energy-/force-mixing hybrid problem on a (possibly defective) configuration.
#[derive(Clone, Debug)]
pub struct HybridSpec {
    pub config: ReferenceConfig,
    pub decomposition: Decomposition,
    raw: Raw,
    /// Dead load `g(ℓ) = δE^H_hom(0)(ℓ)` from the defect-free lattice.
    pub dead_load: Vec<f64>,
    pub beta: Vec<f64>,
}

impl HybridSpec {
    /// `u0` is the predictor on `config` (`None` = zero).
    pub fn new(config: &ReferenceConfig, dec: Decomposition, reference: Arc<dyn SiteModel>, mm: Arc<dyn SiteModel>, u0: Option<Vec<f64>>) -> Result<Self> {
        let d = config.d();
        if dec.region.len() != config.len() {
            return Err(Error::InvalidInput("decomposition does not match configuration".into()));
        }
        if dec.buffer + 1e-9 < reference.cutoff() {
            return Err(Error::RadiusOrdering(format!(
                "buffer {} narrower than the reference interaction range",
                dec.buffer
            )));
        }
        let u0 = u0.unwrap_or_else(|| vec![0.0; config.len() * d]);
        let raw = Raw::new(config, &dec, reference.clone(), mm.clone(), u0)?;
        // dead load from the defect-free lattice with the same regions
        let hom = build_lattice(&config.spec, config.r_dom)?;
        let (region, buf) = (0..hom.len())
            .map(|i| classify(hom.pos(i), &dec.center, dec.r_qm, dec.buffer, dec.r_mm))
            .unzip();
        let hdec = Decomposition { region, buf, ..dec.clone() };
        let hraw = Raw::new(&hom, &hdec, reference, mm, vec![0.0; hom.len() * d])?;
        let mut gh = vec![0.0; hom.len() * d];
        hraw.relative(&vec![0.0; hom.len() * d], Some(&mut gh))?;
        let mut dead_load = vec![0.0; config.len() * d];
        for i in 0..config.len() {
            if let Some(j) = hom.index_of(&config.keys[i]) {
                dead_load[i * d..i * d + d].copy_from_slice(&gh[j * d..j * d + d]);
            }
        }
        let beta = (0..config.len())
            .map(|i| if dist(config.pos(i), &dec.center) < dec.r_qm / 2.0 { 0.0 } else { 1.0 })
            .collect();
        Ok(HybridSpec {
            config: config.clone(),
            decomposition: dec,
            raw,
            dead_load,
            beta,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.raw.n * self.raw.d
    }

    pub fn free_mask(&self) -> Vec<bool> {
        self.decomposition.free_mask()
    }

    pub fn u0(&self) -> &[f64] {
        &self.raw.u0
    }

    /// Zero field with the far field frozen.
    pub fn zero_field(&self) -> DisplacementField {
        let mut f = DisplacementField::zeros(self.raw.n, self.raw.d);
        f.frozen = self.decomposition.region.iter().map(|r| *r == Region::Ff).collect();
        f
    }
}

/// `E^H(u)` (energy-mixing, no correction).
pub fn hybrid_energy(spec: &HybridSpec, u: &[f64]) -> Result<f64> {
    spec.raw.relative(u, None)
}

/// `E^H(u)` and `∇E^H(u)` (written into `grad`).
pub fn hybrid_energy_grad(spec: &HybridSpec, u: &[f64], grad: &mut [f64]) -> Result<f64> {
    spec.raw.relative(u, Some(grad))
}

/// `−δE^H(0)` per free site (zero on the far field).
pub fn ghost_force_field(spec: &HybridSpec) -> Result<Vec<f64>> {
    let mut g = vec![0.0; spec.n_vars()];
    spec.raw.relative(&vec![0.0; spec.n_vars()], Some(&mut g))?;
    let free = spec.free_mask();
    let d = spec.raw.d;
    for (k, v) in g.iter_mut().enumerate() {
        *v = if free[k / d] { -*v } else { 0.0 };
    }
    Ok(g)
}

/// `E^GFC(u) = E^H(u) − Σ_ℓ β(ℓ) g(ℓ)·u(ℓ)`.
pub fn hybrid_energy_gfc(spec: &HybridSpec, u: &[f64]) -> Result<f64> {
    Ok(hybrid_energy(spec, u)? - dead_load_term(spec, u))
}

pub fn hybrid_energy_gfc_grad(spec: &HybridSpec, u: &[f64], grad: &mut [f64]) -> Result<f64> {
    let e = hybrid_energy_grad(spec, u, grad)?;
    let d = spec.raw.d;
    for i in 0..spec.raw.n {
        for a in 0..d {
            grad[i * d + a] -= spec.beta[i] * spec.dead_load[i * d + a];
        }
    }
    Ok(e - dead_load_term(spec, u))
}

fn dead_load_term(spec: &HybridSpec, u: &[f64]) -> f64 {
    let d = spec.raw.d;
    (0..spec.raw.n)
        .map(|i| spec.beta[i] * (0..d).map(|a| spec.dead_load[i * d + a] * u[i * d + a]).sum::<f64>())
        .sum()
}

/// Force-mixing forces: restricted-reference forces on QM sites, whole-lattice
/// MM forces at `u₀ + I^h u` on MM sites, zero on the far field.
pub fn hybrid_forces(spec: &HybridSpec, u: &[f64]) -> Result<Vec<f64>> {
    let raw = &spec.raw;
    let (n, d) = (raw.n, raw.d);
    if u.len() != n * d {
        return Err(Error::InvalidInput(format!("field length {} vs {}", u.len(), n * d)));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Inadmissible);
    }
    let w: Vec<f64> = raw.u0.iter().zip(u).map(|(a, b)| a + b).collect();
    let mut gq = vec![0.0; n * d];
    raw.qm.energy_grad(&raw.qmb_sites, &w, &mut gq)?;
    let iu = raw.interp.apply(u);
    let wh: Vec<f64> = raw.u0_mm.iter().zip(&iu).map(|(a, b)| a + b).collect();
    let mut gh = vec![0.0; wh.len()];
    raw.mm.energy_grad(&raw.mm_all, &wh, &mut gh)?;
    let mut f = vec![0.0; n * d];
    // MM force at ℓ: the MM-lattice site carrying ℓ's value (copy rows only)
    let mut mm_of = vec![usize::MAX; n];
    for (i, row) in raw.interp.rows.iter().enumerate() {
        if let [(j, w)] = row.as_slice() {
            if *w == 1.0 {
                mm_of[*j] = i;
            }
        }
    }
    for l in 0..n {
        match spec.decomposition.region[l] {
            Region::Qm => {
                for a in 0..d {
                    f[l * d + a] = -gq[l * d + a];
                }
            }
            Region::Mm => {
                let i = mm_of[l];
                for a in 0..d {
                    f[l * d + a] = -gh[i * d + a];
                }
            }
            Region::Ff => {}
        }
    }
    Ok(f)
}

/// Ghost-force CSV rows `index,x,y[,z],fx,fy[,fz]`.
pub fn write_force_csv<W: std::io::Write>(config: &ReferenceConfig, f: &[f64], w: W) -> Result<()> {
    let d = config.d();
    let mut wr = csv::Writer::from_writer(w);
    let axes = ["x", "y", "z"];
    let mut head = vec!["index".to_string()];
    head.extend(axes[..d].iter().map(|s| s.to_string()));
    head.extend(axes[..d].iter().map(|s| format!("f{s}")));
    wr.write_record(&head)?;
    for i in 0..config.len() {
        let mut row = vec![i.to_string()];
        row.extend(config.pos(i).iter().map(|v| format!("{v:.10}")));
        row.extend(f[i * d..i * d + d].iter().map(|v| format!("{v:e}")));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}
