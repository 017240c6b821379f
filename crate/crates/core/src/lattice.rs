//! Reference configurations, finite-difference stencils, neighbour sets and
//! the stencil norms in which displacement errors are measured.
//!
//! Positions are stored flat with stride `d`; every site is a point of the
//! Bravais lattice `A·Z^d` and is addressed by its integer coordinates.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::DislocationSpec;

/// Integer lattice coordinates, zero-padded to three entries.
pub type Key = [i64; 3];

/// Marker for an absent neighbour in [`StencilTable`].
pub const NONE: u32 = u32::MAX;

/// Bravais lattice `A·Z^d`; `a` is column-major (column `i` is generator `a_i`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub d: usize,
    pub a: Vec<f64>,
}

impl LatticeSpec {
    pub fn new(d: usize, a: Vec<f64>) -> Result<Self> {
        if !(2..=3).contains(&d) || a.len() != d * d {
            return Err(Error::InvalidInput(format!(
                "cell must be d×d with d ∈ {{2,3}}, got d={d}, {} entries",
                a.len()
            )));
        }
        let spec = LatticeSpec { d, a };
        let det = spec.det();
        if !(det.abs() > 1e-12) {
            return Err(Error::SingularCell(det));
        }
        Ok(spec)
    }

    pub fn square() -> Self {
        LatticeSpec {
            d: 2,
            a: vec![1.0, 0.0, 0.0, 1.0],
        }
    }

    /// Triangular lattice with nearest-neighbour distance 1.
    pub fn triangular() -> Self {
        LatticeSpec {
            d: 2,
            a: vec![1.0, 0.0, 0.5, 0.75f64.sqrt()],
        }
    }

    pub fn cubic() -> Self {
        LatticeSpec {
            d: 3,
            a: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        }
    }

    /// Scaled copy (`r0` is the nearest-neighbour distance of the generators).
    pub fn scaled(&self, s: f64) -> Self {
        LatticeSpec {
            d: self.d,
            a: self.a.iter().map(|v| v * s).collect(),
        }
    }

    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.a[j * self.d + i]
    }

    pub fn det(&self) -> f64 {
        let m = nalgebra::DMatrix::from_fn(self.d, self.d, |i, j| self.entry(i, j));
        m.determinant()
    }

    fn inverse(&self) -> Result<nalgebra::DMatrix<f64>> {
        let m = nalgebra::DMatrix::from_fn(self.d, self.d, |i, j| self.entry(i, j));
        m.try_inverse().ok_or(Error::SingularCell(self.det()))
    }

    /// Cartesian position of integer coordinates `n`.
    pub fn point(&self, n: &Key, out: &mut [f64]) {
        for i in 0..self.d {
            out[i] = (0..self.d).map(|j| self.entry(i, j) * n[j] as f64).sum();
        }
    }

    pub fn point_vec(&self, n: &Key) -> Vec<f64> {
        let mut x = vec![0.0; self.d];
        self.point(n, &mut x);
        x
    }

    /// Integer coordinates of `x` if it is a lattice point (within `tol`).
    pub fn key_of(&self, x: &[f64], tol: f64) -> Option<Key> {
        let inv = self.inverse().ok()?;
        let mut k = [0i64; 3];
        for i in 0..self.d {
            let c: f64 = (0..self.d).map(|j| inv[(i, j)] * x[j]).sum();
            k[i] = c.round() as i64;
        }
        let p = self.point_vec(&k);
        let err: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        (err <= tol).then_some(k)
    }

    /// All lattice vectors with `|A n| <= r`, sorted by norm then key.
    pub fn enumerate_ball(&self, r: f64) -> Result<Vec<Key>> {
        let inv = self.inverse()?;
        let mut bounds = [0i64; 3];
        for i in 0..self.d {
            let row: f64 = (0..self.d).map(|j| inv[(i, j)] * inv[(i, j)]).sum::<f64>().sqrt();
            bounds[i] = (row * r).ceil() as i64 + 1;
        }
        let r2 = r * r * (1.0 + 1e-12) + 1e-12;
        let mut out = Vec::new();
        let mut x = vec![0.0; self.d];
        let z = if self.d == 3 { bounds[2] } else { 0 };
        for k0 in -bounds[0]..=bounds[0] {
            for k1 in -bounds[1]..=bounds[1] {
                for k2 in -z..=z {
                    let key = [k0, k1, k2];
                    self.point(&key, &mut x);
                    let n2: f64 = x.iter().map(|v| v * v).sum();
                    if n2 <= r2 {
                        out.push((n2, key));
                    }
                }
            }
        }
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(out.into_iter().map(|(_, k)| k).collect())
    }

    /// Minimal-ℓ¹ unimodular generator matrix `M` (entries in [-2,2]); the
    /// stencil generators are the columns of `A·M`, returned as integer keys.
    pub fn minimal_generators(&self) -> Vec<Key> {
        let d = self.d;
        let nent = d * d;
        let mut best: Option<(f64, Vec<i64>)> = None;
        let mut m = vec![-2i64; nent];
        loop {
            let det = int_det(&m, d);
            if det.abs() == 1 {
                let mut l1 = 0.0;
                for c in 0..d {
                    for i in 0..d {
                        let v: f64 = (0..d).map(|j| self.entry(i, j) * m[c * d + j] as f64).sum();
                        l1 += v.abs();
                    }
                }
                if best.as_ref().is_none_or(|(b, _)| l1 < b - 1e-12) {
                    best = Some((l1, m.clone()));
                }
            }
            // odometer increment
            let mut i = 0;
            loop {
                if i == nent {
                    let (_, bm) = best.expect("identity is always unimodular");
                    return (0..d)
                        .map(|c| {
                            let mut k = [0i64; 3];
                            k[..d].copy_from_slice(&bm[c * d..c * d + d]);
                            k
                        })
                        .collect();
                }
                m[i] += 1;
                if m[i] > 2 {
                    m[i] = -2;
                    i += 1;
                } else {
                    break;
                }
            }
        }
    }
}

fn int_det(m: &[i64], d: usize) -> i64 {
    // column-major, columns are generators
    let e = |i: usize, j: usize| m[j * d + i];
    match d {
        2 => e(0, 0) * e(1, 1) - e(0, 1) * e(1, 0),
        3 => {
            e(0, 0) * (e(1, 1) * e(2, 2) - e(1, 2) * e(2, 1)) - e(0, 1) * (e(1, 0) * e(2, 2) - e(1, 2) * e(2, 0))
                + e(0, 2) * (e(1, 0) * e(2, 1) - e(1, 1) * e(2, 0))
        }
        _ => unreachable!(),
    }
}

/// Defect record carried by a [`ReferenceConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Defect {
    None,
    Vacancy { center: Vec<f64>, removed: Vec<Key> },
    EdgeDislocation(DislocationSpec),
}

/// Finite (possibly defective) lattice with region bookkeeping.
#[derive(Clone, Debug)]
pub struct ReferenceConfig {
    pub spec: LatticeSpec,
    pub keys: Vec<Key>,
    /// Flat site positions, stride `d`.
    pub x: Vec<f64>,
    pub homogeneous: bool,
    pub r_def: f64,
    pub r_dom: f64,
    pub defect: Defect,
    /// Stencil generators (integer keys) of the nearest-neighbour set N(ℓ).
    pub generators: Vec<Key>,
    index: HashMap<Key, usize>,
}

impl ReferenceConfig {
    pub fn d(&self) -> usize {
        self.spec.d
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    #[inline]
    pub fn pos(&self, i: usize) -> &[f64] {
        let d = self.spec.d;
        &self.x[i * d..i * d + d]
    }

    pub fn norm(&self, i: usize) -> f64 {
        self.pos(i).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn index_of(&self, key: &Key) -> Option<usize> {
        self.index.get(key).copied()
    }

    /// Site at Cartesian position `p`, if any.
    pub fn find_site(&self, p: &[f64]) -> Option<usize> {
        self.spec.key_of(p, 1e-8).and_then(|k| self.index_of(&k))
    }

    fn from_keys(spec: LatticeSpec, keys: Vec<Key>, r_dom: f64, generators: Vec<Key>) -> Self {
        let d = spec.d;
        let mut x = vec![0.0; keys.len() * d];
        for (i, k) in keys.iter().enumerate() {
            spec.point(k, &mut x[i * d..i * d + d]);
        }
        let index = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        ReferenceConfig {
            spec,
            keys,
            x,
            homogeneous: true,
            r_def: 0.0,
            r_dom,
            defect: Defect::None,
            generators,
            index,
        }
    }

    /// The homogeneous configuration on the same domain (defects undone).
    pub fn homogeneous_version(&self) -> Result<ReferenceConfig> {
        build_lattice(&self.spec, self.r_dom)
    }
}

/// All sites of `A·Z^d` within `|x| <= r_dom`.
pub fn build_lattice(spec: &LatticeSpec, r_dom: f64) -> Result<ReferenceConfig> {
    let spec = LatticeSpec::new(spec.d, spec.a.clone())?;
    if !(r_dom >= 0.0) {
        return Err(Error::InvalidInput(format!("R_DOM must be nonnegative, got {r_dom}")));
    }
    let keys = spec.enumerate_ball(r_dom)?;
    let gens = spec.minimal_generators();
    Ok(ReferenceConfig::from_keys(spec, keys, r_dom, gens))
}

/// Remove the site at `center`; `R_DEF` becomes the nearest-neighbour distance.
pub fn apply_vacancy(config: &ReferenceConfig, center: &[f64]) -> Result<ReferenceConfig> {
    let i = config.find_site(center).ok_or_else(|| Error::NotASite(center.to_vec()))?;
    let removed = config.keys[i];
    let keys: Vec<Key> = config.keys.iter().copied().filter(|k| *k != removed).collect();
    let mut out = ReferenceConfig::from_keys(config.spec.clone(), keys, config.r_dom, config.generators.clone());
    let reach = (0..config.d())
        .map(|j| norm(&config.spec.a[j * config.d()..(j + 1) * config.d()]))
        .fold(0.0, f64::max);
    let nn = config
        .spec
        .enumerate_ball(reach)?
        .into_iter()
        .filter(|k| *k != [0, 0, 0])
        .map(|k| norm(&config.spec.point_vec(&k)))
        .fold(f64::INFINITY, f64::min);
    out.homogeneous = false;
    out.r_def = config.r_def.max(nn);
    let mut all_removed = match &config.defect {
        Defect::Vacancy { removed, .. } => removed.clone(),
        _ => Vec::new(),
    };
    all_removed.push(removed);
    out.defect = Defect::Vacancy {
        center: center.to_vec(),
        removed: all_removed,
    };
    Ok(out)
}

/// Attach an edge-dislocation record; the site set stays `Λ^h` (the predictor
/// carries the defect).  Errors if the branch cut passes through a site.
pub fn apply_edge_dislocation(config: &ReferenceConfig, dis: &DislocationSpec) -> Result<ReferenceConfig> {
    if config.d() != 2 {
        return Err(Error::InvalidInput("edge dislocations require d = 2".into()));
    }
    config
        .spec
        .key_of(&dis.b, 1e-9)
        .ok_or_else(|| Error::InvalidInput(format!("Burgers vector {:?} is not a lattice vector", dis.b)))?;
    for i in 0..config.len() {
        let p = config.pos(i);
        if (p[1] - dis.core[1]).abs() < 1e-10 && p[0] >= dis.core[0] {
            return Err(Error::OnBranchCut(p.to_vec()));
        }
    }
    let mut out = config.clone();
    out.homogeneous = false;
    out.r_def = out.r_def.max(dis.r_hat);
    out.defect = Defect::EdgeDislocation(dis.clone());
    Ok(out)
}

/// Assumption (RC): outside `B_{R_DEF}` the sites coincide with the
/// homogeneous enumeration, and no two sites coincide.
pub fn check_rc(config: &ReferenceConfig) -> Result<bool> {
    let hom = build_lattice(&config.spec, config.r_dom)?;
    let r = config.r_def + 1e-12;
    let outside = |c: &ReferenceConfig| -> Vec<Key> {
        let mut v: Vec<Key> = (0..c.len()).filter(|&i| c.norm(i) > r).map(|i| c.keys[i]).collect();
        v.sort();
        v
    };
    let a = outside(config);
    let mut uniq = config.keys.clone();
    uniq.sort();
    uniq.dedup();
    Ok(uniq.len() == config.len() && a == outside(&hom))
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Per-site displacements with a frozen (far-field) mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementField {
    pub d: usize,
    pub u: Vec<f64>,
    pub frozen: Vec<bool>,
}

impl DisplacementField {
    pub fn zeros(n: usize, d: usize) -> Self {
        DisplacementField {
            d,
            u: vec![0.0; n * d],
            frozen: vec![false; n],
        }
    }

    pub fn from_vec(d: usize, u: Vec<f64>) -> Self {
        let n = u.len() / d;
        DisplacementField { d, u, frozen: vec![false; n] }
    }

    pub fn len(&self) -> usize {
        self.frozen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frozen.is_empty()
    }

    #[inline]
    pub fn at(&self, i: usize) -> &[f64] {
        &self.u[i * self.d..i * self.d + self.d]
    }

    /// Zero the frozen sites.
    pub fn enforce_frozen(&mut self) {
        for (i, f) in self.frozen.iter().enumerate() {
            if *f {
                self.u[i * self.d..i * self.d + self.d].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn is_valid(&self) -> bool {
        self.u.len() == self.frozen.len() * self.d
            && self.u.iter().all(|v| v.is_finite())
            && self.frozen.iter().enumerate().all(|(i, f)| !f || self.at(i).iter().all(|v| *v == 0.0))
    }
}

/// Symmetric neighbour lists within `r_cut` (offsets `ρ = x_m − x_ℓ`).
#[derive(Clone, Debug)]
pub struct NeighborTable {
    pub r_cut: f64,
    pub start: Vec<usize>,
    pub nbr: Vec<usize>,
    pub rho: Vec<f64>,
}

impl NeighborTable {
    pub fn build(config: &ReferenceConfig, r_cut: f64) -> Result<Self> {
        let d = config.d();
        let offs: Vec<Key> = config.spec.enumerate_ball(r_cut)?.into_iter().filter(|k| *k != [0, 0, 0]).collect();
        let mut start = vec![0];
        let mut nbr = Vec::new();
        let mut rho = Vec::new();
        for i in 0..config.len() {
            for k in &offs {
                if let Some(j) = config.index_of(&add(&config.keys[i], k)) {
                    nbr.push(j);
                    for a in 0..d {
                        rho.push(config.x[j * d + a] - config.x[i * d + a]);
                    }
                }
            }
            start.push(nbr.len());
        }
        Ok(NeighborTable { r_cut, start, nbr, rho })
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.nbr[self.start[i]..self.start[i + 1]]
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.start.len() - 1).all(|i| self.neighbors(i).iter().all(|&j| self.neighbors(j).contains(&i)))
    }
}

#[inline]
pub(crate) fn add(a: &Key, b: &Key) -> Key {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub(crate) fn sub(a: &Key, b: &Key) -> Key {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Labelled stencils used by every site potential.
///
/// Slot `s` of site `ℓ` carries the lattice vector `ρ_s` and the neighbour `m`
/// seen along it.  For a dislocation, bonds of sites in the slip region that
/// cross the branch cut are redirected to `ℓ+ρ∓b`, and `slip = ∓1` records the
/// `∓b` offset, so `g_s = slip·b + U(m) − U(ℓ)` is the slip-corrected difference.
#[derive(Clone, Debug)]
pub struct StencilTable {
    pub d: usize,
    pub r_label: f64,
    pub labels: Vec<f64>,
    pub label_keys: Vec<Key>,
    pub label_norm: Vec<f64>,
    pub nbr: Vec<u32>,
    pub slip: Vec<i8>,
    pub b: Vec<f64>,
}

impl StencilTable {
    /// Labels `|ρ| <= r_label`; neighbours outside `domain` are treated as absent.
    pub fn build(config: &ReferenceConfig, r_label: f64, domain: Option<&[bool]>) -> Result<Self> {
        let d = config.d();
        let label_keys: Vec<Key> = config.spec.enumerate_ball(r_label)?.into_iter().filter(|k| *k != [0, 0, 0]).collect();
        let m = label_keys.len();
        let mut labels = vec![0.0; m * d];
        let mut label_norm = vec![0.0; m];
        for (s, k) in label_keys.iter().enumerate() {
            config.spec.point(k, &mut labels[s * d..s * d + d]);
            label_norm[s] = norm(&labels[s * d..s * d + d]);
        }
        let n = config.len();
        let mut nbr = vec![NONE; n * m];
        let mut slip = vec![0i8; n * m];
        let dis = match &config.defect {
            Defect::EdgeDislocation(s) => Some((s.clone(), config.spec.key_of(&s.b, 1e-9).expect("validated Burgers vector"))),
            _ => None,
        };
        let b = dis.as_ref().map(|(s, _)| s.b.clone()).unwrap_or_else(|| vec![0.0; d]);
        for i in 0..n {
            let xi = config.pos(i);
            let in_omega = dis.as_ref().is_some_and(|(s, _)| s.in_slip_region(xi));
            for (s, k) in label_keys.iter().enumerate() {
                let mut key = add(&config.keys[i], k);
                let mut sl = 0i8;
                if in_omega {
                    let (spec, bk) = dis.as_ref().unwrap();
                    let above_i = spec.above(xi);
                    let above_j = xi[1] + labels[s * d + 1] > spec.core[1];
                    if above_i && !above_j {
                        key = sub(&key, bk);
                        sl = -1;
                    } else if !above_i && above_j {
                        key = add(&key, bk);
                        sl = 1;
                    }
                }
                if let Some(j) = config.index_of(&key) {
                    if domain.is_none_or(|dm| dm[j]) {
                        nbr[i * m + s] = j as u32;
                        slip[i * m + s] = sl;
                    }
                }
            }
        }
        Ok(StencilTable {
            d,
            r_label,
            labels,
            label_keys,
            label_norm,
            nbr,
            slip,
            b,
        })
    }

    pub fn n_labels(&self) -> usize {
        self.label_norm.len()
    }

    pub fn n_sites(&self) -> usize {
        self.nbr.len() / self.n_labels().max(1)
    }

    /// Number of leading labels with `|ρ| <= r`.
    pub fn prefix(&self, r: f64) -> usize {
        self.label_norm.iter().take_while(|&&v| v <= r + 1e-9).count()
    }

    /// Slip-corrected differences `g_s` for the first `m` labels of `site`.
    #[inline]
    pub fn gather(&self, site: usize, u: &[f64], m: usize, g: &mut [f64], present: &mut [bool]) {
        let d = self.d;
        let nl = self.n_labels();
        let row = &self.nbr[site * nl..site * nl + m];
        let sl = &self.slip[site * nl..site * nl + m];
        let ui = &u[site * d..site * d + d];
        for s in 0..m {
            let j = row[s];
            if j == NONE {
                present[s] = false;
                g[s * d..s * d + d].iter_mut().for_each(|v| *v = 0.0);
            } else {
                present[s] = true;
                let j = j as usize;
                for a in 0..d {
                    g[s * d + a] = sl[s] as f64 * self.b[a] + u[j * d + a] - ui[a];
                }
            }
        }
    }

    #[inline]
    pub fn neighbor(&self, site: usize, s: usize) -> Option<usize> {
        let j = self.nbr[site * self.n_labels() + s];
        (j != NONE).then_some(j as usize)
    }

    /// Sites whose first-`m` stencil touches any site flagged in `mask` (or the site itself).
    pub fn sites_touching(&self, mask: &[bool], m: usize) -> Vec<usize> {
        (0..self.n_sites())
            .filter(|&i| mask[i] || (0..m).any(|s| self.neighbor(i, s).is_some_and(|j| mask[j])))
            .collect()
    }
}

/// Finite-difference stencil of one site: pairs `(ρ, D_ρ u(ℓ))`.
#[derive(Clone, Debug, PartialEq)]
pub struct StencilView {
    pub center: usize,
    pub d: usize,
    pub rho: Vec<f64>,
    pub du: Vec<f64>,
}

impl StencilView {
    /// Present neighbours among the first `m` labels of `table`.
    pub fn from_table(table: &StencilTable, site: usize, u: &[f64], m: usize) -> Self {
        let d = table.d;
        let mut g = vec![0.0; m * d];
        let mut present = vec![false; m];
        table.gather(site, u, m, &mut g, &mut present);
        let mut rho = Vec::new();
        let mut du = Vec::new();
        for s in 0..m {
            if present[s] {
                rho.extend_from_slice(&table.labels[s * d..s * d + d]);
                du.extend_from_slice(&g[s * d..s * d + d]);
            }
        }
        StencilView { center: site, d, rho, du }
    }

    pub fn len(&self) -> usize {
        self.rho.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }
}

/// Nearest-neighbour stencil set N(ℓ) of a site.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSet {
    /// Present members (site indices), in generator order `+a_1, −a_1, +a_2, …`.
    pub sites: Vec<usize>,
    /// Keys of members that are off-domain or removed.
    pub missing: Vec<Key>,
}

impl NeighborSet {
    pub fn flagged(&self) -> bool {
        !self.missing.is_empty()
    }
}

pub fn nearest_neighbor_set(config: &ReferenceConfig, l: usize) -> NeighborSet {
    let mut sites = Vec::new();
    let mut missing = Vec::new();
    for g in &config.generators {
        for sign in [1i64, -1] {
            let k = [
                config.keys[l][0] + sign * g[0],
                config.keys[l][1] + sign * g[1],
                config.keys[l][2] + sign * g[2],
            ];
            match config.index_of(&k) {
                Some(j) => sites.push(j),
                None => missing.push(k),
            }
        }
    }
    NeighborSet { sites, missing }
}

/// `|Du(ℓ)|_N`.
pub fn stencil_norm_nn(config: &ReferenceConfig, u: &[f64], l: usize) -> f64 {
    stencil_norm_nn_sq(config, u, l).sqrt()
}

fn stencil_norm_nn_sq(config: &ReferenceConfig, u: &[f64], l: usize) -> f64 {
    let d = config.d();
    nearest_neighbor_set(config, l)
        .sites
        .iter()
        .map(|&j| (0..d).map(|a| (u[j * d + a] - u[l * d + a]).powi(2)).sum::<f64>())
        .sum()
}

/// `‖Du‖_{ℓ²_N}` over the sites selected by `mask` (all sites if `None`).
pub fn global_norm_nn(config: &ReferenceConfig, u: &[f64], mask: Option<&[bool]>) -> f64 {
    (0..config.len())
        .filter(|&i| mask.is_none_or(|m| m[i]))
        .map(|i| stencil_norm_nn_sq(config, u, i))
        .sum::<f64>()
        .sqrt()
}

/// Radius beyond which `e^{−2γ|ρ|} < 1e-16`.
pub fn weighted_radius(gamma: f64) -> f64 {
    (1e16f64).ln() / (2.0 * gamma)
}

/// `|Du(ℓ)|_𝔴 = (Σ_ρ e^{−2γ|ρ|} |D_ρu(ℓ)|²)^{1/2}`, truncated below weight 1e-16.
pub fn stencil_norm_weighted(config: &ReferenceConfig, u: &[f64], l: usize, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidInput(format!("gamma must be positive, got {gamma}")));
    }
    let offs = config.spec.enumerate_ball(weighted_radius(gamma))?;
    Ok(weighted_sq(config, u, l, gamma, &offs).sqrt())
}

fn weighted_sq(config: &ReferenceConfig, u: &[f64], l: usize, gamma: f64, offs: &[Key]) -> f64 {
    let d = config.d();
    let mut acc = 0.0;
    let mut x = vec![0.0; d];
    for k in offs {
        if *k == [0, 0, 0] {
            continue;
        }
        if let Some(j) = config.index_of(&add(&config.keys[l], k)) {
            config.spec.point(k, &mut x);
            let w = (-2.0 * gamma * norm(&x)).exp();
            acc += w * (0..d).map(|a| (u[j * d + a] - u[l * d + a]).powi(2)).sum::<f64>();
        }
    }
    acc
}

/// Global weighted norm `‖Du‖_{ℓ²_𝔴}`.
pub fn global_norm_weighted(config: &ReferenceConfig, u: &[f64], gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidInput(format!("gamma must be positive, got {gamma}")));
    }
    let offs = config.spec.enumerate_ball(weighted_radius(gamma))?;
    Ok((0..config.len()).map(|i| weighted_sq(config, u, i, gamma, &offs)).sum::<f64>().sqrt())
}

/// `‖D(u_ref − u_h)‖_{ℓ²_N}`, optionally restricted to `mask`.
pub fn error_norm(config: &ReferenceConfig, u_ref: &DisplacementField, u_h: &DisplacementField, mask: Option<&[bool]>) -> Result<f64> {
    if u_ref.u.len() != u_h.u.len() || u_ref.u.len() != config.len() * config.d() {
        return Err(Error::InvalidInput("displacement fields live on different configurations".into()));
    }
    let diff: Vec<f64> = u_ref.u.iter().zip(&u_h.u).map(|(a, b)| a - b).collect();
    Ok(global_norm_nn(config, &diff, mask))
}

/// `Adm_m`: `|y(ℓ) − y(k)| > m |ℓ − k|` for all pairs.  Brute force for small
/// configurations; otherwise only pairs that could violate the bound are checked.
pub fn check_admissible(config: &ReferenceConfig, y: &[f64], m: f64) -> bool {
    let d = config.d();
    let n = config.len();
    let pair_ok = |i: usize, j: usize| {
        let dy: f64 = (0..d).map(|a| (y[i * d + a] - y[j * d + a]).powi(2)).sum::<f64>().sqrt();
        let dx: f64 = (0..d).map(|a| (config.x[i * d + a] - config.x[j * d + a]).powi(2)).sum::<f64>().sqrt();
        dy > m * dx
    };
    if n <= 2000 || m >= 1.0 {
        return (0..n).all(|i| (i + 1..n).all(|j| pair_ok(i, j)));
    }
    // |y_i − y_j| ≥ |x_i − x_j| − 2‖u‖_∞, so only |x_i − x_j| ≤ 2‖u‖_∞/(1−m) can fail.
    let umax = (0..n)
        .map(|i| (0..d).map(|a| (y[i * d + a] - config.x[i * d + a]).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let r = 2.0 * umax / (1.0 - m) + 1e-9;
    let offs = match config.spec.enumerate_ball(r) {
        Ok(o) => o,
        Err(_) => return false,
    };
    (0..n).all(|i| {
        offs.iter()
            .filter(|k| **k != [0, 0, 0])
            .all(|k| config.index_of(&add(&config.keys[i], k)).is_none_or(|j| pair_ok(i, j)))
    })
}

/// Site dump rows `index,x,y[,z],region`.
pub fn write_sites_csv<W: std::io::Write>(config: &ReferenceConfig, region: &dyn Fn(usize) -> String, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let d = config.d();
    let mut head = vec!["index".to_string(), "x".into(), "y".into()];
    if d == 3 {
        head.push("z".into());
    }
    head.push("region".into());
    wr.write_record(&head)?;
    for i in 0..config.len() {
        let mut rec = vec![i.to_string()];
        rec.extend(config.pos(i).iter().map(|v| format!("{v:.12}")));
        rec.push(region(i));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_count(spec: &LatticeSpec, r: f64) -> usize {
        let mut c = 0;
        for i in -20i64..=20 {
            for j in -20i64..=20 {
                let x = spec.point_vec(&[i, j, 0]);
                if norm(&x) <= r + 1e-12 {
                    c += 1;
                }
            }
        }
        c
    }

    #[test]
    fn lattice_counts() {
        let tri = LatticeSpec::triangular();
        assert_eq!(brute_count(&tri, 2.0), 19);
        assert_eq!(build_lattice(&tri, 2.0).unwrap().len(), 19);
        let sq = LatticeSpec::square();
        assert_eq!(build_lattice(&sq, 0.0).unwrap().len(), 1);
        assert_eq!(brute_count(&sq, 1.0), 5);
        assert_eq!(build_lattice(&sq, 1.0).unwrap().len(), 5);
        for r in [3.3, 7.9, 12.0] {
            assert_eq!(build_lattice(&tri, r).unwrap().len(), brute_count(&tri, r));
        }
        let c = build_lattice(&LatticeSpec::cubic(), 1.0).unwrap();
        assert_eq!(c.len(), 7);
    }

    #[test]
    fn singular_cell_rejected() {
        assert!(matches!(LatticeSpec::new(2, vec![1.0, 0.0, 2.0, 0.0]), Err(Error::SingularCell(_))));
        assert!(build_lattice(
            &LatticeSpec {
                d: 2,
                a: vec![1.0, 1.0, 1.0, 1.0]
            },
            2.0
        )
        .is_err());
    }

    #[test]
    fn vacancy_bookkeeping() {
        let c = build_lattice(&LatticeSpec::triangular(), 2.0).unwrap();
        let v = apply_vacancy(&c, &[0.0, 0.0]).unwrap();
        assert_eq!(v.len(), 18);
        assert!(v.find_site(&[0.0, 0.0]).is_none());
        assert!(!v.homogeneous);
        assert!((v.r_def - 1.0).abs() < 1e-12);
        assert!(check_rc(&v).unwrap());
        assert!(matches!(apply_vacancy(&c, &[0.3, 0.1]), Err(Error::NotASite(_))));
    }

    #[test]
    fn generators() {
        let sq = LatticeSpec::square().minimal_generators();
        let mut s: Vec<_> = sq.iter().map(|k| [k[0].abs(), k[1].abs()]).collect();
        s.sort();
        assert_eq!(s, vec![[0, 1], [1, 0]]);
        // triangular: brute-force minimum of ‖A M‖₁ over the same search space is 1 + 0.5 + √3/2
        let tri = LatticeSpec::triangular();
        let g = tri.minimal_generators();
        let l1: f64 = g.iter().map(|k| tri.point_vec(k).iter().map(|v| v.abs()).sum::<f64>()).sum();
        assert!((l1 - (1.5 + 0.75f64.sqrt())).abs() < 1e-12);
        let c = build_lattice(&tri, 3.0).unwrap();
        let ns = nearest_neighbor_set(&c, 0);
        assert_eq!(ns.sites.len(), 4);
        for &j in &ns.sites {
            assert!((c.norm(j) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn neighbor_of_vacancy_flagged() {
        let c = build_lattice(&LatticeSpec::square(), 3.0).unwrap();
        let v = apply_vacancy(&c, &[0.0, 0.0]).unwrap();
        let l = v.find_site(&[1.0, 0.0]).unwrap();
        let ns = nearest_neighbor_set(&v, l);
        assert_eq!(ns.sites.len(), 3);
        assert!(ns.flagged());
        assert_eq!(ns.missing, vec![[0, 0, 0]]);
    }

    #[test]
    fn nn_norm_linear_field() {
        let c = build_lattice(&LatticeSpec::square(), 4.0).unwrap();
        let f = [0.3, -0.7, 1.1, 0.4]; // row-major F
        let u: Vec<f64> = (0..c.len())
            .flat_map(|i| {
                let x = c.pos(i);
                vec![f[0] * x[0] + f[1] * x[1], f[2] * x[0] + f[3] * x[1]]
            })
            .collect();
        let fe1 = f[0] * f[0] + f[2] * f[2];
        let fe2 = f[1] * f[1] + f[3] * f[3];
        let expect = (2.0 * fe1 + 2.0 * fe2).sqrt();
        assert!((stencil_norm_nn(&c, &u, 0) - expect).abs() < 1e-12);
        let cst = vec![0.25; c.len() * 2];
        assert_eq!(stencil_norm_nn(&c, &cst, 0), 0.0);
    }

    #[test]
    fn error_norm_single_site() {
        let c = build_lattice(&LatticeSpec::square(), 4.0).unwrap();
        let a = DisplacementField::zeros(c.len(), 2);
        let mut b = a.clone();
        let delta = [0.03, -0.04];
        b.u[0] = delta[0];
        b.u[1] = delta[1];
        let nn = nearest_neighbor_set(&c, 0).sites.len() as f64;
        let e = error_norm(&c, &a, &b, None).unwrap();
        assert!((e - (2.0 * nn).sqrt() * 0.05).abs() < 1e-14);
        let mut shifted = a.clone();
        shifted.u.iter_mut().for_each(|v| *v += 0.5);
        assert!(error_norm(&c, &a, &shifted, None).unwrap() < 1e-14);
        let other = DisplacementField::zeros(3, 2);
        assert!(error_norm(&c, &a, &other, None).is_err());
    }

    #[test]
    fn weighted_norm_limits() {
        let c = build_lattice(&LatticeSpec::triangular(), 8.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u: Vec<f64> = (0..c.len() * 2).map(|_| rng.random_range(-0.1..0.1)).collect();
        // at large γ only the first shell survives, rescaled by e^{−2γ}
        let g = 5.0;
        let w = stencil_norm_weighted(&c, &u, 0, g).unwrap();
        let nn: f64 = (1..7).map(|j| (0..2).map(|a| (u[j * 2 + a] - u[a]).powi(2)).sum::<f64>()).sum();
        let expect = ((-2.0 * g).exp() * nn).sqrt();
        assert!((w - expect).abs() / expect < 1e-3);
        let cst = vec![1.0; c.len() * 2];
        assert_eq!(stencil_norm_weighted(&c, &cst, 0, 0.5).unwrap(), 0.0);
        assert!(stencil_norm_weighted(&c, &u, 0, 0.0).is_err());
    }

    #[test]
    fn neighbor_table_symmetric() {
        let c = build_lattice(&LatticeSpec::triangular(), 6.0).unwrap();
        let v = apply_vacancy(&c, &[0.0, 0.0]).unwrap();
        for r in [1.0, 1.8, 2.5] {
            let t = NeighborTable::build(&v, r).unwrap();
            assert!(t.is_symmetric());
            assert!(t.rho.chunks(2).all(|p| norm(p) <= r + 1e-12));
        }
    }

    #[test]
    fn stencil_view_differences() {
        let c = build_lattice(&LatticeSpec::triangular(), 5.0).unwrap();
        let t = StencilTable::build(&c, 2.5, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u: Vec<f64> = (0..c.len() * 2).map(|_| rng.random_range(-0.1..0.1)).collect();
        let v = StencilView::from_table(&t, 0, &u, t.prefix(2.5));
        assert_eq!(v.len(), 18);
        for s in 0..v.len() {
            let rho = &v.rho[s * 2..s * 2 + 2];
            let j = c.find_site(rho).unwrap();
            for a in 0..2 {
                assert_eq!(v.du[s * 2 + a], u[j * 2 + a] - u[a]);
            }
        }
    }

    #[test]
    fn admissibility() {
        let c = build_lattice(&LatticeSpec::triangular(), 4.0).unwrap();
        assert!(check_admissible(&c, &c.x, 0.5));
        let mut y = c.x.clone();
        y[2] = y[0];
        y[3] = y[1];
        assert!(!check_admissible(&c, &y, 0.01));
    }
}
