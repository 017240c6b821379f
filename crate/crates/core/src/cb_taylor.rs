//! Cauchy–Born energy density and its F-derivatives (virials), and the Taylor
//! expansions of site potentials and forces about the homogeneous lattice.
//!
//! Derivatives of order `j ≥ 2` are nested central differences of analytic
//! gradients; tables are stored over sorted index tuples with multiplicities.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::lattice::{build_lattice, Key, LatticeSpec};
use crate::refmodel::{SiteModel, SitePotentialHandle};

/// Central-difference step per derivative order (`h[j-1]` for order `j`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdSteps {
    pub h: [f64; 4],
}

impl Default for FdSteps {
    fn default() -> Self {
        FdSteps { h: [1e-5, 1e-4, 3e-4, 1e-3] }
    }
}

impl FdSteps {
    pub fn order(&self, j: usize) -> Result<f64> {
        let h = *self.h.get(j.wrapping_sub(1)).ok_or(Error::UnsupportedOrder {
            kind: "finite-difference step",
            order: j,
        })?;
        if !(h > 1e-12) {
            return Err(Error::InvalidInput(format!("finite-difference step {h:e} underflows")));
        }
        Ok(h)
    }
}

/// All sorted `j`-tuples (combinations with repetition) of `0..n`, lexicographic.
pub fn sorted_tuples(n: usize, j: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    if j == 0 {
        out.push(Vec::new());
        return out;
    }
    if n == 0 {
        return out;
    }
    let mut t = vec![0u32; j];
    loop {
        out.push(t.clone());
        let mut p = j;
        while p > 0 && t[p - 1] as usize == n - 1 {
            p -= 1;
        }
        if p == 0 {
            return out;
        }
        t[p - 1] += 1;
        let v = t[p - 1];
        for q in p..j {
            t[q] = v;
        }
    }
}

/// Number of distinct orderings of a sorted tuple.
pub fn multiplicity(t: &[u32]) -> f64 {
    let mut m = factorial(t.len());
    let mut k = 0;
    while k < t.len() {
        let mut e = k + 1;
        while e < t.len() && t[e] == t[k] {
            e += 1;
        }
        m /= factorial(e - k);
        k = e;
    }
    m
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Distinct orderings of a sorted tuple.
pub fn permutations(t: &[u32]) -> Vec<Vec<u32>> {
    let mut out = vec![];
    let mut cur = t.to_vec();
    permute(&mut cur, 0, &mut out);
    out.sort();
    out.dedup();
    out
}

fn permute(t: &mut Vec<u32>, k: usize, out: &mut Vec<Vec<u32>>) {
    if k == t.len() {
        out.push(t.clone());
        return;
    }
    for i in k..t.len() {
        t.swap(k, i);
        permute(t, k + 1, out);
        t.swap(k, i);
    }
}

/// Nested central difference `∂^m f / ∂x_{t₁}…∂x_{t_m}` at 0 for every sorted
/// `m`-tuple, where `f` returns `c` values:
/// `Σ_{s∈{±1}^m} (Πs) f(h Σ s_k e_{t_k}) / (2h)^m`.
pub fn nested_fd(n: usize, c: usize, m: usize, h: f64, f: &mut dyn FnMut(&[f64], &mut [f64]) -> Result<()>) -> Result<Vec<(Vec<u32>, Vec<f64>)>> {
    let mut x = vec![0.0; n];
    let mut val = vec![0.0; c];
    let scale = (2.0 * h).powi(m as i32);
    let mut out = Vec::new();
    for t in sorted_tuples(n, m) {
        let mut acc = vec![0.0; c];
        for mask in 0..(1u32 << m) {
            x.iter_mut().for_each(|v| *v = 0.0);
            let mut sign = 1.0;
            for (k, &v) in t.iter().enumerate() {
                let s = if mask >> k & 1 == 1 { -1.0 } else { 1.0 };
                sign *= s;
                x[v as usize] += s * h;
            }
            f(&x, &mut val)?;
            for (a, v) in acc.iter_mut().zip(&val) {
                *a += sign * v;
            }
        }
        acc.iter_mut().for_each(|v| *v /= scale);
        out.push((t, acc));
    }
    Ok(out)
}

/// Symmetric derivative tables `δ^jΦ(0)` for `j = 1..=k` of `c` channels of a
/// function with analytic gradient `grad(x, out)` (`out` laid out `[channel][var]`).
/// Returns, per order, the sorted tuples and their values `[tuple][channel]`.
pub fn gradient_derivatives(
    n: usize,
    c: usize,
    k: usize,
    steps: &FdSteps,
    grad: &mut dyn FnMut(&[f64], &mut [f64]) -> Result<()>,
) -> Result<Vec<(Vec<Vec<u32>>, Vec<f64>)>> {
    let mut out = Vec::with_capacity(k);
    for j in 1..=k {
        if j == 1 {
            let mut g = vec![0.0; c * n];
            grad(&vec![0.0; n], &mut g)?;
            let tuples: Vec<Vec<u32>> = (0..n as u32).map(|v| vec![v]).collect();
            let mut vals = vec![0.0; n * c];
            for v in 0..n {
                for ch in 0..c {
                    vals[v * c + ch] = g[ch * n + v];
                }
            }
            out.push((tuples, vals));
            continue;
        }
        let h = steps.order(j)?;
        let inner: BTreeMap<Vec<u32>, Vec<f64>> = nested_fd(n, c * n, j - 1, h, grad)?.into_iter().collect();
        let tuples = sorted_tuples(n, j);
        let mut vals = vec![0.0; tuples.len() * c];
        for (ti, t) in tuples.iter().enumerate() {
            // average over the j ways of singling out the gradient slot
            for p in 0..j {
                let rest: Vec<u32> = t.iter().enumerate().filter(|(q, _)| *q != p).map(|(_, v)| *v).collect();
                let d = &inner[&rest];
                for ch in 0..c {
                    vals[ti * c + ch] += d[ch * n + t[p] as usize] / j as f64;
                }
            }
        }
        out.push((tuples, vals));
    }
    Ok(out)
}

/// Sparse symmetric table of one derivative order over sorted tuples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SymTable {
    pub order: usize,
    /// Flat sorted tuples, `order` entries each.
    pub idx: Vec<u32>,
    pub val: Vec<f64>,
    /// Cached multiplicities.
    pub mult: Vec<f64>,
}

impl SymTable {
    pub fn new(order: usize) -> Self {
        SymTable { order, ..Default::default() }
    }

    pub fn push(&mut self, t: &[u32], v: f64) {
        debug_assert!(t.len() == self.order && t.windows(2).all(|w| w[0] <= w[1]));
        self.idx.extend_from_slice(t);
        self.val.push(v);
        self.mult.push(multiplicity(t));
    }

    pub fn len(&self) -> usize {
        self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.val.is_empty()
    }

    pub fn tuple(&self, i: usize) -> &[u32] {
        &self.idx[i * self.order..(i + 1) * self.order]
    }

    /// `(1/j!) δ^j[g^{⊗j}]`.
    pub fn eval(&self, g: &[f64]) -> f64 {
        let j = self.order;
        let inv = 1.0 / factorial(j);
        let mut e = 0.0;
        for i in 0..self.len() {
            let t = self.tuple(i);
            let p: f64 = t.iter().map(|&v| g[v as usize]).product();
            e += self.mult[i] * self.val[i] * p;
        }
        e * inv
    }

    /// Adds `∂/∂g` of [`eval`](Self::eval) into `grad`.
    pub fn eval_grad(&self, g: &[f64], grad: &mut [f64]) -> f64 {
        let j = self.order;
        let inv = 1.0 / factorial(j);
        let mut e = 0.0;
        for i in 0..self.len() {
            let t = self.tuple(i);
            let w = self.mult[i] * self.val[i] * inv;
            match j {
                1 => {
                    e += w * g[t[0] as usize];
                    grad[t[0] as usize] += w;
                }
                2 => {
                    let (a, b) = (t[0] as usize, t[1] as usize);
                    e += w * g[a] * g[b];
                    grad[a] += w * g[b];
                    grad[b] += w * g[a];
                }
                _ => {
                    let p: f64 = t.iter().map(|&v| g[v as usize]).product();
                    e += w * p;
                    for q in 0..j {
                        let rest: f64 = t.iter().enumerate().filter(|(r, _)| *r != q).map(|(_, &v)| g[v as usize]).product();
                        grad[t[q] as usize] += w * rest;
                    }
                }
            }
        }
        e
    }

    pub fn scaled(&self, a: f64) -> SymTable {
        SymTable {
            val: self.val.iter().map(|v| v * a).collect(),
            ..self.clone()
        }
    }

    /// Value at an arbitrary (unsorted) tuple; 0 if absent.
    pub fn get(&self, t: &[u32]) -> f64 {
        let mut s = t.to_vec();
        s.sort_unstable();
        (0..self.len()).find(|&i| self.tuple(i) == s.as_slice()).map_or(0.0, |i| self.val[i])
    }

    /// Dense symmetric array over `n` variables (all orderings filled).
    pub fn dense(&self, n: usize) -> Vec<f64> {
        let j = self.order;
        let mut out = vec![0.0; n.pow(j as u32)];
        for i in 0..self.len() {
            for p in permutations(self.tuple(i)) {
                let flat = p.iter().fold(0usize, |acc, &v| acc * n + v as usize);
                out[flat] = self.val[i];
            }
        }
        out
    }

    fn to_json(&self) -> Value {
        let mut m = Map::new();
        for i in 0..self.len() {
            let key = self.tuple(i).iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
            m.insert(key, json!(self.val[i]));
        }
        Value::Object(m)
    }

    fn from_json(order: usize, v: &Value) -> Result<Self> {
        let obj = v.as_object().ok_or_else(|| Error::InvalidInput("table must be an object".into()))?;
        let mut entries: Vec<(Vec<u32>, f64)> = Vec::with_capacity(obj.len());
        for (k, val) in obj {
            let mut t: Vec<u32> = k
                .split(',')
                .map(|s| s.trim().parse::<u32>().map_err(|e| Error::InvalidInput(format!("tuple key {k}: {e}"))))
                .collect::<Result<_>>()?;
            t.sort_unstable();
            if t.len() != order {
                return Err(Error::InvalidInput(format!("tuple key {k} has wrong order")));
            }
            entries.push((t, val.as_f64().ok_or_else(|| Error::InvalidInput(format!("value of {k}")))?));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut t = SymTable::new(order);
        for (k, v) in entries {
            t.push(&k, v);
        }
        Ok(t)
    }
}

/// Labels `Λ^h_* ∩ B_r` in stencil-table order (sorted by norm, then key).
pub fn homogeneous_labels(spec: &LatticeSpec, r: f64) -> Result<(Vec<Key>, Vec<f64>)> {
    let keys: Vec<Key> = spec.enumerate_ball(r)?.into_iter().filter(|k| *k != [0, 0, 0]).collect();
    let mut x = vec![0.0; keys.len() * spec.d];
    for (s, k) in keys.iter().enumerate() {
        spec.point(k, &mut x[s * spec.d..(s + 1) * spec.d]);
    }
    Ok((keys, x))
}

/// Taylor expansion `T_K V^h(g) = V^h(0) + Σ_{j≤K} (1/j!) δ^jV^h(0)[g^{⊗j}]`
/// over the stencil slots `|ρ| ≤ r_support`; variable `v = slot·d + component`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaylorPotential {
    pub d: usize,
    pub order: usize,
    pub r_support: f64,
    pub labels: Vec<f64>,
    pub v0: f64,
    /// `tables[j-1]` holds `δ^jV^h(0)`.
    pub tables: Vec<SymTable>,
}

/// Homogeneous derivatives `δ^jV(0)`, `j = 1..=k`, of a site model over the slots
/// `|ρ| ≤ r_support` (the model still sees its full label set).  Returns
/// `V(0)`, the support labels and per-order `(tuples, values)`.
pub fn site_derivatives(
    model: &dyn SiteModel,
    spec: &LatticeSpec,
    r_support: f64,
    k: usize,
    steps: &FdSteps,
) -> Result<(f64, Vec<f64>, Vec<(Vec<Vec<u32>>, Vec<f64>)>)> {
    let d = spec.d;
    let (_, all) = homogeneous_labels(spec, model.label_radius().max(r_support))?;
    let (sup, sup_x) = homogeneous_labels(spec, r_support)?;
    let m = all.len() / d;
    let n = sup.len() * d;
    let present = vec![true; m];
    let v0 = model.energy(&all, &vec![0.0; m * d], &present)?;
    let mut g = vec![0.0; m * d];
    let mut gr = vec![0.0; m * d];
    let tabs = gradient_derivatives(n, 1, k, steps, &mut |x, out| {
        g[..n].copy_from_slice(x);
        model.energy_grad(&all, &g, &present, &mut gr)?;
        out.copy_from_slice(&gr[..n]);
        Ok(())
    })?;
    Ok((v0, sup_x, tabs))
}

/// Coefficients of `T_K V^h` (`K ≤ 3`) for a reference site model.
pub fn taylor_coefficients(model: &dyn SiteModel, spec: &LatticeSpec, k: usize, r_support: f64, steps: &FdSteps) -> Result<TaylorPotential> {
    if k == 0 || k > 3 {
        return Err(Error::UnsupportedOrder {
            kind: "Taylor potential",
            order: k,
        });
    }
    let (v0, labels, tabs) = site_derivatives(model, spec, r_support, k, steps)?;
    let tables = tabs
        .into_iter()
        .enumerate()
        .map(|(j, (tuples, vals))| {
            let mut t = SymTable::new(j + 1);
            for (tu, v) in tuples.iter().zip(vals) {
                if v.abs() >= 1e-14 {
                    t.push(tu, v);
                }
            }
            t
        })
        .collect();
    Ok(TaylorPotential {
        d: spec.d,
        order: k,
        r_support,
        labels,
        v0,
        tables,
    })
}

impl TaylorPotential {
    pub fn n_slots(&self) -> usize {
        self.labels.len() / self.d
    }

    pub fn n_vars(&self) -> usize {
        self.labels.len()
    }

    /// `T_K V^h(g)` with `g` over the support variables.
    pub fn eval(&self, g: &[f64]) -> f64 {
        self.v0 + self.tables.iter().map(|t| t.eval(g)).sum::<f64>()
    }

    /// Copy with `δ^j` scaled by `a`.
    pub fn with_scaled_order(&self, j: usize, a: f64) -> TaylorPotential {
        let mut t = self.clone();
        t.tables[j - 1] = t.tables[j - 1].scaled(a);
        t
    }

    /// Truncation to order `k ≤ K`.
    pub fn truncated(&self, k: usize) -> TaylorPotential {
        let mut t = self.clone();
        t.order = k.min(self.order);
        t.tables.truncate(t.order);
        t
    }

    fn load(&self, g: &[f64], present: &[bool], buf: &mut [f64]) {
        let d = self.d;
        let m = present.len().min(self.n_slots());
        buf.iter_mut().for_each(|v| *v = 0.0);
        for s in 0..m {
            if present[s] {
                buf[s * d..s * d + d].copy_from_slice(&g[s * d..s * d + d]);
            }
        }
    }

    pub fn to_json(&self) -> Value {
        json!({
            "d": self.d,
            "order": self.order,
            "r_support": self.r_support,
            "labels": self.labels,
            "v0": self.v0,
            "tables": self.tables.iter().map(|t| t.to_json()).collect::<Vec<_>>(),
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let get = |k: &str| v.get(k).ok_or_else(|| Error::InvalidInput(format!("missing field {k}")));
        let d = get("d")?.as_u64().ok_or_else(|| Error::InvalidInput("d".into()))? as usize;
        let order = get("order")?.as_u64().ok_or_else(|| Error::InvalidInput("order".into()))? as usize;
        let r_support = get("r_support")?.as_f64().ok_or_else(|| Error::InvalidInput("r_support".into()))?;
        let labels: Vec<f64> = serde_json::from_value(get("labels")?.clone())?;
        let v0 = get("v0")?.as_f64().ok_or_else(|| Error::InvalidInput("v0".into()))?;
        let tabs = get("tables")?.as_array().ok_or_else(|| Error::InvalidInput("tables".into()))?;
        let tables = tabs
            .iter()
            .enumerate()
            .map(|(j, t)| SymTable::from_json(j + 1, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(TaylorPotential {
            d,
            order,
            r_support,
            labels,
            v0,
            tables,
        })
    }
}

impl SiteModel for TaylorPotential {
    fn d(&self) -> usize {
        self.d
    }

    fn label_radius(&self) -> f64 {
        self.r_support
    }

    fn energy(&self, _rho: &[f64], g: &[f64], present: &[bool]) -> Result<f64> {
        let mut buf = vec![0.0; self.n_vars()];
        self.load(g, present, &mut buf);
        Ok(self.eval(&buf))
    }

    fn energy_grad(&self, _rho: &[f64], g: &[f64], present: &[bool], grad: &mut [f64]) -> Result<f64> {
        let n = self.n_vars();
        let mut buf = vec![0.0; n];
        self.load(g, present, &mut buf);
        let mut gb = vec![0.0; n];
        let mut e = self.v0;
        for t in &self.tables {
            e += t.eval_grad(&buf, &mut gb);
        }
        grad.iter_mut().for_each(|v| *v = 0.0);
        let d = self.d;
        for s in 0..present.len().min(self.n_slots()) {
            if present[s] {
                grad[s * d..s * d + d].copy_from_slice(&gb[s * d..s * d + d]);
            }
        }
        Ok(e)
    }
}

/// Taylor expansion of the force on the origin,
/// `T_K F^h(w) = Σ_{j≤K} (1/j!) δ^jF^h(0)[w^{⊗j}]`, over displacements of the
/// sites `|ℓ| ≤ r_sites`; variable `v = site·d + component`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaylorForce {
    pub d: usize,
    pub order: usize,
    pub sites: Vec<Key>,
    pub site_x: Vec<f64>,
    /// `tables[j-1][a]` holds `δ^jF^h_a(0)`.
    pub tables: Vec<Vec<SymTable>>,
}

/// A homogeneous patch large enough that every site whose stencil reaches the
/// origin has a complete stencil, with a closure for the force on the origin.
pub struct OriginForce {
    pub handle: SitePotentialHandle,
    pub origin: usize,
    pub sites: Vec<usize>,
    pub index: Vec<usize>,
    pub keys: Vec<Key>,
    pub key_x: Vec<f64>,
}

impl OriginForce {
    /// Force variables are the sites `|ℓ| ≤ r_sites`.
    pub fn new(model: Arc<dyn SiteModel>, spec: &LatticeSpec, r_sites: f64) -> Result<Self> {
        let rl = model.label_radius();
        let patch = build_lattice(spec, 2.0 * rl + r_sites.max(rl) + 0.5)?;
        let handle = SitePotentialHandle::new(model, &patch, None)?;
        let origin = patch.find_site(&vec![0.0; spec.d]).expect("origin present");
        let sites: Vec<usize> = (0..patch.len()).filter(|&i| patch.norm(i) <= rl + 1e-9).collect();
        let (mut keys, _) = homogeneous_labels(spec, r_sites)?;
        keys.insert(0, [0, 0, 0]);
        let index: Vec<usize> = keys.iter().map(|k| patch.index_of(k).expect("patch covers force support")).collect();
        let mut key_x = vec![0.0; keys.len() * spec.d];
        for (s, k) in keys.iter().enumerate() {
            spec.point(k, &mut key_x[s * spec.d..(s + 1) * spec.d]);
        }
        Ok(OriginForce {
            handle,
            origin,
            sites,
            index,
            keys,
            key_x,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.keys.len() * self.handle.table.d
    }

    /// Force on the origin when the support sites are displaced by `x`.
    pub fn force(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.handle.table.d;
        let n = self.handle.n_sites();
        let mut w = vec![0.0; n * d];
        for (s, &i) in self.index.iter().enumerate() {
            w[i * d..i * d + d].copy_from_slice(&x[s * d..s * d + d]);
        }
        let mut grad = vec![0.0; n * d];
        self.handle.energy_grad(&self.sites, &w, &mut grad)?;
        for a in 0..d {
            out[a] = -grad[self.origin * d + a];
        }
        Ok(())
    }
}

/// `δ^jF^h(0)` for `j = 1..=k` by nested central differences of the force on
/// the origin (order `j` uses step `h_{j+1}`).
pub fn taylor_force_coefficients(model: Arc<dyn SiteModel>, spec: &LatticeSpec, k: usize, r_sites: f64, steps: &FdSteps) -> Result<TaylorForce> {
    if k == 0 || k > 2 {
        return Err(Error::UnsupportedOrder {
            kind: "Taylor force",
            order: k,
        });
    }
    let d = spec.d;
    let of = OriginForce::new(model, spec, r_sites)?;
    let n = of.n_vars();
    let mut tables = Vec::new();
    for j in 1..=k {
        let h = steps.order(j + 1)?;
        let vals = nested_fd(n, d, j, h, &mut |x, out| of.force(x, out))?;
        let mut per = vec![SymTable::new(j); d];
        for (t, v) in vals {
            for a in 0..d {
                if v[a].abs() >= 1e-14 {
                    per[a].push(&t, v[a]);
                }
            }
        }
        tables.push(per);
    }
    Ok(TaylorForce {
        d,
        order: k,
        sites: of.keys.clone(),
        site_x: of.key_x.clone(),
        tables,
    })
}

impl TaylorForce {
    /// `T_K F^h(w)` for displacements `w` of the support sites.
    pub fn eval(&self, w: &[f64]) -> Vec<f64> {
        (0..self.d).map(|a| self.tables.iter().map(|t| t[a].eval(w)).sum()).collect()
    }
}

/// `δ^jF(0)` from `δ^{j+1}V(0)` by the lattice sum
/// `δ^jF_{a; k₁b₁…} = −Σ_σ Ṽ_{(σ,a),(k₁+σ,b₁),…}` with the extended stencil
/// `Ṽ` (slot 0 = the site itself, `∂/∂u(ℓ) = −Σ_ρ ∂/∂g_ρ`).
///
/// `vtab` holds the sorted tuples and values (`c` channels) of `δ^{j+1}V(0)` over
/// the slots `labels`; the result is dense `[channel][a][v₁…v_j]` over the force
/// support `force_keys` (variable `site·d + comp`).
pub fn force_derivative_lattice_sum(
    spec: &LatticeSpec,
    label_keys: &[Key],
    vtab: &(Vec<Vec<u32>>, Vec<f64>),
    c: usize,
    force_keys: &[Key],
) -> Result<Vec<f64>> {
    let d = spec.d;
    let ns = label_keys.len() + 1;
    let jp1 = vtab.0.first().map_or(0, |t| t.len());
    if jp1 < 2 {
        return Err(Error::UnsupportedOrder {
            kind: "force lattice sum",
            order: jp1.saturating_sub(1),
        });
    }
    let j = jp1 - 1;
    let nv = ns * d;
    // dense extended table Ṽ over (slot, comp), slot 0 = centre
    let mut ext = vec![0.0; c * nv.pow(jp1 as u32)];
    for (ti, t) in vtab.0.iter().enumerate() {
        for p in permutations(t) {
            // each variable index v of V maps to extended slot s+1; expand the
            // centre slot by −Σ over the other index choices
            let comps: Vec<(usize, usize)> = p.iter().map(|&v| (v as usize / d + 1, v as usize % d)).collect();
            for sub in 0..(1usize << jp1) {
                let mut sign = 1.0;
                let mut flat = 0usize;
                for (q, &(s, a)) in comps.iter().enumerate() {
                    let slot = if sub >> q & 1 == 1 {
                        sign = -sign;
                        0
                    } else {
                        s
                    };
                    flat = flat * nv + slot * d + a;
                }
                for ch in 0..c {
                    ext[ch * nv.pow(jp1 as u32) + flat] += sign * vtab.1[ti * c + ch];
                }
            }
        }
    }
    let mut ext_keys = vec![[0i64; 3]];
    ext_keys.extend_from_slice(label_keys);
    let fkey = |k: &Key| force_keys.iter().position(|e| e == k);
    let nf = force_keys.len() * d;
    let per_ch = d * nf.pow(j as u32);
    let mut out = vec![0.0; c * per_ch];
    // enumerate σ and all extended-slot tuples containing σ at slot position 0
    for (si, sig) in ext_keys.iter().enumerate() {
        for rest in 0..ns.pow(j as u32) {
            let mut slots = vec![0usize; j];
            let mut r = rest;
            for q in (0..j).rev() {
                slots[q] = r % ns;
                r /= ns;
            }
            // force site k_q = ext_key(slot_q) − σ
            let mut fidx = Vec::with_capacity(j);
            let mut ok = true;
            for &s in &slots {
                let k = ext_keys[s];
                let kk = [k[0] - sig[0], k[1] - sig[1], k[2] - sig[2]];
                match fkey(&kk) {
                    Some(f) => fidx.push(f),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                continue;
            }
            for a in 0..d {
                for comp in 0..d.pow(j as u32) {
                    let mut cc = comp;
                    let mut bs = vec![0usize; j];
                    for q in (0..j).rev() {
                        bs[q] = cc % d;
                        cc /= d;
                    }
                    let mut eflat = si * d + a;
                    let mut oflat = a;
                    for q in 0..j {
                        eflat = eflat * nv + slots[q] * d + bs[q];
                        oflat = oflat * nf + fidx[q] * d + bs[q];
                    }
                    for ch in 0..c {
                        out[ch * per_ch + oflat] -= ext[ch * nv.pow(jp1 as u32) + eflat];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `∂^j_F W_cb(I)`, `j = 1..=j_max`, flat `(d²)^j` with `F`-entry index `a·d + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CauchyBornTensor {
    pub d: usize,
    pub tensors: Vec<Vec<f64>>,
}

impl CauchyBornTensor {
    pub fn order(&self, j: usize) -> Option<&[f64]> {
        self.tensors.get(j.wrapping_sub(1)).map(|v| v.as_slice())
    }

    /// Largest deviation from slot-exchange symmetry in order `j`.
    pub fn max_asymmetry(&self, j: usize) -> f64 {
        let t = match self.order(j) {
            Some(t) => t,
            None => return 0.0,
        };
        let n = self.d * self.d;
        let mut worst = 0.0f64;
        for flat in 0..t.len() {
            let mut idx = vec![0u32; j];
            let mut r = flat;
            for q in (0..j).rev() {
                idx[q] = (r % n) as u32;
                r /= n;
            }
            for p in permutations(&idx) {
                let f2 = p.iter().fold(0usize, |acc, &v| acc * n + v as usize);
                worst = worst.max((t[flat] - t[f2]).abs());
            }
        }
        worst
    }
}

fn sigma_min(f: &[f64], d: usize) -> f64 {
    let m = DMatrix::from_row_slice(d, d, f);
    let ftf = m.transpose() * &m;
    ftf.symmetric_eigenvalues().iter().fold(f64::INFINITY, |a, &v| a.min(v)).max(0.0).sqrt()
}

fn det(f: &[f64], d: usize) -> f64 {
    DMatrix::from_row_slice(d, d, f).determinant()
}

/// `W_cb(F) = V^h((F − I)·Λ^h_*)` with `F` row-major; the stencil is the
/// model's label ball widened by `1/σ_min(F)`.
pub fn cauchy_born_density(model: &dyn SiteModel, spec: &LatticeSpec, f: &[f64]) -> Result<f64> {
    let d = spec.d;
    if f.len() != d * d {
        return Err(Error::InvalidInput("deformation gradient has wrong size".into()));
    }
    let det_f = det(f, d);
    if !(det_f > 0.0) {
        return Err(Error::Collapse(det_f));
    }
    let r = model.label_radius() / sigma_min(f, d).min(1.0);
    let (_, rho) = homogeneous_labels(spec, r)?;
    let m = rho.len() / d;
    let g = strain_stencil(f, &rho, d);
    model.energy(&rho, &g, &vec![true; m])
}

fn strain_stencil(f: &[f64], rho: &[f64], d: usize) -> Vec<f64> {
    let m = rho.len() / d;
    let mut g = vec![0.0; m * d];
    for s in 0..m {
        for a in 0..d {
            let mut acc = 0.0;
            for b in 0..d {
                let fab = f[a * d + b] - if a == b { 1.0 } else { 0.0 };
                acc += fab * rho[s * d + b];
            }
            g[s * d + a] = acc;
        }
    }
    g
}

/// `∂_F W_cb(F)`: `∂W/∂F_ab = Σ_ρ V_{,ρ a} ρ_b`.
pub fn cauchy_born_stress(model: &dyn SiteModel, spec: &LatticeSpec, f: &[f64]) -> Result<Vec<f64>> {
    let d = spec.d;
    let det_f = det(f, d);
    if !(det_f > 0.0) {
        return Err(Error::Collapse(det_f));
    }
    let (_, rho) = homogeneous_labels(spec, model.label_radius())?;
    let m = rho.len() / d;
    let g = strain_stencil(f, &rho, d);
    let mut gr = vec![0.0; m * d];
    model.energy_grad(&rho, &g, &vec![true; m], &mut gr)?;
    let mut out = vec![0.0; d * d];
    for s in 0..m {
        for a in 0..d {
            for b in 0..d {
                out[a * d + b] += gr[s * d + a] * rho[s * d + b];
            }
        }
    }
    Ok(out)
}

/// `∂^j_F W_cb(I)` for `j ≤ j_max ≤ 4`: the stress is analytic, higher orders are
/// nested central differences of it in the `d²` entries of `F` (step `h_j`),
/// symmetrised over slots.
pub fn virial_derivatives(model: &dyn SiteModel, spec: &LatticeSpec, j_max: usize, steps: &FdSteps) -> Result<CauchyBornTensor> {
    if j_max == 0 || j_max > 4 {
        return Err(Error::UnsupportedOrder { kind: "virial", order: j_max });
    }
    let d = spec.d;
    let n = d * d;
    let mut ident = vec![0.0; n];
    for a in 0..d {
        ident[a * d + a] = 1.0;
    }
    let tabs = gradient_derivatives(n, 1, j_max, steps, &mut |x, out| {
        let f: Vec<f64> = ident.iter().zip(x).map(|(i, v)| i + v).collect();
        out.copy_from_slice(&cauchy_born_stress(model, spec, &f)?);
        Ok(())
    })?;
    let tensors = tabs
        .into_iter()
        .enumerate()
        .map(|(j, (tuples, vals))| {
            let mut t = SymTable::new(j + 1);
            for (tu, v) in tuples.iter().zip(vals) {
                t.push(tu, v);
            }
            t.dense(n)
        })
        .collect();
    Ok(CauchyBornTensor { d, tensors })
}

/// `∂^j_F W_cb(I) = Σ_{ρ⃗} V_{,ρ⃗}(0) ⊗ ρ⃗` from a Taylor table (all orderings).
pub fn virial_lattice_sum(t: &TaylorPotential, j: usize) -> Result<Vec<f64>> {
    let table = t.tables.get(j.wrapping_sub(1)).ok_or(Error::UnsupportedOrder {
        kind: "virial lattice sum",
        order: j,
    })?;
    let d = t.d;
    let n = d * d;
    let mut out = vec![0.0; n.pow(j as u32)];
    for i in 0..table.len() {
        for p in permutations(table.tuple(i)) {
            // p_q = slot·d + a_q; accumulate over b_q of ρ_{slot, b_q}
            for comp in 0..d.pow(j as u32) {
                let mut c = comp;
                let mut flat = 0usize;
                let mut w = table.val[i];
                let mut bs = vec![0usize; j];
                for q in (0..j).rev() {
                    bs[q] = c % d;
                    c /= d;
                }
                for q in 0..j {
                    let (s, a) = (p[q] as usize / d, p[q] as usize % d);
                    w *= t.labels[s * d + bs[q]];
                    flat = flat * n + a * d + bs[q];
                }
                out[flat] += w;
            }
        }
    }
    Ok(out)
}

/// `T_2V^h(g) + (1/6) ∂³_F W_cb(I)[G(g)]³`, where `G(g) = (Σ g ρᵀ)(Σ ρρᵀ)⁻¹` is the
/// least-squares local strain of the stencil.  The cubic term leaves `δ¹V` and
/// `δ²V` at 0 untouched and makes `∂³_F W_cb(I)` match the reference exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct VirialTaylor {
    pub base: TaylorPotential,
    pub c3: Vec<f64>,
}

impl VirialTaylor {
    pub fn new(base: TaylorPotential, cb: &CauchyBornTensor) -> Result<Self> {
        let c3 = cb
            .order(3)
            .ok_or(Error::UnsupportedOrder {
                kind: "virial Taylor",
                order: 3,
            })?
            .to_vec();
        Ok(VirialTaylor { base: base.truncated(2), c3 })
    }

    fn local_strain(&self, g: &[f64], present: &[bool]) -> (Vec<f64>, Vec<f64>) {
        // returns G (d×d row-major) and M⁻¹
        let d = self.base.d;
        let lab = &self.base.labels;
        let m = present.len().min(self.base.n_slots());
        let mut a = DMatrix::<f64>::zeros(d, d);
        let mut bm = DMatrix::<f64>::zeros(d, d);
        for s in 0..m {
            if !present[s] {
                continue;
            }
            for i in 0..d {
                for k in 0..d {
                    a[(i, k)] += g[s * d + i] * lab[s * d + k];
                    bm[(i, k)] += lab[s * d + i] * lab[s * d + k];
                }
            }
        }
        let inv = bm.try_inverse().unwrap_or_else(|| DMatrix::zeros(d, d));
        let gm = a * &inv;
        let mut gv = vec![0.0; d * d];
        let mut iv = vec![0.0; d * d];
        for i in 0..d {
            for k in 0..d {
                gv[i * d + k] = gm[(i, k)];
                iv[i * d + k] = inv[(i, k)];
            }
        }
        (gv, iv)
    }

    fn cubic(&self, gv: &[f64]) -> (f64, Vec<f64>) {
        let n = gv.len();
        let mut e = 0.0;
        let mut de = vec![0.0; n];
        for p in 0..n {
            for q in 0..n {
                let pq = self.c3[(p * n + q) * n..(p * n + q + 1) * n].iter().zip(gv).map(|(c, g)| c * g).sum::<f64>();
                e += gv[p] * gv[q] * pq;
                de[p] += 0.5 * gv[q] * pq;
            }
        }
        (e / 6.0, de)
    }
}

impl SiteModel for VirialTaylor {
    fn d(&self) -> usize {
        self.base.d
    }

    fn label_radius(&self) -> f64 {
        self.base.r_support
    }

    fn energy(&self, rho: &[f64], g: &[f64], present: &[bool]) -> Result<f64> {
        let (gv, _) = self.local_strain(g, present);
        Ok(self.base.energy(rho, g, present)? + self.cubic(&gv).0)
    }

    fn energy_grad(&self, rho: &[f64], g: &[f64], present: &[bool], grad: &mut [f64]) -> Result<f64> {
        let d = self.base.d;
        let e = self.base.energy_grad(rho, g, present, grad)?;
        let (gv, inv) = self.local_strain(g, present);
        let (c, dc) = self.cubic(&gv);
        // ∂G_ik/∂g_{s,i} = Σ_k' ρ_{s,k'} M⁻¹_{k'k}
        let lab = &self.base.labels;
        for s in 0..present.len().min(self.base.n_slots()) {
            if !present[s] {
                continue;
            }
            for i in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    let dg: f64 = (0..d).map(|kp| lab[s * d + kp] * inv[kp * d + k]).sum();
                    acc += dc[i * d + k] * dg;
                }
                grad[s * d + i] += acc;
            }
        }
        Ok(e + c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refmodel::{Eam, EamParams};

    fn eam() -> Eam {
        Eam::new(EamParams::stress_free(&LatticeSpec::triangular()).unwrap(), 2)
    }

    #[test]
    fn tuple_bookkeeping() {
        assert_eq!(sorted_tuples(3, 2).len(), 6);
        assert_eq!(sorted_tuples(36, 3).len(), 36 * 37 * 38 / 6);
        assert_eq!(multiplicity(&[1, 1, 2]), 3.0);
        assert_eq!(multiplicity(&[0, 1, 2]), 6.0);
        assert_eq!(permutations(&[2, 2, 5]).len(), 3);
    }

    #[test]
    fn first_order_table_is_odd() {
        let t = taylor_coefficients(&eam(), &LatticeSpec::triangular(), 1, 2.5, &FdSteps::default()).unwrap();
        let (keys, _) = homogeneous_labels(&LatticeSpec::triangular(), 2.5).unwrap();
        assert_eq!(keys.len(), 18);
        let d = 2;
        let dense = t.tables[0].dense(t.n_vars());
        for (s, k) in keys.iter().enumerate() {
            let ms = keys.iter().position(|q| *q == [-k[0], -k[1], 0]).unwrap();
            for a in 0..d {
                assert!((dense[s * d + a] + dense[ms * d + a]).abs() < 1e-13);
            }
        }
        // the stress-free lattice has vanishing first moment Σ V_ρ ⊗ ρ
        let s1 = virial_lattice_sum(&t, 1).unwrap();
        assert!(s1.iter().all(|v| v.abs() < 1e-10), "{s1:?}");
    }

    #[test]
    fn taylor_remainder_scales() {
        let m = eam();
        let spec = LatticeSpec::triangular();
        let t = taylor_coefficients(&m, &spec, 2, 2.5, &FdSteps::default()).unwrap();
        let (_, all) = homogeneous_labels(&spec, 3.5).unwrap();
        let nall = all.len() / 2;
        let n = t.n_vars();
        let dir: Vec<f64> = (0..n).map(|k| ((k as f64) * 0.731).sin()).collect();
        let mut ratios = vec![];
        for tt in [1e-1, 10f64.powf(-1.5), 1e-2] {
            let mut g = vec![0.0; nall * 2];
            for k in 0..n {
                g[k] = tt * dir[k];
            }
            let v = m.energy(&all, &g, &vec![true; nall]).unwrap();
            let tv = t.eval(&g[..n]);
            ratios.push((v - tv).abs() / tt.powi(3));
        }
        let (lo, hi) = ratios.iter().fold((f64::MAX, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi / lo < 2.0 && hi < 1e3, "{ratios:?}");
    }

    #[test]
    fn cb_density_frame_indifference_and_stretch() {
        let m = eam();
        let spec = LatticeSpec::triangular();
        let w0 = cauchy_born_density(&m, &spec, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let (_, all) = homogeneous_labels(&spec, 3.5).unwrap();
        let nall = all.len() / 2;
        assert_eq!(w0, m.energy(&all, &vec![0.0; nall * 2], &vec![true; nall]).unwrap());
        let th: f64 = 0.4;
        let rot = [th.cos(), -th.sin(), th.sin(), th.cos()];
        assert!((cauchy_born_density(&m, &spec, &rot).unwrap() - w0).abs() < 1e-10);
        // stretched stencil evaluated directly
        let ws = cauchy_born_density(&m, &spec, &[1.01, 0.0, 0.0, 1.0]).unwrap();
        let p = &m.params;
        let (mut pair, mut dens) = (0.0, 0.0);
        for s in 0..nall {
            let r = (1.01 * all[2 * s]).hypot(all[2 * s + 1]);
            pair += p.phi(r);
            dens += p.psi(r);
        }
        assert!((ws - (0.5 * pair - p.c_e * dens.sqrt())).abs() < 1e-12);
        assert!(matches!(cauchy_born_density(&m, &spec, &[-1.0, 0.0, 0.0, 1.0]), Err(Error::Collapse(_))));
    }

    #[test]
    fn virials_two_paths() {
        let m = eam();
        let spec = LatticeSpec::triangular();
        let cb = virial_derivatives(&m, &spec, 4, &FdSteps::default()).unwrap();
        assert!(cb.order(1).unwrap().iter().all(|v| v.abs() < 1e-6));
        assert!(cb.max_asymmetry(2) < 1e-7);
        // lattice sum over the full label set (3.5 covers the 2.5 cutoff with margin)
        let t = taylor_coefficients(&m, &spec, 2, 2.5, &FdSteps::default()).unwrap();
        for j in 1..=2 {
            let ls = virial_lattice_sum(&t, j).unwrap();
            let fd = cb.order(j).unwrap();
            for (a, b) in ls.iter().zip(fd) {
                assert!((a - b).abs() < 1e-5, "order {j}: {a} vs {b}");
            }
        }
        // FD of the density itself (independent of the analytic stress)
        let h = 1e-4;
        let mut fp = [1.0, 0.0, 0.0, 1.0];
        fp[1] += h;
        let mut fm = [1.0, 0.0, 0.0, 1.0];
        fm[1] -= h;
        let w0 = cauchy_born_density(&m, &spec, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let c11 = (cauchy_born_density(&m, &spec, &fp).unwrap() - 2.0 * w0 + cauchy_born_density(&m, &spec, &fm).unwrap()) / (h * h);
        assert!((c11 - cb.order(2).unwrap()[1 * 4 + 1]).abs() < 1e-5 * c11.abs().max(1.0));
    }

    #[test]
    fn force_tables_two_paths() {
        let m: Arc<dyn SiteModel> = Arc::new(eam());
        let spec = LatticeSpec::triangular();
        let tf = taylor_force_coefficients(m.clone(), &spec, 1, 5.0, &FdSteps::default()).unwrap();
        let (lk, _) = homogeneous_labels(&spec, 2.5).unwrap();
        let (_, _, tabs) = site_derivatives(m.as_ref(), &spec, 2.5, 2, &FdSteps::default()).unwrap();
        let ls = force_derivative_lattice_sum(&spec, &lk, &tabs[1], 1, &tf.sites).unwrap();
        let nf = tf.sites.len() * 2;
        let mut worst = 0.0f64;
        for a in 0..2 {
            let dense = tf.tables[0][a].dense(nf);
            for v in 0..nf {
                worst = worst.max((dense[v] - ls[a * nf + v]).abs());
            }
        }
        assert!(worst < 1e-6, "{worst}");
        // translation: Σ_ℓ δF_{a;ℓb} = 0
        for a in 0..2 {
            let dense = tf.tables[0][a].dense(nf);
            for b in 0..2 {
                let s: f64 = (0..tf.sites.len()).map(|k| dense[k * 2 + b]).sum();
                assert!(s.abs() < 1e-6);
            }
        }
        assert_eq!(tf.eval(&vec![0.0; nf]), vec![0.0, 0.0]);
    }

    #[test]
    fn json_round_trip_and_scaling() {
        let t = taylor_coefficients(&eam(), &LatticeSpec::triangular(), 2, 2.5, &FdSteps::default()).unwrap();
        let back = TaylorPotential::from_json(&t.to_json()).unwrap();
        assert_eq!(back, t);
        let g: Vec<f64> = (0..t.n_vars()).map(|k| 0.01 * (k as f64).cos()).collect();
        let q = t.tables[1].eval(&g);
        let t2 = t.with_scaled_order(2, 2.0);
        assert!((t2.eval(&g) - t.eval(&g) - q).abs() < 1e-14);
        assert_eq!(t.eval(&vec![0.0; t.n_vars()]), t.v0);
    }

    #[test]
    fn virial_taylor_matches_third_virial() {
        let m = eam();
        let spec = LatticeSpec::triangular();
        let steps = FdSteps::default();
        let cb = virial_derivatives(&m, &spec, 3, &steps).unwrap();
        let base = taylor_coefficients(&m, &spec, 2, 2.5, &steps).unwrap();
        let vt = VirialTaylor::new(base.clone(), &cb).unwrap();
        let cbv = virial_derivatives(&vt, &spec, 3, &steps).unwrap();
        let cbb = virial_derivatives(&base, &spec, 3, &steps).unwrap();
        let err = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err(cbv.order(3).unwrap(), cb.order(3).unwrap()) < 1e-4 * cb.order(3).unwrap().iter().fold(0.0f64, |a, v| a.max(v.abs())));
        assert!(err(cbv.order(2).unwrap(), cbb.order(2).unwrap()) < 1e-8);
        // gradient consistency
        let (_, all) = homogeneous_labels(&spec, 2.5).unwrap();
        let n = all.len();
        let g: Vec<f64> = (0..n).map(|k| 0.02 * ((k as f64) * 1.3).sin()).collect();
        let pr = vec![true; n / 2];
        let mut gr = vec![0.0; n];
        vt.energy_grad(&all, &g, &pr, &mut gr).unwrap();
        for k in 0..n {
            let mut gp = g.clone();
            let mut gm = g.clone();
            gp[k] += 1e-6;
            gm[k] -= 1e-6;
            let fd = (vt.energy(&all, &gp, &pr).unwrap() - vt.energy(&all, &gm, &pr).unwrap()) / 2e-6;
            assert!((fd - gr[k]).abs() < 1e-7);
        }
    }
}
