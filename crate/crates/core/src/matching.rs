//! Observations of the reference model at the homogeneous lattice, matching
//! errors, and the weighted least-squares fit of a linear MM potential.
//!
//! Targets and design rows come from the same enumeration: a reference model is
//! a one-channel source, an MLIP basis an `n_B`-channel source, and every
//! observation functional is applied channel-wise.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::cb_taylor::{force_derivative_lattice_sum, gradient_derivatives, homogeneous_labels, multiplicity, sorted_tuples, FdSteps};
use crate::error::{Error, Result};
use crate::lattice::{Key, LatticeSpec};
use crate::mlip::{BasisSpec, Descriptor, Mlip};
use crate::refmodel::SiteModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ObsKind {
    E,
    F,
    V,
}

impl ObsKind {
    fn tag(self) -> &'static str {
        match self {
            ObsKind::E => "E",
            ObsKind::F => "F",
            ObsKind::V => "V",
        }
    }
}

/// One derivative component at the homogeneous state.  `indices` are sorted
/// variable indices: stencil `slot·d + a` (E), site `site·d + b` with the
/// force component in `comp` (F), or `F`-entries `a·d + b` (V).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub kind: ObsKind,
    pub order: usize,
    pub comp: usize,
    pub indices: Vec<u32>,
    pub target: f64,
    pub w_inv: f64,
    pub weight: f64,
    /// Number of orderings represented by the sorted tuple.
    pub mult: f64,
}

/// Loss weights `W^E_j`, `W^F_j` (index `j`), the virial term `(K, W^V_K)` that
/// matches `∂^{K+1}_F W_cb(I)`, and the locality rate `γ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub energy: Vec<f64>,
    pub force: Vec<f64>,
    pub virial: Option<(usize, f64)>,
    pub gamma: f64,
}

impl LossWeights {
    pub fn energy_mixing(k_e: usize, virial: bool) -> Result<Self> {
        let (energy, virial) = match (k_e, virial) {
            (1, false) => (vec![1.0, 10.0], None),
            (2, false) => (vec![1.0, 10.0, 500.0], None),
            (3, false) => (vec![1.0, 10.0, 1000.0, 100.0], None),
            (2, true) => (vec![1.0, 10.0, 1000.0], Some((2, 100.0))),
            _ => {
                return Err(Error::UnsupportedOrder {
                    kind: "energy-mixing weights",
                    order: k_e,
                })
            }
        };
        Ok(LossWeights {
            energy,
            force: vec![],
            virial,
            gamma: 0.5,
        })
    }

    pub fn force_mixing(k_f: usize, virial: bool) -> Result<Self> {
        let (force, virial) = match (k_f, virial) {
            (1, false) => (vec![1.0, 100.0], None),
            (2, false) => (vec![1.0, 1000.0, 100.0], None),
            (1, true) => (vec![1.0, 1000.0], Some((2, 100.0))),
            (2, true) => (vec![1.0, 1000.0, 200.0], Some((3, 500.0))),
            _ => {
                return Err(Error::UnsupportedOrder {
                    kind: "force-mixing weights",
                    order: k_f,
                })
            }
        };
        Ok(LossWeights {
            energy: vec![],
            force,
            virial,
            gamma: 0.5,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.energy.iter().chain(&self.force).chain(self.virial.iter().map(|v| &v.1));
        if all.into_iter().any(|w| !(*w > 0.0)) || !(self.gamma >= 0.0) {
            return Err(Error::InvalidInput("loss weights must be positive".into()));
        }
        if self.energy.len() > 4 || self.force.len() > 3 || self.virial.is_some_and(|(k, _)| k == 0 || k > 3) {
            return Err(Error::UnsupportedOrder {
                kind: "observation",
                order: self.energy.len().max(self.force.len()),
            });
        }
        Ok(())
    }

    pub fn k_e(&self) -> Option<usize> {
        self.energy.len().checked_sub(1)
    }

    pub fn k_f(&self) -> Option<usize> {
        self.force.len().checked_sub(1).filter(|k| *k > 0)
    }
}

/// Everything that fixes an observation set besides the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchingSpec {
    pub lattice: LatticeSpec,
    pub weights: LossWeights,
    /// Support radius of the stencil and force tuples.
    pub r_cut: f64,
    pub steps: FdSteps,
}

impl MatchingSpec {
    pub fn new(lattice: LatticeSpec, weights: LossWeights, r_cut: f64) -> Result<Self> {
        weights.validate()?;
        Ok(MatchingSpec {
            lattice,
            weights,
            r_cut,
            steps: FdSteps::default(),
        })
    }
}

/// A model seen as `c` output channels with an analytic Jacobian `[ch][var]`.
pub trait ChannelSource {
    fn d(&self) -> usize;
    fn n_channels(&self) -> usize;
    fn label_radius(&self) -> f64;
    fn eval(&self, rho: &[f64], g: &[f64], present: &[bool], vals: &mut [f64], jac: &mut [f64]) -> Result<()>;
}

/// A site model as a one-channel source.
pub struct ModelChannel<'a>(pub &'a dyn SiteModel);

impl ChannelSource for ModelChannel<'_> {
    fn d(&self) -> usize {
        self.0.d()
    }
    fn n_channels(&self) -> usize {
        1
    }
    fn label_radius(&self) -> f64 {
        self.0.label_radius()
    }
    fn eval(&self, rho: &[f64], g: &[f64], present: &[bool], vals: &mut [f64], jac: &mut [f64]) -> Result<()> {
        vals[0] = self.0.energy_grad(rho, g, present, jac)?;
        Ok(())
    }
}

impl ChannelSource for Descriptor {
    fn d(&self) -> usize {
        self.spec.d
    }
    fn n_channels(&self) -> usize {
        self.n_basis()
    }
    fn label_radius(&self) -> f64 {
        self.spec.r_cut + 0.5
    }
    fn eval(&self, rho: &[f64], g: &[f64], present: &[bool], vals: &mut [f64], jac: &mut [f64]) -> Result<()> {
        self.feature_jacobian(rho, g, present, vals, jac)
    }
}

/// Geometry shared by targets and rows.
struct Geometry {
    d: usize,
    /// Stencil slots `|ρ| ≤ r_cut` and their norms.
    slot_norm: Vec<f64>,
    /// Force sites (origin first) and their norms.
    site_keys: Vec<Key>,
    site_norm: Vec<f64>,
    label_keys: Vec<Key>,
}

impl Geometry {
    fn new(spec: &MatchingSpec) -> Result<Self> {
        let d = spec.lattice.d;
        let (label_keys, x) = homogeneous_labels(&spec.lattice, spec.r_cut)?;
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let slot_norm = x.chunks(d).map(norm).collect();
        let mut site_keys = vec![[0i64; 3]];
        site_keys.extend_from_slice(&label_keys);
        let mut site_norm = vec![0.0];
        site_norm.extend(x.chunks(d).map(norm));
        Ok(Geometry {
            d,
            slot_norm,
            site_keys,
            site_norm,
            label_keys,
        })
    }

    fn w_inv(&self, norms: &[f64], t: &[u32], gamma: f64) -> f64 {
        t.iter().map(|&v| (2.0 * gamma * norms[v as usize / self.d]).exp()).product()
    }
}

/// Channel-wise derivative tables at the homogeneous state.
struct Tables {
    c: usize,
    v0: Vec<f64>,
    /// `δ^jΦ(0)`, `j = 1..`: sorted tuples and values `[tuple][ch]`.
    energy: Vec<(Vec<Vec<u32>>, Vec<f64>)>,
    /// `δ^jF(0)` dense `[ch][a][v₁…v_j]`.
    force: Vec<Vec<f64>>,
    /// `∂^{K+1}_F W_cb(I)`: sorted tuples and values `[tuple][ch]`.
    virial: Option<(Vec<Vec<u32>>, Vec<f64>)>,
}

fn tables(src: &dyn ChannelSource, spec: &MatchingSpec, geo: &Geometry) -> Result<Tables> {
    let d = src.d();
    if d != spec.lattice.d {
        return Err(Error::InvalidInput("model and lattice dimension differ".into()));
    }
    let c = src.n_channels();
    let w = &spec.weights;
    let k_e = w.k_e().unwrap_or(0);
    let k_f = w.k_f().unwrap_or(0);
    let k_need = k_e.max(if k_f > 0 { k_f + 1 } else { 0 });
    let (_, all) = homogeneous_labels(&spec.lattice, src.label_radius().max(spec.r_cut))?;
    let m = all.len() / d;
    let n = geo.slot_norm.len() * d;
    let present = vec![true; m];
    let mut vals = vec![0.0; c];
    let mut jac = vec![0.0; c * m * d];
    let zero = vec![0.0; m * d];
    src.eval(&all, &zero, &present, &mut vals, &mut jac)?;
    let v0 = vals.clone();
    let energy = if k_need > 0 {
        let mut g = vec![0.0; m * d];
        gradient_derivatives(n, c, k_need, &spec.steps, &mut |x, out| {
            g[..n].copy_from_slice(x);
            src.eval(&all, &g, &present, &mut vals, &mut jac)?;
            for ch in 0..c {
                out[ch * n..(ch + 1) * n].copy_from_slice(&jac[ch * m * d..ch * m * d + n]);
            }
            Ok(())
        })?
    } else {
        vec![]
    };
    let mut force = Vec::new();
    for j in 1..=k_f {
        force.push(force_derivative_lattice_sum(&spec.lattice, &geo.label_keys, &energy[j], c, &geo.site_keys)?);
    }
    let virial = match w.virial {
        Some((k, _)) => {
            let nf = d * d;
            let mut ident = vec![0.0; nf];
            for a in 0..d {
                ident[a * d + a] = 1.0;
            }
            let mut g = vec![0.0; m * d];
            let mut tabs = gradient_derivatives(nf, c, k + 1, &spec.steps, &mut |x, out| {
                // stress per channel: Σ_s J[ch][s,a] ρ_{s,b} at F = I + x
                for s in 0..m {
                    for a in 0..d {
                        g[s * d + a] = (0..d)
                            .map(|b| (x[a * d + b] + ident[a * d + b] - if a == b { 1.0 } else { 0.0 }) * all[s * d + b])
                            .sum();
                    }
                }
                src.eval(&all, &g, &present, &mut vals, &mut jac)?;
                out.iter_mut().for_each(|v| *v = 0.0);
                for ch in 0..c {
                    for s in 0..m {
                        for a in 0..d {
                            for b in 0..d {
                                out[ch * nf + a * d + b] += jac[ch * m * d + s * d + a] * all[s * d + b];
                            }
                        }
                    }
                }
                Ok(())
            })?;
            Some(tabs.swap_remove(k))
        }
        None => None,
    };
    Ok(Tables { c, v0, energy, force, virial })
}

/// Observations with channel values `[obs][ch]`; channel 0 becomes the target.
fn collect(spec: &MatchingSpec, geo: &Geometry, t: &Tables) -> (Vec<Observation>, Vec<f64>) {
    let d = geo.d;
    let c = t.c;
    let w = &spec.weights;
    let gamma = w.gamma;
    let mut obs = Vec::new();
    let mut vals: Vec<f64> = Vec::new();
    let mut push = |o: Observation, v: &[f64], obs: &mut Vec<Observation>| {
        let mut o = o;
        o.target = v[0];
        obs.push(o);
        vals.extend_from_slice(v);
    };
    if let Some(k_e) = w.k_e() {
        push(
            Observation {
                kind: ObsKind::E,
                order: 0,
                comp: 0,
                indices: vec![],
                target: 0.0,
                w_inv: 1.0,
                weight: w.energy[0],
                mult: 1.0,
            },
            &t.v0,
            &mut obs,
        );
        for j in 1..=k_e {
            let (tuples, tv) = &t.energy[j - 1];
            for (i, tu) in tuples.iter().enumerate() {
                let o = Observation {
                    kind: ObsKind::E,
                    order: j,
                    comp: 0,
                    indices: tu.clone(),
                    target: 0.0,
                    w_inv: geo.w_inv(&geo.slot_norm, tu, gamma),
                    weight: w.energy[j],
                    mult: multiplicity(tu),
                };
                push(o, &tv[i * c..(i + 1) * c], &mut obs);
            }
        }
    }
    if let Some(k_f) = w.k_f() {
        let nf = geo.site_keys.len() * d;
        for j in 1..=k_f {
            let dense = &t.force[j - 1];
            let per_ch = d * nf.pow(j as u32);
            for tu in sorted_tuples(nf, j) {
                let flat = tu.iter().fold(0usize, |a, &v| a * nf + v as usize);
                for a in 0..d {
                    let v: Vec<f64> = (0..c).map(|ch| dense[ch * per_ch + a * nf.pow(j as u32) + flat]).collect();
                    let o = Observation {
                        kind: ObsKind::F,
                        order: j,
                        comp: a,
                        indices: tu.clone(),
                        target: 0.0,
                        w_inv: geo.w_inv(&geo.site_norm, &tu, gamma),
                        weight: w.force[j],
                        mult: multiplicity(&tu),
                    };
                    push(o, &v, &mut obs);
                }
            }
        }
    }
    if let (Some((k, wv)), Some((tuples, tv))) = (w.virial, &t.virial) {
        for (i, tu) in tuples.iter().enumerate() {
            let o = Observation {
                kind: ObsKind::V,
                order: k,
                comp: 0,
                indices: tu.clone(),
                target: 0.0,
                w_inv: 1.0,
                weight: wv,
                mult: multiplicity(tu),
            };
            push(o, &tv[i * c..(i + 1) * c], &mut obs);
        }
    }
    (obs, vals)
}

/// Immutable observation set together with the spec that generated it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub spec: MatchingSpec,
    pub obs: Vec<Observation>,
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn count(&self, kind: ObsKind, order: usize) -> usize {
        self.obs.iter().filter(|o| o.kind == kind && o.order == order).count()
    }

    /// `(kind, order)` groups present, in first-appearance order.
    pub fn groups(&self) -> Vec<(ObsKind, usize)> {
        let mut g: Vec<(ObsKind, usize)> = Vec::new();
        for o in &self.obs {
            if !g.contains(&(o.kind, o.order)) {
                g.push((o.kind, o.order));
            }
        }
        g
    }

    /// CSV dump `kind,order,indices,target,w_inv,W,mult`; force indices are
    /// prefixed by the force component (`a;v₁;…`).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["kind", "order", "indices", "target", "w_inv", "W", "mult"])?;
        for o in &self.obs {
            let mut idx: Vec<String> = Vec::new();
            if o.kind == ObsKind::F {
                idx.push(o.comp.to_string());
            }
            idx.extend(o.indices.iter().map(|v| v.to_string()));
            wr.write_record([
                o.kind.tag().to_string(),
                o.order.to_string(),
                idx.join(";"),
                format!("{:e}", o.target),
                format!("{:e}", o.w_inv),
                format!("{:e}", o.weight),
                format!("{}", o.mult),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads back the observation rows of a CSV dump (the spec is supplied).
    pub fn read_csv<R: Read>(spec: MatchingSpec, r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut obs = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let bad = |what: &str| Error::InvalidInput(format!("observation csv: bad {what}"));
            let kind = match &rec[0] {
                "E" => ObsKind::E,
                "F" => ObsKind::F,
                "V" => ObsKind::V,
                _ => return Err(bad("kind")),
            };
            let order: usize = rec[1].parse().map_err(|_| bad("order"))?;
            let mut idx: Vec<u32> = if rec[2].is_empty() {
                vec![]
            } else {
                rec[2].split(';').map(|s| s.parse().map_err(|_| bad("indices"))).collect::<Result<_>>()?
            };
            let comp = if kind == ObsKind::F { idx.remove(0) as usize } else { 0 };
            let num = |i: usize, w: &str| rec[i].parse::<f64>().map_err(|_| bad(w));
            obs.push(Observation {
                kind,
                order,
                comp,
                indices: idx,
                target: num(3, "target")?,
                w_inv: num(4, "w_inv")?,
                weight: num(5, "W")?,
                mult: num(6, "mult")?,
            });
        }
        Ok(ObservationSet { spec, obs })
    }
}

/// All observations requested by `spec.weights` for a reference model.
pub fn generate_observations(model: &dyn SiteModel, spec: &MatchingSpec) -> Result<ObservationSet> {
    spec.weights.validate()?;
    let geo = Geometry::new(spec)?;
    let t = tables(&ModelChannel(model), spec, &geo)?;
    let (obs, _) = collect(spec, &geo, &t);
    Ok(ObservationSet { spec: spec.clone(), obs })
}

/// `δ^jV(0)`, `j = 0..=K_E`, with default weights for `K_E`.
pub fn gen_energy_obs(model: &dyn SiteModel, lattice: &LatticeSpec, k_e: usize, r_cut: f64, gamma: f64) -> Result<ObservationSet> {
    let mut w = LossWeights::energy_mixing(k_e, false)?;
    w.gamma = gamma;
    generate_observations(model, &MatchingSpec::new(lattice.clone(), w, r_cut)?)
}

/// `δ^jF(0)`, `j = 1..=K_F`, with default weights for `K_F`.
pub fn gen_force_obs(model: &dyn SiteModel, lattice: &LatticeSpec, k_f: usize, r_cut: f64, gamma: f64) -> Result<ObservationSet> {
    let mut w = LossWeights::force_mixing(k_f, false)?;
    w.gamma = gamma;
    generate_observations(model, &MatchingSpec::new(lattice.clone(), w, r_cut)?)
}

/// `∂^{K+1}_F W_cb(I)` components with weight `W^V_K`.
pub fn gen_virial_obs(model: &dyn SiteModel, lattice: &LatticeSpec, k: usize, weight: f64) -> Result<ObservationSet> {
    if k == 0 || k > 3 {
        return Err(Error::UnsupportedOrder {
            kind: "virial observation",
            order: k + 1,
        });
    }
    let w = LossWeights {
        energy: vec![],
        force: vec![],
        virial: Some((k, weight)),
        gamma: 0.5,
    };
    generate_observations(model, &MatchingSpec::new(lattice.clone(), w, 0.0)?)
}

/// Design matrix `[obs][B]` of a basis for the observations of `set`.
pub fn design_matrix(basis: &BasisSpec, set: &ObservationSet) -> Result<Vec<f64>> {
    let desc = Descriptor::new(basis.clone())?;
    let geo = Geometry::new(&set.spec)?;
    let t = tables(&desc, &set.spec, &geo)?;
    let (obs, vals) = collect(&set.spec, &geo, &t);
    let nb = desc.n_basis();
    // align with the (possibly reloaded) set by key
    let key = |o: &Observation| (o.kind, o.order, o.comp, o.indices.clone());
    if obs.len() == set.obs.len() && obs.iter().zip(&set.obs).all(|(a, b)| key(a) == key(b)) {
        return Ok(vals);
    }
    let map: std::collections::HashMap<_, usize> = obs.iter().enumerate().map(|(i, o)| (key(o), i)).collect();
    let mut out = vec![0.0; set.len() * nb];
    for (r, o) in set.obs.iter().enumerate() {
        let i = *map
            .get(&key(o))
            .ok_or_else(|| Error::InvalidInput(format!("observation {:?} not generated by its spec", key(o))))?;
        out[r * nb..(r + 1) * nb].copy_from_slice(&vals[i * nb..(i + 1) * nb]);
    }
    Ok(out)
}

/// Per-order matching error `ε` and its relative counterpart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchEntry {
    pub kind: ObsKind,
    pub order: usize,
    pub eps: f64,
    pub rrmse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchErrors {
    pub entries: Vec<MatchEntry>,
}

impl MatchErrors {
    pub fn get(&self, kind: ObsKind, order: usize) -> Option<&MatchEntry> {
        self.entries.iter().find(|e| e.kind == kind && e.order == order)
    }

    /// `ε = (Σ mult·w⁻¹|t_ref − t_mm|²)^{1/2}` and `ε / (Σ mult·w⁻¹|t_ref|²)^{1/2}`
    /// per group, with `t_mm` aligned to `reference`.
    pub fn compare(reference: &ObservationSet, mm: &[f64]) -> Result<Self> {
        if reference.is_empty() {
            return Err(Error::EmptyObservations);
        }
        let mut entries = Vec::new();
        for (kind, order) in reference.groups() {
            let (mut num, mut den) = (0.0, 0.0);
            for (o, m) in reference.obs.iter().zip(mm) {
                if o.kind == kind && o.order == order {
                    num += o.mult * o.w_inv * (o.target - m).powi(2);
                    den += o.mult * o.w_inv * o.target.powi(2);
                }
            }
            let eps = num.sqrt();
            let rrmse = if den > 0.0 {
                eps / den.sqrt()
            } else if eps == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            entries.push(MatchEntry { kind, order, eps, rrmse });
        }
        Ok(MatchErrors { entries })
    }
}

/// Matching errors of an MM model against a reference for the observations of `spec`.
pub fn match_errors(model_ref: &dyn SiteModel, model_mm: &dyn SiteModel, spec: &MatchingSpec) -> Result<MatchErrors> {
    let r = generate_observations(model_ref, spec)?;
    let m = generate_observations(model_mm, spec)?;
    let mm: Vec<f64> = m.obs.iter().map(|o| o.target).collect();
    MatchErrors::compare(&r, &mm)
}

/// Column-pivoted Householder least squares `min ‖A x − b‖`, `A` row-major
/// `m × n`.  Factorisation stops once the largest remaining column norm is
/// `≤ tol ×` the first pivot; truncated unknowns are set to zero.
pub fn rrqr_solve(a: &[f64], m: usize, n: usize, b: &[f64], tol: f64) -> Result<(Vec<f64>, usize)> {
    // column-major working copy
    let mut q = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            q[j * m + i] = a[i * n + j];
        }
    }
    let mut rhs = b.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut diag = vec![0.0; n];
    let kmax = m.min(n);
    let mut rank = 0;
    let mut first = 0.0;
    for k in 0..kmax {
        let norms: Vec<f64> = (k..n).map(|j| q[j * m + k..(j + 1) * m].iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let (off, &best) = norms.iter().enumerate().fold((0, &-1.0), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
        if k == 0 {
            if best == 0.0 {
                return Err(Error::AllPivotsTruncated(0.0));
            }
            first = best;
        }
        if best <= tol * first {
            break;
        }
        let p = k + off;
        if p != k {
            for i in 0..m {
                q.swap(k * m + i, p * m + i);
            }
            perm.swap(k, p);
        }
        // Householder vector in place of column k below the diagonal
        let col = &mut q[k * m + k..(k + 1) * m];
        let alpha = if col[0] > 0.0 { -best } else { best };
        col[0] -= alpha;
        let vnorm2: f64 = col.iter().map(|v| v * v).sum();
        let v: Vec<f64> = col.to_vec();
        diag[k] = alpha;
        if vnorm2 > 0.0 {
            for j in k + 1..n {
                let c = &mut q[j * m + k..(j + 1) * m];
                let s = 2.0 * c.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>() / vnorm2;
                c.iter_mut().zip(&v).for_each(|(x, y)| *x -= s * y);
            }
            let s = 2.0 * rhs[k..].iter().zip(&v).map(|(x, y)| x * y).sum::<f64>() / vnorm2;
            rhs[k..].iter_mut().zip(&v).for_each(|(x, y)| *x -= s * y);
        }
        rank = k + 1;
    }
    // back substitution on the leading rank×rank block
    let mut y = vec![0.0; rank];
    for k in (0..rank).rev() {
        let mut s = rhs[k];
        for j in k + 1..rank {
            s -= q[j * m + k] * y[j];
        }
        y[k] = s / diag[k];
    }
    let mut x = vec![0.0; n];
    for k in 0..rank {
        x[perm[k]] = y[k];
    }
    Ok((x, rank))
}

/// Fitted coefficients with diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub c: Vec<f64>,
    pub rank: usize,
    pub n_obs: usize,
    pub n_basis: usize,
    /// Basis functions with identically zero rows over the set.
    pub zero_columns: Vec<usize>,
    pub loss: f64,
    pub loss_zero: f64,
    pub errors: MatchErrors,
}

/// `L(c) = Σ W·mult·w⁻¹ |t − row·c|²`.
pub fn loss(set: &ObservationSet, rows: &[f64], n_basis: usize, c: &[f64]) -> f64 {
    set.obs
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let p: f64 = rows[i * n_basis..(i + 1) * n_basis].iter().zip(c).map(|(a, b)| a * b).sum();
            o.weight * o.mult * o.w_inv * (o.target - p).powi(2)
        })
        .sum()
}

/// Fits the coefficients of `basis` to `set` with the given rows.
pub fn fit_rows(set: &ObservationSet, rows: &[f64], n_basis: usize, tol: f64) -> Result<FitResult> {
    if set.is_empty() {
        return Err(Error::EmptyObservations);
    }
    let m = set.len();
    let mut a = rows.to_vec();
    let mut b = vec![0.0; m];
    for (i, o) in set.obs.iter().enumerate() {
        let s = (o.weight * o.w_inv * o.mult).sqrt();
        a[i * n_basis..(i + 1) * n_basis].iter_mut().for_each(|v| *v *= s);
        b[i] = s * o.target;
    }
    let zero_columns: Vec<usize> = (0..n_basis).filter(|&j| (0..m).all(|i| a[i * n_basis + j] == 0.0)).collect();
    let (c, rank) = if tol >= 1.0 {
        (vec![0.0; n_basis], 0)
    } else {
        rrqr_solve(&a, m, n_basis, &b, tol)?
    };
    let pred: Vec<f64> = (0..m)
        .map(|i| rows[i * n_basis..(i + 1) * n_basis].iter().zip(&c).map(|(x, y)| x * y).sum())
        .collect();
    Ok(FitResult {
        loss: loss(set, rows, n_basis, &c),
        loss_zero: loss(set, rows, n_basis, &vec![0.0; n_basis]),
        errors: MatchErrors::compare(set, &pred)?,
        c,
        rank,
        n_obs: m,
        n_basis,
        zero_columns,
    })
}

/// Assembles the design matrix of `basis` on `set` and fits it.
pub fn assemble_and_fit(set: &ObservationSet, basis: &BasisSpec, tol: f64) -> Result<(Mlip, FitResult)> {
    let rows = design_matrix(basis, set)?;
    let fit = fit_rows(set, &rows, basis.n_basis(), tol)?;
    Ok((Mlip::new(basis.clone(), fit.c.clone())?, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cb_taylor::{taylor_coefficients, taylor_force_coefficients, virial_derivatives};
    use crate::refmodel::{Eam, EamParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn eam() -> Eam {
        Eam::new(EamParams::stress_free(&LatticeSpec::triangular()).unwrap(), 2)
    }

    #[test]
    fn weights_and_counts() {
        let w = LossWeights::force_mixing(1, false).unwrap();
        assert_eq!(w.force, vec![1.0, 100.0]);
        let spec = MatchingSpec::new(
            LatticeSpec::triangular(),
            LossWeights {
                energy: vec![1.0, 1.0, 1.0],
                force: vec![],
                virial: None,
                gamma: 2f64.ln(),
            },
            1.01,
        )
        .unwrap();
        let set = generate_observations(&eam(), &spec).unwrap();
        // one shell of 6 slots: 12 variables; 1 + 12 + 78 observations
        assert_eq!(set.count(ObsKind::E, 0), 1);
        assert_eq!(set.count(ObsKind::E, 1), 12);
        assert_eq!(set.count(ObsKind::E, 2), 12 * 13 / 2);
        assert!(set.obs.iter().filter(|o| o.order == 1).all(|o| (o.w_inv - 4.0).abs() < 1e-14));
        let total: f64 = set.obs.iter().filter(|o| o.order == 2).map(|o| o.mult).sum();
        assert_eq!(total, 144.0);
        let fs = MatchingSpec::new(LatticeSpec::triangular(), LossWeights::force_mixing(1, false).unwrap(), 1.01).unwrap();
        let fset = generate_observations(&eam(), &fs).unwrap();
        // origin + 6 sites, 2 components each, 2 force components
        assert_eq!(fset.len(), 14 * 2);
        assert!(fset.obs.iter().all(|o| o.kind == ObsKind::F && o.order == 1));
    }

    #[test]
    fn energy_and_force_targets_two_paths() {
        let lat = LatticeSpec::triangular();
        let spec = MatchingSpec::new(
            lat.clone(),
            LossWeights {
                energy: vec![1.0, 1.0],
                force: vec![1.0, 1.0],
                virial: None,
                gamma: 0.5,
            },
            2.5,
        )
        .unwrap();
        let set = generate_observations(&eam(), &spec).unwrap();
        let tp = taylor_coefficients(&eam(), &lat, 1, 2.5, &FdSteps::default()).unwrap();
        for o in set.obs.iter().filter(|o| o.kind == ObsKind::E && o.order == 1) {
            assert!((o.target - tp.tables[0].get(&o.indices)).abs() < 1e-12);
        }
        // first-order force table vs finite differences of patch forces
        let tf = taylor_force_coefficients(Arc::new(eam()), &lat, 1, 2.5, &FdSteps::default()).unwrap();
        for o in set.obs.iter().filter(|o| o.kind == ObsKind::F) {
            assert!((o.target - tf.tables[0][o.comp].get(&o.indices)).abs() < 1e-6, "{o:?}");
        }
    }

    #[test]
    fn virial_targets_and_linearity() {
        let lat = LatticeSpec::triangular();
        let set = gen_virial_obs(&eam(), &lat, 1, 1.0).unwrap();
        // ∂²W over 4 entries: 10 sorted pairs
        assert_eq!(set.len(), 10);
        let cb = virial_derivatives(&eam(), &lat, 2, &FdSteps::default()).unwrap();
        for o in &set.obs {
            let flat = o.indices[0] as usize * 4 + o.indices[1] as usize;
            assert!((o.target - cb.order(2).unwrap()[flat]).abs() < 1e-8);
        }
        let one = gen_virial_obs(&eam(), &lat, 1, 1.0).unwrap();
        let tp = taylor_coefficients(&eam(), &lat, 2, 2.5, &FdSteps::default()).unwrap();
        let doubled = tp.with_scaled_order(1, 2.0).with_scaled_order(2, 2.0);
        let two = gen_virial_obs(&doubled, &lat, 1, 1.0).unwrap();
        let base = gen_virial_obs(&tp, &lat, 1, 1.0).unwrap();
        for (a, b) in base.obs.iter().zip(&two.obs) {
            assert!((2.0 * a.target - b.target).abs() < 1e-9 * a.target.abs().max(1.0));
        }
        assert!(one.obs.iter().all(|o| o.w_inv == 1.0));
    }

    #[test]
    fn self_consistent_fit_and_csv() {
        let lat = LatticeSpec::triangular();
        let basis = BasisSpec {
            k_pair: 4,
            k_trip: 2,
            l_max: 2,
            ..BasisSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c: Vec<f64> = (0..basis.n_basis()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let truth = Mlip::new(basis.clone(), c.clone()).unwrap();
        let spec = MatchingSpec::new(lat, LossWeights::energy_mixing(2, false).unwrap(), 2.5).unwrap();
        let set = generate_observations(&truth, &spec).unwrap();
        let rows = design_matrix(&basis, &set).unwrap();
        let nb = basis.n_basis();
        for (i, o) in set.obs.iter().enumerate() {
            let p: f64 = rows[i * nb..(i + 1) * nb].iter().zip(&c).map(|(a, b)| a * b).sum();
            assert!((p - o.target).abs() < 1e-8 * o.target.abs().max(1.0));
        }
        let fit = fit_rows(&set, &rows, nb, 1e-12).unwrap();
        assert!(fit.loss < 1e-10 * fit.loss_zero.max(1.0), "{} {}", fit.loss, fit.loss_zero);
        let none = fit_rows(&set, &rows, nb, 1.0).unwrap();
        assert!(none.c.iter().all(|v| *v == 0.0));
        assert!((none.loss - none.loss_zero).abs() < 1e-12 * none.loss_zero);
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let back = ObservationSet::read_csv(set.spec.clone(), buf.as_slice()).unwrap();
        assert_eq!(back.len(), set.len());
        assert_eq!(design_matrix(&basis, &back).unwrap().len(), rows.len());
    }

    #[test]
    fn rrqr_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, n) = (30, 6);
        let a: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (x, rank) = rrqr_solve(&a, m, n, &b, 1e-12).unwrap();
        assert_eq!(rank, n);
        let am = nalgebra::DMatrix::from_row_slice(m, n, &a);
        let bv = nalgebra::DVector::from_vec(b.clone());
        let xr = (am.transpose() * &am).lu().solve(&(am.transpose() * bv)).unwrap();
        for j in 0..n {
            assert!((x[j] - xr[j]).abs() < 1e-10);
        }
        // duplicated column: rank drops, residual unchanged
        let mut a2 = vec![0.0; m * (n + 1)];
        for i in 0..m {
            a2[i * (n + 1)..i * (n + 1) + n].copy_from_slice(&a[i * n..(i + 1) * n]);
            a2[i * (n + 1) + n] = a[i * n];
        }
        let (x2, r2) = rrqr_solve(&a2, m, n + 1, &b, 1e-10).unwrap();
        assert_eq!(r2, n);
        let res = |a: &[f64], x: &[f64], k: usize| (0..m).map(|i| (b[i] - (0..k).map(|j| a[i * k + j] * x[j]).sum::<f64>()).powi(2)).sum::<f64>();
        assert!((res(&a, &x, n) - res(&a2, &x2, n + 1)).abs() < 1e-10);
        assert!(matches!(
            rrqr_solve(&vec![0.0; 6], 3, 2, &[1.0, 1.0, 1.0], 1e-5),
            Err(Error::AllPivotsTruncated(_))
        ));
    }
}
