//! Experiment orchestration: configuration, MM fitting, reference relaxations,
//! convergence studies, ghost-force diagnostics and decay profiles, each
//! writing CSV tables and a `summary.json` into an output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::cb_taylor::{taylor_coefficients, virial_derivatives, FdSteps, VirialTaylor};
use crate::coupling::{
    decompose, defect_center, ghost_force_field, hybrid_energy_gfc_grad, hybrid_energy_grad, hybrid_forces, write_force_csv, HybridSpec, Region,
};
use crate::error::{Error, Result};
use crate::lattice::{apply_edge_dislocation, apply_vacancy, build_lattice, error_norm, DisplacementField, LatticeSpec, ReferenceConfig, StencilTable};
use crate::matching::{design_matrix, fit_rows, generate_observations, LossWeights, MatchErrors, MatchingSpec, ObsKind, ObservationSet};
use crate::mlip::{BasisSpec, Mlip};
use crate::predictor::{poisson_from_cb, predictor_on, slip_strain, DislocationSpec};
use crate::refmodel::{energy_difference, forces, Eam, EamParams, SiteModel, SitePotentialHandle};
use crate::solve::{loglog_slope, minimize, profile_from_values, solve_force_balance, DecayProfile, SolveReport, SolverConfig, Status};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatticeBlock {
    Triangular,
    Square,
    Cubic,
    Custom { d: usize, cell: Vec<f64> },
}

impl LatticeBlock {
    pub fn spec(&self) -> Result<LatticeSpec> {
        match self {
            LatticeBlock::Triangular => Ok(LatticeSpec::triangular()),
            LatticeBlock::Square => Ok(LatticeSpec::square()),
            LatticeBlock::Cubic => Ok(LatticeSpec::cubic()),
            LatticeBlock::Custom { d, cell } => LatticeSpec::new(*d, cell.clone()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefectBlock {
    #[default]
    None,
    Vacancy,
    EdgeDislocation {
        #[serde(default = "one")]
        b: f64,
        /// Defaults to the centre of the first lattice cell, `(a₁ + a₂)/2`.
        #[serde(default)]
        core: Option<[f64; 2]>,
        #[serde(default = "two")]
        r_hat: f64,
        /// Defaults to the isotropic reduction of the reference Cauchy–Born moduli.
        #[serde(default)]
        nu: Option<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceBlock {
    /// `params = null` selects the stress-free toy parameterisation.
    Eam {
        #[serde(default)]
        params: Option<EamParams>,
    },
}

impl Default for ReferenceBlock {
    fn default() -> Self {
        ReferenceBlock::Eam { params: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmKind {
    Taylor,
    Mlip,
}

/// MM model: exact Taylor expansion of the reference or a fitted MLIP.  Exactly
/// one of `k_e` (energy mixing) and `k_f` (force mixing) is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmBlock {
    pub kind: MmKind,
    #[serde(default)]
    pub k_e: Option<usize>,
    #[serde(default)]
    pub k_f: Option<usize>,
    #[serde(default)]
    pub virial: bool,
    #[serde(default)]
    pub basis: BasisSpec,
    #[serde(default = "rrqr_tol")]
    pub rrqr_tol: f64,
    /// Seeded coefficient perturbation scaled so that the lowest matched order
    /// (`F₁` or `E₁`) reaches this RRMSE.
    #[serde(default)]
    pub perturb_rrmse: Option<f64>,
    /// Pre-fitted MLIP file; skips fitting.
    #[serde(default)]
    pub potential: Option<PathBuf>,
    /// Energy mixing only: subtract the dead load.
    #[serde(default = "yes")]
    pub gfc: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum RmmRule {
    Fixed {
        value: f64,
    },
    /// `R_MM = c·R_QM^p`.
    Power {
        c: f64,
        p: f64,
    },
}

impl Default for RmmRule {
    fn default() -> Self {
        RmmRule::Fixed { value: 56.0 }
    }
}

impl RmmRule {
    pub fn r_mm(&self, r_qm: f64) -> f64 {
        match self {
            RmmRule::Fixed { value } => *value,
            RmmRule::Power { c, p } => c * r_qm.powf(*p),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecayBlock {
    pub width: f64,
    pub window: [f64; 2],
}

impl Default for DecayBlock {
    fn default() -> Self {
        DecayBlock {
            width: 2.0,
            window: [6.0, 40.0],
        }
    }
}

/// Pass/fail bands written into `summary.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Targets {
    pub slope: Option<[f64; 2]>,
    pub decay_slope: Option<[f64; 2]>,
    pub strain_slope: Option<[f64; 2]>,
    pub strain_gradient_slope: Option<[f64; 2]>,
    pub max_ghost: Option<f64>,
    pub ghost_ratio: Option<[f64; 2]>,
    pub gfc_residual: Option<f64>,
    pub rrmse_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub lattice: LatticeBlock,
    #[serde(default)]
    pub defect: DefectBlock,
    #[serde(default)]
    pub reference: ReferenceBlock,
    pub mm: MmBlock,
    #[serde(default = "r_dom")]
    pub r_dom: f64,
    #[serde(default = "schedule")]
    pub schedule: Vec<f64>,
    #[serde(default = "buffer")]
    pub buffer: f64,
    #[serde(default)]
    pub r_mm: RmmRule,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub decay: DecayBlock,
    #[serde(default)]
    pub targets: Targets,
    #[serde(default)]
    pub seed: u64,
    /// Where reference solutions are cached (default: the output directory).
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn yes() -> bool {
    true
}
fn rrqr_tol() -> f64 {
    1e-5
}
fn r_dom() -> f64 {
    64.0
}
fn buffer() -> f64 {
    4.0
}
fn schedule() -> Vec<f64> {
    vec![4.0, 6.0, 8.0, 12.0, 16.0]
}

/// Coupling scheme and its matching order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    EnergyMixing(usize),
    ForceMixing(usize),
}

impl Scheme {
    pub fn tag(self) -> String {
        match self {
            Scheme::EnergyMixing(k) => format!("energy_mixing_ke{k}"),
            Scheme::ForceMixing(k) => format!("force_mixing_kf{k}"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn scheme(&self) -> Result<Scheme> {
        match (self.mm.k_e, self.mm.k_f) {
            (Some(k), None) => Ok(Scheme::EnergyMixing(k)),
            (None, Some(k)) => Ok(Scheme::ForceMixing(k)),
            _ => Err(Error::InvalidInput("exactly one of mm.k_e and mm.k_f must be set".into())),
        }
    }

    pub fn weights(&self) -> Result<LossWeights> {
        match self.scheme()? {
            Scheme::EnergyMixing(k) => LossWeights::energy_mixing(k, self.mm.virial),
            Scheme::ForceMixing(k) => LossWeights::force_mixing(k, self.mm.virial),
        }
    }

    pub fn reference_model(&self) -> Result<Arc<dyn SiteModel>> {
        let spec = self.lattice.spec()?;
        match &self.reference {
            ReferenceBlock::Eam { params } => {
                let p = match params {
                    Some(p) => {
                        p.validate()?;
                        p.clone()
                    }
                    None => EamParams::stress_free(&spec)?,
                };
                Ok(Arc::new(Eam::new(p, spec.d)))
            }
        }
    }

    /// Largest `R_MM` over the schedule.
    pub fn r_mm_max(&self) -> f64 {
        self.schedule.iter().map(|&r| self.r_mm.r_mm(r)).fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        self.scheme()?;
        self.weights()?;
        self.lattice.spec()?;
        if self.schedule.is_empty() || self.schedule.windows(2).any(|w| !(w[1] > w[0])) || self.schedule[0] <= 0.0 {
            return Err(Error::InvalidInput("schedule must be nonempty, positive and strictly increasing".into()));
        }
        if !(self.solver.tol > 0.0) {
            return Err(Error::InvalidInput("solver tolerance must be positive".into()));
        }
        if !(self.decay.width > 0.0) || !(self.decay.window[1] > self.decay.window[0]) {
            return Err(Error::InvalidInput("decay window must be increasing with a positive annulus width".into()));
        }
        for &r in &self.schedule {
            let r_mm = self.r_mm.r_mm(r);
            if !(r + self.buffer <= r_mm && r_mm <= self.r_dom) {
                return Err(Error::RadiusOrdering(format!(
                    "R_QM {r} + buffer {} ≤ R_MM {r_mm} ≤ R_DOM {} violated",
                    self.buffer, self.r_dom
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over everything that determines the reference solution.
    pub fn reference_hash(&self) -> String {
        let key = json!({
            "lattice": self.lattice,
            "defect": self.defect,
            "reference": self.reference,
            "r_dom": self.r_dom,
            "r_free": self.r_mm_max(),
            "solver": self.solver,
        });
        let digest = Sha256::digest(key.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Defective configuration, predictor, centre and reference model of an experiment.
#[derive(Clone)]
pub struct Setup {
    pub config: ReferenceConfig,
    pub u0: Vec<f64>,
    pub center: Vec<f64>,
    pub reference: Arc<dyn SiteModel>,
    pub dislocation: Option<DislocationSpec>,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let spec = cfg.lattice.spec()?;
        let reference = cfg.reference_model()?;
        let hom = build_lattice(&spec, cfg.r_dom)?;
        let (config, dislocation) = match &cfg.defect {
            DefectBlock::None => (hom, None),
            DefectBlock::Vacancy => (apply_vacancy(&hom, &vec![0.0; spec.d])?, None),
            DefectBlock::EdgeDislocation { b, core, r_hat, nu } => {
                if spec.d != 2 {
                    return Err(Error::InvalidInput("edge dislocations require d = 2".into()));
                }
                let core = core.unwrap_or([0.5 * (spec.entry(0, 0) + spec.entry(0, 1)), 0.5 * (spec.entry(1, 0) + spec.entry(1, 1))]);
                let nu = match nu {
                    Some(v) => *v,
                    None => {
                        let cb = virial_derivatives(reference.as_ref(), &spec, 2, &FdSteps::default())?;
                        poisson_from_cb(cb.order(2).expect("order 2 computed"), 2)?
                    }
                };
                let dis = DislocationSpec::new(*b, core, *r_hat, nu)?;
                (apply_edge_dislocation(&hom, &dis)?, Some(dis))
            }
        };
        let u0 = match &dislocation {
            Some(dis) => predictor_on(&config, dis)?,
            None => vec![0.0; config.len() * spec.d],
        };
        let center = defect_center(&config);
        Ok(Setup {
            config,
            u0,
            center,
            reference,
            dislocation,
        })
    }

    pub fn distance(&self, i: usize) -> f64 {
        self.config.pos(i).iter().zip(&self.center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }

    /// Per-site mask of `|ℓ − centre| ≤ r`.
    pub fn ball(&self, r: f64) -> Vec<bool> {
        (0..self.config.len()).map(|i| self.distance(i) <= r).collect()
    }
}

fn per_var(mask: &[bool], d: usize) -> Vec<bool> {
    mask.iter().flat_map(|&m| std::iter::repeat_n(m, d)).collect()
}

fn within(v: Option<f64>, band: Option<[f64; 2]>) -> Option<bool> {
    band.map(|[lo, hi]| v.is_some_and(|v| v >= lo && v <= hi))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

/// Fit diagnostics (one row per matched order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub scheme: String,
    pub virial: bool,
    pub n_obs: usize,
    pub n_basis: usize,
    pub rank: usize,
    pub loss: f64,
    /// Errors of the model actually used (after any perturbation).
    pub errors: MatchErrors,
    /// Errors of the unperturbed least-squares fit.
    pub fit_errors: MatchErrors,
    pub perturbation_scale: Option<f64>,
    pub time_s: f64,
}

/// Seeded relative perturbation `c + s·(c ∘ ξ)`, `ξ ~ U(−1, 1)`, with `s` chosen by
/// bisection so that the `(kind, order)` RRMSE equals `target`.
pub fn perturb_coefficients(set: &ObservationSet, rows: &[f64], c: &[f64], group: (ObsKind, usize), target: f64, seed: u64) -> Result<(Vec<f64>, f64)> {
    let nb = c.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = c.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    let dir: Vec<f64> = c
        .iter()
        .map(|v| rng.random_range(-1.0..1.0) * if *v != 0.0 { *v } else { 1e-3 * scale })
        .collect();
    let apply = |v: &[f64]| -> Vec<f64> {
        (0..set.len())
            .map(|i| rows[i * nb..(i + 1) * nb].iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    };
    let (p0, dp) = (apply(c), apply(&dir));
    let rrmse = |s: f64| -> Result<f64> {
        let pred: Vec<f64> = p0.iter().zip(&dp).map(|(a, b)| a + s * b).collect();
        let e = MatchErrors::compare(set, &pred)?;
        e.get(group.0, group.1)
            .map(|e| e.rrmse)
            .ok_or_else(|| Error::InvalidInput(format!("no {:?}{} observations to perturb", group.0, group.1)))
    };
    if rrmse(0.0)? >= target {
        return Ok((c.to_vec(), 0.0));
    }
    let (mut lo, mut hi) = (0.0, 1e-6);
    let mut k = 0;
    while rrmse(hi)? < target {
        lo = hi;
        hi *= 2.0;
        k += 1;
        if k > 200 {
            return Err(Error::Solver("perturbation cannot reach the requested RRMSE".into()));
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if rrmse(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = 0.5 * (lo + hi);
    Ok((c.iter().zip(&dir).map(|(a, b)| a + s * b).collect(), s))
}

/// Generates observations, fits the MLIP of `cfg.mm` and applies the optional perturbation.
pub fn fit_mlip(cfg: &ExperimentConfig, reference: &dyn SiteModel) -> Result<(Mlip, FitReport, ObservationSet)> {
    let t = Instant::now();
    let scheme = cfg.scheme()?;
    let spec = MatchingSpec::new(cfg.lattice.spec()?, cfg.weights()?, reference.cutoff())?;
    let set = generate_observations(reference, &spec)?;
    let rows = design_matrix(&cfg.mm.basis, &set)?;
    let nb = cfg.mm.basis.n_basis();
    let fit = fit_rows(&set, &rows, nb, cfg.mm.rrqr_tol)?;
    let (c, scale) = match cfg.mm.perturb_rrmse {
        Some(target) => {
            let group = match scheme {
                Scheme::ForceMixing(_) => (ObsKind::F, 1),
                Scheme::EnergyMixing(_) => (ObsKind::E, 1),
            };
            let (c, s) = perturb_coefficients(&set, &rows, &fit.c, group, target, cfg.seed)?;
            (c, Some(s))
        }
        None => (fit.c.clone(), None),
    };
    let pred: Vec<f64> = (0..set.len())
        .map(|i| rows[i * nb..(i + 1) * nb].iter().zip(&c).map(|(a, b)| a * b).sum())
        .collect();
    let errors = MatchErrors::compare(&set, &pred)?;
    let mlip = Mlip::new(cfg.mm.basis.clone(), c)?;
    let report = FitReport {
        scheme: scheme.tag(),
        virial: cfg.mm.virial,
        n_obs: fit.n_obs,
        n_basis: nb,
        rank: fit.rank,
        loss: fit.loss,
        errors,
        fit_errors: fit.errors,
        perturbation_scale: scale,
        time_s: t.elapsed().as_secs_f64(),
    };
    Ok((mlip, report, set))
}

/// The MM site model of an experiment (with its fit report when fitted).
pub fn build_mm(cfg: &ExperimentConfig, reference: &dyn SiteModel) -> Result<(Arc<dyn SiteModel>, Option<FitReport>)> {
    let spec = cfg.lattice.spec()?;
    let steps = FdSteps::default();
    let r = reference.cutoff();
    match cfg.mm.kind {
        MmKind::Taylor => {
            let model: Arc<dyn SiteModel> = match (cfg.scheme()?, cfg.mm.virial) {
                // forces of T_{K+1}V are the K-th order force expansion
                (Scheme::ForceMixing(k), false) => Arc::new(taylor_coefficients(reference, &spec, k + 1, r, &steps)?),
                (Scheme::EnergyMixing(k), false) => Arc::new(taylor_coefficients(reference, &spec, k, r, &steps)?),
                (Scheme::ForceMixing(1), true) | (Scheme::EnergyMixing(2), true) => {
                    let cb = virial_derivatives(reference, &spec, 3, &steps)?;
                    Arc::new(VirialTaylor::new(taylor_coefficients(reference, &spec, 2, r, &steps)?, &cb)?)
                }
                (Scheme::ForceMixing(k) | Scheme::EnergyMixing(k), true) => {
                    return Err(Error::UnsupportedOrder {
                        kind: "virial-matched Taylor MM",
                        order: k,
                    })
                }
            };
            Ok((model, None))
        }
        MmKind::Mlip => match &cfg.mm.potential {
            Some(path) => {
                let v: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
                Ok((Arc::new(Mlip::from_json(&v)?), None))
            }
            None => {
                let (m, report, _) = fit_mlip(cfg, reference)?;
                Ok((Arc::new(m), Some(report)))
            }
        },
    }
}

/// Fits the MLIP; writes `potential.json`, `observations.csv`, `fit_report.json`, `summary.json`.
pub fn run_fit(cfg: &ExperimentConfig, out: &Path) -> Result<FitReport> {
    if cfg.mm.kind != MmKind::Mlip {
        return Err(Error::InvalidInput("fit requires an mlip MM block".into()));
    }
    fs::create_dir_all(out)?;
    let reference = cfg.reference_model()?;
    let (mlip, report, set) = fit_mlip(cfg, reference.as_ref())?;
    let provenance = json!({ "name": cfg.name, "scheme": report.scheme, "virial": cfg.mm.virial, "seed": cfg.seed, "perturb_rrmse": cfg.mm.perturb_rrmse });
    write_json(&out.join("potential.json"), &mlip.to_json(provenance))?;
    set.write_csv(fs::File::create(out.join("observations.csv"))?)?;
    write_json(&out.join("fit_report.json"), &report)?;
    let pass = cfg.targets.rrmse_max.map(|m| {
        report
            .errors
            .entries
            .iter()
            .filter(|e| e.kind != ObsKind::V || cfg.mm.virial)
            .all(|e| e.rrmse < m)
    });
    write_json(
        &out.join("summary.json"),
        &json!({ "command": "fit", "name": cfg.name, "report": report, "pass": pass }),
    )?;
    Ok(report)
}

/// Equilibrium `ū` of the pure reference model on the free ball `|ℓ| ≤ max R_MM`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSolution {
    pub hash: String,
    pub u: Vec<f64>,
    pub status: Status,
    pub iterations: usize,
    pub energy: f64,
    pub gradnorm: f64,
    #[serde(skip)]
    pub from_cache: bool,
}

fn reference_solution(cfg: &ExperimentConfig, setup: &Setup, cache_dir: &Path, log: Option<&Path>) -> Result<ReferenceSolution> {
    let hash = cfg.reference_hash();
    let path = cache_dir.join(format!("reference_{}.json", &hash[..16]));
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(mut sol) = serde_json::from_str::<ReferenceSolution>(&text) {
            if sol.hash == hash && sol.u.len() == setup.u0.len() {
                sol.from_cache = true;
                return Ok(sol);
            }
        }
    }
    let d = setup.config.d();
    let h = SitePotentialHandle::new(setup.reference.clone(), &setup.config, None)?;
    let free = per_var(&setup.ball(cfg.r_mm_max()), d);
    let u0 = &setup.u0;
    let mut energy = |x: &[f64], g: &mut [f64]| -> Result<f64> {
        let f = forces(&h, u0, x)?;
        g.iter_mut().zip(&f).for_each(|(a, b)| *a = -b);
        energy_difference(&h, u0, x)
    };
    let rep = minimize(&mut energy, &vec![0.0; u0.len()], &free, &cfg.solver)?;
    if let Some(p) = log {
        rep.write_log(fs::File::create(p)?)?;
    }
    let sol = ReferenceSolution {
        hash,
        u: rep.x,
        status: rep.status,
        iterations: rep.iterations,
        energy: rep.value,
        gradnorm: rep.gradnorm,
        from_cache: false,
    };
    fs::create_dir_all(cache_dir)?;
    write_json(&path, &sol)?;
    Ok(sol)
}

/// Relaxes the defect under the reference model (cached by configuration hash).
pub fn run_reference(cfg: &ExperimentConfig, out: &Path) -> Result<ReferenceSolution> {
    fs::create_dir_all(out)?;
    let setup = Setup::new(cfg)?;
    let cache = cfg.cache_dir.clone().unwrap_or_else(|| out.to_path_buf());
    let sol = reference_solution(cfg, &setup, &cache, Some(&out.join("reference_log.csv")))?;
    write_json(
        &out.join("summary.json"),
        &json!({ "command": "reference", "name": cfg.name, "hash": sol.hash, "status": sol.status, "iterations": sol.iterations,
                 "energy": sol.energy, "gradnorm": sol.gradnorm, "from_cache": sol.from_cache, "sites": setup.config.len(),
                 "pass": sol.status == Status::Converged }),
    )?;
    Ok(sol)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvRow {
    pub r_qm: f64,
    pub r_mm: f64,
    pub n_qm: usize,
    pub n_mm: usize,
    /// `‖Dū − Dū^H‖` on the free sites; `None` when the row failed.
    pub error: Option<f64>,
    pub status: String,
    pub iterations: usize,
    pub inner: usize,
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub scheme: String,
    pub rows: Vec<ConvRow>,
    pub slope: Option<f64>,
    pub slope_se: Option<f64>,
    pub all_converged: bool,
    pub fit: Option<FitReport>,
}

impl ConvergenceReport {
    pub fn errors(&self) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r.error).collect()
    }

    /// Writes `r_qm,r_mm,n_qm,n_mm,error,status,iterations,inner` (no timings, so reruns are byte-identical).
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["r_qm", "r_mm", "n_qm", "n_mm", "error", "status", "iterations", "inner"])?;
        for r in &self.rows {
            wr.write_record([
                r.r_qm.to_string(),
                r.r_mm.to_string(),
                r.n_qm.to_string(),
                r.n_mm.to_string(),
                r.error.map_or(String::new(), |e| format!("{e:e}")),
                r.status.clone(),
                r.iterations.to_string(),
                r.inner.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Solves the hybrid problem of one decomposition.
pub fn solve_hybrid(spec: &HybridSpec, scheme: Scheme, gfc: bool, solver: &SolverConfig) -> Result<SolveReport> {
    let free = per_var(&spec.free_mask(), spec.config.d());
    let z = vec![0.0; spec.n_vars()];
    match scheme {
        Scheme::EnergyMixing(_) if gfc => minimize(&mut |x: &[f64], g: &mut [f64]| hybrid_energy_gfc_grad(spec, x, g), &z, &free, solver),
        Scheme::EnergyMixing(_) => minimize(&mut |x: &[f64], g: &mut [f64]| hybrid_energy_grad(spec, x, g), &z, &free, solver),
        Scheme::ForceMixing(_) => {
            let mut f = |x: &[f64], o: &mut [f64]| -> Result<()> {
                o.copy_from_slice(&hybrid_forces(spec, x)?);
                Ok(())
            };
            solve_force_balance(&mut f, &z, &free, solver)
        }
    }
}

/// Convergence study over the `R_QM` schedule against the cached reference solution.
pub fn run_converge(cfg: &ExperimentConfig, out: &Path) -> Result<ConvergenceReport> {
    fs::create_dir_all(out)?;
    let setup = Setup::new(cfg)?;
    let scheme = cfg.scheme()?;
    let cache = cfg.cache_dir.clone().unwrap_or_else(|| out.to_path_buf());
    let reference = reference_solution(cfg, &setup, &cache, None)?;
    let (mm, fit) = build_mm(cfg, setup.reference.as_ref())?;
    let d = setup.config.d();
    let ubar = DisplacementField::from_vec(d, reference.u.clone());
    let mut rows = Vec::new();
    for &r_qm in &cfg.schedule {
        let t = Instant::now();
        let r_mm = cfg.r_mm.r_mm(r_qm);
        let row = (|| -> Result<ConvRow> {
            let dec = decompose(&setup.config, r_qm, cfg.buffer, r_mm)?;
            let (n_qm, n_mm) = (dec.count(Region::Qm), dec.count(Region::Mm));
            let spec = HybridSpec::new(&setup.config, dec, setup.reference.clone(), mm.clone(), Some(setup.u0.clone()))?;
            let rep = solve_hybrid(&spec, scheme, cfg.mm.gfc, &cfg.solver)?;
            rep.write_log(fs::File::create(out.join(format!("log_rqm_{r_qm}.csv")))?)?;
            let mask = spec.free_mask();
            let error = if rep.converged() {
                Some(error_norm(&setup.config, &ubar, &DisplacementField::from_vec(d, rep.x.clone()), Some(&mask))?)
            } else {
                None
            };
            Ok(ConvRow {
                r_qm,
                r_mm,
                n_qm,
                n_mm,
                error,
                status: format!("{:?}", rep.status),
                iterations: rep.iterations,
                inner: rep.inner,
                wall_s: 0.0,
            })
        })();
        let mut row = row.unwrap_or_else(|e| ConvRow {
            r_qm,
            r_mm,
            n_qm: 0,
            n_mm: 0,
            error: None,
            status: format!("error: {e}"),
            iterations: 0,
            inner: 0,
            wall_s: 0.0,
        });
        row.wall_s = t.elapsed().as_secs_f64();
        rows.push(row);
    }
    let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.error.map(|e| (r.r_qm, e))).collect();
    let fitted = if pts.len() >= 4 { loglog_slope(&pts) } else { None };
    let report = ConvergenceReport {
        scheme: scheme.tag(),
        all_converged: rows.iter().all(|r| r.error.is_some()),
        rows,
        slope: fitted.map(|f| f.0),
        slope_se: fitted.map(|f| f.1),
        fit,
    };
    report.write_csv(fs::File::create(out.join("converge.csv"))?)?;
    let pass = within(report.slope, cfg.targets.slope);
    write_json(
        &out.join("summary.json"),
        &json!({ "command": "converge", "name": cfg.name, "report": report, "reference_status": reference.status, "pass": pass }),
    )?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GhostReport {
    pub r_qm: f64,
    /// Largest `|−δE^H(0)|` per site on the defect-free lattice.
    pub max_ghost: f64,
    /// Largest ghost force farther than `3·r_cut` from the QM/MM interface.
    pub max_far_ghost: f64,
    /// Largest distance to the interface of a site with ghost force above `10⁻³·max`.
    pub support_halfwidth: f64,
    /// Largest pre-relaxation reference force on the defect configuration.
    pub core_force: Option<f64>,
    pub ratio: Option<f64>,
    /// `‖δE^GFC(0)‖_∞` over the `β = 1` sites and over all free sites.
    pub gfc_residual: f64,
    pub gfc_residual_all: f64,
    pub patch_gfc_iterations: usize,
    pub patch_gfc_max_u: f64,
    pub patch_uncorrected_max_u: f64,
    pub patch_uncorrected_status: Status,
    pub fit: Option<FitReport>,
}

/// Ghost forces of the energy-mixing functional at `u = 0` and the GFC patch test.
pub fn run_ghostforce(cfg: &ExperimentConfig, out: &Path) -> Result<GhostReport> {
    fs::create_dir_all(out)?;
    let setup = Setup::new(cfg)?;
    let (mm, fit) = build_mm(cfg, setup.reference.as_ref())?;
    let spec = cfg.lattice.spec()?;
    let d = spec.d;
    let hom = build_lattice(&spec, cfg.r_dom)?;
    let r_qm = cfg.schedule[0];
    let dec = decompose(&hom, r_qm, cfg.buffer, cfg.r_mm.r_mm(r_qm))?;
    dec.write_csv(&hom, fs::File::create(out.join("regions.csv"))?)?;
    let hs = HybridSpec::new(&hom, dec.clone(), setup.reference.clone(), mm, None)?;
    let ghost = ghost_force_field(&hs)?;
    write_force_csv(&hom, &ghost, fs::File::create(out.join("ghost_forces.csv"))?)?;
    let site_norm = |f: &[f64], i: usize| f[i * d..i * d + d].iter().map(|v| v * v).sum::<f64>().sqrt();
    let gap = |i: usize| (hom.norm(i) - r_qm).abs();
    let max_ghost = (0..hom.len()).map(|i| site_norm(&ghost, i)).fold(0.0, f64::max);
    let r_cut = setup.reference.cutoff();
    let max_far_ghost = (0..hom.len())
        .filter(|&i| gap(i) > 3.0 * r_cut)
        .map(|i| site_norm(&ghost, i))
        .fold(0.0, f64::max);
    let support_halfwidth = (0..hom.len()).filter(|&i| site_norm(&ghost, i) > 1e-3 * max_ghost).map(gap).fold(0.0, f64::max);
    // GFC residual and patch test
    let free = per_var(&hs.free_mask(), d);
    let z = vec![0.0; hs.n_vars()];
    let mut g = vec![0.0; hs.n_vars()];
    hybrid_energy_gfc_grad(&hs, &z, &mut g)?;
    let gfc_residual = (0..g.len())
        .filter(|&k| free[k] && hs.beta[k / d] == 1.0)
        .map(|k| g[k].abs())
        .fold(0.0, f64::max);
    let gfc_residual_all = (0..g.len()).filter(|&k| free[k]).map(|k| g[k].abs()).fold(0.0, f64::max);
    let sup = |v: &[f64]| v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let patch = solve_hybrid(&hs, Scheme::EnergyMixing(0), true, &cfg.solver)?;
    let drift = solve_hybrid(&hs, Scheme::EnergyMixing(0), false, &cfg.solver)?;
    let core_force = match cfg.defect {
        DefectBlock::None => None,
        _ => {
            let h = SitePotentialHandle::new(setup.reference.clone(), &setup.config, None)?;
            let f = forces(&h, &setup.u0, &vec![0.0; setup.u0.len()])?;
            Some((0..setup.config.len()).map(|i| site_norm(&f, i)).fold(0.0, f64::max))
        }
    };
    let report = GhostReport {
        r_qm,
        max_ghost,
        max_far_ghost,
        support_halfwidth,
        ratio: core_force.map(|c| max_ghost / c),
        core_force,
        gfc_residual,
        gfc_residual_all,
        patch_gfc_iterations: patch.iterations,
        patch_gfc_max_u: sup(&patch.x),
        patch_uncorrected_max_u: sup(&drift.x),
        patch_uncorrected_status: drift.status,
        fit,
    };
    let t = &cfg.targets;
    let checks = [
        t.max_ghost.map(|m| report.max_ghost < m),
        within(report.ratio, t.ghost_ratio),
        t.gfc_residual.map(|m| report.gfc_residual < m),
    ];
    let pass = if checks.iter().all(|c| c.is_none()) {
        None
    } else {
        Some(checks.iter().flatten().all(|c| *c))
    };
    write_json(
        &out.join("summary.json"),
        &json!({ "command": "ghostforce", "name": cfg.name, "report": report, "pass": pass }),
    )?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub displacement: DecayProfile,
    /// Predictor strain `|e(ℓ)|` and its difference `|De(ℓ)|` (dislocations only).
    pub strain: Option<DecayProfile>,
    pub strain_gradient: Option<DecayProfile>,
    pub reference_status: Status,
}

/// `(|ℓ − centre|, |e(ℓ)|, |De(ℓ)|)` of the slip-corrected predictor strain over the
/// nearest-neighbour labels, for sites whose full stencil (and its neighbours') is present.
pub fn predictor_strain_norms(setup: &Setup) -> Result<Vec<(f64, f64, f64)>> {
    let table = StencilTable::build(&setup.config, 1.0 + 1e-9, None)?;
    let m = table.n_labels();
    let field = slip_strain(&table, &setup.u0, m);
    let d = setup.config.d();
    let e = |i: usize| &field.strain[i * m * d..(i + 1) * m * d];
    let mut out = Vec::new();
    for i in 0..setup.config.len() {
        let ei = e(i);
        if ei.iter().any(|v| v.is_nan()) {
            continue;
        }
        let mut de2 = 0.0;
        let mut ok = true;
        for s in 0..m {
            match table.neighbor(i, s) {
                Some(j) if !e(j).iter().any(|v| v.is_nan()) => de2 += e(j).iter().zip(ei).map(|(a, b)| (a - b).powi(2)).sum::<f64>(),
                _ => ok = false,
            }
        }
        if ok {
            out.push((setup.distance(i), ei.iter().map(|v| v * v).sum::<f64>().sqrt(), de2.sqrt()));
        }
    }
    Ok(out)
}

/// Decay of the reference equilibrium (and, for dislocations, of the predictor strain).
pub fn run_decay(cfg: &ExperimentConfig, out: &Path) -> Result<DecayReport> {
    fs::create_dir_all(out)?;
    let setup = Setup::new(cfg)?;
    let cache = cfg.cache_dir.clone().unwrap_or_else(|| out.to_path_buf());
    let reference = reference_solution(cfg, &setup, &cache, None)?;
    let window = (cfg.decay.window[0], cfg.decay.window[1]);
    let free = setup.ball(cfg.r_mm_max());
    let du: Vec<(f64, f64)> = (0..setup.config.len())
        .filter(|&i| free[i])
        .map(|i| (setup.distance(i), crate::lattice::stencil_norm_nn(&setup.config, &reference.u, i)))
        .collect();
    let displacement = profile_from_values(&du, cfg.decay.width, window)?;
    let (mut strain, mut strain_gradient) = (None, None);
    if setup.dislocation.is_some() {
        let rows = predictor_strain_norms(&setup)?;
        strain = Some(profile_from_values(
            &rows.iter().map(|r| (r.0, r.1)).collect::<Vec<_>>(),
            cfg.decay.width,
            window,
        )?);
        strain_gradient = Some(profile_from_values(
            &rows.iter().map(|r| (r.0, r.2)).collect::<Vec<_>>(),
            cfg.decay.width,
            window,
        )?);
    }
    let mut wr = csv::Writer::from_writer(fs::File::create(out.join("decay.csv"))?);
    wr.write_record(["quantity", "radius", "max"])?;
    for (name, p) in [("du", Some(&displacement)), ("e", strain.as_ref()), ("de", strain_gradient.as_ref())] {
        for (r, v) in p.map(|p| p.rows.as_slice()).unwrap_or(&[]) {
            wr.write_record([name.to_string(), format!("{r:e}"), format!("{v:e}")])?;
        }
    }
    wr.flush()?;
    let report = DecayReport {
        displacement,
        strain,
        strain_gradient,
        reference_status: reference.status,
    };
    let t = &cfg.targets;
    let checks = [
        within(report.displacement.slope, t.decay_slope),
        report.strain.as_ref().and_then(|p| within(p.slope, t.strain_slope)),
        report.strain_gradient.as_ref().and_then(|p| within(p.slope, t.strain_gradient_slope)),
    ];
    let pass = if checks.iter().all(|c| c.is_none()) {
        None
    } else {
        Some(checks.iter().flatten().all(|c| *c))
    };
    write_json(
        &out.join("summary.json"),
        &json!({ "command": "decay", "name": cfg.name, "report": report, "pass": pass }),
    )?;
    Ok(report)
}
