//! Randomised property checks shared by the proptest suite and the acceptance runner.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use qmmm::lattice::{build_lattice, check_admissible, global_norm_nn, global_norm_weighted, LatticeSpec, ReferenceConfig};
use qmmm::mlip::{BasisSpec, Descriptor, Mlip};
use qmmm::refmodel::{Eam, EamParams, SiteModel};

type Check = std::result::Result<(), TestCaseError>;

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Check) -> Result<(), String> {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
    .run(&strategy, test)
    .map_err(|e| e.to_string())
}

/// A 2D stencil: labels on the triangular lattice within the cutoff, small random displacements.
fn stencil() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    let labels: Vec<[f64; 2]> = {
        let spec = LatticeSpec::triangular();
        spec.enumerate_ball(2.4)
            .unwrap()
            .iter()
            .filter(|k| **k != [0, 0, 0])
            .map(|k| {
                let p = spec.point_vec(k);
                [p[0], p[1]]
            })
            .collect()
    };
    let n = labels.len();
    (
        proptest::sample::subsequence((0..n).collect::<Vec<_>>(), 2..=n),
        proptest::collection::vec(-0.08f64..0.08, 2 * n),
    )
        .prop_map(move |(idx, g)| {
            let rho = idx.iter().flat_map(|&i| labels[i]).collect();
            let g = idx.iter().flat_map(|&i| [g[2 * i], g[2 * i + 1]]).collect();
            (rho, g)
        })
}

fn isometry(rho: &[f64], g: &[f64], th: f64, refl: bool) -> Vec<f64> {
    let (c, s) = (th.cos(), th.sin());
    (0..rho.len() / 2)
        .flat_map(|j| {
            let mut y = [rho[2 * j] + g[2 * j], rho[2 * j + 1] + g[2 * j + 1]];
            if refl {
                y[1] = -y[1];
            }
            [c * y[0] - s * y[1] - rho[2 * j], s * y[0] + c * y[1] - rho[2 * j + 1]]
        })
        .collect()
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

fn models() -> Vec<Box<dyn SiteModel>> {
    let spec = LatticeSpec::triangular();
    let basis = BasisSpec::default();
    let c = (0..basis.n_basis()).map(|k| ((3 * k) as f64).sin()).collect();
    vec![
        Box::new(Eam::new(EamParams::stress_free(&spec).unwrap(), 2)),
        Box::new(Mlip::new(basis, c).unwrap()),
    ]
}

/// Brute-force `‖Du‖_N`: pairs whose reference separation is `±a₁`, `±a₂` (`±a₃`), found by comparing positions.
fn brute_nn(c: &ReferenceConfig, u: &[f64]) -> f64 {
    let d = c.d();
    let gens: Vec<Vec<f64>> = (0..d).map(|j| (0..d).map(|i| c.spec.entry(i, j)).collect()).collect();
    let mut acc = 0.0;
    for i in 0..c.len() {
        for j in 0..c.len() {
            let dx: Vec<f64> = (0..d).map(|a| c.pos(j)[a] - c.pos(i)[a]).collect();
            let is_nn = gens
                .iter()
                .any(|gv| (0..d).all(|a| (dx[a] - gv[a]).abs() < 1e-9) || (0..d).all(|a| (dx[a] + gv[a]).abs() < 1e-9));
            if is_nn {
                acc += (0..d).map(|a| (u[j * d + a] - u[i * d + a]).powi(2)).sum::<f64>();
            }
        }
    }
    acc.sqrt()
}

fn brute_weighted(c: &ReferenceConfig, u: &[f64], gamma: f64) -> f64 {
    let d = c.d();
    let mut acc = 0.0;
    for i in 0..c.len() {
        for j in 0..c.len() {
            if i != j {
                let r = (0..d).map(|a| (c.pos(j)[a] - c.pos(i)[a]).powi(2)).sum::<f64>().sqrt();
                acc += (-2.0 * gamma * r).exp() * (0..d).map(|a| (u[j * d + a] - u[i * d + a]).powi(2)).sum::<f64>();
            }
        }
    }
    acc.sqrt()
}

fn small_config() -> impl Strategy<Value = ReferenceConfig> {
    (
        prop_oneof![Just(LatticeSpec::triangular()), Just(LatticeSpec::square()), Just(LatticeSpec::cubic())],
        1.0f64..7.0,
    )
        .prop_map(|(spec, r)| {
            let r = if spec.d == 3 { r.min(3.5) } else { r };
            build_lattice(&spec, r).unwrap()
        })
}

fn brute_admissible(c: &ReferenceConfig, y: &[f64], m: f64) -> bool {
    let d = c.d();
    (0..c.len()).all(|i| {
        (0..c.len()).filter(|&j| j != i).all(|j| {
            let dy = (0..d).map(|a| (y[i * d + a] - y[j * d + a]).powi(2)).sum::<f64>().sqrt();
            let dx = (0..d).map(|a| (c.pos(i)[a] - c.pos(j)[a]).powi(2)).sum::<f64>().sqrt();
            dy > m * dx
        })
    })
}

fn features(rho: &[f64], g: &[f64], p: &[bool]) -> Vec<f64> {
    let desc = Descriptor::new(BasisSpec::default()).unwrap();
    let mut f = vec![0.0; desc.n_basis()];
    desc.features(rho, g, p, &mut f).unwrap();
    f
}

/// Site energies (EAM, MLIP) and descriptors under rotations and reflections of the stencil.
pub fn isometry_invariance(cases: u32) -> Result<(), String> {
    run(cases, (stencil(), 0.0f64..std::f64::consts::TAU, any::<bool>()), |((rho, g), th, refl)| {
        let p = vec![true; rho.len() / 2];
        let g2 = isometry(&rho, &g, th, refl);
        for m in models() {
            prop_assert!(close(m.energy(&rho, &g, &p).unwrap(), m.energy(&rho, &g2, &p).unwrap(), 1e-12));
        }
        for (a, b) in features(&rho, &g, &p).iter().zip(&features(&rho, &g2, &p)) {
            prop_assert!(close(*a, *b, 1e-12), "{a} vs {b}");
        }
        Ok(())
    })
}

/// Site energies and descriptors under reordering of the stencil slots.
pub fn permutation_invariance(cases: u32) -> Result<(), String> {
    run(
        cases,
        stencil().prop_flat_map(|(rho, g)| {
            let n = rho.len() / 2;
            (Just(rho), Just(g), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
        }),
        |(rho, g, perm)| {
            let pick = |v: &[f64]| perm.iter().flat_map(|&j| [v[2 * j], v[2 * j + 1]]).collect::<Vec<_>>();
            let (rho2, g2) = (pick(&rho), pick(&g));
            let p = vec![true; perm.len()];
            for m in models() {
                prop_assert!(close(m.energy(&rho, &g, &p).unwrap(), m.energy(&rho2, &g2, &p).unwrap(), 1e-13));
            }
            for (a, b) in features(&rho, &g, &p).iter().zip(&features(&rho2, &g2, &p)) {
                prop_assert!(close(*a, *b, 1e-13));
            }
            Ok(())
        },
    )
}

/// Nearest-neighbour and weighted norms against double-loop sums on configurations up to 200 sites.
pub fn norm_equivalence(cases: u32) -> Result<(), String> {
    run(cases, (small_config(), any::<u64>(), 0.5f64..3.0), |(c, seed, gamma)| {
        let u: Vec<f64> = (0..c.len() * c.d()).map(|k| (seed as f64 * 1e-9 + k as f64 * 0.7311).sin() * 0.3).collect();
        prop_assert!(c.len() <= 200);
        let a = global_norm_nn(&c, &u, None);
        prop_assert!(close(a, brute_nn(&c, &u), 1e-12), "{a} vs {}", brute_nn(&c, &u));
        let w = global_norm_weighted(&c, &u, gamma).unwrap();
        prop_assert!(close(w, brute_weighted(&c, &u, gamma), 1e-12));
        Ok(())
    })
}

/// `check_admissible` against an all-pairs oracle, with one atom optionally pulled onto another.
pub fn admissibility(cases: u32) -> Result<(), String> {
    run(
        cases,
        (small_config(), 0.0f64..0.6, 0.05f64..0.95, any::<u64>(), any::<bool>()),
        |(c, amp, m, seed, squash)| {
            let d = c.d();
            let mut y: Vec<f64> = (0..c.len() * d).map(|k| c.x[k] + amp * (seed as f64 * 1e-7 + k as f64 * 1.618).sin()).collect();
            if squash && c.len() > 1 {
                let (i, j) = ((seed % c.len() as u64) as usize, ((seed / 7 + 1) % c.len() as u64) as usize);
                if i != j {
                    for a in 0..d {
                        y[i * d + a] = y[j * d + a] + 0.1 * (y[i * d + a] - y[j * d + a]);
                    }
                }
            }
            prop_assert_eq!(check_admissible(&c, &y, m), brute_admissible(&c, &y, m));
            Ok(())
        },
    )
}

/// Same oracle on a configuration large enough (> 2000 sites) to take the pruned pair search.
pub fn admissibility_pruned(cases: u32) -> Result<(), String> {
    let c = build_lattice(&LatticeSpec::triangular(), 25.0).unwrap();
    assert!(c.len() > 2000);
    run(cases, (0.0f64..0.4, 0.05f64..0.9, any::<u64>()), |(amp, m, seed)| {
        let d = c.d();
        let mut y: Vec<f64> = (0..c.len() * d).map(|k| c.x[k] + amp * (seed as f64 * 1e-7 + k as f64 * 2.414).sin()).collect();
        let i = (seed % c.len() as u64) as usize;
        if i != 0 && seed % 2 == 0 {
            for a in 0..d {
                y[i * d + a] = y[a] + 0.3 * (c.x[i * d + a] - c.x[a]) / c.norm(i).max(1.0);
            }
        }
        prop_assert_eq!(check_admissible(&c, &y, m), brute_admissible(&c, &y, m));
        Ok(())
    })
}
