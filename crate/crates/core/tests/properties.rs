mod support;

const CASES: u32 = 128;

#[test]
fn site_energies_and_descriptors_are_isometry_invariant() {
    support::isometry_invariance(CASES).unwrap();
}

#[test]
fn site_energies_and_descriptors_are_permutation_invariant() {
    support::permutation_invariance(CASES).unwrap();
}

#[test]
fn norms_match_brute_force() {
    support::norm_equivalence(CASES).unwrap();
}

#[test]
fn admissibility_matches_brute_force() {
    support::admissibility(CASES).unwrap();
}

#[test]
fn admissibility_pruned_path_matches_brute_force() {
    support::admissibility_pruned(100).unwrap();
}
