mod common;

use accent_asr::model::{Fusion, Mode, ParamGroup};
use common::{GradCase, FD_FLOOR, FD_STEPS};

fn assert_case(mode: Mode, fusion: Fusion, gamma: f64, seed: u64) {
    let case = GradCase::new(mode, fusion, gamma, seed);
    let checks = case.check(&FD_STEPS, FD_FLOOR, 1e-4);
    let groups: Vec<ParamGroup> = checks.iter().map(|c| c.group).collect();
    assert!(groups.contains(&ParamGroup::Encoder) && groups.contains(&ParamGroup::CtcFinal));
    assert_eq!(groups.contains(&ParamGroup::Accent), mode != Mode::Baseline);
    for c in checks {
        assert!(
            c.max_rel_err <= 1e-4,
            "{mode:?}/{fusion:?}/γ={gamma}: {:?} rel err {:e} at {}",
            c.group,
            c.max_rel_err,
            c.worst
        );
    }
}

#[test]
fn cross_entropy_gradients_all_modes_and_fusions() {
    for mode in [Mode::Baseline, Mode::Dat, Mode::Mtl] {
        for fusion in [Fusion::Concat, Fusion::WeightedSum] {
            assert_case(mode, fusion, 0.0, 21);
        }
    }
}

#[test]
fn unfused_focal_gradients() {
    for mode in [Mode::Dat, Mode::Mtl] {
        assert_case(mode, Fusion::None, 0.5, 22);
    }
}
