//! Learner-level expectations on the default gridworld study, evaluated on a
//! single shared run (10 seeds, every agent).

use std::sync::OnceLock;

use softimit_core::mdp::{expected_return, GridKind};
use softimit_core::study::{median, run_table1_study, AgentKind, StudyConfig, StudyResult};

fn study() -> &'static StudyResult {
    static RESULT: OnceLock<StudyResult> = OnceLock::new();
    RESULT.get_or_init(|| run_table1_study(&StudyConfig::default()).expect("study runs"))
}

fn nominal(env: GridKind, agent: AgentKind) -> f64 {
    study().median(env, agent).unwrap().0
}

fn windy(env: GridKind, agent: AgentKind) -> f64 {
    study().median(env, agent).unwrap().1
}

#[test]
fn no_cell_fails() {
    let failures: Vec<_> = study()
        .failures()
        .map(|(r, e)| format!("{:?}/{}: {e}", r.env, r.agent))
        .collect();
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn expert_row_is_the_soft_optimal_return() {
    for env in &study().envs {
        let direct = expected_return(&env.nominal, &env.expert.policy).unwrap();
        for (n, _) in study().returns(env.kind, AgentKind::Expert) {
            assert!((n - direct).abs() < 1e-12);
        }
    }
}

#[test]
fn csil_matches_or_beats_bc_in_every_cell() {
    for env in [GridKind::Dense, GridKind::Sparse] {
        let (cn, cw) = study().median(env, AgentKind::Csil).unwrap();
        let (bn, bw) = study().median(env, AgentKind::Bc).unwrap();
        assert!(cn >= bn, "{env:?} nominal: csil {cn} bc {bn}");
        assert!(cw >= bw, "{env:?} windy: csil {cw} bc {bw}");
    }
}

#[test]
fn sparse_windy_bc_collapses_while_csil_holds() {
    let expert = windy(GridKind::Sparse, AgentKind::Expert);
    let bc = windy(GridKind::Sparse, AgentKind::Bc);
    let csil = windy(GridKind::Sparse, AgentKind::Csil);
    assert!(bc <= 0.1 * expert, "bc {bc} expert {expert}");
    assert!(csil >= 0.5 * expert, "csil {csil} expert {expert}");
}

#[test]
fn csil_windy_sparse_is_at_least_five_times_bc() {
    let bc = windy(GridKind::Sparse, AgentKind::Bc);
    let csil = windy(GridKind::Sparse, AgentKind::Csil);
    assert!(csil >= 5.0 * bc, "csil {csil} bc {bc}");
}

#[test]
fn csil_matches_expert_on_sparse_nominal() {
    let expert = nominal(GridKind::Sparse, AgentKind::Expert);
    let csil = nominal(GridKind::Sparse, AgentKind::Csil);
    assert!(
        (csil - expert).abs() <= 0.05 * expert.abs(),
        "csil {csil} expert {expert}"
    );
}

#[test]
fn classifier_reward_reaches_expert_on_dense() {
    let expert = nominal(GridKind::Dense, AgentKind::Expert);
    let got = nominal(GridKind::Dense, AgentKind::Classifier);
    assert!(got >= 0.9 * expert, "classifier {got} expert {expert}");
}

#[test]
fn meirl_matches_features_and_return_on_dense() {
    let gaps: Vec<f64> = study()
        .rows
        .iter()
        .filter(|r| r.env == GridKind::Dense && r.agent == AgentKind::Meirl)
        .map(|r| r.outcome.as_ref().unwrap().diagnostics["feature_gap"])
        .collect();
    assert_eq!(gaps.len(), 10);
    for gap in gaps {
        assert!(gap < 0.05, "feature gap {gap}");
    }
    let expert = nominal(GridKind::Dense, AgentKind::Expert);
    let got = nominal(GridKind::Dense, AgentKind::Meirl);
    assert!(got >= 0.9 * expert, "meirl {got} expert {expert}");
}

#[test]
fn gail_reaches_expert_on_sparse_and_holds_up_in_dense_wind() {
    let expert = nominal(GridKind::Sparse, AgentKind::Expert);
    let got = nominal(GridKind::Sparse, AgentKind::Gail);
    assert!((got - expert).abs() <= 0.05 * expert, "gail {got} expert {expert}");
    let expert = windy(GridKind::Dense, AgentKind::Expert);
    let got = windy(GridKind::Dense, AgentKind::Gail);
    assert!(got >= 0.85 * expert, "gail windy {got} expert {expert}");
    let dense = nominal(GridKind::Dense, AgentKind::Gail);
    assert!(dense >= 0.9 * nominal(GridKind::Dense, AgentKind::Expert));
}

#[test]
fn study_csv_has_one_row_per_cell() {
    let csv = study().to_csv();
    let rows = csv.lines().count() - 1;
    assert_eq!(rows, 2 * AgentKind::ALL.len() * 10);
    assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
}
