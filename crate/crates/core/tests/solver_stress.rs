use windcf::oracle::{enumerate_miqp, random_miqp_sized, OracleStatus};
use windcf::solver::{solve, SolveConfig, SolveStatus};

#[test]
fn denser_instances_match_enumeration() {
    let cfg = SolveConfig { gap: 1e-9, ..SolveConfig::default() };
    for seed in 1000..1300 {
        let p = random_miqp_sized(seed, 14, 14);
        let r = solve(&p, &cfg).unwrap();
        let o = enumerate_miqp(&p).unwrap();
        match o.status {
            OracleStatus::Optimal => {
                assert_eq!(r.status, SolveStatus::Optimal, "seed {seed}");
                let tol = 1e-6 * o.objective.abs().max(1.0);
                assert!((r.objective - o.objective).abs() <= tol, "seed {seed}: {} vs {}", r.objective, o.objective);
            }
            OracleStatus::Infeasible => assert_eq!(r.status, SolveStatus::Infeasible, "seed {seed}"),
            OracleStatus::Unbounded => assert_eq!(r.status, SolveStatus::Unbounded, "seed {seed}"),
        }
    }
}

/// Counterfactual instance whose reduced-gradient directions were tiny with
/// huge steps; the root relaxation used to fail and the node was pruned.
#[test]
fn tiny_direction_instance_solves() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/wide_step_miqp.json")).unwrap();
    let p: windcf::problem::MiqpProblem = serde_json::from_str(&text).unwrap();
    let relax = windcf::solver::solve_relaxation(&p).unwrap();
    assert_eq!(relax.status, windcf::solver::RelaxStatus::Optimal);
    let r = solve(&p, &SolveConfig { gap: 1e-9, ..SolveConfig::default() }).unwrap();
    assert_eq!(r.status, SolveStatus::Optimal);
    assert!(!r.numerical_issues);
    assert!(p.is_feasible(r.x.as_ref().unwrap(), 1e-6));
    // Optimum found by exhaustive grid search over the integer outputs.
    assert!((r.objective - 0.074_213_890_287_976_7).abs() < 1e-6, "{}", r.objective);
}
