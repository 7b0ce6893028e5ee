//! The reference solver must not link the distributed solver.

#[test]
fn manifest_has_no_distributed_solver_dependency() {
    let manifest = include_str!("../Cargo.toml");
    assert!(
        !manifest.contains("lexinet-admm"),
        "the oracle must stay independent of the ADMM implementation"
    );
}
