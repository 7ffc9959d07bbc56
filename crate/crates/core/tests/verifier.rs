use txnaccel::engine::{run, SimConfig, SimError, Simulation};
use txnaccel::history::HistoryLog;
use txnaccel::lock::ResponseKind;
use txnaccel::verifier::{audit, check_serializable, full_check, replay_visibility, Violation};
use txnaccel::workload::{generate, WorkloadSpec};
use txnaccel::TxnDescriptor;

fn small(seed: u64, warehouses: usize) -> (SimConfig, Vec<TxnDescriptor>) {
    let mut cfg = SimConfig::default();
    cfg.topology.txn_agents = 2;
    cfg.topology.channels = 1;
    cfg.topology.agents_per_channel = 1;
    cfg.txn.slots = 8;
    cfg.txn.timeout = 2048;
    let spec = WorkloadSpec {
        warehouses,
        txn_agents: 2,
        txns_per_agent: 40,
        seed,
        ..WorkloadSpec::default()
    };
    (cfg, generate(&spec).unwrap().txns)
}

#[test]
fn clean_runs_pass_every_check() {
    for seed in 0..5 {
        let (cfg, w) = small(seed, 1);
        let out = run(&cfg, &w).unwrap();
        let report = full_check(&out);
        assert!(report.is_clean(), "seed {seed}: {:?}", report.violations);
        assert!(out.metrics.response_count(ResponseKind::Waiting) > 0, "want contention");
        let v = check_serializable(&out.history);
        assert_eq!(v.committed as u64, out.metrics.committed);
    }
}

#[test]
fn history_survives_text_round_trip() {
    let (cfg, w) = small(3, 1);
    let out = run(&cfg, &w).unwrap();
    let back = HistoryLog::parse(&out.history.to_text()).unwrap();
    assert_eq!(back.hash(), out.history.hash());
    assert!(check_serializable(&back).serializable);
    assert!(replay_visibility(&back).is_empty());
}

#[test]
fn dropped_response_breaks_conservation() {
    let (cfg, w) = small(1, 1);
    for nth in [1, 7, 50] {
        let mut sim = Simulation::new(cfg, &w).unwrap();
        sim.fabric_mut().inject_drop_response(nth);
        let res = sim.run_to_end();
        let report = audit(&sim.output());
        assert!(report.has_conservation(), "nth {nth}: {:?}", report.violations);
        if let Err(e) = res {
            assert!(matches!(e, SimError::Livelock { .. }), "{e}");
        }
    }
}

#[test]
fn leaked_waitq_entry_fails_drain() {
    let (cfg, w) = small(2, 1);
    let mut sim = Simulation::new(cfg, &w).unwrap();
    for a in sim.fabric_mut().agents_mut() {
        a.inject_leak_on_next_delete();
    }
    sim.run_to_end().unwrap();
    let report = audit(&sim.output());
    assert!(report.has_drain(), "{:?}", report.violations);
    assert!(report
        .violations
        .iter()
        .any(|v| matches!(v, Violation::NotDrained { pool: 1, .. })));
}
