use swarm_phase::analysis::Phase;
use swarm_phase::config::Config;
use swarm_phase::driver::{run_sweep, SweepRecord};

fn best_phases(alpha: f64, grid: &str, masses: &[f64]) -> Vec<Phase> {
    let mut cfg = Config::default();
    cfg.set("alpha", &alpha.to_string()).unwrap();
    cfg.set("grid", grid).unwrap();
    cfg.set("workers", "1").unwrap();
    let rows: Vec<SweepRecord> = run_sweep(&cfg, masses).unwrap();
    assert!(rows.iter().all(|r| r.status == "ok"), "{rows:?}");
    masses
        .iter()
        .map(|&m| rows.iter().find(|r| r.m == m && r.best).unwrap().phase.unwrap())
        .collect()
}

#[test]
fn alpha2_phase_pattern_switches_between_2_and_2_5() {
    let phases = best_phases(2.0, "radial:2048:4.0", &[0.5, 1.0, 1.5, 2.0, 2.5, 3.0]);
    use Phase::*;
    assert_eq!(phases, [P1, P1, P1, P1, P3, P3]);
}

#[test]
fn alpha3_labels_are_monotone_and_resolution_independent() {
    let masses = [0.1, 1.0, 10.0, 100.0];
    let coarse = best_phases(3.0, "radial:512:auto", &masses);
    let fine = best_phases(3.0, "radial:1024:auto", &masses);
    assert_eq!(coarse, fine);
    let rank = |p: &Phase| match p {
        Phase::P1 => 0,
        Phase::P2 => 1,
        Phase::P3 => 2,
    };
    assert!(fine.windows(2).all(|w| rank(&w[0]) <= rank(&w[1])), "{fine:?}");
    assert_eq!(fine[0], Phase::P1);
    assert_eq!(fine[3], Phase::P3);
}
