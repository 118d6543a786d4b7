use nvrecompute::crashlab::{classify_outcome, Outcome};
use nvrecompute::workloads::{
    golden_run, restart_kernel, run_kernel, Golden, KernelName, KernelSpec, RunOutcome,
};
use nvrecompute::{CacheConfig, MemoryImage, PersistencePlan, SimMachine};

const KERNELS: [KernelName; 3] = [
    KernelName::Jacobi2d,
    KernelName::Cgsolve,
    KernelName::Kmeans,
];

fn machine() -> SimMachine {
    SimMachine::new(CacheConfig::desk()).unwrap()
}

fn crash(
    spec: &KernelSpec,
    plan: Option<&PersistencePlan>,
    at: u64,
) -> nvrecompute::workloads::CrashInfo {
    match run_kernel(spec, machine(), plan, Some(at)).unwrap() {
        RunOutcome::Crashed(info) => info,
        RunOutcome::Completed { .. } => panic!("crash point {at} not reached"),
    }
}

fn all_candidates_per_iteration(g: &Golden) -> PersistencePlan {
    PersistencePlan::per_iteration(&g.registry.candidate_names(), &g.region_kinds())
}

#[test]
fn golden_runs_are_deterministic_and_pass() {
    for k in KERNELS {
        let spec = KernelSpec::default_for(k);
        let a = golden_run(&spec, None).unwrap();
        let b = golden_run(&spec, None).unwrap();
        assert_eq!(a, b, "{k}");
        assert!(a.baseline_iterations > 1, "{k}");
        let m = run_kernel(&spec, machine(), None, None).unwrap();
        match m {
            RunOutcome::Completed { acceptance, .. } => assert!(acceptance.passed, "{k}"),
            RunOutcome::Crashed(_) => panic!("no crash requested"),
        }
    }
}

#[test]
fn time_shares_sum_to_one() {
    for k in KERNELS {
        let g = golden_run(&KernelSpec::default_for(k), None).unwrap();
        let sum: f64 = g.a_k.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "{k}: {sum}");
        assert_eq!(g.a_k.len(), g.regions.len());
        let ops: u64 = g.regions.iter().map(|r| r.ops).sum();
        assert!(ops <= g.total_ops);
    }
}

#[test]
fn larger_problems_take_more_ops() {
    for k in KERNELS {
        let small = KernelSpec::default_for(k);
        let mut big = small.clone();
        big.size *= 2;
        let a = golden_run(&small, None).unwrap();
        let b = golden_run(&big, None).unwrap();
        assert!(b.total_ops > a.total_ops, "{k}");
    }
}

#[test]
fn op_counts_do_not_depend_on_cache_geometry() {
    let spec = KernelSpec::kmeans();
    let desk = golden_run(&spec, None).unwrap();
    let m = SimMachine::new(CacheConfig::server()).unwrap();
    match run_kernel(&spec, m, None, None).unwrap() {
        RunOutcome::Completed { stats, .. } => assert_eq!(stats.total_ops, desk.total_ops),
        RunOutcome::Crashed(_) => unreachable!(),
    }
}

#[test]
fn crash_beyond_window_completes() {
    let spec = KernelSpec::kmeans();
    let g = golden_run(&spec, None).unwrap();
    assert!(matches!(
        run_kernel(&spec, machine(), None, Some(g.total_ops)).unwrap(),
        RunOutcome::Completed { .. }
    ));
    let info = crash(&spec, None, g.total_ops - 1);
    assert_eq!(info.op_index, g.total_ops - 1);
}

#[test]
fn boundary_crashes_with_full_persistence_are_lossless() {
    for k in KERNELS {
        let spec = KernelSpec::default_for(k);
        let plan_free = golden_run(&spec, None).unwrap();
        let plan = all_candidates_per_iteration(&plan_free);
        let g = golden_run(&spec, Some(&plan)).unwrap();
        assert_eq!(g.baseline_iterations, plan_free.baseline_iterations);
        let n = g.iteration_start_ops.len();
        for &idx in &[1, n / 2, n - 1] {
            let at = g.iteration_start_ops[idx];
            let info = crash(&spec, Some(&plan), at);
            assert_eq!(info.iteration, idx as u64 + 1);
            let result = restart_kernel(&spec, &g, &info.snapshot, machine());
            assert_eq!(
                classify_outcome(&result, g.baseline_iterations),
                Outcome::S1,
                "{k} at iteration {}",
                idx + 1
            );
            assert_eq!(
                result.unwrap().iterations_used,
                g.baseline_iterations,
                "{k}"
            );
        }
    }
}

fn object_bytes(img: &MemoryImage, g: &Golden, name: &str) -> Vec<Option<u8>> {
    let o = g.registry.get(name).unwrap();
    (o.base..o.base + o.len).map(|a| img.byte(a)).collect()
}

#[test]
fn persisted_solution_survives_mid_iteration_crash() {
    let spec = KernelSpec::jacobi2d();
    let free = golden_run(&spec, None).unwrap();
    let plan = PersistencePlan::per_iteration(&["u".to_string()], &free.region_kinds());
    let g = golden_run(&spec, Some(&plan)).unwrap();
    let k = 5;
    let start = g.iteration_start_ops[k];
    let boundary = crash(&spec, Some(&plan), start);
    let expected = object_bytes(&boundary.snapshot, &g, "u");
    assert!(expected.iter().all(Option::is_some));
    // Every point of the iteration before the solution is overwritten.
    let copy_region = g.regions.iter().find(|r| r.name == "copy").unwrap().id;
    let mut at = start + 1;
    let mut checked = 0;
    loop {
        let info = crash(&spec, Some(&plan), at);
        if info.region_id == copy_region {
            break;
        }
        assert_eq!(
            object_bytes(&info.snapshot, &g, "u"),
            expected,
            "crash at op {at}"
        );
        checked += 1;
        at += 97;
    }
    assert!(checked > 10);
}

#[test]
fn restart_is_deterministic() {
    let spec = KernelSpec::cgsolve();
    let g = golden_run(&spec, None).unwrap();
    let at = g.total_ops / 3;
    let a = restart_kernel(&spec, &g, &crash(&spec, None, at).snapshot, machine());
    let b = restart_kernel(&spec, &g, &crash(&spec, None, at).snapshot, machine());
    assert_eq!(a, b);
}

#[test]
fn corrupted_iterator_is_a_restart_fault() {
    let spec = KernelSpec::kmeans();
    let g = golden_run(&spec, None).unwrap();
    let mut snap = crash(&spec, None, g.total_ops / 2).snapshot;
    snap.store(g.registry.iterator_addr, &u64::MAX.to_le_bytes());
    let r = restart_kernel(&spec, &g, &snap, machine());
    assert_eq!(classify_outcome(&r, g.baseline_iterations), Outcome::S3);
}
