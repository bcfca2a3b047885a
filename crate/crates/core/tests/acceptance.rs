//! Acceptance gate on the bundled example. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use sltmpc::config::{Experiment, ExperimentConfig};
use sltmpc::ocp::{self, CostMode, MemoryEntry, PrimarySolution, SolveStatus, TerminalMode};
use sltmpc::polytope::{self, HPolytope, VertexSet};
use sltmpc::runtime::{self, ControllerState, Memory, MemoryEvent, Schedule, SecondaryConfig, LAMBDA_ZERO_TOL};
use sltmpc::sim::{self, CellStatus, RoaVariant};
use sltmpc::slp;

const RUNS: usize = 500;
const STEPS: usize = 25;
const CONSTRAINT_TOL: f64 = 1e-6;
const CANDIDATE_TOL: f64 = 1e-6;
const CANDIDATE_PAIRS: usize = 1000;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

/// Data gathered from the closed-loop runs and shared by several criteria.
#[derive(Default)]
struct RunStats {
    failures: Vec<String>,
    worst_constraint: f64,
    records: usize,
    candidate_pairs: usize,
    worst_candidate: f64,
    replacements: usize,
    worst_replaced_weight: f64,
    entries: Vec<MemoryEntry>,
    states: Vec<DVector<f64>>,
}

struct Pending {
    entries: Vec<MemoryEntry>,
    solution: PrimarySolution,
    w: DVector<f64>,
    check: bool,
}

fn closed_loop_run(exp: &Experiment, seed: u64) -> RunStats {
    let mut stats = RunStats::default();
    let mut state = exp.controller().expect("initial memory");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
    let w_set = exp.data.w_set.clone();
    let law = exp.disturbance;
    let mut draw = |_k: usize| sim::sample_disturbance(&w_set, &mut rng, law).unwrap();
    let mut pending: Option<Pending> = None;
    let mut prev_lambda: Option<Vec<f64>> = None;
    let (data, terminal, rho) = (&exp.data, &exp.terminal, exp.config.memory.rho);
    let mut observer = |view: &runtime::StepView<'_>| {
        let entries = view.state.memory.entries();
        // candidate built from the previous optimum must be feasible now
        if let Some(p) = pending.take() {
            if p.check {
                let cand = runtime::shifted_candidate(data, terminal, &p.entries, &p.solution, &p.w, view.event)
                    .expect("candidate construction");
                let spec = ocp::build_primary(data, terminal, entries, view.x, rho).unwrap();
                let viol = spec.max_violation(&cand.to_point(&spec).unwrap());
                stats.candidate_pairs += 1;
                stats.worst_candidate = stats.worst_candidate.max(viol);
            }
        }
        match view.event {
            MemoryEvent::Replace(j) => {
                stats.replacements += 1;
                let lw = prev_lambda.as_ref().map_or(f64::INFINITY, |l| l[j]);
                stats.worst_replaced_weight = stats.worst_replaced_weight.max(lw);
                stats.entries.push(entries[j].clone());
            }
            MemoryEvent::Insert(j) => stats.entries.push(entries[j].clone()),
            _ => {}
        }
        prev_lambda = Some(view.output.solution.lambda.clone());
        stats.states.push(view.x.clone());
        pending = Some(Pending {
            entries: entries.to_vec(),
            solution: view.output.solution.clone(),
            w: view.w.clone(),
            check: pick.random_bool(0.2),
        });
    };
    let run = runtime::run_closed_loop(
        &mut state,
        &exp.x0,
        Schedule::Periodic(5),
        &exp.secondary,
        STEPS,
        &mut draw,
        &mut observer,
    );
    if let Some(e) = run.failure {
        stats.failures.push(format!("seed {seed}: {e}"));
    }
    if run.log.records.len() != STEPS {
        stats
            .failures
            .push(format!("seed {seed}: {} of {STEPS} steps", run.log.records.len()));
    }
    for r in &run.log.records {
        let v = exp.data.x_set.violation(&r.x).max(exp.data.u_set.violation(&r.u));
        stats.worst_constraint = stats.worst_constraint.max(v);
    }
    stats.records = run.log.records.len();
    stats
}

fn merge(mut a: RunStats, b: RunStats) -> RunStats {
    a.failures.extend(b.failures);
    a.worst_constraint = a.worst_constraint.max(b.worst_constraint);
    a.records += b.records;
    a.candidate_pairs += b.candidate_pairs;
    a.worst_candidate = a.worst_candidate.max(b.worst_candidate);
    a.replacements += b.replacements;
    a.worst_replaced_weight = a.worst_replaced_weight.max(b.worst_replaced_weight);
    a.entries.extend(b.entries);
    a.states.extend(b.states);
    a
}

fn recursive_feasibility(stats: &RunStats) -> Verdict {
    let ok = stats.failures.is_empty() && stats.records == RUNS * STEPS && stats.worst_constraint <= CONSTRAINT_TOL;
    let mut detail = format!(
        "{RUNS} runs x {STEPS} steps, {} infeasible/failed, {} steps logged, worst constraint violation {:.2e}",
        stats.failures.len(),
        stats.records,
        stats.worst_constraint
    );
    if let Some(first) = stats.failures.first() {
        detail.push_str(&format!("; first failure: {first}"));
    }
    verdict(ok, detail)
}

fn candidate_feasibility(stats: &RunStats) -> Verdict {
    verdict(
        stats.candidate_pairs >= CANDIDATE_PAIRS && stats.worst_candidate <= CANDIDATE_TOL,
        format!(
            "{} random (run, step) pairs, worst candidate violation {:.2e}",
            stats.candidate_pairs, stats.worst_candidate
        ),
    )
}

fn roa_nesting(exp: &Experiment) -> Verdict {
    let grid = exp.grid().unwrap();
    let memory = &exp.initial_memory[..2];
    let grids: Vec<_> = RoaVariant::ALL
        .iter()
        .map(|&v| sim::roa_grid(&exp.data, &exp.terminal, memory, v, &grid, &exp.settings).unwrap())
        .collect();
    let feasible = |g: usize, i: usize| grids[g].status[i] == CellStatus::Feasible;
    let cells = grids[0].points.len();
    let first = (0..cells).filter(|&i| feasible(0, i) && !feasible(1, i)).count();
    let second = (0..cells).filter(|&i| feasible(1, i) && !feasible(2, i)).count();
    let failures: usize = grids
        .iter()
        .map(|g| g.status.iter().filter(|s| **s == CellStatus::SolverFailure).count())
        .sum();
    let counts: Vec<usize> = grids.iter().map(|g| g.feasible_count()).collect();
    verdict(
        first == 0 && second == 0 && counts[1] > counts[0],
        format!(
            "{cells} cells; feasible fixed/primary/full = {}/{}/{}; nesting violations {first} + {second}; solver failures {failures}",
            counts[0], counts[1], counts[2]
        ),
    )
}

fn fixed_tube_equivalence(exp: &Experiment) -> Verdict {
    let entry = exp.initial_memory[1].clone();
    let mut state = ControllerState::new(
        exp.data.clone(),
        exp.terminal.clone(),
        Memory::with_entries(1, vec![entry.clone()]).unwrap(),
        exp.config.memory.rho,
        exp.settings.clone(),
    )
    .unwrap();
    let mut x_primary = exp.x0.clone();
    let mut x_fixed = exp.x0.clone();
    let mut worst: f64 = 0.0;
    for k in 0..STEPS {
        let u_p = match state.primary_step(&x_primary) {
            Ok(out) => out.u,
            Err(e) => return verdict(false, format!("primary failed at step {k}: {e}")),
        };
        let spec = ocp::build_fixed_tube(&exp.data, &exp.terminal, &entry, &x_fixed).unwrap();
        let res = ocp::solve(&spec, &exp.settings).unwrap();
        let u_f = match ocp::extract_control(&res) {
            Ok(u) => u,
            Err(e) => return verdict(false, format!("fixed tube failed at step {k}: {e}")),
        };
        worst = worst.max((&u_p - &u_f).abs().max());
        let w = DVector::zeros(exp.data.n());
        x_primary = exp.data.model.step(&x_primary, &u_p, &w);
        x_fixed = exp.data.model.step(&x_fixed, &u_f, &w);
    }
    verdict(
        worst <= 1e-6,
        format!("{STEPS} nominal steps, max input deviation {worst:.2e}"),
    )
}

fn nominal_decrease(exp: &Experiment) -> Verdict {
    let grid = exp.grid().unwrap();
    let memory = exp.initial_memory.clone();
    let candidates: Vec<DVector<f64>> = grid.points().into_iter().step_by(37).collect();
    let feasible: Vec<DVector<f64>> = candidates
        .into_iter()
        .filter(|x| {
            let spec = ocp::build_primary(&exp.data, &exp.terminal, &memory, x, exp.config.memory.rho).unwrap();
            ocp::solve(&spec, &exp.settings).unwrap().is_optimal()
        })
        .take(20)
        .collect();
    let worst = feasible
        .par_iter()
        .map(|x0| {
            let mut state = exp.controller().unwrap();
            let mut x = x0.clone();
            let mut worst = f64::NEG_INFINITY;
            let mut prev: Option<(f64, f64)> = None;
            for _ in 0..STEPS {
                let out = state.primary_step(&x).expect("nominal run stays feasible");
                if let Some((v_prev, stage)) = prev {
                    worst = worst.max(out.objective - v_prev + stage);
                }
                let stage =
                    (x.transpose() * &exp.data.q * &x)[(0, 0)] + (out.u.transpose() * &exp.data.r * &out.u)[(0, 0)];
                prev = Some((out.objective, stage));
                x = exp.data.model.step(&x, &out.u, &DVector::zeros(exp.data.n()));
            }
            worst
        })
        .reduce(|| f64::NEG_INFINITY, f64::max);
    verdict(
        feasible.len() == 20 && worst <= 1e-6,
        format!(
            "{} feasible start states, worst V(k+1) - V(k) + stage cost = {worst:.2e}",
            feasible.len()
        ),
    )
}

fn algorithm_one(exp: &Experiment, stats: &RunStats) -> Verdict {
    let base = exp.initial_memory[0].clone();
    let aged = |b: usize| MemoryEntry {
        birth_step: b,
        ..base.clone()
    };
    let fill = |n: usize| (0..n).map(aged).collect::<Vec<_>>();
    // (entries, capacity, last weights) -> expected event
    let cases: Vec<(usize, usize, Option<Vec<f64>>, MemoryEvent)> = vec![
        (0, 3, None, MemoryEvent::Insert(0)),
        (1, 3, Some(vec![1.0]), MemoryEvent::Insert(1)),
        (2, 3, Some(vec![0.0, 1.0]), MemoryEvent::Insert(2)),
        (2, 3, Some(vec![0.5, 0.5]), MemoryEvent::Insert(2)),
        (3, 3, Some(vec![0.2, 0.3, 0.5]), MemoryEvent::Discard),
        (3, 3, Some(vec![0.0, 0.4, 0.6]), MemoryEvent::Replace(0)),
        (3, 3, Some(vec![0.4, 0.6, 0.0]), MemoryEvent::Replace(2)),
        (3, 3, Some(vec![0.4, 1e-10, 0.6]), MemoryEvent::Replace(1)),
        (3, 3, Some(vec![0.4, 1e-8, 0.6 - 1e-8]), MemoryEvent::Discard),
        (3, 3, Some(vec![0.0, 0.0, 1.0]), MemoryEvent::Replace(0)),
        (3, 3, None, MemoryEvent::Discard),
        (2, 2, Some(vec![1.0, 0.0]), MemoryEvent::Replace(1)),
        (2, 2, Some(vec![0.5, 0.5]), MemoryEvent::Discard),
    ];
    let mut mismatches = Vec::new();
    for (i, (len, cap, lambda, expected)) in cases.iter().enumerate() {
        let mut m = Memory::with_entries(*cap, fill(*len)).unwrap();
        if let Some(l) = lambda {
            m.set_last_lambda(l.clone()).unwrap();
        }
        let before: Vec<usize> = m.entries().iter().map(|e| e.birth_step).collect();
        let got = runtime::update_memory(aged(99), &mut m);
        let after: Vec<usize> = m.entries().iter().map(|e| e.birth_step).collect();
        let layout_ok = match got {
            MemoryEvent::Insert(j) => after.len() == before.len() + 1 && after[j] == 99 && after[..j] == before[..],
            MemoryEvent::Replace(j) => {
                after.len() == before.len()
                    && after[j] == 99
                    && (0..after.len()).all(|k| k == j || after[k] == before[k])
                    && lambda.as_ref().is_some_and(|l| l[j] <= LAMBDA_ZERO_TOL)
            }
            MemoryEvent::Discard => after == before,
            MemoryEvent::None => false,
        };
        if got != *expected || !layout_ok {
            mismatches.push(format!("case {i}: expected {expected}, got {got}"));
        }
    }
    let ok = mismatches.is_empty() && stats.worst_replaced_weight <= LAMBDA_ZERO_TOL;
    verdict(
        ok,
        format!(
            "{} table cases, {} mismatches{}; {} closed-loop replacements, largest replaced weight {:.1e}",
            cases.len(),
            mismatches.len(),
            mismatches.first().map(|m| format!(" ({m})")).unwrap_or_default(),
            stats.replacements,
            stats.worst_replaced_weight.max(0.0)
        ),
    )
}

fn solve_time_ratio(exp: &Experiment, stats: &RunStats) -> Verdict {
    let states: Vec<DVector<f64>> = stats.states.iter().step_by(53).take(40).cloned().collect();
    let rows = sim::bench_solve_times(
        &exp.data,
        &exp.terminal,
        &exp.initial_memory,
        &states,
        3,
        exp.config.memory.rho,
        &exp.settings,
    )
    .unwrap();
    let primary = &rows[0];
    let full = &rows[2];
    let ratio = primary.mean_ms / full.mean_ms;
    verdict(
        primary.samples >= 100 && full.samples >= 100 && ratio <= 0.25,
        format!(
            "{} solves each, primary mean {:.3} ms, full mean {:.3} ms, ratio {ratio:.3}",
            primary.samples, primary.mean_ms, full.mean_ms
        ),
    )
}

/// Exact 2D LP: maximise `eta^T x` over `{H x <= h}` by enumerating all
/// pairwise intersections of boundary lines.
fn lp_oracle(p: &HPolytope, eta: &DVector<f64>) -> f64 {
    let (h, o) = (p.normals(), p.offsets());
    let mut best = f64::NEG_INFINITY;
    for a in 0..h.nrows() {
        for b in a + 1..h.nrows() {
            let m = DMatrix::from_row_slice(2, 2, &[h[(a, 0)], h[(a, 1)], h[(b, 0)], h[(b, 1)]]);
            if m.determinant().abs() < 1e-12 {
                continue;
            }
            let x = m.lu().solve(&DVector::from_vec(vec![o[a], o[b]])).unwrap();
            if p.contains(&x, 1e-9) {
                best = best.max(eta.dot(&x));
            }
        }
    }
    best
}

fn random_polygon(rng: &mut ChaCha8Rng, rows: usize) -> HPolytope {
    // random cuts plus a bounding box so every instance is compact
    let mut h = DMatrix::zeros(rows + 4, 2);
    let mut o = DVector::zeros(rows + 4);
    for r in 0..rows {
        h[(r, 0)] = rng.random_range(-1.0..1.0);
        h[(r, 1)] = rng.random_range(-1.0..1.0);
        o[r] = rng.random_range(0.2..1.0);
    }
    for (k, (c, s)) in [(0, 1.0), (1, 1.0), (0, -1.0), (1, -1.0)].into_iter().enumerate() {
        h[(rows + k, c)] = s;
        o[rows + k] = 2.0;
    }
    HPolytope::new(h, o).unwrap()
}

fn set_algebra(exp: &Experiment, stats: &RunStats) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut false_members = 0usize;
    let mut missed = 0usize;
    for _ in 0..50 {
        let p = random_polygon(&mut rng, 6);
        let s_pts: Vec<DVector<f64>> = (0..rng.random_range(1..6))
            .map(|_| DVector::from_fn(2, |_, _| rng.random_range(-0.2..0.2)))
            .collect();
        let s = VertexSet::new(s_pts.clone()).unwrap();
        let tight = polytope::pontryagin_tighten(&p, &s).unwrap().set;
        // brute force uses the generators plus random convex combinations
        let mut probes = s_pts.clone();
        for _ in 0..20 {
            let wts: Vec<f64> = s_pts.iter().map(|_| rng.random_range(0.0..1.0)).collect();
            let total: f64 = wts.iter().sum();
            probes.push(
                s_pts
                    .iter()
                    .zip(&wts)
                    .fold(DVector::zeros(2), |acc, (v, w)| acc + v * (w / total)),
            );
        }
        let steps = 80;
        for i in 0..=steps {
            for j in 0..=steps {
                let x = DVector::from_vec(vec![
                    -2.0 + 4.0 * i as f64 / steps as f64,
                    -2.0 + 4.0 * j as f64 / steps as f64,
                ]);
                let member = tight.contains(&x, 0.0);
                let brute_in = probes.iter().all(|sv| p.contains(&(&x + sv), 1e-6));
                let brute_strict = s_pts.iter().all(|sv| p.violation(&(&x + sv)) < -1e-6);
                if member && !brute_in {
                    false_members += 1;
                }
                if brute_strict && !tight.contains(&x, 1e-6) {
                    missed += 1;
                }
            }
        }
    }

    let mut worst_support: f64 = 0.0;
    for _ in 0..200 {
        let p = random_polygon(&mut rng, 5);
        let v = polytope::vertices_2d(&p).unwrap();
        let eta = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        worst_support = worst_support.max((polytope::support(&v, &eta).unwrap() - lp_oracle(&p, &eta)).abs());
    }

    let mut cert_failures = 0usize;
    let mut sample_failures = 0usize;
    let mut entries = stats.entries.clone();
    entries.extend(exp.initial_memory.iter().skip(1).cloned());
    let xf_vertices = polytope::vertices_2d(&exp.terminal.x_f).unwrap();
    for (idx, e) in entries.iter().enumerate() {
        let ok = polytope::check_lemma1(
            &e.certificate,
            e.alpha,
            e.alpha,
            &exp.terminal.a_cl,
            &e.tubes.gamma,
            &exp.terminal.x_f,
            &exp.terminal.x_f,
            &exp.data.w_vertices,
            polytope::DEFAULT_TOL,
        )
        .unwrap();
        if !ok || e.certify(&exp.data, &exp.terminal, polytope::DEFAULT_TOL).is_err() {
            cert_failures += 1;
        }
        let mut srng = ChaCha8Rng::seed_from_u64(1000 + idx as u64);
        let (wl, wu) = exp.data.w_set.as_box().unwrap();
        for _ in 0..1000 {
            let wts: Vec<f64> = xf_vertices.iter().map(|_| srng.random::<f64>().powi(3)).collect();
            let total: f64 = wts.iter().sum();
            let z = xf_vertices
                .iter()
                .zip(&wts)
                .fold(DVector::zeros(2), |acc, (v, w)| acc + v * (e.alpha * w / total));
            let w = DVector::from_fn(2, |r, _| srng.random_range(wl[r]..=wu[r]));
            let next = &exp.terminal.a_cl * &z + &e.tubes.gamma * &w;
            let scaled = polytope::scale(&exp.terminal.x_f, e.alpha).unwrap();
            if !scaled.contains(&next, polytope::DEFAULT_TOL) {
                sample_failures += 1;
            }
        }
    }
    verdict(
        false_members == 0 && missed == 0 && worst_support <= 1e-9 && cert_failures == 0 && sample_failures == 0,
        format!(
            "tightening: {false_members} false / {missed} missed memberships on 50 instances; \
             support vs LP max error {worst_support:.1e}; {} secondary entries, {cert_failures} certificate \
             failures, {sample_failures} sampled containment failures",
            entries.len()
        ),
    )
}

fn tube_structure(exp: &Experiment, stats: &RunStats) -> Verdict {
    let mut all: Vec<&MemoryEntry> = exp.initial_memory.iter().collect();
    all.extend(&stats.entries);
    let (hx, hu) = (exp.data.x_set.normals(), exp.data.u_set.normals());
    let mut bad = 0usize;
    for e in &all {
        let t = &e.tubes;
        let mut ok = t.t_x[0].iter().chain(t.t_u[0].iter()).all(|v| *v == 0.0) && t.is_monotone();
        for i in 0..t.horizon() {
            let ix = slp::step_increment(hx, &e.response.phi_x[i], &exp.data.w_vertices).unwrap();
            let iu = slp::step_increment(hu, &e.response.phi_u[i], &exp.data.w_vertices).unwrap();
            ok &= t.t_x[i + 1] == &t.t_x[i] + ix && t.t_u[i + 1] == &t.t_u[i] + iu;
        }
        if !ok {
            bad += 1;
        }
    }
    verdict(
        bad == 0,
        format!(
            "{} tube sequences, {bad} violate start/monotonicity/recursion",
            all.len()
        ),
    )
}

fn fir_mode(exp: &Experiment) -> Verdict {
    let seed = DVector::from_column_slice(&exp.config.secondary.seed_state);
    let cfg = SecondaryConfig {
        terminal_mode: TerminalMode::Fir,
        cost_mode: CostMode::Nominal,
    };
    match runtime::run_secondary(&exp.data, &exp.terminal, &seed, &cfg, 0, &exp.settings) {
        Ok(Some(entry)) => {
            let g = entry.tubes.gamma.abs().max();
            let certified = entry.certify(&exp.data, &exp.terminal, polytope::DEFAULT_TOL).is_ok();
            verdict(
                g <= 1e-6 && certified,
                format!(
                    "|Gamma|_inf = {g:.1e}, alpha = {:.4}, entry certified: {certified}",
                    entry.alpha
                ),
            )
        }
        Ok(None) => verdict(false, "FIR tube optimisation infeasible"),
        Err(e) => verdict(false, format!("FIR tube optimisation failed: {e}")),
    }
}

fn main() -> ExitCode {
    let start = Instant::now();
    let exp = Experiment::from_config(ExperimentConfig::example()).expect("bundled preset");
    assert_eq!(
        exp.initial_memory.len(),
        2,
        "initial memory holds the fixed-gain and the seed entry"
    );

    let stats = (0..RUNS as u64)
        .into_par_iter()
        .map(|seed| closed_loop_run(&exp, seed))
        .reduce(RunStats::default, merge);

    // quick sanity of the solver on the seed state
    let seed_spec = ocp::build_sltmpc(
        &exp.data,
        &exp.terminal,
        TerminalMode::Scaled,
        CostMode::Nominal,
        &DVector::from_column_slice(&exp.config.secondary.seed_state),
    )
    .unwrap();
    assert_eq!(
        ocp::solve(&seed_spec, &exp.settings).unwrap().status,
        SolveStatus::Optimal
    );

    let results = [
        (
            "recursive feasibility and constraint satisfaction",
            recursive_feasibility(&stats),
        ),
        ("shifted candidate feasibility", candidate_feasibility(&stats)),
        ("region of attraction nesting", roa_nesting(&exp)),
        ("single-entry memory equals fixed tube", fixed_tube_equivalence(&exp)),
        ("nominal value decrease", nominal_decrease(&exp)),
        ("memory update rule", algorithm_one(&exp, &stats)),
        ("solve-time ratio", solve_time_ratio(&exp, &stats)),
        ("set-algebra oracles", set_algebra(&exp, &stats)),
        ("tube structure", tube_structure(&exp, &stats)),
        ("FIR terminal mode", fir_mode(&exp)),
    ];
    let mut failed = 0;
    for (i, (name, v)) in results.iter().enumerate() {
        let tag = if v.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] criterion {:>2}: {name}: {}", i + 1, v.detail);
        if !v.passed {
            failed += 1;
        }
    }
    println!(
        "acceptance: {} of {} criteria passed in {:.1} s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
