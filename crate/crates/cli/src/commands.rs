use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use softpd::backprop::{backprop_trajectory, AdjointConfig, GradientBundle};
use softpd::energy::MaterialParams;
use softpd::forward::{Controls, Method, SimState, Simulator, SolverConfig, Trajectory};
use softpd::scene::Scene;
use softpd::scenes::{build_scene, SceneInstance};
use softpd::sparse::dot;
use softpd::tasks::{preset, LossKind, LossSpec, PresetOptions};

use crate::config::RunConfig;
use crate::output::{write_csv, write_frames, write_json};
use crate::Failure;

fn scene_instance(cfg: &RunConfig) -> Result<SceneInstance, Failure> {
    let kind = cfg.scene.kind().map_err(Failure::Invalid)?;
    Ok(build_scene(kind, &cfg.scene.options())?)
}

fn simulator(scene: Scene, solver: SolverConfig, cache: bool) -> Result<Simulator, Failure> {
    Ok(Simulator::new(scene, solver)?.with_column_cache(cache))
}

#[derive(Serialize)]
struct FrameEntry {
    step: usize,
    file: String,
    converged: bool,
    contact_converged: bool,
    iterations: usize,
    residual: f64,
    active_contacts: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    scene: &'a str,
    method: &'a str,
    tol: f64,
    dt: f64,
    steps: usize,
    nodes: usize,
    elements: usize,
    all_converged: bool,
    frames: Vec<FrameEntry>,
}

fn dump_trajectory(out: &Path, cfg: &RunConfig, scene: &Scene, solver: &SolverConfig, traj: &Trajectory) -> Result<bool, Failure> {
    let files = write_frames(&out.join("frames"), traj)?;
    let frames: Vec<FrameEntry> = traj
        .records
        .iter()
        .zip(files)
        .map(|(r, file)| FrameEntry {
            step: r.step + 1,
            file,
            converged: r.converged,
            contact_converged: r.contact_converged,
            iterations: r.stats.iterations,
            residual: r.residual,
            active_contacts: r.active.len(),
        })
        .collect();
    let all = traj.all_converged();
    let manifest = Manifest {
        scene: &cfg.scene.kind,
        method: solver.method.name(),
        tol: solver.tol,
        dt: scene.dt(),
        steps: traj.records.len(),
        nodes: scene.mesh().num_nodes(),
        elements: scene.mesh().num_elements(),
        all_converged: all,
        frames,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(all)
}

pub fn simulate(cfg: &RunConfig) -> Result<(), Failure> {
    let inst = scene_instance(cfg)?;
    let solver = cfg.solver.config().map_err(Failure::Invalid)?;
    let sim = simulator(inst.scene.clone(), solver.clone(), cfg.solver.column_cache)?;
    let traj = sim.simulate(inst.initial, &inst.controls)?;
    let all = dump_trajectory(&cfg.out, cfg, sim.scene(), &solver, &traj)?;
    let rows = traj.records.iter().map(|r| {
        let s = &r.stats;
        vec![
            (r.step + 1).to_string(),
            s.iterations.to_string(),
            s.contact_iterations.to_string(),
            s.force_evals.to_string(),
            s.eval_seconds.to_string(),
            s.solve_seconds.to_string(),
            s.contact_seconds.to_string(),
        ]
    });
    write_csv(
        &cfg.out.join("timing.csv"),
        &["step", "iterations", "contact_iterations", "force_evals", "local_s", "global_s", "contact_s"],
        rows,
    )?;
    let iterations: usize = traj.records.iter().map(|r| r.stats.iterations).sum();
    println!("simulated {} steps, {iterations} solver iterations, converged: {all}", traj.records.len());
    if all {
        Ok(())
    } else {
        Err(Failure::Numerical("some frames did not converge; see manifest.json".into()))
    }
}

struct Run {
    loss: f64,
    grad: Vec<f64>,
    forward_s: f64,
    backward_s: f64,
    forward_iterations: usize,
    adjoint_iterations: usize,
    factorizations: usize,
    converged: bool,
}

fn weighted_loss(seed: u64) -> LossSpec {
    LossSpec::terminal(LossKind::WeightedFinalState { seed })
}

fn run_cell(inst: &SceneInstance, solver: SolverConfig, cache: bool, seed: u64) -> Result<Run, Failure> {
    // One untimed step warms allocations; the factorization stays timed.
    let warm = simulator(inst.scene.clone(), solver.clone(), cache)?;
    let first = Controls {
        f_ext: inst.controls.f_ext.iter().take(1).cloned().collect(),
        act: inst.controls.act.iter().take(1).cloned().collect(),
    };
    warm.simulate(inst.initial.clone(), &first)?;

    let sim = simulator(inst.scene.clone(), solver.clone(), cache)?;
    let t = Instant::now();
    let traj = sim.simulate(inst.initial.clone(), &inst.controls)?;
    let forward_s = t.elapsed().as_secs_f64();
    let (loss, dl) = weighted_loss(seed).evaluate(sim.scene(), &traj);
    let t = Instant::now();
    let bundle = backprop_trajectory(&sim, &traj, &dl, &AdjointConfig::matching(&solver))?;
    let backward_s = t.elapsed().as_secs_f64();
    Ok(Run {
        loss,
        grad: bundle.flatten(),
        forward_s,
        backward_s,
        forward_iterations: traj.records.iter().map(|r| r.stats.iterations).sum(),
        adjoint_iterations: bundle.total_iterations(),
        factorizations: sim.counters().snapshot().factorizations,
        converged: traj.all_converged(),
    })
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    dot(&d, &d).sqrt() / dot(b, b).sqrt().max(f64::MIN_POSITIVE)
}

pub fn benchmark(cfg: &RunConfig) -> Result<(), Failure> {
    let inst = scene_instance(cfg)?;
    let b = &cfg.benchmark;
    let reference = run_cell(&inst, SolverConfig::with_method(Method::NewtonCholesky, b.reference_tol), cfg.solver.column_cache, cfg.seed)?;
    let mut rows = Vec::new();
    for &threads in &b.threads {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Failure::Invalid(e.to_string()))?;
        for name in &b.methods {
            let method = Method::parse(name)?;
            for &tol in &b.tolerances {
                let solver = SolverConfig {
                    max_iters: cfg.solver.max_iters,
                    history: cfg.solver.history,
                    ..SolverConfig::with_method(method, tol)
                };
                let cell = pool.install(|| run_cell(&inst, solver, cfg.solver.column_cache, cfg.seed));
                let row = match cell {
                    Ok(r) => vec![
                        method.name().to_string(),
                        threads.to_string(),
                        tol.to_string(),
                        r.forward_s.to_string(),
                        r.backward_s.to_string(),
                        r.loss.to_string(),
                        dot(&r.grad, &r.grad).sqrt().to_string(),
                        ((r.loss - reference.loss).abs() / reference.loss.abs().max(f64::MIN_POSITIVE)).to_string(),
                        rel_err(&r.grad, &reference.grad).to_string(),
                        r.forward_iterations.to_string(),
                        r.adjoint_iterations.to_string(),
                        r.factorizations.to_string(),
                        if r.converged { "ok" } else { "not_converged" }.to_string(),
                    ],
                    Err(e) => {
                        let mut row = vec![method.name().to_string(), threads.to_string(), tol.to_string()];
                        row.extend(std::iter::repeat_n(String::new(), 9));
                        row.push(format!("error: {}", e.message()).replace(',', ";"));
                        row
                    }
                };
                println!("{}", row.join(" "));
                rows.push(row);
            }
        }
    }
    write_csv(
        &cfg.out.join("benchmark.csv"),
        &[
            "method",
            "threads",
            "tolerance",
            "forward_s",
            "backward_s",
            "loss",
            "grad_norm",
            "loss_rel_err",
            "grad_rel_err",
            "forward_iterations",
            "adjoint_iterations",
            "factorizations",
            "status",
        ],
        rows,
    )?;
    Ok(())
}

struct Check {
    component: String,
    adjoint: f64,
    fd: f64,
}

/// Finite-difference check of every gradient component along seeded random
/// directions.
pub fn gradcheck(cfg: &RunConfig) -> Result<(), Failure> {
    let inst = scene_instance(cfg)?;
    let g = &cfg.gradcheck;
    let solver = SolverConfig {
        max_iters: cfg.solver.max_iters.max(2000),
        ..SolverConfig::with_method(Method::parse(&cfg.solver.method)?, g.solve_tol)
    };
    let loss_spec = weighted_loss(cfg.seed);
    let sim = simulator(inst.scene.clone(), solver.clone(), cfg.solver.column_cache)?;
    let traj = sim.simulate(inst.initial.clone(), &inst.controls)?;
    let (_, dl) = loss_spec.evaluate(sim.scene(), &traj);
    let mut bundle = backprop_trajectory(&sim, &traj, &dl, &AdjointConfig::matching(&solver))?;
    if g.corrupt {
        corrupt(&mut bundle);
    }

    let loss_with = |scene: &Scene, init: SimState, ctrl: &Controls| -> Result<f64, Failure> {
        let s = Simulator::new(scene.clone(), solver.clone())?;
        let t = s.simulate(init, ctrl)?;
        Ok(loss_spec.evaluate(scene, &t).0)
    };
    let central = |eps: f64, perturb: &dyn Fn(&mut Scene, &mut SimState, &mut Controls, f64)| -> Result<f64, Failure> {
        let mut vals = [0.0; 2];
        for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
            let mut scene = inst.scene.clone();
            let mut init = inst.initial.clone();
            let mut ctrl = inst.controls.clone();
            perturb(&mut scene, &mut init, &mut ctrl, sign * eps);
            vals[k] = loss_with(&scene, init, &ctrl)?;
        }
        Ok((vals[0] - vals[1]) / (2.0 * eps))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = inst.scene.num_dofs();
    let mut direction = |scene: &Scene| {
        let mut d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        scene.zero_dirichlet(&mut d);
        d
    };
    let dx = direction(&inst.scene);
    let dv = direction(&inst.scene);
    let df = direction(&inst.scene);
    let mut checks = Vec::new();
    let x_scale = inst.scene.mesh().dx();
    checks.push(Check {
        component: "x0".into(),
        adjoint: dot(&bundle.dx0, &dx),
        fd: central(g.eps * x_scale, &|_, s, _, e| s.x.iter_mut().zip(&dx).for_each(|(x, d)| *x += e * d))?,
    });
    checks.push(Check {
        component: "v0".into(),
        adjoint: dot(&bundle.dv0, &dv),
        fd: central(g.eps, &|_, s, _, e| s.v.iter_mut().zip(&dv).for_each(|(v, d)| *v += e * d))?,
    });
    if !traj.records.is_empty() {
        let f_scale = inst.scene.mass().diag().iter().fold(0.0f64, |m, v| m.max(*v)) / (inst.scene.dt() * inst.scene.dt()) * x_scale;
        checks.push(Check {
            component: "f_ext[0]".into(),
            adjoint: dot(&bundle.df_ext[0], &df),
            fd: central(g.eps * f_scale, &|_, _, c, e| c.f_ext[0].iter_mut().zip(&df).for_each(|(f, d)| *f += e * d))?,
        });
    }
    let base = inst.scene.material();
    checks.push(Check {
        component: "youngs_modulus".into(),
        adjoint: bundle.d_youngs_modulus,
        fd: central(g.eps * base.youngs_modulus, &|s, _, _, e| {
            s.set_material(MaterialParams::new(base.youngs_modulus + e, base.poissons_ratio))
                .expect("perturbed modulus stays valid")
        })?,
    });
    checks.push(Check {
        component: "poissons_ratio".into(),
        adjoint: bundle.d_poissons_ratio,
        fd: central(g.eps, &|s, _, _, e| {
            s.set_material(MaterialParams::new(base.youngs_modulus, base.poissons_ratio + e))
                .expect("perturbed ratio stays valid")
        })?,
    });
    for step in [0, traj.records.len().saturating_sub(1)] {
        if traj.records.is_empty() {
            break;
        }
        for group in 0..inst.scene.num_muscle_groups() {
            checks.push(Check {
                component: format!("act[{step}][{group}]"),
                adjoint: bundle.d_act[step][group],
                fd: central(g.eps, &|_, _, c, e| c.act[step][group] += e)?,
            });
        }
        if traj.records.len() == 1 {
            break;
        }
    }

    let scale = checks.iter().map(|c| c.adjoint.abs().max(c.fd.abs())).fold(0.0, f64::max);
    let floor = 1e-10 * scale.max(f64::MIN_POSITIVE);
    let mut failures = Vec::new();
    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| {
            let err = (c.adjoint - c.fd).abs() / c.fd.abs().max(floor);
            let pass = err <= g.tol;
            if !pass {
                failures.push((err, c.component.clone()));
            }
            vec![c.component.clone(), c.adjoint.to_string(), c.fd.to_string(), err.to_string(), pass.to_string()]
        })
        .collect();
    for r in &rows {
        println!("{:<16} adjoint {:>24} fd {:>24} rel_err {:>12} pass {}", r[0], r[1], r[2], r[3], r[4]);
    }
    write_csv(&cfg.out.join("gradcheck.csv"), &["component", "adjoint", "finite_difference", "rel_err", "pass"], rows)?;
    if failures.is_empty() {
        println!("all {} checks passed at {}", checks.len(), g.tol);
        Ok(())
    } else {
        failures.sort_by(|a, b| b.0.total_cmp(&a.0));
        let worst: Vec<String> = failures.iter().take(5).map(|(e, c)| format!("{c} ({e:.3e})")).collect();
        Err(Failure::Numerical(format!("{} of {} checks failed; worst: {}", failures.len(), checks.len(), worst.join(", "))))
    }
}

fn corrupt(b: &mut GradientBundle) {
    let s = 1.01;
    b.dx0.iter_mut().chain(b.dv0.iter_mut()).for_each(|v| *v *= s);
    b.df_ext.iter_mut().flatten().for_each(|v| *v *= s);
    b.d_act.iter_mut().flatten().for_each(|v| *v *= s);
    b.d_youngs_modulus *= s;
    b.d_poissons_ratio *= s;
}

#[derive(Serialize)]
struct OptimizeSummary<'a> {
    task: &'a str,
    variables: &'a str,
    start: &'a [f64],
    x: &'a [f64],
    initial_loss: f64,
    loss: f64,
    iterations: usize,
    evaluations: usize,
    termination: String,
    nonconverged_evaluations: usize,
    truth: Option<&'a [f64]>,
    baseline_losses: &'a [f64],
    baseline_mean: f64,
    baseline_best: f64,
    reference_loss: f64,
    normalized_initial_loss: f64,
    normalized_loss: f64,
}

pub fn optimize(cfg: &RunConfig) -> Result<(), Failure> {
    let kind = cfg.optimize.task().map_err(Failure::Invalid)?;
    let method = Method::parse(&cfg.solver.method)?;
    let opts = PresetOptions {
        scene: softpd::scenes::SceneOptions {
            steps: cfg.optimize.steps,
            ..Default::default()
        },
        solver: Some(SolverConfig {
            max_iters: cfg.solver.max_iters,
            history: cfg.solver.history,
            ..SolverConfig::with_method(method, cfg.optimize.tol)
        }),
        seed: cfg.seed,
        max_iters: Some(cfg.optimize.max_iters),
        truth: None,
        start: None,
    };
    let p = preset(kind, &opts)?;
    let r = p.run()?;
    let rows = r.history.iter().map(|e| {
        vec![
            e.index.to_string(),
            e.loss.to_string(),
            e.grad_norm.to_string(),
            e.wall_time.to_string(),
            e.best_loss.to_string(),
            r.normalize(e.loss).to_string(),
        ]
    });
    write_csv(
        &cfg.out.join("loss_history.csv"),
        &["evaluation_index", "loss", "grad_norm", "wall_time_s", "best_loss", "normalized_loss"],
        rows,
    )?;
    let summary = OptimizeSummary {
        task: kind.name(),
        variables: p.task.spec().variables.name(),
        start: &r.start,
        x: &r.x,
        initial_loss: r.initial_loss,
        loss: r.loss,
        iterations: r.iterations,
        evaluations: r.history.len(),
        termination: format!("{:?}", r.termination),
        nonconverged_evaluations: r.nonconverged_evaluations,
        truth: p.truth.as_deref(),
        baseline_losses: &r.baseline.losses,
        baseline_mean: r.baseline.mean(),
        baseline_best: r.baseline.best().1,
        reference_loss: r.reference_loss,
        normalized_initial_loss: r.normalize(r.initial_loss),
        normalized_loss: r.normalize(r.loss),
    };
    write_json(&cfg.out.join("result.json"), &summary)?;
    let traj = p.task.simulate(&r.x)?;
    let solver = p.task.spec().solver.clone();
    let mut dump_cfg = cfg.clone();
    dump_cfg.scene.kind = p.task.base().kind.name().to_string();
    dump_trajectory(&cfg.out, &dump_cfg, &p.task.base().scene, &solver, &traj)?;
    println!(
        "{}: loss {:e} -> {:e} in {} iterations ({:?}); normalized {:.4}",
        kind.name(),
        r.initial_loss,
        r.loss,
        r.iterations,
        r.termination,
        r.normalize(r.loss)
    );
    Ok(())
}
