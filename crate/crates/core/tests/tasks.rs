use softpd::forward::{Method, SolverConfig};
use softpd::scenes::SceneOptions;
use softpd::tasks::{preset, PresetOptions, TaskKind};

fn short(steps: usize) -> PresetOptions {
    PresetOptions {
        scene: SceneOptions {
            steps: Some(steps),
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Short horizon with a forward tolerance tight enough for finite differences.
fn fd_options(steps: usize, method: Method) -> PresetOptions {
    PresetOptions {
        solver: Some(SolverConfig::with_method(method, 1e-11)),
        ..short(steps)
    }
}

/// Central differences of the task loss along each variable.
fn check_task_gradient(kind: TaskKind, opts: &PresetOptions, at: Option<Vec<f64>>, rtol: f64) {
    let p = preset(kind, opts).unwrap();
    let vars = at.unwrap_or_else(|| p.start.clone());
    let e = p.task.eval_loss_and_grad(&vars).unwrap();
    assert!(e.converged);
    let scale = e.grad.iter().map(|g| g.abs()).fold(0.0, f64::max);
    for i in 0..vars.len() {
        let span = p.task.spec().bounds.upper()[i] - p.task.spec().bounds.lower()[i];
        let eps = 1e-5 * span.min(1.0);
        let mut plus = vars.clone();
        plus[i] += eps;
        let mut minus = vars.clone();
        minus[i] -= eps;
        let fd = (p.task.loss(&plus).unwrap().0 - p.task.loss(&minus).unwrap().0) / (2.0 * eps);
        let err = (fd - e.grad[i]).abs() / fd.abs().max(1e-3 * scale);
        assert!(err <= rtol, "{} var {i}: adjoint {:e} fd {fd:e} err {err:e}", kind.name(), e.grad[i]);
    }
}

#[test]
fn system_id_gradient_matches_finite_differences() {
    check_task_gradient(TaskKind::SystemId, &fd_options(6, Method::NewtonCholesky), None, 1e-4);
}

#[test]
fn tendon_gradient_matches_finite_differences() {
    check_task_gradient(TaskKind::TendonReach, &fd_options(6, Method::Pd), None, 1e-4);
}

#[test]
fn bunny_gradient_matches_finite_differences() {
    // Launch sideways from mid-air so the body stays clear of the ground.
    check_task_gradient(TaskKind::BunnyToss, &fd_options(3, Method::Pd), Some(vec![0.001, -0.002, 0.003, 0.2, -0.1, -0.1]), 1e-4);
}

#[test]
fn gait_gradient_matches_finite_differences() {
    check_task_gradient(TaskKind::CrawlerGait, &fd_options(6, Method::NewtonCholesky), None, 1e-3);
}

#[test]
fn ground_truth_has_zero_loss() {
    let p = preset(TaskKind::SystemId, &short(5)).unwrap();
    let e = p.task.eval_loss_and_grad(p.truth.as_ref().unwrap()).unwrap();
    assert_eq!(e.loss, 0.0);
    assert!(e.grad.iter().all(|&g| g == 0.0));
}

#[test]
fn system_id_recovers_material() {
    let p = preset(TaskKind::SystemId, &PresetOptions::default()).unwrap();
    let truth = p.truth.clone().unwrap();
    let r = p.run().unwrap();
    let e = r.x[0].exp();
    let e_truth = truth[0].exp();
    println!("E {e} (truth {e_truth}), nu {} (truth {}), loss {:e} -> {:e}", r.x[1], truth[1], r.initial_loss, r.loss);
    assert!((e - e_truth).abs() <= 0.05 * e_truth);
    assert!((r.x[1] - truth[1]).abs() <= 0.05);
    assert!(r.loss <= 1e-4 * r.initial_loss);
    assert!(r.history.windows(2).all(|w| w[1].best_loss <= w[0].best_loss));
}

#[test]
fn bouncing_system_id_matches_trajectory() {
    let p = preset(TaskKind::BouncingSystemId, &PresetOptions::default()).unwrap();
    let r = p.run().unwrap();
    let ours = p.task.simulate(&r.x).unwrap();
    let truth = p.task.simulate(p.truth.as_ref().unwrap()).unwrap();
    let mesh = p.task.base().scene.mesh();
    let size = mesh.dx() * 2.0;
    let worst = ours
        .records
        .iter()
        .zip(&truth.records)
        .flat_map(|(a, b)| a.x.iter().zip(&b.x).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max);
    println!("worst nodal mismatch {worst:e} over body size {size}");
    assert!(worst < 1e-3 * size);
}

#[test]
fn tendon_reaches_generated_target() {
    let p = preset(TaskKind::TendonReach, &PresetOptions::default()).unwrap();
    let r = p.run().unwrap();
    println!("tendon loss {:e} -> {:e} in {} iterations", r.initial_loss, r.loss, r.iterations);
    assert!(r.loss < 1e-6);
    assert!(r.loss <= 1e-4 * r.initial_loss);
}

#[test]
fn zero_actuation_target_keeps_zero_actuation() {
    let opts = PresetOptions {
        truth: Some(vec![0.0; 4]),
        start: Some(vec![0.0; 4]),
        ..Default::default()
    };
    let p = preset(TaskKind::TendonReach, &opts).unwrap();
    let r = p.run().unwrap();
    assert_eq!(r.x, vec![0.0; 4]);
    assert_eq!(r.loss, 0.0);
}

#[test]
fn bunny_beats_random_samples() {
    let p = preset(TaskKind::BunnyToss, &PresetOptions::default()).unwrap();
    let r = p.run().unwrap();
    let (_, best) = r.baseline.best();
    println!("bunny loss {:e}, best random {best:e}, normalized {}", r.loss, r.normalize(r.loss));
    assert!(r.loss < best);
}

#[test]
fn crawler_outpaces_passive_drift() {
    let p = preset(TaskKind::CrawlerGait, &PresetOptions::default()).unwrap();
    let passive = -p.task.loss(&[0.0, 10.0, 0.0]).unwrap().0;
    let r = p.run().unwrap();
    let travelled = -r.loss;
    println!("passive {passive:e}, optimized {travelled:e}, gait {:?}", r.x);
    assert!(travelled > 2.0 * passive.max(0.0));
    assert!(travelled > 0.0);
    assert!((r.normalize(r.baseline.mean()) - 1.0).abs() < 1e-12);
    assert_eq!(r.normalize(r.loss), 0.0);
}

#[test]
fn identical_runs_give_identical_histories() {
    let opts = PresetOptions {
        max_iters: Some(3),
        ..short(5)
    };
    let a = preset(TaskKind::TendonReach, &opts).unwrap().run().unwrap();
    let b = preset(TaskKind::TendonReach, &opts).unwrap().run().unwrap();
    let losses = |r: &softpd::tasks::TaskResult| r.history.iter().map(|e| e.loss).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(a.baseline, b.baseline);
}

#[test]
fn zero_iterations_return_the_start() {
    let opts = PresetOptions {
        max_iters: Some(0),
        ..short(4)
    };
    let p = preset(TaskKind::TendonReach, &opts).unwrap();
    let r = p.run().unwrap();
    assert_eq!(r.x, p.start);
    assert_eq!(r.loss, p.task.loss(&p.start).unwrap().0);
}

#[test]
fn backends_give_matching_task_gradients() {
    let grad = |method| {
        let opts = PresetOptions {
            solver: Some(SolverConfig::with_method(method, 1e-10)),
            ..short(6)
        };
        let p = preset(TaskKind::SystemId, &opts).unwrap();
        p.task.eval_loss_and_grad(&p.start).unwrap().grad
    };
    let pd = grad(Method::Pd);
    let newton = grad(Method::NewtonCholesky);
    for (a, b) in pd.iter().zip(&newton) {
        assert!((a - b).abs() <= 1e-4 * b.abs(), "{a:e} vs {b:e}");
    }
}
