use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softpd::backprop::{backprop_trajectory, spectral_probe, AdjointConfig, AdjointMethod, StateLossGradient};
use softpd::energy::MaterialParams;
use softpd::forward::{Controls, Method, SimState, Simulator, SolverConfig, Trajectory};
use softpd::scene::Scene;
use softpd::scenes::{build_scene, SceneInstance, SceneKind, SceneOptions};
use softpd::sparse::dot;

struct Problem {
    scene: Scene,
    initial: SimState,
    controls: Controls,
    wx: Vec<f64>,
    wv: Vec<f64>,
    fd_tol: f64,
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

impl Problem {
    fn new(inst: SceneInstance, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = inst.scene.num_dofs();
        Self {
            wx: random_vec(n, &mut rng),
            wv: random_vec(n, &mut rng),
            scene: inst.scene,
            initial: inst.initial,
            controls: inst.controls,
            fd_tol: 1e-12,
        }
    }

    fn simulate(&self, scene: &Scene, initial: SimState, controls: &Controls) -> Trajectory {
        let sim = Simulator::new(scene.clone(), SolverConfig::with_method(Method::NewtonCholesky, self.fd_tol)).unwrap();
        sim.simulate(initial, controls).unwrap()
    }

    fn loss_of(&self, traj: &Trajectory) -> f64 {
        let s = traj.final_state();
        dot(&self.wx, &s.x) + dot(&self.wv, &s.v)
    }

    fn gradient(&self, method: Method, adjoint: AdjointMethod, tol: f64) -> softpd::backprop::GradientBundle {
        let sim = Simulator::new(self.scene.clone(), SolverConfig::with_method(method, tol.min(1e-10))).unwrap();
        let traj = sim.simulate(self.initial.clone(), &self.controls).unwrap();
        let frames = traj.records.len() + 1;
        let loss = StateLossGradient::terminal(frames, self.wx.clone(), self.wv.clone());
        backprop_trajectory(&sim, &traj, &loss, &AdjointConfig::with_method(adjoint, tol)).unwrap()
    }

    /// Central difference of the loss along a perturbation of the inputs.
    fn fd(&self, eps: f64, perturb: impl Fn(&mut Scene, &mut SimState, &mut Controls, f64)) -> f64 {
        let eval = |sign: f64| {
            let mut scene = self.scene.clone();
            let mut init = self.initial.clone();
            let mut ctrl = self.controls.clone();
            perturb(&mut scene, &mut init, &mut ctrl, sign * eps);
            self.loss_of(&self.simulate(&scene, init, &ctrl))
        };
        (eval(1.0) - eval(-1.0)) / (2.0 * eps)
    }
}

fn free_direction(scene: &Scene, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut d = random_vec(scene.num_dofs(), rng);
    scene.zero_dirichlet(&mut d);
    d
}

fn assert_close(label: &str, got: f64, want: f64, rtol: f64) {
    let err = (got - want).abs() / want.abs().max(1e-12);
    assert!(err <= rtol, "{label}: adjoint {got:.10e}, finite difference {want:.10e}, rel err {err:.2e}");
}

fn small_cantilever() -> SceneInstance {
    let opts = SceneOptions {
        resolution: Some([4, 2, 2]),
        dx: Some(0.05),
        steps: Some(4),
        ..Default::default()
    };
    build_scene(SceneKind::Cantilever, &opts).unwrap()
}

fn check_state_and_material(p: &Problem, adjoint: AdjointMethod, method: Method) {
    let g = p.gradient(method, adjoint, 1e-11);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dx = free_direction(&p.scene, &mut rng);
    let dv = free_direction(&p.scene, &mut rng);
    let df = random_vec(p.scene.num_dofs(), &mut rng);

    let want = p.fd(1e-5, |_, s, _, e| s.x.iter_mut().zip(&dx).for_each(|(x, d)| *x += e * d));
    assert_close("x0", dot(&g.dx0, &dx), want, 1e-5);
    let want = p.fd(1e-5, |_, s, _, e| s.v.iter_mut().zip(&dv).for_each(|(v, d)| *v += e * d));
    assert_close("v0", dot(&g.dv0, &dv), want, 1e-5);
    let step = 1;
    let want = p.fd(1e-3, |_, _, c, e| c.f_ext[step].iter_mut().zip(&df).for_each(|(f, d)| *f += e * d));
    assert_close("f_ext", dot(&g.df_ext[step], &df), want, 1e-5);

    let base = p.scene.material();
    let want = p.fd(base.youngs_modulus * 1e-5, |s, _, _, e| {
        s.set_material(MaterialParams::new(base.youngs_modulus + e, base.poissons_ratio)).unwrap()
    });
    assert_close("youngs modulus", g.d_youngs_modulus, want, 1e-5);
    let want = p.fd(1e-6, |s, _, _, e| {
        s.set_material(MaterialParams::new(base.youngs_modulus, base.poissons_ratio + e)).unwrap()
    });
    assert_close("poissons ratio", g.d_poissons_ratio, want, 1e-5);
}

#[test]
fn quasi_newton_gradients_match_finite_differences() {
    let p = Problem::new(small_cantilever(), 1);
    check_state_and_material(&p, AdjointMethod::QuasiNewton, Method::Pd);
}

#[test]
fn newton_gradients_match_finite_differences() {
    let p = Problem::new(small_cantilever(), 2);
    check_state_and_material(&p, AdjointMethod::NewtonCholesky, Method::NewtonCholesky);
}

#[test]
fn actuation_gradients_match_finite_differences() {
    let opts = SceneOptions {
        steps: Some(4),
        ..Default::default()
    };
    let mut inst = build_scene(SceneKind::Tendon, &opts).unwrap();
    // Distinct activations per group and step so the gradient is generic.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for a in inst.controls.act.iter_mut() {
        a.iter_mut().for_each(|v| *v = rng.random_range(0.8..1.0));
    }
    let p = Problem::new(inst, 4);
    let g = p.gradient(Method::Pd, AdjointMethod::QuasiNewton, 1e-11);
    for step in [0, 3] {
        for group in 0..p.scene.num_muscle_groups() {
            let want = p.fd(1e-4, |_, _, c, e| c.act[step][group] += e);
            assert_close(&format!("act[{step}][{group}]"), g.d_act[step][group], want, 1e-5);
        }
    }
}

#[test]
fn contact_gradients_match_finite_differences() {
    let opts = SceneOptions {
        steps: Some(6),
        ..Default::default()
    };
    let mut p = Problem::new(build_scene(SceneKind::RestingBlock, &opts).unwrap(), 5);
    p.fd_tol = 1e-11;
    let sim = Simulator::new(p.scene.clone(), SolverConfig::with_method(Method::NewtonCholesky, 1e-11)).unwrap();
    let traj = sim.simulate(p.initial.clone(), &p.controls).unwrap();
    assert!(traj.records.iter().any(|r| r.active.len() > 0), "block never touched the ground");
    for adjoint in [AdjointMethod::QuasiNewton, AdjointMethod::NewtonCholesky] {
        let g = p.gradient(Method::NewtonCholesky, adjoint, 1e-11);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dx = free_direction(&p.scene, &mut rng);
        let dv = free_direction(&p.scene, &mut rng);
        // Small enough that no node crosses the activation threshold.
        let want = p.fd(1e-7, |_, s, _, e| s.x.iter_mut().zip(&dx).for_each(|(x, d)| *x += e * d));
        assert_close("x0", dot(&g.dx0, &dx), want, 1e-4);
        let want = p.fd(1e-6, |_, s, _, e| s.v.iter_mut().zip(&dv).for_each(|(v, d)| *v += e * d));
        assert_close("v0", dot(&g.dv0, &dv), want, 1e-4);
    }
}

#[test]
fn adjoint_solvers_agree() {
    let p = Problem::new(small_cantilever(), 6);
    let reference = p.gradient(Method::NewtonCholesky, AdjointMethod::NewtonCholesky, 1e-12).flatten();
    let scale = dot(&reference, &reference).sqrt();
    for adjoint in [AdjointMethod::QuasiNewton, AdjointMethod::FixedPoint, AdjointMethod::NewtonPcg] {
        let g = p.gradient(Method::NewtonCholesky, adjoint, 1e-11).flatten();
        let diff: f64 = g.iter().zip(&reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(diff <= 1e-7 * scale, "{adjoint:?}: {diff:e} vs {scale:e}");
    }
}

#[test]
fn quasi_newton_needs_fewer_iterations_than_fixed_point() {
    let p = Problem::new(small_cantilever(), 8);
    let qn = p.gradient(Method::Pd, AdjointMethod::QuasiNewton, 1e-8);
    let fp = p.gradient(Method::Pd, AdjointMethod::FixedPoint, 1e-8);
    assert!(qn.stats.iter().all(|s| s.converged && !s.degraded));
    assert!(fp.stats.iter().all(|s| s.converged));
    assert!(qn.total_iterations() < fp.total_iterations(), "{} vs {}", qn.total_iterations(), fp.total_iterations());
}

#[test]
fn per_step_losses_accumulate() {
    // Loss on every frame equals the sum of terminal losses of the prefixes.
    let inst = small_cantilever();
    let p = Problem::new(inst, 10);
    let sim = Simulator::new(p.scene.clone(), SolverConfig::with_method(Method::NewtonCholesky, 1e-12)).unwrap();
    let traj = sim.simulate(p.initial.clone(), &p.controls).unwrap();
    let frames = traj.records.len() + 1;
    let cfg = AdjointConfig::with_method(AdjointMethod::NewtonCholesky, 1e-12);
    let mut all = StateLossGradient::zeros(frames, p.scene.num_dofs());
    for k in 1..frames {
        all.dx[k] = p.wx.clone();
    }
    let combined = backprop_trajectory(&sim, &traj, &all, &cfg).unwrap();
    let mut summed = vec![0.0; p.scene.num_dofs()];
    for k in 1..frames {
        let prefix = Trajectory {
            initial: traj.initial.clone(),
            records: traj.records[..k].to_vec(),
        };
        let loss = StateLossGradient::terminal(k + 1, p.wx.clone(), vec![0.0; p.scene.num_dofs()]);
        let g = backprop_trajectory(&sim, &prefix, &loss, &cfg).unwrap();
        summed.iter_mut().zip(&g.dx0).for_each(|(s, v)| *s += v);
    }
    for (a, b) in combined.dx0.iter().zip(&summed) {
        assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
    }
}

#[test]
fn linear_energy_converges_in_one_iteration() {
    // Without elastic energy the adjoint matrix is M/h², so ΔA vanishes.
    let inst = build_scene(SceneKind::Particle, &SceneOptions::default()).unwrap();
    let p = Problem::new(inst, 11);
    let g = p.gradient(Method::Pd, AdjointMethod::QuasiNewton, 1e-10);
    assert!(g.stats.iter().all(|s| s.iterations == 1 && s.converged));
    let sim = Simulator::new(p.scene.clone(), SolverConfig::default()).unwrap();
    let traj = sim.simulate(p.initial.clone(), &p.controls).unwrap();
    assert_eq!(spectral_probe(&sim, &traj.records[0], 20, 1).unwrap(), 0.0);
}

#[test]
fn spectral_radius_is_below_one_for_mild_deformation() {
    let p = Problem::new(small_cantilever(), 12);
    let sim = Simulator::new(p.scene.clone(), SolverConfig::default()).unwrap();
    let traj = sim.simulate(p.initial.clone(), &p.controls).unwrap();
    let rho = spectral_probe(&sim, traj.records.last().unwrap(), 50, 2).unwrap();
    assert!(rho > 0.0 && rho < 1.0, "{rho}");
}
