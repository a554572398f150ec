//! Losses, decision-variable layouts and optimization drivers for system
//! identification, inverse design and trajectory optimization.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backprop::{backprop_trajectory, AdjointConfig, GradientBundle, StateLossGradient};
use crate::energy::MaterialParams;
use crate::error::{Error, Result};
use crate::forward::{Controls, Method, SimState, Simulator, SolverConfig, Trajectory};
use crate::mesh::node;
use crate::optim::{adam, lbfgs, AdamOptions, Bounds, EvalRecord, LbfgsOptions, Termination};
use crate::scene::Scene;
use crate::scenes::{build_scene, SceneInstance, SceneKind, SceneOptions};

#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    /// `wxᵀx + wvᵀv` with weights drawn uniformly from [−1, 1].
    WeightedFinalState { seed: u64 },
    /// Squared distance of the center of mass, or of one node, to a point.
    PointTarget { target: Vector3<f64>, node: Option<usize> },
    /// Negated center-of-mass displacement along `axis`, minus
    /// `height_weight` times the center-of-mass height.
    ForwardProgress { axis: usize, height_weight: f64 },
    /// Sum over frames 1..=N of squared position differences to `reference`.
    PositionMatch { reference: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Sum the term over every frame instead of only the last. Ignored by
    /// `PositionMatch`, which is always per frame.
    pub per_step: bool,
}

impl LossSpec {
    pub fn terminal(kind: LossKind) -> Self {
        Self { kind, per_step: false }
    }

    pub fn validate(&self, scene: &Scene, steps: usize) -> Result<()> {
        match &self.kind {
            LossKind::PointTarget { target, node } => {
                if !target.iter().all(|v| v.is_finite()) {
                    return Err(Error::invalid("loss target is not finite"));
                }
                if node.is_some_and(|j| j >= scene.mesh().num_nodes()) {
                    return Err(Error::invalid("loss node is out of range"));
                }
            }
            LossKind::ForwardProgress { axis, height_weight } => {
                if *axis > 2 || !height_weight.is_finite() {
                    return Err(Error::invalid("forward-progress loss needs an axis in 0..3"));
                }
            }
            LossKind::PositionMatch { reference } => {
                if reference.len() != steps || reference.iter().any(|r| r.len() != scene.num_dofs()) {
                    return Err(Error::invalid(format!("reference must hold {steps} frames of {} values", scene.num_dofs())));
                }
            }
            LossKind::WeightedFinalState { .. } => {}
        }
        Ok(())
    }

    /// Loss value and its gradient with respect to every frame's state.
    pub fn evaluate(&self, scene: &Scene, traj: &Trajectory) -> (f64, StateLossGradient) {
        let n = scene.num_dofs();
        let frames = traj.records.len() + 1;
        let mut grad = StateLossGradient::zeros(frames, n);
        let states: Vec<SimState> = std::iter::once(traj.initial.clone()).chain(traj.records.iter().map(|r| r.state())).collect();
        let frame_range = if self.per_step { 1..frames } else { frames - 1..frames };
        let mut loss = 0.0;
        match &self.kind {
            LossKind::WeightedFinalState { seed } => {
                let (wx, wv) = random_weights(n, *seed);
                for k in frame_range {
                    loss += dot(&wx, &states[k].x) + dot(&wv, &states[k].v);
                    grad.dx[k].copy_from_slice(&wx);
                    grad.dv[k].copy_from_slice(&wv);
                }
            }
            LossKind::PointTarget { target, node: probe } => {
                for k in frame_range {
                    let x = &states[k].x;
                    let p = match probe {
                        Some(j) => node(x, *j),
                        None => scene.center_of_mass(x),
                    };
                    let d = p - target;
                    loss += d.norm_squared();
                    match probe {
                        Some(j) => (0..3).for_each(|a| grad.dx[k][3 * j + a] = 2.0 * d[a]),
                        None => com_gradient(scene, 2.0 * d, &mut grad.dx[k]),
                    }
                }
            }
            LossKind::ForwardProgress { axis, height_weight } => {
                let start = scene.center_of_mass(&states[0].x)[*axis];
                let mut dir = Vector3::zeros();
                dir[*axis] = -1.0;
                dir[2] -= height_weight;
                for k in frame_range {
                    let c = scene.center_of_mass(&states[k].x);
                    loss += -(c[*axis] - start) - height_weight * c[2];
                    com_gradient(scene, dir, &mut grad.dx[k]);
                    let mut back = Vector3::zeros();
                    back[*axis] = 1.0;
                    let mut g0 = vec![0.0; n];
                    com_gradient(scene, back, &mut g0);
                    grad.dx[0].iter_mut().zip(g0).for_each(|(a, b)| *a += b);
                }
            }
            LossKind::PositionMatch { reference } => {
                for k in 1..frames {
                    for (i, (x, r)) in states[k].x.iter().zip(&reference[k - 1]).enumerate() {
                        let d = x - r;
                        loss += d * d;
                        grad.dx[k][i] = 2.0 * d;
                    }
                }
            }
        }
        (loss, grad)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    crate::sparse::dot(a, b)
}

/// Seeded uniform weights on positions and velocities.
pub fn random_weights(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wx = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wv = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    (wx, wv)
}

/// Adds `dir · ∂com/∂x` to `out`.
fn com_gradient(scene: &Scene, dir: Vector3<f64>, out: &mut [f64]) {
    let total = scene.mass().total();
    for j in 0..scene.mesh().num_nodes() {
        let w = scene.mass().node_mass(j) / total;
        for a in 0..3 {
            out[3 * j + a] += w * dir[a];
        }
    }
}

/// How decision variables map onto the simulation inputs. Muscle inputs are
/// activations `a`; the scene receives the fiber length ratio `1 − a`.
#[derive(Debug, Clone, PartialEq)]
pub enum Variables {
    /// `[ln E, ν]`.
    Material,
    /// `[offset x, y, z, velocity x, y, z]` applied rigidly to the body.
    InitialMotion,
    /// One constant activation per muscle group.
    StaticActuation,
    /// Per-group activation knots spread evenly over the steps and linearly
    /// interpolated, laid out group-major.
    ActuationKnots { knots: usize },
    /// `[amplitude, frequency (Hz), phase]`: group `g` follows
    /// `½A(1 + sin(2πft + gφ))`.
    SineGait,
}

impl Variables {
    pub fn count(&self, scene: &Scene) -> usize {
        match self {
            Variables::Material => 2,
            Variables::InitialMotion => 6,
            Variables::StaticActuation => scene.num_muscle_groups(),
            Variables::ActuationKnots { knots } => knots * scene.num_muscle_groups(),
            Variables::SineGait => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variables::Material => "material",
            Variables::InitialMotion => "initial_motion",
            Variables::StaticActuation => "static_actuation",
            Variables::ActuationKnots { .. } => "actuation_knots",
            Variables::SineGait => "sine_gait",
        }
    }
}

/// Interpolation weights of step `i` over `knots` evenly spaced knots.
fn knot_weights(i: usize, steps: usize, knots: usize) -> [(usize, f64); 2] {
    if knots == 1 || steps <= 1 {
        return [(0, 1.0), (0, 0.0)];
    }
    let s = i as f64 * (knots - 1) as f64 / (steps - 1) as f64;
    let k = (s.floor() as usize).min(knots - 2);
    let t = s - k as f64;
    [(k, 1.0 - t), (k + 1, t)]
}

fn gait_phase(vars: &[f64], group: usize, time: f64) -> f64 {
    2.0 * PI * vars[1] * time + group as f64 * vars[2]
}

#[derive(Debug, Clone)]
pub enum OptimizerSpec {
    Lbfgs(LbfgsOptions),
    Adam(AdamOptions),
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub scene: SceneKind,
    pub scene_options: SceneOptions,
    pub variables: Variables,
    pub bounds: Bounds,
    pub loss: LossSpec,
    pub optimizer: OptimizerSpec,
    pub solver: SolverConfig,
    pub seed: u64,
}

/// Loss and gradient at one point; `converged` is false if any forward step
/// stopped short of its tolerance.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub converged: bool,
}

pub struct Task {
    spec: TaskSpec,
    base: SceneInstance,
    /// Shared simulator when the variables leave the factorization alone.
    sim: Option<Simulator>,
}

impl Task {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        spec.solver.validate()?;
        let base = build_scene(spec.scene, &spec.scene_options)?;
        let count = spec.variables.count(&base.scene);
        if spec.bounds.len() != count {
            return Err(Error::invalid(format!(
                "{} variables need {count} bounds, got {}",
                spec.variables.name(),
                spec.bounds.len()
            )));
        }
        if count == 0 {
            return Err(Error::invalid("task has no decision variables"));
        }
        if let Variables::ActuationKnots { knots: 0 } = spec.variables {
            return Err(Error::invalid("actuation knots must be positive"));
        }
        spec.loss.validate(&base.scene, base.controls.steps())?;
        let sim = match spec.variables {
            Variables::Material => None,
            _ => Some(Simulator::new(base.scene.clone(), spec.solver.clone())?),
        };
        Ok(Self { spec, base, sim })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn base(&self) -> &SceneInstance {
        &self.base
    }

    pub fn num_variables(&self) -> usize {
        self.spec.bounds.len()
    }

    /// Replaces the loss, e.g. after generating a reference trajectory.
    pub fn set_loss(&mut self, loss: LossSpec) -> Result<()> {
        loss.validate(&self.base.scene, self.base.controls.steps())?;
        self.spec.loss = loss;
        Ok(())
    }

    fn check_vars(&self, vars: &[f64]) -> Result<()> {
        if vars.len() != self.num_variables() {
            return Err(Error::invalid(format!("expected {} variables, got {}", self.num_variables(), vars.len())));
        }
        if !vars.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("variables must be finite"));
        }
        Ok(())
    }

    fn setup(&self, vars: &[f64]) -> Result<(Option<Simulator>, SimState, Controls)> {
        self.check_vars(vars)?;
        let mut initial = self.base.initial.clone();
        let mut controls = self.base.controls.clone();
        let scene = &self.base.scene;
        let steps = controls.steps();
        let h = scene.dt();
        match &self.spec.variables {
            Variables::Material => {
                let mut scene = scene.clone();
                scene.set_material(MaterialParams::new(vars[0].exp(), vars[1]))?;
                return Ok((Some(Simulator::new(scene, self.spec.solver.clone())?), initial, controls));
            }
            Variables::InitialMotion => {
                for j in 0..scene.mesh().num_nodes() {
                    for a in 0..3 {
                        initial.x[3 * j + a] += vars[a];
                        initial.v[3 * j + a] = vars[3 + a];
                    }
                }
                scene.apply_dirichlet(&mut initial.x);
                scene.zero_dirichlet(&mut initial.v);
            }
            Variables::StaticActuation => {
                for act in controls.act.iter_mut() {
                    act.iter_mut().zip(vars).for_each(|(r, a)| *r = 1.0 - a);
                }
            }
            Variables::ActuationKnots { knots } => {
                for (i, act) in controls.act.iter_mut().enumerate() {
                    let w = knot_weights(i, steps, *knots);
                    for (g, r) in act.iter_mut().enumerate() {
                        let a: f64 = w.iter().map(|&(k, t)| t * vars[g * knots + k]).sum();
                        *r = 1.0 - a;
                    }
                }
            }
            Variables::SineGait => {
                for (i, act) in controls.act.iter_mut().enumerate() {
                    let time = (i + 1) as f64 * h;
                    for (g, r) in act.iter_mut().enumerate() {
                        *r = 1.0 - 0.5 * vars[0] * (1.0 + gait_phase(vars, g, time).sin());
                    }
                }
            }
        }
        Ok((None, initial, controls))
    }

    fn simulator<'a>(&'a self, own: &'a Option<Simulator>) -> &'a Simulator {
        own.as_ref().or(self.sim.as_ref()).expect("a simulator is always available")
    }

    pub fn simulate(&self, vars: &[f64]) -> Result<Trajectory> {
        let (own, initial, controls) = self.setup(vars)?;
        self.simulator(&own).simulate(initial, &controls)
    }

    pub fn loss(&self, vars: &[f64]) -> Result<(f64, bool)> {
        let traj = self.simulate(vars)?;
        let (loss, _) = self.spec.loss.evaluate(&self.base.scene, &traj);
        Ok((loss, traj.all_converged()))
    }

    /// Simulates, evaluates the loss and backpropagates into the variables.
    pub fn eval_loss_and_grad(&self, vars: &[f64]) -> Result<Evaluation> {
        let (own, initial, controls) = self.setup(vars)?;
        let sim = self.simulator(&own);
        let traj = sim.simulate(initial, &controls)?;
        let (loss, dl) = self.spec.loss.evaluate(sim.scene(), &traj);
        let bundle = backprop_trajectory(sim, &traj, &dl, &AdjointConfig::matching(&self.spec.solver))?;
        let grad = self.chain(vars, &bundle);
        Ok(Evaluation {
            loss,
            grad,
            converged: traj.all_converged(),
        })
    }

    fn chain(&self, vars: &[f64], b: &GradientBundle) -> Vec<f64> {
        let scene = &self.base.scene;
        let steps = b.d_act.len();
        let groups = scene.num_muscle_groups();
        match &self.spec.variables {
            Variables::Material => vec![vars[0].exp() * b.d_youngs_modulus, b.d_poissons_ratio],
            Variables::InitialMotion => {
                let mut g = vec![0.0; 6];
                for j in 0..scene.mesh().num_nodes() {
                    for a in 0..3 {
                        g[a] += b.dx0[3 * j + a];
                        g[3 + a] += b.dv0[3 * j + a];
                    }
                }
                g
            }
            Variables::StaticActuation => (0..groups).map(|g| -b.d_act.iter().map(|a| a[g]).sum::<f64>()).collect(),
            Variables::ActuationKnots { knots } => {
                let mut g = vec![0.0; groups * knots];
                for (i, da) in b.d_act.iter().enumerate() {
                    for (k, t) in knot_weights(i, steps, *knots) {
                        for grp in 0..groups {
                            g[grp * knots + k] -= t * da[grp];
                        }
                    }
                }
                g
            }
            Variables::SineGait => {
                let h = scene.dt();
                let mut g = vec![0.0; 3];
                for (i, da) in b.d_act.iter().enumerate() {
                    let time = (i + 1) as f64 * h;
                    for (grp, &d) in da.iter().enumerate() {
                        let theta = gait_phase(vars, grp, time);
                        // act = 1 − ½A(1 + sin θ).
                        g[0] -= d * 0.5 * (1.0 + theta.sin());
                        let dtheta = -d * 0.5 * vars[0] * theta.cos();
                        g[1] += dtheta * 2.0 * PI * time;
                        g[2] += dtheta * grp as f64;
                    }
                }
                g
            }
        }
    }

    /// Uniform samples inside the bounds, reproducible from `seed`.
    pub fn random_samples(&self, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let (lo, hi) = (self.spec.bounds.lower(), self.spec.bounds.upper());
        if lo.iter().chain(hi).any(|v| !v.is_finite()) {
            return Err(Error::invalid("random sampling needs finite bounds"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..count)
            .map(|_| (0..lo.len()).map(|i| if lo[i] == hi[i] { lo[i] } else { rng.random_range(lo[i]..=hi[i]) }).collect())
            .collect())
    }

    /// Loss at `count` random samples, evaluated in parallel.
    pub fn random_baseline(&self, count: usize, seed: u64) -> Result<RandomBaseline> {
        let samples = self.random_samples(count, seed)?;
        let losses = samples
            .par_iter()
            .map(|s| self.loss(s).map(|(l, _)| l))
            .collect::<Result<Vec<f64>>>()?;
        Ok(RandomBaseline { samples, losses })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomBaseline {
    pub samples: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
}

impl RandomBaseline {
    pub fn mean(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }

    /// Index and loss of the best sample.
    pub fn best(&self) -> (usize, f64) {
        self.losses
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("baseline has samples")
    }
}

#[derive(Debug, Clone)]
pub struct TaskResult {
    pub x: Vec<f64>,
    pub loss: f64,
    pub start: Vec<f64>,
    pub initial_loss: f64,
    pub history: Vec<EvalRecord>,
    pub termination: Termination,
    pub iterations: usize,
    pub nonconverged_evaluations: usize,
    pub baseline: RandomBaseline,
    /// Loss that maps to 0 in normalized units.
    pub reference_loss: f64,
}

impl TaskResult {
    /// Zero at the reference loss, one at the random-sample mean.
    pub fn normalize(&self, loss: f64) -> f64 {
        let span = self.baseline.mean() - self.reference_loss;
        if span == 0.0 {
            return 0.0;
        }
        (loss - self.reference_loss) / span
    }
}

pub const BASELINE_SAMPLES: usize = 16;

/// Optimizes `task` from `start`. With `multi_start`, the best of the random
/// baseline samples replaces `start` if it is better. `known_optimum` is the
/// loss of a known solution (zero for self-generated targets); otherwise the
/// optimized loss serves as the normalization reference.
pub fn optimize(task: &Task, start: &[f64], multi_start: bool, known_optimum: Option<f64>) -> Result<TaskResult> {
    let baseline = task.random_baseline(BASELINE_SAMPLES, task.spec.seed)?;
    let mut start = start.to_vec();
    task.spec.bounds.project(&mut start);
    if multi_start {
        let (i, best) = baseline.best();
        if best < task.loss(&start)?.0 {
            start = baseline.samples[i].clone();
        }
    }
    let mut nonconverged = 0;
    let objective = |x: &[f64]| {
        let e = task.eval_loss_and_grad(x)?;
        if !e.converged {
            nonconverged += 1;
        }
        Ok((e.loss, e.grad))
    };
    let r = match &task.spec.optimizer {
        OptimizerSpec::Lbfgs(o) => lbfgs(objective, &start, &task.spec.bounds, o)?,
        OptimizerSpec::Adam(o) => adam(objective, &start, &task.spec.bounds, o)?,
    };
    let initial_loss = r.history.first().map_or(r.loss, |e| e.loss);
    Ok(TaskResult {
        reference_loss: known_optimum.unwrap_or(r.loss),
        x: r.x,
        loss: r.loss,
        start,
        initial_loss,
        history: r.history,
        termination: r.termination,
        iterations: r.iterations,
        nonconverged_evaluations: nonconverged,
        baseline,
    })
}

/// The built-in optimization problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    /// Recover (E, ν) of the plucked stem from its own trajectory.
    SystemId,
    /// Same, for the block bouncing on a penalty floor.
    BouncingSystemId,
    /// Constant muscle activations bending the tendon beam onto a target.
    TendonReach,
    /// Initial offset and velocity landing the blob near a target.
    BunnyToss,
    /// Three-parameter gait maximizing the crawler's forward travel.
    CrawlerGait,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::SystemId,
        TaskKind::BouncingSystemId,
        TaskKind::TendonReach,
        TaskKind::BunnyToss,
        TaskKind::CrawlerGait,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::SystemId => "system_id",
            TaskKind::BouncingSystemId => "bouncing_system_id",
            TaskKind::TendonReach => "tendon_reach",
            TaskKind::BunnyToss => "bunny_toss",
            TaskKind::CrawlerGait => "crawler_gait",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task '{s}'")))
    }
}

/// Overrides for a preset task.
#[derive(Debug, Clone, Default)]
pub struct PresetOptions {
    pub scene: SceneOptions,
    pub solver: Option<SolverConfig>,
    pub seed: u64,
    pub max_iters: Option<usize>,
    /// Ground-truth variables used to generate the target.
    pub truth: Option<Vec<f64>>,
    /// Starting point.
    pub start: Option<Vec<f64>>,
}

/// A task with its starting point and, for self-generated targets, the
/// variables that produced the target.
pub struct Preset {
    pub kind: TaskKind,
    pub task: Task,
    pub start: Vec<f64>,
    pub truth: Option<Vec<f64>>,
    pub multi_start: bool,
}

impl Preset {
    pub fn run(&self) -> Result<TaskResult> {
        let known = self.truth.as_ref().map(|_| 0.0);
        optimize(&self.task, &self.start, self.multi_start, known)
    }
}

fn lbfgs_spec(max_iters: usize, gtol: f64, ftol: f64) -> OptimizerSpec {
    OptimizerSpec::Lbfgs(LbfgsOptions {
        max_iters,
        gtol,
        ftol,
        ..Default::default()
    })
}

fn vars_or(value: &Option<Vec<f64>>, default: Vec<f64>) -> Vec<f64> {
    value.clone().unwrap_or(default)
}

pub fn preset(kind: TaskKind, opts: &PresetOptions) -> Result<Preset> {
    // Identification and reaching use tight solves; the contact-rich tasks
    // only need to beat sampled baselines and use the contact tolerance,
    // which also bounds the loss decrease worth pursuing.
    let solver_for = |tol: f64| {
        opts.solver.clone().unwrap_or(SolverConfig {
            max_iters: 5000,
            ..SolverConfig::with_method(Method::Pd, tol)
        })
    };
    let placeholder = LossSpec::terminal(LossKind::WeightedFinalState { seed: opts.seed });
    let spec = |scene, variables, bounds, gtol, tol, iters: usize| TaskSpec {
        scene,
        scene_options: opts.scene.clone(),
        variables,
        bounds,
        loss: placeholder.clone(),
        optimizer: lbfgs_spec(opts.max_iters.unwrap_or(iters), gtol, if tol >= 1e-6 { tol } else { LbfgsOptions::default().ftol }),
        solver: solver_for(tol),
        seed: opts.seed,
    };
    match kind {
        TaskKind::SystemId | TaskKind::BouncingSystemId => {
            let scene = if kind == TaskKind::SystemId { SceneKind::PlantAnalog } else { SceneKind::BouncingBlock };
            let bounds = Bounds::new(vec![1e4f64.ln(), 0.2], vec![1e6f64.ln(), 0.45])?;
            let mut task = Task::new(spec(scene, Variables::Material, bounds, 1e-14, 1e-9, 100))?;
            let m = task.base().scene.material();
            let truth = vars_or(&opts.truth, vec![m.youngs_modulus.ln(), m.poissons_ratio]);
            let reference = task.simulate(&truth)?.records.iter().map(|r| r.x.clone()).collect();
            task.set_loss(LossSpec::terminal(LossKind::PositionMatch { reference }))?;
            let start = vars_or(&opts.start, vec![(3.0 * m.youngs_modulus).ln(), 0.3]);
            Ok(Preset {
                kind,
                task,
                start,
                truth: Some(truth),
                multi_start: false,
            })
        }
        TaskKind::TendonReach => {
            let probe = |scene: &Scene| {
                // Node at the middle of the top face's front edge.
                let mesh = scene.mesh();
                let top = (0..mesh.num_nodes()).map(|j| mesh.rest_node(j)).fold(f64::MIN, |m, p| m.max(p.z));
                let mid_x = (0..mesh.num_nodes()).map(|j| mesh.rest_node(j).x).fold(f64::MIN, f64::max) / 2.0;
                (0..mesh.num_nodes())
                    .min_by(|&a, &b| {
                        let key = |j: usize| {
                            let p = mesh.rest_node(j);
                            (p.z - top).abs() + (p.x - mid_x).abs() + p.y.abs()
                        };
                        key(a).total_cmp(&key(b))
                    })
                    .expect("mesh has nodes")
            };
            let groups = build_scene(SceneKind::Tendon, &opts.scene)?.scene.num_muscle_groups();
            let bounds = Bounds::new(vec![0.0; groups], vec![0.3; groups])?;
            let mut task = Task::new(spec(SceneKind::Tendon, Variables::StaticActuation, bounds, 1e-14, 1e-9, 100))?;
            let j = probe(&task.base().scene);
            let default_truth: Vec<f64> = [0.2, 0.05, 0.0, 0.15].iter().cycle().take(groups).copied().collect();
            let truth = vars_or(&opts.truth, default_truth);
            let target = node(&task.simulate(&truth)?.final_state().x, j);
            task.set_loss(LossSpec::terminal(LossKind::PointTarget { target, node: Some(j) }))?;
            let start = vars_or(&opts.start, vec![0.1; groups]);
            Ok(Preset {
                kind,
                task,
                start,
                truth: Some(truth),
                multi_start: false,
            })
        }
        TaskKind::BunnyToss => {
            let bounds = Bounds::new(vec![-0.005, -0.005, -0.005, -0.5, -0.5, -1.0], vec![0.005, 0.005, 0.005, 0.5, 0.5, 0.0])?;
            let mut task = Task::new(spec(SceneKind::Bunny, Variables::InitialMotion, bounds, 1e-12, 1e-6, 30))?;
            let com = task.base().scene.center_of_mass(&task.base().initial.x);
            let target = Vector3::new(com.x + 0.02, com.y - 0.01, 0.5 * com.z);
            task.set_loss(LossSpec::terminal(LossKind::PointTarget { target, node: None }))?;
            let start = vars_or(&opts.start, vec![0.0, 0.0, 0.0, 0.0, 0.0, -0.5]);
            Ok(Preset {
                kind,
                task,
                start,
                truth: None,
                multi_start: false,
            })
        }
        TaskKind::CrawlerGait => {
            let bounds = Bounds::new(vec![0.0, 2.0, -PI], vec![0.3, 25.0, PI])?;
            let mut task = Task::new(spec(SceneKind::Crawler, Variables::SineGait, bounds, 1e-12, 1e-6, 30))?;
            task.set_loss(LossSpec::terminal(LossKind::ForwardProgress { axis: 0, height_weight: 0.0 }))?;
            let start = vars_or(&opts.start, vec![0.15, 10.0, 0.5 * PI]);
            Ok(Preset {
                kind,
                task,
                start,
                truth: None,
                multi_start: true,
            })
        }
    }
}

pub fn run_system_id(opts: &PresetOptions) -> Result<TaskResult> {
    preset(TaskKind::SystemId, opts)?.run()
}

pub fn run_inverse_design(kind: TaskKind, opts: &PresetOptions) -> Result<TaskResult> {
    match kind {
        TaskKind::TendonReach | TaskKind::BunnyToss => preset(kind, opts)?.run(),
        _ => Err(Error::invalid(format!("{} is not an inverse-design task", kind.name()))),
    }
}

pub fn run_trajectory_opt(opts: &PresetOptions) -> Result<TaskResult> {
    preset(TaskKind::CrawlerGait, opts)?.run()
}
