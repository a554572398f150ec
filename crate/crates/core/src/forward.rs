//! Implicit time stepping: projective dynamics accelerated with L-BFGS,
//! Newton baselines (Cholesky and PCG), and the active-set contact loop.

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::lbfgs::History;
use crate::mesh::node;
use crate::scene::Scene;
use crate::sparse::{dot, norm, pcg, ContactSet, PcgOutcome, SolveCounters, SpdFactor, SymMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Pd,
    NewtonPcg,
    NewtonCholesky,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Pd, Method::NewtonPcg, Method::NewtonCholesky];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Pd => "pd",
            Method::NewtonPcg => "newton_pcg",
            Method::NewtonCholesky => "newton_cholesky",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pd" => Ok(Method::Pd),
            "newton_pcg" => Ok(Method::NewtonPcg),
            "newton_cholesky" => Ok(Method::NewtonCholesky),
            other => Err(Error::invalid(format!("unknown solver method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    /// Relative residual threshold.
    pub tol: f64,
    pub max_iters: usize,
    /// L-BFGS pairs kept by the PD solver; 0 gives plain global-local steps.
    pub history: usize,
    pub armijo: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
    pub contact_max_outer: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Pd,
            tol: 1e-4,
            max_iters: 500,
            history: 10,
            armijo: 1e-4,
            shrink: 0.5,
            max_backtracks: 20,
            contact_max_outer: 10,
        }
    }
}

impl SolverConfig {
    pub fn with_method(method: Method, tol: f64) -> Self {
        Self {
            method,
            tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::invalid(format!("tolerance must lie in (0, 1), got {}", self.tol)));
        }
        if self.max_iters == 0 || self.contact_max_outer == 0 {
            return Err(Error::invalid("iteration limits must be at least 1"));
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) || !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::invalid("line-search parameters must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
}

impl SimState {
    pub fn new(x: Vec<f64>, v: Vec<f64>) -> Self {
        Self { x, v, step: 0 }
    }

    pub fn at_rest(scene: &Scene) -> Self {
        Self::new(scene.mesh().rest_positions(), vec![0.0; scene.num_dofs()])
    }
}

/// Work and timing for one step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepStats {
    pub iterations: usize,
    pub contact_iterations: usize,
    pub force_evals: usize,
    pub eval_seconds: f64,
    pub solve_seconds: f64,
    pub contact_seconds: f64,
    /// Newton fell back to a PSD-projected Hessian at least once.
    pub projected_hessian: bool,
    /// Largest increase of the step objective between accepted iterates.
    pub max_objective_increase: f64,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub x_prev: Vec<f64>,
    pub v_prev: Vec<f64>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub y: Vec<f64>,
    pub f_ext: Vec<f64>,
    pub act: Vec<f64>,
    pub active: ContactSet,
    /// Normal contact force per contact candidate (zero when inactive).
    pub lambda: Vec<f64>,
    /// Converged relative residual of the inner solve.
    pub residual: f64,
    pub converged: bool,
    pub contact_converged: bool,
    pub stats: StepStats,
}

impl StepRecord {
    pub fn state(&self) -> SimState {
        SimState {
            x: self.x.clone(),
            v: self.v.clone(),
            step: self.step + 1,
        }
    }
}

/// Per-step external forces and actuation.
#[derive(Debug, Clone, PartialEq)]
pub struct Controls {
    pub f_ext: Vec<Vec<f64>>,
    pub act: Vec<Vec<f64>>,
}

impl Controls {
    /// Gravity every step and the same actuation throughout.
    pub fn constant(scene: &Scene, steps: usize, act: &[f64]) -> Self {
        let g = scene.gravity_force();
        Self {
            f_ext: vec![g; steps],
            act: vec![act.to_vec(); steps],
        }
    }

    pub fn steps(&self) -> usize {
        self.f_ext.len()
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub initial: SimState,
    pub records: Vec<StepRecord>,
}

impl Trajectory {
    pub fn final_state(&self) -> SimState {
        self.records.last().map(|r| r.state()).unwrap_or_else(|| self.initial.clone())
    }

    /// Positions at every frame, starting with the initial state.
    pub fn positions(&self) -> Vec<&[f64]> {
        std::iter::once(self.initial.x.as_slice())
            .chain(self.records.iter().map(|r| r.x.as_slice()))
            .collect()
    }

    pub fn all_converged(&self) -> bool {
        self.records.iter().all(|r| r.converged && r.contact_converged)
    }
}

/// A scene with its lazily built projective factorization.
pub struct Simulator {
    scene: Scene,
    config: SolverConfig,
    counters: Arc<SolveCounters>,
    cache_columns: bool,
    factor: OnceLock<SpdFactor>,
}

impl std::fmt::Debug for Simulator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulator")
            .field("config", &self.config)
            .field("cache_columns", &self.cache_columns)
            .field("factorized", &self.factor.get().is_some())
            .finish()
    }
}

struct InnerResult {
    x: Vec<f64>,
    residual: f64,
    converged: bool,
}

impl Simulator {
    pub fn new(scene: Scene, config: SolverConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            scene,
            config,
            counters: Arc::new(SolveCounters::default()),
            cache_columns: true,
            factor: OnceLock::new(),
        })
    }

    /// Enables or disables caching `A⁻¹` columns for contact candidates.
    pub fn with_column_cache(mut self, on: bool) -> Self {
        self.cache_columns = on;
        self.factor = OnceLock::new();
        self
    }

    pub fn with_counters(mut self, counters: Arc<SolveCounters>) -> Self {
        self.counters = counters;
        self
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn set_config(&mut self, config: SolverConfig) -> Result<()> {
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn counters(&self) -> &Arc<SolveCounters> {
        &self.counters
    }

    pub fn column_cache(&self) -> bool {
        self.cache_columns
    }

    /// The projective factorization, built on first use.
    pub fn factor(&self) -> Result<&SpdFactor> {
        if let Some(f) = self.factor.get() {
            return Ok(f);
        }
        let f = self.scene.factorize(self.cache_columns, Arc::clone(&self.counters))?;
        Ok(self.factor.get_or_init(|| f))
    }

    pub fn assemble_y(&self, state: &SimState, f_ext: &[f64]) -> Vec<f64> {
        assemble_y(&state.x, &state.v, f_ext, self.scene.mass().diag(), self.scene.dt())
    }

    pub fn simulate(&self, initial: SimState, controls: &Controls) -> Result<Trajectory> {
        if controls.act.len() != controls.f_ext.len() {
            return Err(Error::invalid("force and actuation schedules differ in length"));
        }
        let mut records = Vec::with_capacity(controls.steps());
        let mut state = initial.clone();
        for k in 0..controls.steps() {
            let rec = self
                .step(&state, &controls.f_ext[k], &controls.act[k])
                .map_err(|e| e.at_step(state.step))?;
            state = rec.state();
            records.push(rec);
        }
        Ok(Trajectory { initial, records })
    }

    /// One backward Euler step, with the contact loop if the scene has
    /// contact candidates.
    pub fn step(&self, state: &SimState, f_ext: &[f64], act: &[f64]) -> Result<StepRecord> {
        let scene = &self.scene;
        let n = scene.num_dofs();
        if state.x.len() != n || state.v.len() != n || f_ext.len() != n {
            return Err(Error::invalid("state or force vector has the wrong length"));
        }
        let y = self.assemble_y(state, f_ext);
        let mut stats = StepStats::default();

        let mut x0 = y.clone();
        scene.apply_dirichlet(&mut x0);

        let Some(contact) = scene.contact() else {
            let inner = self.inner_solve(&x0, &y, f_ext, act, &ContactSet::empty(), &mut stats)?;
            return Ok(self.finish(state, inner, y, f_ext, act, ContactSet::empty(), Vec::new(), true, stats));
        };

        let t0 = Instant::now();
        let dx = scene.mesh().dx();
        let eps_geom = 1e-6 * dx;
        let eps_force = 1e-8 * self.force_scale(f_ext);
        let normal = contact.plane.normal;
        let mut active = ContactSet::empty();
        let mut guess = x0;
        let mut outcome = None;
        let mut contact_converged = false;
        for _ in 0..self.config.contact_max_outer {
            stats.contact_iterations += 1;
            for &j in active.nodes() {
                guess[3 * j..3 * j + 3].copy_from_slice(&state.x[3 * j..3 * j + 3]);
            }
            let inner = self.inner_solve(&guess, &y, f_ext, act, &active, &mut stats)?;
            let r = self.residual(&inner.x, &y, act, &mut stats)?;
            let lambda: Vec<f64> = contact
                .candidates
                .iter()
                .map(|&j| if active.contains(j) { node(&r, j).dot(&normal) } else { 0.0 })
                .collect();
            let next = ContactSet::new(
                contact
                    .candidates
                    .iter()
                    .zip(&lambda)
                    .filter(|&(&j, &l)| {
                        let phi = contact.plane.signed_distance(&node(&inner.x, j));
                        phi < -eps_geom || (active.contains(j) && l > eps_force)
                    })
                    .map(|(&j, _)| j)
                    .collect(),
            );
            guess = inner.x.clone();
            let same = next == active;
            outcome = Some((inner, lambda, active.clone()));
            if same {
                contact_converged = true;
                break;
            }
            active = next;
        }
        stats.contact_seconds = t0.elapsed().as_secs_f64();
        let (inner, lambda, active) = outcome.expect("at least one outer iteration");
        Ok(self.finish(state, inner, y, f_ext, act, active, lambda, contact_converged, stats))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        state: &SimState,
        inner: InnerResult,
        y: Vec<f64>,
        f_ext: &[f64],
        act: &[f64],
        active: ContactSet,
        lambda: Vec<f64>,
        contact_converged: bool,
        stats: StepStats,
    ) -> StepRecord {
        let h = self.scene.dt();
        let v = inner.x.iter().zip(&state.x).map(|(a, b)| (a - b) / h).collect();
        StepRecord {
            step: state.step,
            x_prev: state.x.clone(),
            v_prev: state.v.clone(),
            x: inner.x,
            v,
            y,
            f_ext: f_ext.to_vec(),
            act: act.to_vec(),
            active,
            lambda,
            residual: inner.residual,
            converged: inner.converged,
            contact_converged,
            stats,
        }
    }

    /// Scale for the contact force threshold: total weight, or the external
    /// force norm when there is no gravity.
    fn force_scale(&self, f_ext: &[f64]) -> f64 {
        let w = self.scene.mass().total() * self.scene.gravity().norm();
        if w > 0.0 {
            w
        } else {
            norm(f_ext).max(f64::MIN_POSITIVE)
        }
    }

    /// Full residual `(M/h²)(x − y) − f_int(x)`.
    fn residual(&self, x: &[f64], y: &[f64], act: &[f64], stats: &mut StepStats) -> Result<Vec<f64>> {
        Ok(self.objective(x, y, act, stats)?.1)
    }

    /// `Φ(x) = ½‖x − y‖²_M / h² + E(x)` and its unmasked gradient.
    fn objective(&self, x: &[f64], y: &[f64], act: &[f64], stats: &mut StepStats) -> Result<(f64, Vec<f64>)> {
        let t = Instant::now();
        let (e, mut g) = self.scene.energy_and_force(x, act)?;
        let m = self.scene.mass().diag();
        let h2 = self.scene.dt() * self.scene.dt();
        let mut phi = e;
        for i in 0..x.len() {
            let d = x[i] - y[i];
            phi += 0.5 * m[i] / h2 * d * d;
            g[i] = m[i] / h2 * d - g[i];
        }
        stats.force_evals += 1;
        stats.eval_seconds += t.elapsed().as_secs_f64();
        Ok((phi, g))
    }

    fn fixed_mask(&self, active: &ContactSet) -> Vec<bool> {
        let mut mask = self.scene.dirichlet_mask().to_vec();
        for d in active.dofs() {
            mask[d] = true;
        }
        mask
    }

    fn reference_scale(&self, y: &[f64], f_ext: &[f64]) -> f64 {
        let m = self.scene.mass().diag();
        let h2 = self.scene.dt() * self.scene.dt();
        let my: f64 = y.iter().zip(m).map(|(y, m)| (m / h2 * y).powi(2)).sum::<f64>().sqrt();
        my.max(norm(f_ext)).max(f64::MIN_POSITIVE)
    }

    fn inner_solve(
        &self,
        x0: &[f64],
        y: &[f64],
        f_ext: &[f64],
        act: &[f64],
        active: &ContactSet,
        stats: &mut StepStats,
    ) -> Result<InnerResult> {
        match self.config.method {
            Method::Pd => self.solve_pd(x0, y, f_ext, act, active, stats),
            Method::NewtonPcg | Method::NewtonCholesky => self.solve_newton(x0, y, f_ext, act, active, stats),
        }
    }

    fn solve_pd(
        &self,
        x0: &[f64],
        y: &[f64],
        f_ext: &[f64],
        act: &[f64],
        active: &ContactSet,
        stats: &mut StepStats,
    ) -> Result<InnerResult> {
        let factor = self.factor()?;
        let t = Instant::now();
        let system = factor.prepare_lowrank(active, self.cache_columns)?;
        stats.solve_seconds += t.elapsed().as_secs_f64();
        let zeros = vec![0.0; active.dofs().len()];
        let mask = self.fixed_mask(active);
        let scale = self.reference_scale(y, f_ext);
        let cfg = &self.config;

        let mut x = x0.to_vec();
        let (mut phi, mut g) = self.objective(&x, y, act, stats)?;
        mask_out(&mut g, &mask);
        let mut hist = History::new(cfg.history);
        let mut res = norm(&g) / scale;
        for _ in 0..cfg.max_iters {
            if res <= cfg.tol {
                return Ok(InnerResult { x, residual: res, converged: true });
            }
            stats.iterations += 1;
            let t = Instant::now();
            let h0 = |q: &[f64]| system.solve(factor, q, &zeros);
            let mut p = hist.apply(&g, h0)?;
            p.iter_mut().for_each(|v| *v = -*v);
            if !(dot(&g, &p) < 0.0) {
                hist.clear();
                p = system.solve(factor, &g, &zeros)?;
                p.iter_mut().for_each(|v| *v = -*v);
            }
            stats.solve_seconds += t.elapsed().as_secs_f64();
            mask_out(&mut p, &mask);

            let step = match self.line_search(&x, phi, &g, &p, y, act, &mask, stats)? {
                Some(s) => s,
                None if !hist.is_empty() => {
                    hist.clear();
                    let mut p0 = system.solve(factor, &g, &zeros)?;
                    p0.iter_mut().for_each(|v| *v = -*v);
                    mask_out(&mut p0, &mask);
                    match self.line_search(&x, phi, &g, &p0, y, act, &mask, stats)? {
                        Some(s) => s,
                        None => break,
                    }
                }
                None => break,
            };
            let s: Vec<f64> = step.x.iter().zip(&x).map(|(a, b)| a - b).collect();
            let dy: Vec<f64> = step.g.iter().zip(&g).map(|(a, b)| a - b).collect();
            hist.push(s, dy);
            x = step.x;
            phi = step.phi;
            g = step.g;
            res = norm(&g) / scale;
        }
        Ok(InnerResult {
            x,
            residual: res,
            converged: res <= cfg.tol,
        })
    }

    fn solve_newton(
        &self,
        x0: &[f64],
        y: &[f64],
        f_ext: &[f64],
        act: &[f64],
        active: &ContactSet,
        stats: &mut StepStats,
    ) -> Result<InnerResult> {
        let mask = self.fixed_mask(active);
        let scale = self.reference_scale(y, f_ext);
        let cfg = &self.config;
        let mut x = x0.to_vec();
        let (mut phi, mut g) = self.objective(&x, y, act, stats)?;
        mask_out(&mut g, &mask);
        let mut res = norm(&g) / scale;
        for _ in 0..cfg.max_iters {
            if res <= cfg.tol {
                return Ok(InnerResult { x, residual: res, converged: true });
            }
            stats.iterations += 1;
            let mut accepted = None;
            for project in [false, true] {
                if project {
                    stats.projected_hessian = true;
                }
                let t = Instant::now();
                let mut hess = self.scene.newton_matrix(&x, act, project)?;
                hess.eliminate(&mask);
                let dir = self.newton_direction(&hess, &g);
                stats.solve_seconds += t.elapsed().as_secs_f64();
                let mut p = match dir {
                    Ok(p) => p,
                    Err(e) if e.is_numerical() && !project => continue,
                    Err(e) => return Err(e),
                };
                p.iter_mut().for_each(|v| *v = -*v);
                mask_out(&mut p, &mask);
                if !(dot(&g, &p) < 0.0) {
                    if project {
                        return Err(Error::numerical("Newton direction is not a descent direction"));
                    }
                    continue;
                }
                if let Some(s) = self.line_search(&x, phi, &g, &p, y, act, &mask, stats)? {
                    accepted = Some(s);
                    break;
                }
                if project {
                    return Err(Error::numerical("Newton line search made no progress"));
                }
            }
            let step = accepted.ok_or_else(|| Error::numerical("Newton iteration failed"))?;
            x = step.x;
            phi = step.phi;
            g = step.g;
            res = norm(&g) / scale;
        }
        Ok(InnerResult {
            x,
            residual: res,
            converged: res <= cfg.tol,
        })
    }

    fn newton_direction(&self, hess: &SymMatrix, g: &[f64]) -> Result<Vec<f64>> {
        match self.config.method {
            Method::NewtonCholesky => {
                let f = crate::sparse::factorize_plain(hess.clone(), Arc::clone(&self.counters))?;
                Ok(f.solve(g))
            }
            _ => {
                let (p, outcome) = pcg(hess, g, self.config.tol, 10 * hess.dim(), &self.counters)?;
                if outcome == PcgOutcome::MaxIterations {
                    return Err(Error::numerical("conjugate gradient hit its iteration cap"));
                }
                Ok(p)
            }
        }
    }

    /// Backtracking Armijo search along `p`. Returns `None` if no step of
    /// the allowed lengths decreases the objective enough.
    #[allow(clippy::too_many_arguments)]
    fn line_search(
        &self,
        x: &[f64],
        phi: f64,
        g: &[f64],
        p: &[f64],
        y: &[f64],
        act: &[f64],
        mask: &[bool],
        stats: &mut StepStats,
    ) -> Result<Option<Accepted>> {
        let cfg = &self.config;
        let slope = dot(g, p);
        // Roundoff allowance on Φ itself; without it a converged iterate
        // cannot satisfy the test.
        let slack = 8.0 * f64::EPSILON * phi.abs();
        let noise = 1e6 * f64::EPSILON * phi.abs();
        let mut alpha = 1.0;
        for _ in 0..=cfg.max_backtracks {
            let xt: Vec<f64> = x.iter().zip(p).map(|(a, b)| a + alpha * b).collect();
            match self.objective(&xt, y, act, stats) {
                Ok((pt, mut gt)) if pt <= phi + cfg.armijo * alpha * slope + slack => {
                    mask_out(&mut gt, mask);
                    stats.max_objective_increase = stats.max_objective_increase.max(pt - phi);
                    return Ok(Some(Accepted { x: xt, phi: pt, g: gt }));
                }
                // Near the roundoff floor Φ cannot resolve the decrease; fall
                // back to the slope along p, which still can.
                Ok((pt, mut gt)) if pt <= phi + noise => {
                    mask_out(&mut gt, mask);
                    let end_slope = dot(&gt, p);
                    if end_slope <= (1.0 - 2.0 * cfg.armijo) * slope.abs() && end_slope >= 0.9 * slope {
                        stats.max_objective_increase = stats.max_objective_increase.max(pt - phi);
                        return Ok(Some(Accepted { x: xt, phi: pt, g: gt }));
                    }
                }
                Ok(_) => {}
                // Trial points that make a projection fail are simply too long.
                Err(e) if e.is_numerical() => {}
                Err(e) => return Err(e),
            }
            alpha *= cfg.shrink;
        }
        Ok(None)
    }
}

struct Accepted {
    x: Vec<f64>,
    phi: f64,
    g: Vec<f64>,
}

fn mask_out(v: &mut [f64], mask: &[bool]) {
    for (vi, &m) in v.iter_mut().zip(mask) {
        if m {
            *vi = 0.0;
        }
    }
}

/// `y = x + h v + h² M⁻¹ f_ext`.
pub fn assemble_y(x: &[f64], v: &[f64], f_ext: &[f64], mass: &[f64], h: f64) -> Vec<f64> {
    (0..x.len()).map(|i| x[i] + h * v[i] + h * h * f_ext[i] / mass[i]).collect()
}

/// Per-candidate contact check: returns the worst penetration below the
/// plane, the most negative normal force on an active node, and the largest
/// displacement of an active node during the step.
pub fn complementarity(scene: &Scene, rec: &StepRecord) -> Option<ContactReport> {
    let contact = scene.contact()?;
    let mut rep = ContactReport::default();
    for (k, &j) in contact.candidates.iter().enumerate() {
        let p = node(&rec.x, j);
        rep.min_distance = rep.min_distance.min(contact.plane.signed_distance(&p));
        if rec.active.contains(j) {
            rep.min_active_force = rep.min_active_force.min(rec.lambda[k]);
            rep.max_active_motion = rep.max_active_motion.max((p - node(&rec.x_prev, j)).norm());
        } else if rec.lambda[k] != 0.0 {
            rep.inactive_force = true;
        }
    }
    Some(rep)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactReport {
    pub min_distance: f64,
    pub min_active_force: f64,
    pub max_active_motion: f64,
    pub inactive_force: bool,
}

impl Default for ContactReport {
    fn default() -> Self {
        Self {
            min_distance: f64::INFINITY,
            min_active_force: f64::INFINITY,
            max_active_motion: 0.0,
            inactive_force: false,
        }
    }
}
