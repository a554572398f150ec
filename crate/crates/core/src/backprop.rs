//! Reverse-mode gradients through trajectories. Each step solves an adjoint
//! system with the Newton matrix `A_N = A − ΔA`; the default solver is an
//! L-BFGS iteration preconditioned by the constant projective factor.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::forward::{Method, Simulator, SolverConfig, StepRecord, Trajectory};
use crate::lbfgs::History;
use crate::scene::ParamGradient;
use crate::sparse::{dot, factorize_plain, norm, pcg, ContactSet, LowRankSystem, PcgOutcome, SpdFactor, SymMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdjointMethod {
    /// L-BFGS on `½uᵀA_N u − bᵀu` with the projective factor as initial
    /// inverse Hessian.
    QuasiNewton,
    /// `u ← Ã⁻¹(b + ΔA u)`.
    FixedPoint,
    NewtonCholesky,
    NewtonPcg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointConfig {
    pub method: AdjointMethod,
    /// Relative residual `‖A_N u − b‖/‖b‖`.
    pub tol: f64,
    pub max_iters: usize,
    pub history: usize,
}

impl AdjointConfig {
    /// The adjoint counterpart of a forward configuration, same tolerance.
    pub fn matching(forward: &SolverConfig) -> Self {
        let method = match forward.method {
            Method::Pd => AdjointMethod::QuasiNewton,
            Method::NewtonPcg => AdjointMethod::NewtonPcg,
            Method::NewtonCholesky => AdjointMethod::NewtonCholesky,
        };
        Self {
            method,
            tol: forward.tol,
            max_iters: 1000,
            history: 10,
        }
    }

    pub fn with_method(method: AdjointMethod, tol: f64) -> Self {
        Self {
            method,
            tol,
            max_iters: 1000,
            history: 10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdjointStats {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// The quasi-Newton solve met non-positive curvature and fell back to a
    /// direct Newton solve.
    pub degraded: bool,
    pub seconds: f64,
}

/// Loss gradients with respect to every frame's positions and velocities,
/// frame 0 being the initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateLossGradient {
    pub dx: Vec<Vec<f64>>,
    pub dv: Vec<Vec<f64>>,
}

impl StateLossGradient {
    pub fn zeros(frames: usize, dofs: usize) -> Self {
        Self {
            dx: vec![vec![0.0; dofs]; frames],
            dv: vec![vec![0.0; dofs]; frames],
        }
    }

    /// Only the final frame contributes.
    pub fn terminal(frames: usize, dx: Vec<f64>, dv: Vec<f64>) -> Self {
        let mut g = Self::zeros(frames, dx.len());
        g.dx[frames - 1] = dx;
        g.dv[frames - 1] = dv;
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub dx0: Vec<f64>,
    pub dv0: Vec<f64>,
    pub df_ext: Vec<Vec<f64>>,
    pub d_youngs_modulus: f64,
    pub d_poissons_ratio: f64,
    pub d_act: Vec<Vec<f64>>,
    pub stats: Vec<AdjointStats>,
}

impl GradientBundle {
    /// Every scalar component, in a fixed order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(&self.dx0);
        out.extend(&self.dv0);
        self.df_ext.iter().for_each(|f| out.extend(f));
        out.push(self.d_youngs_modulus);
        out.push(self.d_poissons_ratio);
        self.d_act.iter().for_each(|a| out.extend(a));
        out
    }

    pub fn total_iterations(&self) -> usize {
        self.stats.iter().map(|s| s.iterations).sum()
    }
}

/// Gradients produced by one reverse step.
#[derive(Debug, Clone)]
pub struct StepGradient {
    pub dx_prev: Vec<f64>,
    pub dv_prev: Vec<f64>,
    pub df_ext: Vec<f64>,
    pub params: ParamGradient,
    pub stats: AdjointStats,
}

/// The adjoint operator of one step: `A_N` restricted to the DoFs that are
/// neither Dirichlet nor pinned by contact.
struct AdjointSystem<'a> {
    sim: &'a Simulator,
    record: &'a StepRecord,
    mask: Vec<bool>,
    /// `(A, ΔA, prepared low-rank system)` for the projective path.
    projective: Option<(&'a SpdFactor, SymMatrix, LowRankSystem)>,
}

impl<'a> AdjointSystem<'a> {
    fn new(sim: &'a Simulator, record: &'a StepRecord, projective: bool) -> Result<Self> {
        let scene = sim.scene();
        let mut mask = scene.dirichlet_mask().to_vec();
        for d in record.active.dofs() {
            mask[d] = true;
        }
        let projective = if projective {
            let factor = sim.factor()?;
            let delta = scene.delta_matrix(&record.x, &record.act)?;
            let sys = factor.prepare_lowrank(&record.active, sim.column_cache())?;
            Some((factor, delta, sys))
        } else {
            None
        };
        Ok(Self {
            sim,
            record,
            mask,
            projective,
        })
    }

    fn active(&self) -> &ContactSet {
        &self.record.active
    }

    /// `A_N v` on every row (unmasked), using `A − ΔA`.
    fn apply_full(&self, v: &[f64]) -> Vec<f64> {
        let (factor, delta, _) = self.projective.as_ref().expect("projective system");
        let mut out = factor.matrix().apply(v);
        let dv = delta.apply(v);
        out.iter_mut().zip(dv).for_each(|(o, d)| *o -= d);
        out
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = self.apply_full(v);
        mask_out(&mut out, &self.mask);
        out
    }

    /// `Ã⁻¹ q` with pinned DoFs held at zero.
    fn precondition(&self, q: &[f64]) -> Result<Vec<f64>> {
        let (factor, _, sys) = self.projective.as_ref().expect("projective system");
        let zeros = vec![0.0; self.active().dofs().len()];
        let mut out = sys.solve(factor, q, &zeros)?;
        mask_out(&mut out, &self.mask);
        Ok(out)
    }

    fn delta(&self, v: &[f64]) -> Vec<f64> {
        let (_, delta, _) = self.projective.as_ref().expect("projective system");
        let mut out = delta.apply(v);
        mask_out(&mut out, &self.mask);
        out
    }

    fn newton_matrix(&self) -> Result<SymMatrix> {
        self.sim
            .scene()
            .newton_matrix(&self.record.x, &self.record.act, false)
    }
}

fn mask_out(v: &mut [f64], mask: &[bool]) {
    for (vi, &m) in v.iter_mut().zip(mask) {
        if m {
            *vi = 0.0;
        }
    }
}

fn quasi_newton(sys: &AdjointSystem, b: &[f64], cfg: &AdjointConfig, stats: &mut AdjointStats) -> Result<Option<Vec<f64>>> {
    let b_norm = norm(b);
    let mut u = vec![0.0; b.len()];
    let mut r: Vec<f64> = b.iter().map(|v| -v).collect();
    let mut hist = History::new(cfg.history);
    for it in 0..cfg.max_iters {
        stats.residual = norm(&r) / b_norm;
        if stats.residual <= cfg.tol {
            // Guard against drift of the incrementally updated residual.
            let exact: Vec<f64> = sys.apply(&u).iter().zip(b).map(|(a, b)| a - b).collect();
            stats.residual = norm(&exact) / b_norm;
            if stats.residual <= cfg.tol {
                stats.converged = true;
                return Ok(Some(u));
            }
            r = exact;
        }
        stats.iterations = it + 1;
        let mut p = hist.apply(&r, |q| sys.precondition(q))?;
        p.iter_mut().for_each(|v| *v = -*v);
        if !(dot(&r, &p) < 0.0) {
            hist.clear();
            p = sys.precondition(&r)?;
            p.iter_mut().for_each(|v| *v = -*v);
        }
        let q = sys.apply(&p);
        let curvature = dot(&p, &q);
        if !(curvature > 0.0) {
            return Ok(None);
        }
        let alpha = -dot(&r, &p) / curvature;
        let s: Vec<f64> = p.iter().map(|v| alpha * v).collect();
        let y: Vec<f64> = q.iter().map(|v| alpha * v).collect();
        for i in 0..u.len() {
            u[i] += s[i];
            r[i] += y[i];
        }
        hist.push(s, y);
    }
    let exact: Vec<f64> = sys.apply(&u).iter().zip(b).map(|(a, b)| a - b).collect();
    stats.residual = norm(&exact) / b_norm;
    stats.converged = stats.residual <= cfg.tol;
    Ok(Some(u))
}

fn fixed_point(sys: &AdjointSystem, b: &[f64], cfg: &AdjointConfig, stats: &mut AdjointStats) -> Result<Vec<f64>> {
    let b_norm = norm(b);
    let mut u = vec![0.0; b.len()];
    for it in 0..cfg.max_iters {
        let r: Vec<f64> = sys.apply(&u).iter().zip(b).map(|(a, b)| a - b).collect();
        stats.residual = norm(&r) / b_norm;
        if stats.residual <= cfg.tol {
            stats.converged = true;
            return Ok(u);
        }
        if !stats.residual.is_finite() || stats.residual > 1e12 {
            return Err(Error::numerical("adjoint fixed-point iteration diverged"));
        }
        stats.iterations = it + 1;
        let rhs: Vec<f64> = b.iter().zip(sys.delta(&u)).map(|(b, d)| b + d).collect();
        u = sys.precondition(&rhs)?;
    }
    let r: Vec<f64> = sys.apply(&u).iter().zip(b).map(|(a, b)| a - b).collect();
    stats.residual = norm(&r) / b_norm;
    stats.converged = stats.residual <= cfg.tol;
    Ok(u)
}

fn newton_solve(sim: &Simulator, mut an: SymMatrix, mask: &[bool], b: &[f64], pcg_tol: Option<f64>, stats: &mut AdjointStats) -> Result<Vec<f64>> {
    an.eliminate(mask);
    let u = match pcg_tol {
        None => factorize_plain(an.clone(), sim.counters().clone())?.solve(b),
        Some(tol) => {
            let (u, outcome) = pcg(&an, b, tol, 10 * an.dim(), sim.counters())?;
            if outcome == PcgOutcome::MaxIterations {
                return Err(Error::numerical("adjoint conjugate gradient hit its iteration cap"));
            }
            u
        }
    };
    let r: Vec<f64> = an.apply(&u).iter().zip(b).map(|(a, b)| a - b).collect();
    stats.iterations = 1;
    stats.residual = norm(&r) / norm(b);
    stats.converged = true;
    Ok(u)
}

/// Solves `A_N u = b` on the free DoFs of `record` (pinned entries of `u`
/// are zero). `b` must already vanish on pinned DoFs.
pub fn adjoint_solve(sim: &Simulator, record: &StepRecord, b: &[f64], cfg: &AdjointConfig) -> Result<(Vec<f64>, AdjointStats)> {
    let t = Instant::now();
    let projective = matches!(cfg.method, AdjointMethod::QuasiNewton | AdjointMethod::FixedPoint);
    let sys = AdjointSystem::new(sim, record, projective)?;
    let mut stats = AdjointStats::default();
    let mut b = b.to_vec();
    mask_out(&mut b, &sys.mask);
    if norm(&b) == 0.0 {
        stats.converged = true;
        stats.seconds = t.elapsed().as_secs_f64();
        return Ok((vec![0.0; b.len()], stats));
    }
    let u = match cfg.method {
        AdjointMethod::QuasiNewton => match quasi_newton(&sys, &b, cfg, &mut stats)? {
            Some(u) => u,
            None => {
                let iters = stats.iterations;
                let u = newton_solve(sim, sys.newton_matrix()?, &sys.mask, &b, None, &mut stats)?;
                stats.iterations += iters;
                stats.degraded = true;
                u
            }
        },
        AdjointMethod::FixedPoint => fixed_point(&sys, &b, cfg, &mut stats)?,
        AdjointMethod::NewtonCholesky => newton_solve(sim, sys.newton_matrix()?, &sys.mask, &b, None, &mut stats)?,
        AdjointMethod::NewtonPcg => newton_solve(sim, sys.newton_matrix()?, &sys.mask, &b, Some(cfg.tol), &mut stats)?,
    };
    stats.seconds = t.elapsed().as_secs_f64();
    Ok((u, stats))
}

/// One reverse step: given `∂L/∂x_{i+1}` and `∂L/∂v_{i+1}`, returns the
/// gradients with respect to `x_i`, `v_i`, this step's external force, and
/// the material and actuation parameters.
pub fn backprop_step(sim: &Simulator, record: &StepRecord, gx: &[f64], gv: &[f64], cfg: &AdjointConfig) -> Result<StepGradient> {
    let scene = sim.scene();
    let n = scene.num_dofs();
    if gx.len() != n || gv.len() != n {
        return Err(Error::invalid("adjoint vectors have the wrong length"));
    }
    let h = scene.dt();
    let m = scene.mass().diag();
    let b: Vec<f64> = gx.iter().zip(gv).map(|(x, v)| x + v / h).collect();
    let (u, stats) = adjoint_solve(sim, record, &b, cfg)?;

    let mut dx_prev: Vec<f64> = (0..n).map(|i| m[i] / (h * h) * u[i] - gv[i] / h).collect();
    let dofs = record.active.dofs();
    if !dofs.is_empty() {
        // Pinned nodes follow x_i directly and push on their free neighbours.
        let an_u = match cfg.method {
            AdjointMethod::QuasiNewton | AdjointMethod::FixedPoint => {
                let sys = AdjointSystem::new(sim, record, true)?;
                sys.apply_full(&u)
            }
            _ => sys_newton_apply(sim, record, &u)?,
        };
        for &d in &dofs {
            dx_prev[d] += b[d] - an_u[d];
        }
    }
    let mut dv_prev: Vec<f64> = (0..n).map(|i| m[i] / h * u[i]).collect();
    scene.zero_dirichlet(&mut dx_prev);
    scene.zero_dirichlet(&mut dv_prev);
    let params = scene.parameter_gradient(&record.x, &record.act, &u)?;
    Ok(StepGradient {
        dx_prev,
        dv_prev,
        df_ext: u,
        params,
        stats,
    })
}

fn sys_newton_apply(sim: &Simulator, record: &StepRecord, u: &[f64]) -> Result<Vec<f64>> {
    Ok(sim.scene().newton_matrix(&record.x, &record.act, false)?.apply(u))
}

/// Backpropagates `loss` through the whole trajectory.
pub fn backprop_trajectory(sim: &Simulator, traj: &Trajectory, loss: &StateLossGradient, cfg: &AdjointConfig) -> Result<GradientBundle> {
    let steps = traj.records.len();
    let n = sim.scene().num_dofs();
    if loss.dx.len() != steps + 1 || loss.dv.len() != steps + 1 {
        return Err(Error::invalid(format!("loss gradient must cover {} frames", steps + 1)));
    }
    let groups = sim.scene().num_muscle_groups();
    let mut bundle = GradientBundle {
        dx0: Vec::new(),
        dv0: Vec::new(),
        df_ext: vec![Vec::new(); steps],
        d_youngs_modulus: 0.0,
        d_poissons_ratio: 0.0,
        d_act: vec![vec![0.0; groups]; steps],
        stats: vec![AdjointStats::default(); steps],
    };
    let mut gx = loss.dx[steps].clone();
    let mut gv = loss.dv[steps].clone();
    for (i, rec) in traj.records.iter().enumerate().rev() {
        let sg = backprop_step(sim, rec, &gx, &gv, cfg).map_err(|e| e.at_step(rec.step))?;
        bundle.df_ext[i] = sg.df_ext;
        bundle.d_youngs_modulus += sg.params.youngs_modulus;
        bundle.d_poissons_ratio += sg.params.poissons_ratio;
        bundle.d_act[i] = sg.params.actuation;
        bundle.stats[i] = sg.stats;
        gx = sg.dx_prev.iter().zip(&loss.dx[i]).map(|(a, b)| a + b).collect();
        gv = sg.dv_prev.iter().zip(&loss.dv[i]).map(|(a, b)| a + b).collect();
    }
    sim.scene().zero_dirichlet(&mut gx);
    sim.scene().zero_dirichlet(&mut gv);
    debug_assert_eq!(gx.len(), n);
    bundle.dx0 = gx;
    bundle.dv0 = gv;
    Ok(bundle)
}

/// Power-iteration estimate of the spectral radius of `Ã⁻¹ΔA` at the end of
/// `record`, measured in the `Ã` norm.
pub fn spectral_probe(sim: &Simulator, record: &StepRecord, iters: usize, seed: u64) -> Result<f64> {
    let sys = AdjointSystem::new(sim, record, true)?;
    let (factor, _, _) = sys.projective.as_ref().expect("projective system");
    let a_norm = |v: &[f64]| {
        let mut av = factor.matrix().apply(v);
        mask_out(&mut av, &sys.mask);
        dot(v, &av).max(0.0).sqrt()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..record.x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    mask_out(&mut v, &sys.mask);
    let mut estimate = 0.0;
    for _ in 0..iters {
        let nv = a_norm(&v);
        if nv == 0.0 {
            return Ok(0.0);
        }
        let w = sys.precondition(&sys.delta(&v))?;
        let nw = a_norm(&w);
        estimate = nw / nv;
        if nw == 0.0 {
            return Ok(0.0);
        }
        v = w.iter().map(|x| x / nw).collect();
    }
    Ok(estimate)
}
