//! Box-constrained L-BFGS and Adam for the optimization tasks.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::lbfgs::History;
use crate::sparse::dot;

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Bounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::invalid("bounds have mismatched lengths"));
        }
        if let Some(i) = (0..lo.len()).find(|&i| !(lo[i] <= hi[i]) || lo[i].is_nan() || hi[i].is_nan()) {
            return Err(Error::invalid(format!("bound {i} is inconsistent: [{}, {}]", lo[i], hi[i])));
        }
        Ok(Self { lo, hi })
    }

    pub fn unbounded(n: usize) -> Self {
        Self {
            lo: vec![f64::NEG_INFINITY; n],
            hi: vec![f64::INFINITY; n],
        }
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lo
    }

    pub fn upper(&self) -> &[f64] {
        &self.hi
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.len() && x.iter().enumerate().all(|(i, &v)| v >= self.lo[i] && v <= self.hi[i])
    }

    pub fn project(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lo[i], self.hi[i]);
        }
    }

    /// `x − P(x − g)`, zero exactly at a box-constrained stationary point.
    pub fn projected_gradient(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| x[i] - (x[i] - g[i]).clamp(self.lo[i], self.hi[i]))
            .collect()
    }

    /// Components held at a bound by a gradient pushing outward.
    fn blocked(&self, x: &[f64], g: &[f64]) -> Vec<bool> {
        (0..x.len())
            .map(|i| (x[i] <= self.lo[i] && g[i] > 0.0) || (x[i] >= self.hi[i] && g[i] < 0.0))
            .collect()
    }
}

/// One objective evaluation as reported in loss histories.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub index: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub best_loss: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    FunctionTolerance,
    MaxIterations,
    MaxEvaluations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct OptResult {
    /// Best point seen.
    pub x: Vec<f64>,
    pub loss: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub history: Vec<EvalRecord>,
    pub termination: Termination,
}

struct Recorder<F> {
    f: F,
    start: Instant,
    history: Vec<EvalRecord>,
    best: Option<(Vec<f64>, f64, Vec<f64>)>,
    max_evals: usize,
}

impl<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> Recorder<F> {
    fn new(f: F, max_evals: usize) -> Self {
        Self {
            f,
            start: Instant::now(),
            history: Vec::new(),
            best: None,
            max_evals,
        }
    }

    fn exhausted(&self) -> bool {
        self.history.len() >= self.max_evals
    }

    /// Failed evaluations after the first count as an infinite loss so a
    /// line search can back away from them.
    fn eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (loss, grad) = match (self.f)(x) {
            Ok(v) => v,
            Err(e) if self.best.is_none() || !e.is_numerical() => return Err(e),
            Err(_) => (f64::INFINITY, vec![0.0; x.len()]),
        };
        let loss = if loss.is_nan() { f64::INFINITY } else { loss };
        if self.best.as_ref().is_none_or(|b| loss < b.1) {
            self.best = Some((x.to_vec(), loss, grad.clone()));
        }
        self.history.push(EvalRecord {
            index: self.history.len(),
            loss,
            grad_norm: dot(&grad, &grad).sqrt(),
            best_loss: self.best.as_ref().map_or(loss, |b| b.1),
            wall_time: self.start.elapsed().as_secs_f64(),
        });
        Ok((loss, grad))
    }

    fn finish(self, iterations: usize, termination: Termination) -> OptResult {
        let (x, loss, grad) = self.best.expect("at least one evaluation");
        OptResult {
            x,
            loss,
            grad,
            iterations,
            history: self.history,
            termination,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOptions {
    pub history: usize,
    pub max_iters: usize,
    pub max_evals: usize,
    /// Infinity norm of the projected gradient.
    pub gtol: f64,
    /// Relative decrease per iteration.
    pub ftol: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            history: 10,
            max_iters: 100,
            max_evals: 1000,
            gtol: 1e-10,
            ftol: 1e-14,
            armijo: 1e-4,
            max_backtracks: 30,
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes `f` over the box with projected L-BFGS and a backtracking
/// search along the projection path.
pub fn lbfgs<F>(f: F, x0: &[f64], bounds: &Bounds, opts: &LbfgsOptions) -> Result<OptResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if bounds.len() != x0.len() {
        return Err(Error::invalid("bounds do not match the number of variables"));
    }
    let mut rec = Recorder::new(f, opts.max_evals.max(1));
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let (mut fx, mut g) = rec.eval(&x)?;
    if !fx.is_finite() {
        return Err(Error::numerical("objective is not finite at the starting point"));
    }
    let mut hist = History::new(opts.history);
    let mut prev_blocked: Option<Vec<bool>> = None;
    // Curvature scale survives history resets so restarts keep a sensible
    // step length.
    let mut last_gamma: Option<f64> = None;
    for it in 0..opts.max_iters {
        if inf_norm(&bounds.projected_gradient(&x, &g)) <= opts.gtol {
            return Ok(rec.finish(it, Termination::GradientTolerance));
        }
        let blocked = bounds.blocked(&x, &g);
        if prev_blocked.as_ref().is_some_and(|p| *p != blocked) {
            hist.clear();
        }
        prev_blocked = Some(blocked.clone());
        let mut q = g.clone();
        q.iter_mut().zip(&blocked).for_each(|(v, &b)| if b { *v = 0.0 });
        let gamma = hist.gamma().or(last_gamma).unwrap_or_else(|| 1.0 / inf_norm(&q).max(1e-300));
        let mut d = hist.apply(&q, |q| Ok(q.iter().map(|v| gamma * v).collect()))?;
        d.iter_mut().zip(&blocked).for_each(|(v, &b)| *v = if b { 0.0 } else { -*v });
        if !(dot(&d, &g) < 0.0) {
            hist.clear();
            d = q.iter().map(|v| -gamma * v).collect();
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            if rec.exhausted() {
                return Ok(rec.finish(it, Termination::MaxEvaluations));
            }
            let mut xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            bounds.project(&mut xt);
            let step: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
            let (ft, gt) = rec.eval(&xt)?;
            if ft <= fx + opts.armijo * dot(&g, &step) {
                accepted = Some((xt, step, ft, gt));
                break;
            }
            t *= 0.5;
        }
        // Steepest-descent steps carry no curvature information; one
        // interpolated trial along the ray fixes their scale.
        if let Some((_, step, ft, _)) = accepted.as_ref().filter(|_| hist.is_empty() && t == 1.0) {
            let slope = dot(&g, step);
            let curv = ft - fx - slope;
            let t_star = -slope / (2.0 * curv);
            if curv > 0.0 && (t_star - 1.0).abs() > 1e-3 && !rec.exhausted() {
                let mut xs: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t_star * b).collect();
                bounds.project(&mut xs);
                let (fs, gs) = rec.eval(&xs)?;
                if fs < *ft {
                    let step = xs.iter().zip(&x).map(|(a, b)| a - b).collect();
                    accepted = Some((xs, step, fs, gs));
                }
            }
        }
        let Some((xt, s, ft, gt)) = accepted else {
            if hist.is_empty() {
                return Ok(rec.finish(it + 1, Termination::LineSearchFailed));
            }
            hist.clear();
            continue;
        };
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        hist.push(s, y);
        last_gamma = hist.gamma().or(last_gamma);
        let decrease = fx - ft;
        x = xt;
        g = gt;
        let scale = fx.abs().max(ft.abs()).max(f64::MIN_POSITIVE);
        fx = ft;
        if decrease <= opts.ftol * scale {
            return Ok(rec.finish(it + 1, Termination::FunctionTolerance));
        }
    }
    Ok(rec.finish(opts.max_iters, Termination::MaxIterations))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamOptions {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iterations: usize,
}

impl Default for AdamOptions {
    fn default() -> Self {
        Self {
            step_size: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            iterations: 100,
        }
    }
}

/// Adam with iterates projected onto the box. The result holds the best
/// point evaluated.
pub fn adam<F>(f: F, x0: &[f64], bounds: &Bounds, opts: &AdamOptions) -> Result<OptResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if bounds.len() != x0.len() {
        return Err(Error::invalid("bounds do not match the number of variables"));
    }
    let mut rec = Recorder::new(f, usize::MAX);
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    let (_, mut g) = rec.eval(&x)?;
    for t in 1..=opts.iterations {
        let c1 = 1.0 - opts.beta1.powi(t as i32);
        let c2 = 1.0 - opts.beta2.powi(t as i32);
        for i in 0..x.len() {
            m[i] = opts.beta1 * m[i] + (1.0 - opts.beta1) * g[i];
            v[i] = opts.beta2 * v[i] + (1.0 - opts.beta2) * g[i] * g[i];
            x[i] -= opts.step_size * (m[i] / c1) / ((v[i] / c2).sqrt() + opts.eps);
        }
        bounds.project(&mut x);
        g = rec.eval(&x)?.1;
    }
    Ok(rec.finish(opts.iterations, Termination::MaxIterations))
}
