//! Run configuration, read from TOML. Unknown keys are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use softpd::forward::{Method, SolverConfig};
use softpd::scenes::{SceneKind, SceneOptions};
use softpd::tasks::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Simulate,
    Benchmark,
    Gradcheck,
    Optimize,
}

impl Command {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "simulate" => Some(Command::Simulate),
            "benchmark" => Some(Command::Benchmark),
            "gradcheck" => Some(Command::Gradcheck),
            "optimize" => Some(Command::Optimize),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub threads: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub scene: SceneSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub benchmark: BenchmarkSection,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
    #[serde(default)]
    pub optimize: OptimizeSection,
}

fn one() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub youngs_modulus: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poissons_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            kind: "cantilever".into(),
            resolution: None,
            dx: None,
            dt: None,
            steps: None,
            youngs_modulus: None,
            poissons_ratio: None,
            density: None,
        }
    }
}

impl SceneSection {
    pub fn kind(&self) -> Result<SceneKind, String> {
        self.kind.parse().map_err(|e: softpd::Error| e.to_string())
    }

    pub fn options(&self) -> SceneOptions {
        SceneOptions {
            resolution: self.resolution,
            dx: self.dx,
            dt: self.dt,
            steps: self.steps,
            youngs_modulus: self.youngs_modulus,
            poissons_ratio: self.poissons_ratio,
            density: self.density,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_history")]
    pub history: usize,
    #[serde(default = "yes")]
    pub column_cache: bool,
}

fn default_method() -> String {
    "pd".into()
}

fn default_tol() -> f64 {
    1e-4
}

fn default_max_iters() -> usize {
    500
}

fn default_history() -> usize {
    10
}

fn yes() -> bool {
    true
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            method: default_method(),
            tol: default_tol(),
            max_iters: default_max_iters(),
            history: default_history(),
            column_cache: true,
        }
    }
}

impl SolverSection {
    pub fn config(&self) -> Result<SolverConfig, String> {
        let method = Method::parse(&self.method).map_err(|e| e.to_string())?;
        let cfg = SolverConfig {
            max_iters: self.max_iters,
            history: self.history,
            ..SolverConfig::with_method(method, self.tol)
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSection {
    #[serde(default = "all_methods")]
    pub methods: Vec<String>,
    #[serde(default = "tolerance_grid")]
    pub tolerances: Vec<f64>,
    #[serde(default = "thread_grid")]
    pub threads: Vec<usize>,
    /// Newton-Cholesky tolerance of the reference run.
    #[serde(default = "reference_tol")]
    pub reference_tol: f64,
}

fn all_methods() -> Vec<String> {
    Method::ALL.iter().map(|m| m.name().to_string()).collect()
}

fn tolerance_grid() -> Vec<f64> {
    vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7]
}

fn thread_grid() -> Vec<usize> {
    vec![1]
}

fn reference_tol() -> f64 {
    1e-9
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self {
            methods: all_methods(),
            tolerances: tolerance_grid(),
            threads: thread_grid(),
            reference_tol: reference_tol(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    /// Largest accepted relative error.
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Finite-difference step relative to each input's scale.
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Forward and adjoint tolerance for the check; finite differences need
    /// far tighter solves than the default simulation tolerance.
    #[serde(default = "default_solve_tol")]
    pub solve_tol: f64,
    /// Scales the adjoint gradient by 1.01 before comparing; a negative
    /// control for the checker itself.
    #[serde(default)]
    pub corrupt: bool,
}

fn default_eps() -> f64 {
    1e-6
}

fn default_solve_tol() -> f64 {
    1e-10
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            eps: default_eps(),
            solve_tol: default_solve_tol(),
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeSection {
    #[serde(default = "default_task")]
    pub task: String,
    #[serde(default = "default_opt_iters")]
    pub max_iters: usize,
    /// Overrides the solver section, which otherwise defaults to a loose
    /// tolerance unsuited to optimization.
    #[serde(default = "default_opt_tol")]
    pub tol: f64,
    /// Optional scene overrides for the task's scene.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
}

fn default_task() -> String {
    "system_id".into()
}

fn default_opt_iters() -> usize {
    100
}

fn default_opt_tol() -> f64 {
    1e-9
}

impl Default for OptimizeSection {
    fn default() -> Self {
        Self {
            task: default_task(),
            max_iters: default_opt_iters(),
            tol: default_opt_tol(),
            steps: None,
        }
    }
}

impl OptimizeSection {
    pub fn task(&self) -> Result<TaskKind, String> {
        self.task.parse().map_err(|e: softpd::Error| e.to_string())
    }
}

impl RunConfig {
    pub fn with_command(command: Command) -> Self {
        Self {
            command,
            seed: 0,
            threads: 1,
            out: default_out(),
            scene: SceneSection::default(),
            solver: SolverSection::default(),
            benchmark: BenchmarkSection::default(),
            gradcheck: GradcheckSection::default(),
            optimize: OptimizeSection::default(),
        }
    }

    #[cfg(test)]
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self) -> Result<(), String> {
        if self.threads == 0 {
            return Err("threads must be at least 1".into());
        }
        self.scene.kind()?;
        self.solver.config()?;
        for m in &self.benchmark.methods {
            Method::parse(m).map_err(|e| e.to_string())?;
        }
        if self.benchmark.threads.contains(&0) {
            return Err("benchmark thread counts must be at least 1".into());
        }
        if self.benchmark.tolerances.iter().chain([&self.benchmark.reference_tol]).any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err("benchmark tolerances must be positive".into());
        }
        if !(self.gradcheck.tol > 0.0) || !(self.gradcheck.eps > 0.0) || !(self.gradcheck.solve_tol > 0.0) {
            return Err("gradcheck tolerances and step must be positive".into());
        }
        self.optimize.task()?;
        if !(self.optimize.tol > 0.0) {
            return Err("optimize tol must be positive".into());
        }
        Ok(())
    }
}
