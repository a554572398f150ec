//! Built-in scene catalog. Every builder takes the same options so desk-scale
//! and larger runs share one code path.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Rotation3, Vector3};

use crate::energy::{MaterialParams, Plane};
use crate::error::{Error, Result};
use crate::forward::{Controls, SimState};
use crate::mesh::{build_grid_mesh, build_voxel_mesh, node, HexMesh};
use crate::scene::{MuscleGroup, Scene, SoftCollision};

const GRAVITY: f64 = -9.81;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SceneKind {
    Cantilever,
    RollingSphere,
    RestingBlock,
    PlantAnalog,
    Tendon,
    Crawler,
    Bunny,
    BouncingBlock,
    Particle,
}

impl SceneKind {
    pub const ALL: [SceneKind; 9] = [
        SceneKind::Cantilever,
        SceneKind::RollingSphere,
        SceneKind::RestingBlock,
        SceneKind::PlantAnalog,
        SceneKind::Tendon,
        SceneKind::Crawler,
        SceneKind::Bunny,
        SceneKind::BouncingBlock,
        SceneKind::Particle,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SceneKind::Cantilever => "cantilever",
            SceneKind::RollingSphere => "rolling_sphere",
            SceneKind::RestingBlock => "resting_block",
            SceneKind::PlantAnalog => "plant_analog",
            SceneKind::Tendon => "tendon",
            SceneKind::Crawler => "crawler",
            SceneKind::Bunny => "bunny",
            SceneKind::BouncingBlock => "bouncing_block",
            SceneKind::Particle => "particle",
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SceneKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scene '{s}'")))
    }
}

/// Overrides for a scene's defaults. `resolution` is the element count per
/// axis for box-shaped bodies and the diameter in cells (first entry) for
/// rounded ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneOptions {
    pub resolution: Option<[usize; 3]>,
    pub dx: Option<f64>,
    pub dt: Option<f64>,
    pub steps: Option<usize>,
    pub youngs_modulus: Option<f64>,
    pub poissons_ratio: Option<f64>,
    pub density: Option<f64>,
}

/// A ready-to-run scene: body, initial state and default controls.
#[derive(Debug, Clone)]
pub struct SceneInstance {
    pub kind: SceneKind,
    pub scene: Scene,
    pub initial: SimState,
    pub controls: Controls,
}

struct Defaults {
    resolution: [usize; 3],
    dx: f64,
    dt: f64,
    steps: usize,
    youngs_modulus: f64,
    poissons_ratio: f64,
    density: f64,
}

impl Defaults {
    fn apply(self, o: &SceneOptions) -> Resolved {
        Resolved {
            resolution: o.resolution.unwrap_or(self.resolution),
            dx: o.dx.unwrap_or(self.dx),
            dt: o.dt.unwrap_or(self.dt),
            steps: o.steps.unwrap_or(self.steps),
            material: MaterialParams::new(
                o.youngs_modulus.unwrap_or(self.youngs_modulus),
                o.poissons_ratio.unwrap_or(self.poissons_ratio),
            ),
            density: o.density.unwrap_or(self.density),
        }
    }
}

struct Resolved {
    resolution: [usize; 3],
    dx: f64,
    dt: f64,
    steps: usize,
    material: MaterialParams,
    density: f64,
}

pub fn build_scene(kind: SceneKind, opts: &SceneOptions) -> Result<SceneInstance> {
    match kind {
        SceneKind::Cantilever => cantilever(opts),
        SceneKind::RollingSphere => rolling_sphere(opts),
        SceneKind::RestingBlock => resting_block(opts),
        SceneKind::PlantAnalog => plant_analog(opts),
        SceneKind::Tendon => tendon(opts),
        SceneKind::Crawler => crawler(opts),
        SceneKind::Bunny => bunny(opts),
        SceneKind::BouncingBlock => bouncing_block(opts),
        SceneKind::Particle => particle(opts),
    }
}

fn instance(kind: SceneKind, scene: Scene, x0: Vec<f64>, v0: Vec<f64>, steps: usize) -> SceneInstance {
    let act = vec![1.0; scene.num_muscle_groups()];
    let controls = Controls::constant(&scene, steps, &act);
    SceneInstance {
        kind,
        scene,
        initial: SimState::new(x0, v0),
        controls,
    }
}

/// Beam along x clamped at `x = 0`, released from a twist about its axis.
pub fn cantilever(opts: &SceneOptions) -> Result<SceneInstance> {
    let r = Defaults {
        resolution: [12, 3, 3],
        dx: 0.02,
        dt: 0.01,
        steps: 25,
        youngs_modulus: 1e5,
        poissons_ratio: 0.4,
        density: 1e3,
    }
    .apply(opts);
    let mut mesh = build_grid_mesh(r.resolution, r.dx, Vector3::zeros())?;
    mesh.fix_nodes_at_rest(mesh.nodes_on_plane(0, 0.0, 1e-9 * r.dx))?;
    let len = r.resolution[0] as f64 * r.dx;
    let axis_y = 0.5 * r.resolution[1] as f64 * r.dx;
    let axis_z = 0.5 * r.resolution[2] as f64 * r.dx;
    let max_twist = PI / 6.0;
    let mut x0 = mesh.rest_positions();
    for j in 0..mesh.num_nodes() {
        let p = mesh.rest_node(j);
        let rot = Rotation3::from_axis_angle(&Vector3::x_axis(), max_twist * p.x / len);
        let c = Vector3::new(p.x, axis_y, axis_z);
        let q = rot * (p - c) + c;
        x0[3 * j..3 * j + 3].copy_from_slice(q.as_slice());
    }
    let n = mesh.num_dofs();
    let scene = Scene::new(mesh, r.density, r.material, r.dt)?.with_gravity(Vector3::new(0.0, 0.0, GRAVITY));
    Ok(instance(SceneKind::Cantilever, scene, x0, vec![0.0; n], r.steps))
}

fn ball_mesh(diameter: usize, dx: f64, origin: Vector3<f64>) -> Result<HexMesh> {
    let c = 0.5 * diameter as f64;
    let rad2 = c * c;
    build_voxel_mesh([diameter; 3], dx, origin, |i, j, k| {
        let d = Vector3::new(i as f64 + 0.5 - c, j as f64 + 0.5 - c, k as f64 + 0.5 - c);
        d.norm_squared() <= rad2
    })
}

fn lower_surface(mesh: &HexMesh, below: f64) -> Vec<usize> {
    mesh.surface_nodes().into_iter().filter(|&j| mesh.rest_node(j).z <= below).collect()
}

/// Voxelized ball launched sideways with matching spin, landing on the
/// ground plane `z = 0`.
pub fn rolling_sphere(opts: &SceneOptions) -> Result<SceneInstance> {
    let r = Defaults {
        resolution: [6, 6, 6],
        dx: 0.01,
        dt: 0.005,
        steps: 20,
        youngs_modulus: 2e5,
        poissons_ratio: 0.4,
        density: 1e3,
    }
    .apply(opts);
    let diameter = r.resolution[0];
    let lift = 0.002;
    let mesh = ball_mesh(diameter, r.dx, Vector3::new(0.0, 0.0, lift))?;
    let radius = 0.5 * diameter as f64 * r.dx;
    let centre = Vector3::new(radius, radius, radius + lift);
    let candidates = lower_surface(&mesh, centre.z);
    let speed = 0.4;
    let spin = Vector3::new(0.0, speed / radius, 0.0);
    let lin = Vector3::new(speed, 0.0, -0.3);
    let x0 = mesh.rest_positions();
    let mut v0 = vec![0.0; x0.len()];
    for j in 0..mesh.num_nodes() {
        let v = lin + spin.cross(&(node(&x0, j) - centre));
        v0[3 * j..3 * j + 3].copy_from_slice(v.as_slice());
    }
    let scene = Scene::new(mesh, r.density, r.material, r.dt)?
        .with_gravity(Vector3::new(0.0, 0.0, GRAVITY))
        .with_contact(Plane::ground(0.0), candidates)?;
    Ok(instance(SceneKind::RollingSphere, scene, x0, v0, r.steps))
}

/// Block placed on the ground at rest.
pub fn resting_block(opts: &SceneOptions) -> Result<SceneInstance> {
    let r = Defaults {
        resolution: [4, 4, 2],
        dx: 0.01,
        dt: 0.005,
        steps: 20,
        youngs_modulus: 1e5,
        poissons_ratio: 0.4,
        density: 1e3,
    }
    .apply(opts);
    let mesh = build_grid_mesh(r.resolution, r.dx, Vector3::zeros())?;
    let candidates = mesh.nodes_on_plane(2, 0.0, 1e-9 * r.dx);
    let x0 = mesh.rest_positions();
    let n = x0.len();
    let scene = Scene::new(mesh, r.density, r.material, r.dt)?
        .with_gravity(Vector3::new(0.0, 0.0, GRAVITY))
        .with_contact(Plane::ground(0.0), candidates)?;
    Ok(instance(SceneKind::RestingBlock, scene, x0, vec![0.0; n], r.steps))
}

/// Upright stem clamped at its base, plucked with a bending, twisting and
/// stretching initial velocity.
pub fn plant_analog(opts: &SceneOptions) -> Result<SceneInstance> {
    let r = Defaults {
        resolution: [2, 2, 6],
        dx: 0.01,
        dt: 0.01,
        steps: 20,
        youngs_modulus: 1e5,
        poissons_ratio: 0.4,
        density: 1e3,
    }
    .apply(opts);
    let mut mesh = build_grid_mesh(r.resolution, r.dx, Vector3::zeros())?;
    mesh.fix_nodes_at_rest(mesh.nodes_on_plane(2, 0.0, 1e-9 * r.dx))?;
    let height = r.resolution[2] as f64 * r.dx;
    let cx = 0.5 * r.resolution[0] as f64 * r.dx;
    let cy = 0.5 * r.resolution[1] as f64 * r.dx;
    let x0 = mesh.rest_positions();
    let mut v0 = vec![0.0; x0.len()];
    for j in 0..mesh.num_nodes() {
        let p = mesh.rest_node(j);
        let s = p.z / height;
        let swirl = Vector3::new(-(p.y - cy), p.x - cx, 0.0) * (4.0 * s);
        let v = Vector3::new(0.3 * s, 0.1 * s, 0.05 * s) + swirl;
        v0[3 * j..3 * j + 3].copy_from_slice(v.as_slice());
    }
    mesh_zero_dirichlet(&mesh, &mut v0);
    let scene = Scene::new(mesh, r.density, r.material, r.dt)?;
    Ok(instance(SceneKind::PlantAnalog, scene, x0, v0, r.steps))
}

fn mesh_zero_dirichlet(mesh: &HexMesh, v: &mut [f64]) {
    for &d in mesh.dirichlet().keys() {
        v[d] = 0.0;
    }
}

/// Upright 2×1×4 beam clamped at the base with four muscle groups: lower and
/// upper halves of each side column, fibers along the beam.
pub fn tendon(opts: &SceneOptions) -> Result<SceneInstance> {
    let r = Defaults {
        resolution: [2, 1, 4],
        dx: 0.02,
        dt: 0.01,
        steps: 10,
        youngs_modulus: 5e4,
        poissons_ratio: 0.4,
        density: 1e3,
    }
    .apply(opts);
    let [nx, ny, nz] = r.resolution;
    let mut mesh = build_grid_mesh(r.resolution, r.dx, Vector3::zeros())?;
    mesh.fix_nodes_at_rest(mesh.nodes_on_plane(2, 0.0, 1e-9 * r.dx))?;
    let x0 = mesh.rest_positions();
    let n = x0.len();
    let mut scene = Scene::new(mesh, r.density, r.material, r.dt)?;
    let weight = 2.0 * r.material.youngs_modulus;
    for (lo_x, hi_x) in [(0, nx / 2), (nx / 2, nx)] {
        for (lo_z, hi_z) in [(0, nz / 2), (nz / 2, nz)] {
            let mut elements = Vec::new();
            for k in lo_z..hi_z {
                for j in 0..ny {
                    for i in lo_x..hi_x {
                        elements.push(i + nx * (j + ny * k));
                    }
                }
            }
            scene.add_muscle_group(MuscleGroup {
                elements,
                fiber: Vector3::z(),
                weight,
            })?;
        }
    }
    Ok(instance(SceneKind::Tendon, scene, x0, vec![0.0; n], r.steps))
}

/// Two-legged walker: a slab on a front and a back leg, each leg one muscle
/// group with vertical fibers; sticky contact under the feet.
pub fn crawler(opts: &SceneOptions) -> Result<SceneInstance> {
    let r = Defaults {
        resolution: [6, 2, 2],
        dx: 0.01,
        dt: 0.005,
        steps: 40,
        youngs_modulus: 5e4,
        poissons_ratio: 0.4,
        density: 1e3,
    }
    .apply(opts);
    let [nx, ny, nz] = r.resolution;
    if nx < 4 || nz < 2 {
        return Err(Error::invalid("crawler needs at least 4 cells along x and 2 along z"));
    }
    let leg = nx / 3;
    let is_leg = |i: usize| i < leg || i >= nx - leg;
    let mesh = build_voxel_mesh(r.resolution, r.dx, Vector3::zeros(), |i, _, k| k > 0 || is_leg(i))?;
    let candidates = mesh.nodes_on_plane(2, 0.0, 1e-9 * r.dx);
    // Voxel elements keep lexicographic cell order; rebuild the mapping.
    let mut front = Vec::new();
    let mut back = Vec::new();
    let mut e = 0;
    for k in 0..nz {
        for _ in 0..ny {
            for i in 0..nx {
                if k > 0 || is_leg(i) {
                    if k == 0 && i < leg {
                        back.push(e);
                    } else if k == 0 {
                        front.push(e);
                    }
                    e += 1;
                }
            }
        }
    }
    let x0 = mesh.rest_positions();
    let n = x0.len();
    let mut scene = Scene::new(mesh, r.density, r.material, r.dt)?
        .with_gravity(Vector3::new(0.0, 0.0, GRAVITY))
        .with_contact(Plane::ground(0.0), candidates)?;
    let weight = 2.0 * r.material.youngs_modulus;
    for elements in [back, front] {
        scene.add_muscle_group(MuscleGroup {
            elements,
            fiber: Vector3::new(1.0, 0.0, 1.0).normalize(),
            weight,
        })?;
    }
    Ok(instance(SceneKind::Crawler, scene, x0, vec![0.0; n], r.steps))
}

/// Rounded blob dropped onto the ground; its initial velocity is the usual
/// decision variable.
pub fn bunny(opts: &SceneOptions) -> Result<SceneInstance> {
    let r = Defaults {
        resolution: [4, 4, 4],
        dx: 0.01,
        dt: 0.005,
        steps: 20,
        youngs_modulus: 1e5,
        poissons_ratio: 0.4,
        density: 1e3,
    }
    .apply(opts);
    let d = r.resolution[0];
    let lift = 0.01;
    let mesh = ball_mesh(d, r.dx, Vector3::new(0.0, 0.0, lift))?;
    let centre_z = lift + 0.5 * d as f64 * r.dx;
    let candidates = lower_surface(&mesh, centre_z);
    let x0 = mesh.rest_positions();
    let n = x0.len();
    let mut v0 = vec![0.0; n];
    for k in 0..n / 3 {
        v0[3 * k + 2] = -0.5;
    }
    let scene = Scene::new(mesh, r.density, r.material, r.dt)?
        .with_gravity(Vector3::new(0.0, 0.0, GRAVITY))
        .with_contact(Plane::ground(0.0), candidates)?;
    Ok(instance(SceneKind::Bunny, scene, x0, v0, r.steps))
}

/// Block dropped onto a penalty ground plane.
pub fn bouncing_block(opts: &SceneOptions) -> Result<SceneInstance> {
    let r = Defaults {
        resolution: [2, 2, 2],
        dx: 0.01,
        dt: 0.005,
        steps: 20,
        youngs_modulus: 1e5,
        poissons_ratio: 0.4,
        density: 1e3,
    }
    .apply(opts);
    let lift = 0.002;
    let mesh = build_grid_mesh(r.resolution, r.dx, Vector3::new(0.0, 0.0, lift))?;
    let x0 = mesh.rest_positions();
    let n = x0.len();
    let mut v0 = vec![0.0; n];
    for k in 0..n / 3 {
        v0[3 * k] = 0.1;
        v0[3 * k + 2] = -0.6;
    }
    let nodes = lower_surface(&mesh, lift + 1e-9);
    let total_mass = r.density * mesh.element_volume() * mesh.num_elements() as f64;
    let weight = 2e3 * total_mass / (r.dt * r.dt) / nodes.len().max(1) as f64;
    let scene = Scene::new(mesh, r.density, r.material, r.dt)?
        .with_gravity(Vector3::new(0.0, 0.0, GRAVITY))
        .with_soft_collision(SoftCollision {
            plane: Plane::ground(0.0),
            weight: weight.min(1e9),
            nodes,
        })?;
    Ok(instance(SceneKind::BouncingBlock, scene, x0, v0, r.steps))
}

/// A single cube with elasticity switched off: a set of free particles.
pub fn particle(opts: &SceneOptions) -> Result<SceneInstance> {
    let r = Defaults {
        resolution: [1, 1, 1],
        dx: 0.1,
        dt: 0.01,
        steps: 5,
        youngs_modulus: 1e5,
        poissons_ratio: 0.3,
        density: 1e3,
    }
    .apply(opts);
    let mesh = build_grid_mesh(r.resolution, r.dx, Vector3::zeros())?;
    let x0 = mesh.rest_positions();
    let n = x0.len();
    let v0 = (0..n).map(|i| 0.1 * ((i % 5) as f64 - 2.0)).collect();
    let scene = Scene::new(mesh, r.density, r.material, r.dt)?
        .with_gravity(Vector3::new(0.0, 0.0, GRAVITY))
        .with_elasticity(false);
    Ok(instance(SceneKind::Particle, scene, x0, v0, r.steps))
}
