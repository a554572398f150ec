//! A simulated body: mesh, mass, energy stack, Dirichlet and contact data, and
//! the global quantities built from them (energy, internal force, the
//! constant projective matrix, the Newton Hessian and parameter derivatives).

use std::sync::Arc;

use nalgebra::{Matrix3, SMatrix, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::energy::{
    corotated_jacobian_from_svd, fiber_selector, flatten, lame_weight_jacobian, lame_weights,
    muscle_jacobian_stretch, project_muscle, project_soft_collision, signed_svd,
    soft_collision_jacobian, volume_jacobian_from_target, volume_target, MaterialParams, Matrix9,
    Plane,
};
use crate::error::{Error, Result};
use crate::mesh::{gather, lumped_mass, node, DeformOperator, HexMesh, LumpedMass, QUAD_POINTS};
use crate::sparse::{MeshPattern, SolveCounters, SpdFactor, SymMatrix};

pub type Matrix24 = SMatrix<f64, 24, 24>;
type Matrix9x24 = SMatrix<f64, 9, 24>;

/// Elements sharing one fiber direction and one actuation value per step.
#[derive(Debug, Clone, PartialEq)]
pub struct MuscleGroup {
    pub elements: Vec<usize>,
    pub fiber: Vector3<f64>,
    pub weight: f64,
}

/// Penalty `(w/2)‖x − proj(x)‖²` on selected nodes against a plane.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftCollision {
    pub plane: Plane,
    pub weight: f64,
    pub nodes: Vec<usize>,
}

/// Sticky non-penetration contact against a plane for candidate nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactSpec {
    pub plane: Plane,
    pub candidates: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Scene {
    mesh: HexMesh,
    op: DeformOperator,
    gq: [Matrix9x24; QUAD_POINTS],
    /// `Σ_q vol GᵀG`, identical for every element of a uniform grid.
    unit_stiffness: Matrix24,
    density: f64,
    mass: LumpedMass,
    material: MaterialParams,
    w_corot: f64,
    w_volume: f64,
    elastic: bool,
    muscles: Vec<MuscleGroup>,
    element_muscle: Vec<Option<usize>>,
    soft: Option<SoftCollision>,
    contact: Option<ContactSpec>,
    gravity: Vector3<f64>,
    dt: f64,
    pattern: Arc<MeshPattern>,
    dirichlet_mask: Vec<bool>,
}

/// Per-element contribution before scatter.
struct ElementForce {
    force: [Vector3<f64>; 8],
    energy: f64,
}

impl Scene {
    pub fn new(mesh: HexMesh, density: f64, material: MaterialParams, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid(format!("time step must be positive, got {dt}")));
        }
        let (w_corot, w_volume) = lame_weights(material)?;
        let mass = lumped_mass(&mesh, density)?;
        let op = DeformOperator::for_mesh(&mesh);
        let gq: [Matrix9x24; QUAD_POINTS] = std::array::from_fn(|q| op.matrix(q));
        let vol = op.quad_volume();
        let unit_stiffness = gq.iter().map(|g| g.transpose() * g * vol).sum();
        let pattern = MeshPattern::new(&mesh)?;
        let mut dirichlet_mask = vec![false; mesh.num_dofs()];
        for &d in mesh.dirichlet().keys() {
            dirichlet_mask[d] = true;
        }
        let ne = mesh.num_elements();
        Ok(Self {
            mesh,
            op,
            gq,
            unit_stiffness,
            density,
            mass,
            material,
            w_corot,
            w_volume,
            elastic: true,
            muscles: Vec::new(),
            element_muscle: vec![None; ne],
            soft: None,
            contact: None,
            gravity: Vector3::zeros(),
            dt,
            pattern,
            dirichlet_mask,
        })
    }

    pub fn with_gravity(mut self, g: Vector3<f64>) -> Self {
        self.gravity = g;
        self
    }

    pub fn add_muscle_group(&mut self, group: MuscleGroup) -> Result<usize> {
        if (group.fiber.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("muscle fiber direction must have unit length"));
        }
        if !(group.weight >= 0.0) {
            return Err(Error::invalid("muscle weight must be non-negative"));
        }
        let id = self.muscles.len();
        for &e in &group.elements {
            match self.element_muscle.get(e) {
                None => return Err(Error::invalid(format!("muscle element {e} out of range"))),
                Some(Some(_)) => return Err(Error::invalid(format!("element {e} is in two muscle groups"))),
                Some(None) => {}
            }
            self.element_muscle[e] = Some(id);
        }
        self.muscles.push(group);
        Ok(id)
    }

    pub fn with_soft_collision(mut self, soft: SoftCollision) -> Result<Self> {
        if !(soft.weight >= 0.0) || soft.nodes.iter().any(|&j| j >= self.mesh.num_nodes()) {
            return Err(Error::invalid("bad soft collision specification"));
        }
        self.soft = Some(soft);
        Ok(self)
    }

    /// Declares contact candidates. Dirichlet nodes are dropped from the set.
    pub fn with_contact(mut self, plane: Plane, candidates: Vec<usize>) -> Result<Self> {
        let nn = self.mesh.num_nodes();
        if let Some(&j) = candidates.iter().find(|&&j| j >= nn) {
            return Err(Error::invalid(format!("contact candidate {j} out of range")));
        }
        let mut candidates: Vec<usize> = candidates
            .into_iter()
            .filter(|&j| !(0..3).any(|d| self.dirichlet_mask[3 * j + d]))
            .collect();
        candidates.sort_unstable();
        candidates.dedup();
        self.contact = Some(ContactSpec { plane, candidates });
        Ok(self)
    }

    /// Switches the corotated and volume terms off (or back on).
    pub fn with_elasticity(mut self, on: bool) -> Self {
        self.elastic = on;
        self.set_material(self.material).expect("material was validated");
        self
    }

    pub fn is_elastic(&self) -> bool {
        self.elastic
    }

    pub fn set_material(&mut self, material: MaterialParams) -> Result<()> {
        let (wc, wv) = lame_weights(material)?;
        let on = if self.elastic { 1.0 } else { 0.0 };
        self.material = material;
        self.w_corot = wc * on;
        self.w_volume = wv * on;
        Ok(())
    }

    pub fn set_dt(&mut self, dt: f64) -> Result<()> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid(format!("time step must be positive, got {dt}")));
        }
        self.dt = dt;
        Ok(())
    }

    pub fn mesh(&self) -> &HexMesh {
        &self.mesh
    }

    pub fn operator(&self) -> &DeformOperator {
        &self.op
    }

    pub fn mass(&self) -> &LumpedMass {
        &self.mass
    }

    pub fn density(&self) -> f64 {
        self.density
    }

    pub fn material(&self) -> MaterialParams {
        self.material
    }

    pub fn weights(&self) -> (f64, f64) {
        (self.w_corot, self.w_volume)
    }

    pub fn muscles(&self) -> &[MuscleGroup] {
        &self.muscles
    }

    pub fn num_muscle_groups(&self) -> usize {
        self.muscles.len()
    }

    pub fn soft_collision(&self) -> Option<&SoftCollision> {
        self.soft.as_ref()
    }

    pub fn contact(&self) -> Option<&ContactSpec> {
        self.contact.as_ref()
    }

    pub fn gravity(&self) -> Vector3<f64> {
        self.gravity
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn num_dofs(&self) -> usize {
        self.mesh.num_dofs()
    }

    pub fn pattern(&self) -> &Arc<MeshPattern> {
        &self.pattern
    }

    pub fn dirichlet_mask(&self) -> &[bool] {
        &self.dirichlet_mask
    }

    /// Contact candidate DoFs (three per candidate node).
    pub fn candidate_dofs(&self) -> Vec<usize> {
        self.contact
            .as_ref()
            .map(|c| c.candidates.iter().flat_map(|&j| [3 * j, 3 * j + 1, 3 * j + 2]).collect())
            .unwrap_or_default()
    }

    /// Overwrites Dirichlet DoFs with their prescribed values.
    pub fn apply_dirichlet(&self, x: &mut [f64]) {
        for (&d, &v) in self.mesh.dirichlet() {
            x[d] = v;
        }
    }

    /// Zeroes Dirichlet entries.
    pub fn zero_dirichlet(&self, v: &mut [f64]) {
        for &d in self.mesh.dirichlet().keys() {
            v[d] = 0.0;
        }
    }

    /// `M g`.
    pub fn gravity_force(&self) -> Vec<f64> {
        let m = self.mass.diag();
        (0..m.len()).map(|k| m[k] * self.gravity[k % 3]).collect()
    }

    pub fn center_of_mass(&self, x: &[f64]) -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for j in 0..self.mesh.num_nodes() {
            c += node(x, j) * self.mass.node_mass(j);
        }
        c / self.mass.total()
    }

    fn check_inputs(&self, x: &[f64], act: &[f64]) -> Result<()> {
        if x.len() != self.num_dofs() {
            return Err(Error::invalid("position vector has the wrong length"));
        }
        if act.len() != self.muscles.len() {
            return Err(Error::invalid(format!(
                "expected {} actuation values, got {}",
                self.muscles.len(),
                act.len()
            )));
        }
        if act.iter().any(|&r| !(r >= 0.0) || !r.is_finite()) {
            return Err(Error::invalid("actuation values must be finite and non-negative"));
        }
        Ok(())
    }

    fn element_force(&self, e: usize, x: &[f64], act: &[f64]) -> Result<ElementForce> {
        let nodes = gather(x, &self.mesh.elements()[e]);
        let vol = self.op.quad_volume();
        let muscle = self.element_muscle[e].map(|g| (&self.muscles[g], act[g]));
        let mut force = [Vector3::zeros(); 8];
        let mut energy = 0.0;
        for q in 0..QUAD_POINTS {
            let f = self.op.apply(q, &nodes);
            let mut stress = Matrix3::zeros();
            let mut density = 0.0;
            if self.w_corot > 0.0 || self.w_volume > 0.0 {
                let t = volume_target(&f).map_err(|err| annotate(err, e))?;
                let r = t.svd.u * t.svd.v.transpose();
                let d = t.svd.u * Matrix3::from_diagonal(&t.s) * t.svd.v.transpose();
                stress += (f - r) * self.w_corot + (f - d) * self.w_volume;
                density += 0.5 * self.w_corot * (f - r).norm_squared() + 0.5 * self.w_volume * (f - d).norm_squared();
            }
            if let Some((group, r)) = muscle {
                let a = f * group.fiber;
                let p = project_muscle(&f, &group.fiber, r);
                stress += (a - p) * group.fiber.transpose() * group.weight;
                density += 0.5 * group.weight * (a - p).norm_squared();
            }
            self.op.apply_transpose_add(q, &stress, -vol, &mut force);
            energy += vol * density;
        }
        Ok(ElementForce { force, energy })
    }

    fn element_forces(&self, x: &[f64], act: &[f64]) -> Result<Vec<ElementForce>> {
        (0..self.mesh.num_elements())
            .into_par_iter()
            .map(|e| self.element_force(e, x, act))
            .collect()
    }

    /// Internal energy and force `f_int = −∇E` with projections held fixed.
    pub fn energy_and_force(&self, x: &[f64], act: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_inputs(x, act)?;
        let elems = self.element_forces(x, act)?;
        let mut f = vec![0.0; x.len()];
        let mut energy = 0.0;
        for (ef, nodes) in elems.iter().zip(self.mesh.elements()) {
            energy += ef.energy;
            for (a, &j) in nodes.iter().enumerate() {
                for d in 0..3 {
                    f[3 * j + d] += ef.force[a][d];
                }
            }
        }
        if let Some(soft) = &self.soft {
            for &j in &soft.nodes {
                let p = node(x, j);
                let diff = p - project_soft_collision(&p, &soft.plane);
                energy += 0.5 * soft.weight * diff.norm_squared();
                for d in 0..3 {
                    f[3 * j + d] -= soft.weight * diff[d];
                }
            }
        }
        Ok((energy, f))
    }

    pub fn energy(&self, x: &[f64], act: &[f64]) -> Result<f64> {
        Ok(self.energy_and_force(x, act)?.0)
    }

    pub fn internal_force(&self, x: &[f64], act: &[f64]) -> Result<Vec<f64>> {
        Ok(self.energy_and_force(x, act)?.1)
    }

    /// Stiffness part `Σ w GᵀG` without mass or Dirichlet elimination.
    pub fn stiffness_matrix(&self) -> SymMatrix {
        let mut k = self.pattern.zeros();
        let vol = self.op.quad_volume();
        let elastic = self.unit_stiffness * (self.w_corot + self.w_volume);
        for e in 0..self.mesh.num_elements() {
            match self.element_muscle[e] {
                Some(g) => {
                    let group = &self.muscles[g];
                    let sel = fiber_selector(&group.fiber);
                    let mut local = elastic;
                    for gq in &self.gq {
                        let sg = sel * gq;
                        local += sg.transpose() * sg * (vol * group.weight);
                    }
                    k.add_element(e, &local);
                }
                None => k.add_element(e, &elastic),
            }
        }
        if let Some(soft) = &self.soft {
            for &j in &soft.nodes {
                k.add_node_identity(j, soft.weight);
            }
        }
        k
    }

    fn mass_over_h2(&self) -> Vec<f64> {
        let h2 = self.dt * self.dt;
        self.mass.diag().iter().map(|m| m / h2).collect()
    }

    /// `A = M/h² + Σ w GᵀG` with Dirichlet rows and columns decoupled.
    pub fn global_matrix(&self) -> SymMatrix {
        let mut a = self.stiffness_matrix();
        a.add_diagonal(&self.mass_over_h2());
        a.eliminate(&self.dirichlet_mask);
        a
    }

    /// Factorizes the projective matrix, caching inverse columns for the
    /// contact candidates when `cache` is set.
    pub fn factorize(&self, cache: bool, counters: Arc<SolveCounters>) -> Result<SpdFactor> {
        SpdFactor::new(self.global_matrix(), &self.candidate_dofs(), cache, counters)
    }

    /// 9×9 Jacobian of the elastic and muscle projections at one point,
    /// weighted and summed, together with the full-weight identity part:
    /// returns `(Σ w ∂z/∂F, Σ w I)` in the flattened layout.
    fn point_jacobian(&self, f: &Matrix3<f64>, muscle: Option<(&MuscleGroup, f64)>) -> Result<(Matrix9, Matrix9)> {
        let mut dz = Matrix9::zeros();
        let mut full = Matrix9::identity() * (self.w_corot + self.w_volume);
        if self.w_corot > 0.0 || self.w_volume > 0.0 {
            let t = volume_target(f)?;
            if self.w_corot > 0.0 {
                dz += corotated_jacobian_from_svd(&t.svd) * self.w_corot;
            }
            if self.w_volume > 0.0 {
                dz += volume_jacobian_from_target(&t) * self.w_volume;
            }
        }
        if let Some((group, r)) = muscle {
            let sel = fiber_selector(&group.fiber);
            let jp = muscle_jacobian_stretch(&(f * group.fiber), r);
            dz += sel.transpose() * jp * sel * group.weight;
            full += sel.transpose() * sel * group.weight;
        }
        Ok((dz, full))
    }

    /// Per-element `ΔA_e = Σ_q vol Gᵀ (Σ w ∂z/∂F) G` at `x`.
    pub fn element_delta(&self, e: usize, x: &[f64], act: &[f64]) -> Result<Matrix24> {
        let nodes = gather(x, &self.mesh.elements()[e]);
        let muscle = self.element_muscle[e].map(|g| (&self.muscles[g], act[g]));
        let vol = self.op.quad_volume();
        let mut out = Matrix24::zeros();
        for (q, g) in self.gq.iter().enumerate() {
            let f = self.op.apply(q, &nodes);
            let (dz, _) = self.point_jacobian(&f, muscle).map_err(|err| annotate(err, e))?;
            out += g.transpose() * (dz * g) * vol;
        }
        Ok(out)
    }

    /// Element Hessian of the internal energy, `Σ_q vol Gᵀ(Σ w (I − ∂z/∂F))G`.
    pub fn element_hessian(&self, e: usize, x: &[f64], act: &[f64]) -> Result<Matrix24> {
        let nodes = gather(x, &self.mesh.elements()[e]);
        let muscle = self.element_muscle[e].map(|g| (&self.muscles[g], act[g]));
        let vol = self.op.quad_volume();
        let mut out = Matrix24::zeros();
        for (q, g) in self.gq.iter().enumerate() {
            let f = self.op.apply(q, &nodes);
            let (dz, full) = self.point_jacobian(&f, muscle).map_err(|err| annotate(err, e))?;
            out += g.transpose() * ((full - dz) * g) * vol;
        }
        Ok(out)
    }

    /// `ΔA = A − A_N` at `x`, with Dirichlet rows and columns zeroed.
    pub fn delta_matrix(&self, x: &[f64], act: &[f64]) -> Result<SymMatrix> {
        self.check_inputs(x, act)?;
        let locals: Vec<Matrix24> = (0..self.mesh.num_elements())
            .into_par_iter()
            .map(|e| self.element_delta(e, x, act))
            .collect::<Result<_>>()?;
        let mut m = self.pattern.zeros();
        for (e, local) in locals.iter().enumerate() {
            m.add_element(e, local);
        }
        if let Some(soft) = &self.soft {
            for &j in &soft.nodes {
                let jac = soft_collision_jacobian(&node(x, j), &soft.plane) * soft.weight;
                add_node_block(&mut m, j, &jac);
            }
        }
        zero_rows_cols(&mut m, &self.dirichlet_mask);
        Ok(m)
    }

    /// Newton matrix `A_N = M/h² + ∇²E` with Dirichlet rows and columns
    /// decoupled. With `psd_project`, each element Hessian is clamped to its
    /// positive semidefinite part first.
    pub fn newton_matrix(&self, x: &[f64], act: &[f64], psd_project: bool) -> Result<SymMatrix> {
        self.check_inputs(x, act)?;
        let locals: Vec<Matrix24> = (0..self.mesh.num_elements())
            .into_par_iter()
            .map(|e| {
                let h = self.element_hessian(e, x, act)?;
                Ok(if psd_project { psd_part(&h) } else { h })
            })
            .collect::<Result<_>>()?;
        let mut m = self.pattern.zeros();
        for (e, local) in locals.iter().enumerate() {
            m.add_element(e, local);
        }
        if let Some(soft) = &self.soft {
            for &j in &soft.nodes {
                let jac = soft_collision_jacobian(&node(x, j), &soft.plane);
                add_node_block(&mut m, j, &((Matrix3::identity() - jac) * soft.weight));
            }
        }
        m.add_diagonal(&self.mass_over_h2());
        m.eliminate(&self.dirichlet_mask);
        Ok(m)
    }

    /// `uᵀ ∂f_int/∂θ` at `x` for θ = (E, ν) and each actuation value.
    pub fn parameter_gradient(&self, x: &[f64], act: &[f64], u: &[f64]) -> Result<ParamGradient> {
        self.check_inputs(x, act)?;
        let vol = self.op.quad_volume();
        let per_element: Vec<(f64, f64, f64)> = (0..self.mesh.num_elements())
            .into_par_iter()
            .map(|e| {
                let ids = &self.mesh.elements()[e];
                let nodes = gather(x, ids);
                let un = gather(u, ids);
                let mut dwc = 0.0;
                let mut dwv = 0.0;
                let mut dr = 0.0;
                for q in 0..QUAD_POINTS {
                    let f = self.op.apply(q, &nodes);
                    let gu = self.op.apply(q, &un);
                    let t = volume_target(&f).map_err(|err| annotate(err, e))?;
                    let r = t.svd.u * t.svd.v.transpose();
                    let d = t.svd.u * Matrix3::from_diagonal(&t.s) * t.svd.v.transpose();
                    dwc -= vol * gu.dot(&(f - r));
                    dwv -= vol * gu.dot(&(f - d));
                    if let Some(g) = self.element_muscle[e] {
                        let group = &self.muscles[g];
                        let a = f * group.fiber;
                        let dir = if a.norm() > 0.0 { a.normalize() } else { group.fiber };
                        dr += vol * group.weight * (gu * group.fiber).dot(&dir);
                    }
                }
                Ok((dwc, dwv, dr))
            })
            .collect::<Result<_>>()?;
        let mut dwc = 0.0;
        let mut dwv = 0.0;
        let mut actuation = vec![0.0; self.muscles.len()];
        for (e, &(c, v, r)) in per_element.iter().enumerate() {
            dwc += c;
            dwv += v;
            if let Some(g) = self.element_muscle[e] {
                actuation[g] += r;
            }
        }
        let jac = lame_weight_jacobian(self.material)?;
        let (dwc, dwv) = if self.elastic { (dwc, dwv) } else { (0.0, 0.0) };
        Ok(ParamGradient {
            youngs_modulus: dwc * jac[0][0] + dwv * jac[1][0],
            poissons_ratio: dwc * jac[0][1] + dwv * jac[1][1],
            actuation,
        })
    }

    /// Deformation gradients for every element and point at `x`, flattened.
    pub fn deformation_gradients(&self, x: &[f64]) -> Vec<[f64; 9]> {
        let mut out = Vec::with_capacity(self.mesh.num_elements() * QUAD_POINTS);
        for ids in self.mesh.elements() {
            let nodes = gather(x, ids);
            for q in 0..QUAD_POINTS {
                let f = flatten(&self.op.apply(q, &nodes));
                out.push(std::array::from_fn(|k| f[k]));
            }
        }
        out
    }

    /// Smallest signed singular value over all points (negative once an
    /// element inverts).
    pub fn min_singular_value(&self, x: &[f64]) -> f64 {
        self.deformation_gradients(x)
            .iter()
            .map(|f| signed_svd(&Matrix3::from_row_slice(f)).sigma[2])
            .fold(f64::INFINITY, f64::min)
    }
}

/// Contraction of `u` with `∂f_int/∂θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub youngs_modulus: f64,
    pub poissons_ratio: f64,
    pub actuation: Vec<f64>,
}

fn annotate(err: Error, element: usize) -> Error {
    match err {
        Error::NumericalFailure(msg) => Error::numerical(format!("element {element}: {msg}")),
        other => other,
    }
}

fn add_node_block(m: &mut SymMatrix, j: usize, block: &Matrix3<f64>) {
    for r in 0..3 {
        for c in 0..3 {
            m.add_entry(3 * j + r, 3 * j + c, block[(r, c)]);
        }
    }
}

fn zero_rows_cols(m: &mut SymMatrix, mask: &[bool]) {
    m.eliminate(mask);
    let diag: Vec<f64> = m
        .diagonal()
        .iter()
        .zip(mask)
        .map(|(&d, &fixed)| if fixed { -d } else { 0.0 })
        .collect();
    m.add_diagonal(&diag);
}

fn psd_part(h: &Matrix24) -> Matrix24 {
    let sym = (h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    eig.eigenvectors * Matrix24::from_diagonal(&clamped) * eig.eigenvectors.transpose()
}
