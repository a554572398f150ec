//! Hexahedral meshes, trilinear shape-function gradients and lumped mass.
//!
//! Every element is an axis-aligned cube of edge `dx`, so the map from the 24
//! element coordinates to the deformation gradient at a quadrature point is the
//! same matrix for every element. [`DeformOperator`] stores it once.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{Matrix3, SMatrix, Vector3};

use crate::error::{Error, Result};

/// Corner offsets of the local node ordering `a = i + 2j + 4k`.
pub const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

pub const QUAD_POINTS: usize = 8;

#[derive(Debug, Clone)]
pub struct HexMesh {
    rest: Vec<Vector3<f64>>,
    elements: Vec<[usize; 8]>,
    dx: f64,
    /// Constrained DoF index -> prescribed value.
    dirichlet: BTreeMap<usize, f64>,
}

impl HexMesh {
    pub fn new(rest: Vec<Vector3<f64>>, elements: Vec<[usize; 8]>, dx: f64) -> Result<Self> {
        if !(dx > 0.0) || !dx.is_finite() {
            return Err(Error::invalid(format!("element size must be positive, got {dx}")));
        }
        let n = rest.len();
        for (e, nodes) in elements.iter().enumerate() {
            for (a, &i) in nodes.iter().enumerate() {
                if i >= n {
                    return Err(Error::invalid(format!("element {e} references node {i} >= {n}")));
                }
                if nodes[..a].contains(&i) {
                    return Err(Error::invalid(format!("element {e} repeats node {i}")));
                }
            }
        }
        Ok(Self {
            rest,
            elements,
            dx,
            dirichlet: BTreeMap::new(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.rest.len()
    }

    pub fn num_dofs(&self) -> usize {
        3 * self.rest.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn element_volume(&self) -> f64 {
        self.dx.powi(3)
    }

    pub fn elements(&self) -> &[[usize; 8]] {
        &self.elements
    }

    pub fn rest_node(&self, i: usize) -> Vector3<f64> {
        self.rest[i]
    }

    pub fn rest_nodes(&self) -> &[Vector3<f64>] {
        &self.rest
    }

    /// Rest positions stacked as a 3n vector.
    pub fn rest_positions(&self) -> Vec<f64> {
        self.rest.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    pub fn dirichlet(&self) -> &BTreeMap<usize, f64> {
        &self.dirichlet
    }

    pub fn is_dirichlet(&self, dof: usize) -> bool {
        self.dirichlet.contains_key(&dof)
    }

    /// Prescribes `value` on `dof`. Re-prescribing a DoF overwrites its value.
    pub fn set_dirichlet(&mut self, dof: usize, value: f64) -> Result<()> {
        if dof >= self.num_dofs() {
            return Err(Error::invalid(format!(
                "Dirichlet DoF {dof} outside [0, {})",
                self.num_dofs()
            )));
        }
        if !value.is_finite() {
            return Err(Error::invalid("Dirichlet value must be finite"));
        }
        self.dirichlet.insert(dof, value);
        Ok(())
    }

    /// Pins all three DoFs of each listed node at its rest position.
    pub fn fix_nodes_at_rest(&mut self, nodes: impl IntoIterator<Item = usize>) -> Result<()> {
        for i in nodes {
            if i >= self.num_nodes() {
                return Err(Error::invalid(format!("node {i} out of range")));
            }
            let p = self.rest[i];
            for d in 0..3 {
                self.set_dirichlet(3 * i + d, p[d])?;
            }
        }
        Ok(())
    }

    /// Nodes whose rest coordinate along `axis` is within `tol` of `value`.
    pub fn nodes_on_plane(&self, axis: usize, value: f64, tol: f64) -> Vec<usize> {
        (0..self.num_nodes())
            .filter(|&i| (self.rest[i][axis] - value).abs() <= tol)
            .collect()
    }

    /// Nodes that belong to fewer than 8 elements, i.e. lie on the boundary.
    pub fn surface_nodes(&self) -> Vec<usize> {
        let mut count = vec![0usize; self.num_nodes()];
        for nodes in &self.elements {
            for &i in nodes {
                count[i] += 1;
            }
        }
        (0..self.num_nodes()).filter(|&i| count[i] < 8).collect()
    }

    /// Writes one frame: a header, one `x y z` line per node, one line of 8
    /// node indices per element.
    pub fn write_snapshot<W: Write>(&self, out: &mut W, x: &[f64]) -> Result<()> {
        if x.len() != self.num_dofs() {
            return Err(Error::invalid("snapshot positions have the wrong length"));
        }
        writeln!(out, "nodes {} elements {}", self.num_nodes(), self.num_elements())?;
        for p in x.chunks_exact(3) {
            writeln!(out, "{:.8e} {:.8e} {:.8e}", p[0], p[1], p[2])?;
        }
        for nodes in &self.elements {
            let line: Vec<String> = nodes.iter().map(|i| i.to_string()).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

/// Regular `counts.x × counts.y × counts.z` lattice of cubes.
pub fn build_grid_mesh(counts: [usize; 3], dx: f64, origin: Vector3<f64>) -> Result<HexMesh> {
    build_voxel_mesh(counts, dx, origin, |_, _, _| true)
}

/// Lattice of cubes keeping only the cells selected by `keep(i, j, k)`.
///
/// Nodes not touched by any kept cell are dropped; the remaining nodes keep
/// their lexicographic (x-fastest) lattice order.
pub fn build_voxel_mesh(
    counts: [usize; 3],
    dx: f64,
    origin: Vector3<f64>,
    keep: impl Fn(usize, usize, usize) -> bool,
) -> Result<HexMesh> {
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::invalid(format!("grid counts must be >= 1, got {counts:?}")));
    }
    if !(dx > 0.0) || !dx.is_finite() {
        return Err(Error::invalid(format!("element size must be positive, got {dx}")));
    }
    let [cx, cy, cz] = counts;
    let (nx, ny, nz) = (cx + 1, cy + 1, cz + 1);
    let lattice = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);

    let mut cells = Vec::new();
    let mut used = vec![false; nx * ny * nz];
    for k in 0..cz {
        for j in 0..cy {
            for i in 0..cx {
                if !keep(i, j, k) {
                    continue;
                }
                let mut nodes = [0usize; 8];
                for (a, c) in CORNERS.iter().enumerate() {
                    let id = lattice(i + c[0], j + c[1], k + c[2]);
                    used[id] = true;
                    nodes[a] = id;
                }
                cells.push(nodes);
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::invalid("voxel selection is empty"));
    }

    let mut remap = vec![usize::MAX; used.len()];
    let mut rest = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let id = lattice(i, j, k);
                if used[id] {
                    remap[id] = rest.len();
                    rest.push(origin + Vector3::new(i as f64, j as f64, k as f64) * dx);
                }
            }
        }
    }
    for nodes in &mut cells {
        for id in nodes.iter_mut() {
            *id = remap[*id];
        }
    }
    HexMesh::new(rest, cells, dx)
}

/// Constant operator mapping element coordinates to deformation gradients at
/// the 2×2×2 Gauss points.
#[derive(Debug, Clone)]
pub struct DeformOperator {
    /// `grads[q][a]`: material gradient of shape function `a` at point `q`.
    grads: [[Vector3<f64>; 8]; QUAD_POINTS],
    quad_volume: f64,
}

impl DeformOperator {
    pub fn new(dx: f64) -> Self {
        let g = 1.0 / 3f64.sqrt();
        let mut grads = [[Vector3::zeros(); 8]; QUAD_POINTS];
        for (q, qc) in CORNERS.iter().enumerate() {
            let p = qc.map(|c| if c == 0 { -g } else { g });
            for (a, ac) in CORNERS.iter().enumerate() {
                let s = ac.map(|c| if c == 0 { -1.0 } else { 1.0 });
                let f = [1.0 + s[0] * p[0], 1.0 + s[1] * p[1], 1.0 + s[2] * p[2]];
                // d/dX = (2/dx) d/dxi, and N = f0 f1 f2 / 8.
                let scale = 2.0 / dx / 8.0;
                grads[q][a] = Vector3::new(
                    s[0] * f[1] * f[2],
                    f[0] * s[1] * f[2],
                    f[0] * f[1] * s[2],
                ) * scale;
            }
        }
        Self {
            grads,
            quad_volume: dx.powi(3) / QUAD_POINTS as f64,
        }
    }

    pub fn for_mesh(mesh: &HexMesh) -> Self {
        Self::new(mesh.dx())
    }

    pub fn quad_volume(&self) -> f64 {
        self.quad_volume
    }

    pub fn shape_gradients(&self, q: usize) -> &[Vector3<f64>; 8] {
        &self.grads[q]
    }

    /// F at quadrature point `q` from the element's eight nodal positions.
    #[inline]
    pub fn apply(&self, q: usize, nodes: &[Vector3<f64>; 8]) -> Matrix3<f64> {
        let mut f = Matrix3::zeros();
        for a in 0..8 {
            f += nodes[a] * self.grads[q][a].transpose();
        }
        f
    }

    /// Adds `Gᵀ P` (the transpose action) to the element's nodal vectors.
    #[inline]
    pub fn apply_transpose_add(&self, q: usize, p: &Matrix3<f64>, scale: f64, out: &mut [Vector3<f64>; 8]) {
        for a in 0..8 {
            out[a] += p * self.grads[q][a] * scale;
        }
    }

    /// Dense 9×24 form, rows indexed by `3i + j` for `F[(i, j)]`.
    pub fn matrix(&self, q: usize) -> SMatrix<f64, 9, 24> {
        let mut g = SMatrix::<f64, 9, 24>::zeros();
        for a in 0..8 {
            for i in 0..3 {
                for j in 0..3 {
                    g[(3 * i + j, 3 * a + i)] = self.grads[q][a][j];
                }
            }
        }
        g
    }

    /// `F = G_e x` for element `element` at point `quad`.
    pub fn deformation_gradient(
        &self,
        mesh: &HexMesh,
        x: &[f64],
        element: usize,
        quad: usize,
    ) -> Result<Matrix3<f64>> {
        if x.len() != mesh.num_dofs() {
            return Err(Error::invalid("position vector has the wrong length"));
        }
        if element >= mesh.num_elements() {
            return Err(Error::invalid(format!("element {element} out of range")));
        }
        if quad >= QUAD_POINTS {
            return Err(Error::invalid(format!("quadrature index {quad} out of range")));
        }
        Ok(self.apply(quad, &gather(x, &mesh.elements()[element])))
    }
}

#[inline]
pub fn gather(x: &[f64], nodes: &[usize; 8]) -> [Vector3<f64>; 8] {
    nodes.map(|i| Vector3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]))
}

#[inline]
pub fn node(x: &[f64], i: usize) -> Vector3<f64> {
    Vector3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2])
}

/// Diagonal mass per DoF.
#[derive(Debug, Clone, PartialEq)]
pub struct LumpedMass {
    diag: Vec<f64>,
}

impl LumpedMass {
    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn node_mass(&self, i: usize) -> f64 {
        self.diag[3 * i]
    }

    pub fn total(&self) -> f64 {
        self.diag.iter().step_by(3).sum()
    }
}

pub fn lumped_mass(mesh: &HexMesh, density: f64) -> Result<LumpedMass> {
    if !(density > 0.0) || !density.is_finite() {
        return Err(Error::invalid(format!("density must be positive, got {density}")));
    }
    let share = density * mesh.element_volume() / 8.0;
    let mut diag = vec![0.0; mesh.num_dofs()];
    for nodes in mesh.elements() {
        for &i in nodes {
            for d in 0..3 {
                diag[3 * i + d] += share;
            }
        }
    }
    Ok(LumpedMass { diag })
}
