//! Sparse symmetric matrices over mesh DoFs, Cholesky factorization with a
//! cached block of inverse columns, the low-rank Dirichlet corrector used for
//! contact, and a Jacobi-preconditioned CG for the Newton baseline.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use faer::linalg::solvers::SolveCore;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMat};
use faer::{Conj, MatMut, Par, Side};
use nalgebra::{DMatrix, DVector, SMatrix};

use crate::error::{Error, Result};
use crate::mesh::HexMesh;

/// Counts expensive linear-algebra events so callers can verify the refresh
/// policy (one factorization per change of mass, step, weights or Dirichlet
/// set on the projective path).
#[derive(Debug, Default)]
pub struct SolveCounters {
    factorizations: AtomicUsize,
    pcg_solves: AtomicUsize,
    pcg_iterations: AtomicUsize,
    sparse_solves: AtomicUsize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub factorizations: usize,
    pub pcg_solves: usize,
    pub pcg_iterations: usize,
    pub sparse_solves: usize,
}

impl SolveCounters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            factorizations: self.factorizations.load(Ordering::Relaxed),
            pcg_solves: self.pcg_solves.load(Ordering::Relaxed),
            pcg_iterations: self.pcg_iterations.load(Ordering::Relaxed),
            sparse_solves: self.sparse_solves.load(Ordering::Relaxed),
        }
    }
}

impl CounterSnapshot {
    pub fn since(&self, earlier: &CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            factorizations: self.factorizations - earlier.factorizations,
            pcg_solves: self.pcg_solves - earlier.pcg_solves,
            pcg_iterations: self.pcg_iterations - earlier.pcg_iterations,
            sparse_solves: self.sparse_solves - earlier.sparse_solves,
        }
    }
}

/// Node-adjacency sparsity of a mesh expanded to 3×3 DoF blocks, with a
/// precomputed scatter table per element and a symbolic Cholesky analysis.
#[derive(Debug)]
pub struct MeshPattern {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    /// `element_slots[576 e + 24 r + c]`: value index of local entry `(r, c)`.
    element_slots: Vec<u32>,
    /// Lower triangle in CSC form, and where each entry lives in the CSR values.
    lower: SymbolicSparseColMat<usize>,
    lower_src: Vec<usize>,
    symbolic: SymbolicLlt<usize>,
}

impl MeshPattern {
    pub fn new(mesh: &HexMesh) -> Result<Arc<Self>> {
        let nn = mesh.num_nodes();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nn];
        for nodes in mesh.elements() {
            for &a in nodes {
                adj[a].extend_from_slice(nodes);
            }
        }
        for (i, list) in adj.iter_mut().enumerate() {
            list.push(i);
            list.sort_unstable();
            list.dedup();
        }
        let n = 3 * nn;
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for list in &adj {
            for _ in 0..3 {
                for &j in list {
                    col_idx.extend([3 * j, 3 * j + 1, 3 * j + 2]);
                }
                row_ptr.push(col_idx.len());
            }
        }

        let find = |row: usize, col: usize| -> usize {
            let lo = row_ptr[row];
            lo + col_idx[lo..row_ptr[row + 1]]
                .binary_search(&col)
                .expect("entry present in pattern")
        };
        let mut element_slots = Vec::with_capacity(576 * mesh.num_elements());
        for nodes in mesh.elements() {
            for r in 0..24 {
                let row = 3 * nodes[r / 3] + r % 3;
                for c in 0..24 {
                    let col = 3 * nodes[c / 3] + c % 3;
                    element_slots.push(find(row, col) as u32);
                }
            }
        }

        // For a symmetric pattern, column j of the lower triangle is row j of
        // the CSR restricted to columns >= j.
        let mut col_ptr = vec![0usize];
        let mut row_idx = Vec::new();
        let mut lower_src = Vec::new();
        for j in 0..n {
            for k in row_ptr[j]..row_ptr[j + 1] {
                if col_idx[k] >= j {
                    row_idx.push(col_idx[k]);
                    lower_src.push(k);
                }
            }
            col_ptr.push(row_idx.len());
        }
        let lower = SymbolicSparseColMat::new_checked(n, n, col_ptr, None, row_idx);
        let symbolic = SymbolicLlt::try_new(lower.as_ref(), Side::Lower)
            .map_err(|e| Error::numerical(format!("symbolic factorization failed: {e:?}")))?;
        Ok(Arc::new(Self {
            n,
            row_ptr,
            col_idx,
            element_slots,
            lower,
            lower_src,
            symbolic,
        }))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn zeros(self: &Arc<Self>) -> SymMatrix {
        SymMatrix {
            pattern: Arc::clone(self),
            values: vec![0.0; self.col_idx.len()],
        }
    }
}

/// Symmetric matrix stored in full (both triangles) CSR form on a
/// [`MeshPattern`].
#[derive(Debug, Clone)]
pub struct SymMatrix {
    pattern: Arc<MeshPattern>,
    values: Vec<f64>,
}

impl SymMatrix {
    pub fn pattern(&self) -> &Arc<MeshPattern> {
        &self.pattern
    }

    pub fn dim(&self) -> usize {
        self.pattern.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let p = &self.pattern;
        let range = p.row_ptr[i]..p.row_ptr[i + 1];
        (&p.col_idx[range.clone()], &self.values[range])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map(|k| vals[k]).unwrap_or(0.0)
    }

    pub fn add_diagonal(&mut self, diag: &[f64]) {
        for (i, &d) in diag.iter().enumerate() {
            let k = self.slot(i, i);
            self.values[k] += d;
        }
    }

    /// Adds `scale · I₃` to the diagonal block of node `node`.
    pub fn add_node_identity(&mut self, node: usize, scale: f64) {
        for d in 0..3 {
            let k = self.slot(3 * node + d, 3 * node + d);
            self.values[k] += scale;
        }
    }

    /// Adds `v` at `(i, j)`; the entry must be in the pattern.
    pub fn add_entry(&mut self, i: usize, j: usize, v: f64) {
        let k = self.slot(i, j);
        self.values[k] += v;
    }

    fn slot(&self, i: usize, j: usize) -> usize {
        let p = &self.pattern;
        p.row_ptr[i]
            + p.col_idx[p.row_ptr[i]..p.row_ptr[i + 1]]
                .binary_search(&j)
                .expect("entry present in pattern")
    }

    pub fn add_element(&mut self, element: usize, local: &SMatrix<f64, 24, 24>) {
        let slots = &self.pattern.element_slots[576 * element..576 * (element + 1)];
        for r in 0..24 {
            for c in 0..24 {
                self.values[slots[24 * r + c] as usize] += local[(r, c)];
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_scaled(&mut self, other: &SymMatrix, s: f64) {
        assert!(Arc::ptr_eq(&self.pattern, &other.pattern), "patterns differ");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
    }

    /// Replaces the rows and columns of `mask`ed DoFs by the corresponding
    /// diagonal entries, decoupling them from the rest of the system.
    pub fn eliminate(&mut self, mask: &[bool]) {
        let p = Arc::clone(&self.pattern);
        for i in 0..p.n {
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                let j = p.col_idx[k];
                if i != j && (mask[i] || mask[j]) {
                    self.values[k] = 0.0;
                }
            }
        }
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        let p = &self.pattern;
        for i in 0..p.n {
            let mut acc = 0.0;
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                acc += self.values[k] * x[p.col_idx[k]];
            }
            y[i] = acc;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        self.mul_vec(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.values[self.slot(i, i)]).collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.dim() {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// Active contact nodes and their DoFs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContactSet {
    nodes: Vec<usize>,
}

impl ContactSet {
    pub fn new(mut nodes: Vec<usize>) -> Self {
        nodes.sort_unstable();
        nodes.dedup();
        Self { nodes }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn dofs(&self) -> Vec<usize> {
        self.nodes.iter().flat_map(|&j| [3 * j, 3 * j + 1, 3 * j + 2]).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, node: usize) -> bool {
        self.nodes.binary_search(&node).is_ok()
    }
}

/// Cholesky factor of a (Dirichlet-eliminated) SPD matrix together with the
/// matrix itself and, optionally, the columns `A⁻¹ e_j` for every contact
/// candidate DoF `j`.
pub struct SpdFactor {
    matrix: SymMatrix,
    llt: Llt<usize, f64>,
    /// DoF -> column of the cache, for candidate DoFs.
    candidate_col: Vec<Option<u32>>,
    candidates: Vec<usize>,
    cache: Option<Vec<f64>>,
    counters: Arc<SolveCounters>,
}

impl std::fmt::Debug for SpdFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpdFactor")
            .field("dim", &self.dim())
            .field("candidates", &self.candidates.len())
            .field("cached", &self.cache.is_some())
            .finish()
    }
}

/// Numeric Cholesky of `matrix` reusing the pattern's symbolic analysis.
fn factorize(matrix: &SymMatrix, counters: &SolveCounters) -> Result<Llt<usize, f64>> {
    faer::set_global_parallelism(Par::Seq);
    let p = &matrix.pattern;
    let vals: Vec<f64> = p.lower_src.iter().map(|&k| matrix.values[k]).collect();
    let view = SparseColMatRef::new(p.lower.as_ref(), &vals);
    counters.factorizations.fetch_add(1, Ordering::Relaxed);
    Llt::try_new_with_symbolic(p.symbolic.clone(), view, Side::Lower)
        .map_err(|e| Error::numerical(format!("Cholesky factorization failed (matrix not SPD): {e:?}")))
}

impl SpdFactor {
    /// Factorizes `matrix` and, when `cache` is set, precomputes one solve
    /// per candidate DoF.
    pub fn new(
        matrix: SymMatrix,
        candidate_dofs: &[usize],
        cache: bool,
        counters: Arc<SolveCounters>,
    ) -> Result<Self> {
        let n = matrix.dim();
        let llt = factorize(&matrix, &counters)?;
        let mut candidate_col = vec![None; n];
        let mut candidates = Vec::with_capacity(candidate_dofs.len());
        for &d in candidate_dofs {
            if d >= n {
                return Err(Error::invalid(format!("candidate DoF {d} out of range")));
            }
            if candidate_col[d].is_none() {
                candidate_col[d] = Some(candidates.len() as u32);
                candidates.push(d);
            }
        }
        let mut factor = Self {
            matrix,
            llt,
            candidate_col,
            candidates,
            cache: None,
            counters,
        };
        if cache && !factor.candidates.is_empty() {
            let mut block = vec![0.0; n * factor.candidates.len()];
            for (c, col) in block.chunks_exact_mut(n).enumerate() {
                factor.unit_solve(factor.candidates[c], col);
            }
            factor.cache = Some(block);
        }
        Ok(factor)
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn matrix(&self) -> &SymMatrix {
        &self.matrix
    }

    pub fn counters(&self) -> &Arc<SolveCounters> {
        &self.counters
    }

    pub fn is_cached(&self) -> bool {
        self.cache.is_some()
    }

    pub fn candidate_dofs(&self) -> &[usize] {
        &self.candidates
    }

    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        assert_eq!(rhs.len(), self.dim());
        self.counters.sparse_solves.fetch_add(1, Ordering::Relaxed);
        let n = rhs.len();
        self.llt
            .solve_in_place_with_conj(Conj::No, MatMut::from_column_major_slice_mut(rhs, n, 1));
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    fn unit_solve(&self, dof: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[dof] = 1.0;
        self.solve_in_place(out);
    }

    /// `A⁻¹ e_dof` from the cache, if present.
    pub fn cached_column(&self, dof: usize) -> Option<&[f64]> {
        let c = self.candidate_col.get(dof).copied().flatten()? as usize;
        let n = self.dim();
        self.cache.as_ref().map(|b| &b[c * n..(c + 1) * n])
    }

    /// Builds the small dense system for solves with the DoFs of `active`
    /// pinned. `use_cache = false` recomputes the inverse columns with fresh
    /// solves; both paths produce bit-identical results.
    pub fn prepare_lowrank(&self, active: &ContactSet, use_cache: bool) -> Result<LowRankSystem> {
        let dofs = active.dofs();
        for &d in &dofs {
            if self.candidate_col.get(d).copied().flatten().is_none() {
                return Err(Error::invalid(format!("active DoF {d} is not a contact candidate")));
            }
        }
        let n = self.dim();
        let c = dofs.len();
        if c == 0 {
            return Ok(LowRankSystem {
                dofs,
                b3: Vec::new(),
                inner: DMatrix::zeros(0, 0),
                lu: None,
            });
        }

        // B₁ = A⁻¹ I_{:,C}
        let mut b3 = vec![0.0; 2 * n * c];
        {
            let (b1, _) = b3.split_at_mut(n * c);
            for (k, col) in b1.chunks_exact_mut(n).enumerate() {
                match self.cached_column(dofs[k]).filter(|_| use_cache) {
                    Some(cached) => col.copy_from_slice(cached),
                    None => self.unit_solve(dofs[k], col),
                }
            }
        }
        // B₂ = I_{:,C} − B₁ A_CC
        let a_cc = DMatrix::from_fn(c, c, |i, j| self.matrix.get(dofs[i], dofs[j]));
        {
            let (b1, b2) = b3.split_at_mut(n * c);
            for j in 0..c {
                let out = &mut b2[j * n..(j + 1) * n];
                for k in 0..c {
                    let a = a_cc[(k, j)];
                    if a != 0.0 {
                        for (o, b) in out.iter_mut().zip(&b1[k * n..(k + 1) * n]) {
                            *o -= b * a;
                        }
                    }
                }
                out[dofs[j]] += 1.0;
            }
        }
        // B₄ = I + Vᵀ B₃ where Vᵀ y = [y_C − (A y)_C ; −y_C].
        let mut inner = DMatrix::<f64>::identity(2 * c, 2 * c);
        for col in 0..2 * c {
            let b = &b3[col * n..(col + 1) * n];
            for (k, &d) in dofs.iter().enumerate() {
                let (cols, vals) = self.matrix.row(d);
                let ab: f64 = cols.iter().zip(vals).map(|(&j, &v)| v * b[j]).sum();
                inner[(k, col)] += b[d] - ab;
                inner[(c + k, col)] -= b[d];
            }
        }
        let lu = inner.clone().lu();
        let u = lu.u();
        let scale = u.diagonal().abs().max();
        if !(scale > 0.0) || u.diagonal().abs().min() <= 1e-13 * scale {
            return Err(Error::numerical("singular inner system in the contact corrector"));
        }
        Ok(LowRankSystem {
            dofs,
            b3,
            inner,
            lu: Some(lu),
        })
    }

    /// Solves `A x = d` with `x_C = x_fixed` on the active DoFs; the remaining
    /// rows satisfy `A_FF x_F = d_F − A_FC x_fixed`.
    pub fn solve_dirichlet_lowrank(&self, active: &ContactSet, d: &[f64], x_fixed: &[f64]) -> Result<Vec<f64>> {
        let sys = self.prepare_lowrank(active, self.is_cached())?;
        sys.solve(self, d, x_fixed)
    }
}

/// Prepared low-rank correction for one active set.
#[derive(Debug, Clone)]
pub struct LowRankSystem {
    dofs: Vec<usize>,
    /// `[B₁, B₂]`, column-major `n × 2c`.
    b3: Vec<f64>,
    inner: DMatrix<f64>,
    lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl LowRankSystem {
    pub fn dofs(&self) -> &[usize] {
        &self.dofs
    }

    /// The `2c × 2c` matrix `B₄`.
    pub fn inner_matrix(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub fn solve(&self, factor: &SpdFactor, d: &[f64], x_fixed: &[f64]) -> Result<Vec<f64>> {
        let n = factor.dim();
        let c = self.dofs.len();
        if d.len() != n || x_fixed.len() != c {
            return Err(Error::invalid("low-rank solve: vector lengths do not match"));
        }
        let Some(lu) = &self.lu else {
            return Ok(factor.solve(d));
        };
        // Move the pinned values to the right-hand side.
        let mut r = d.to_vec();
        for (k, &dof) in self.dofs.iter().enumerate() {
            if x_fixed[k] != 0.0 {
                let (cols, vals) = factor.matrix.row(dof);
                for (&j, &v) in cols.iter().zip(vals) {
                    r[j] -= v * x_fixed[k];
                }
            }
        }
        for (k, &dof) in self.dofs.iter().enumerate() {
            r[dof] = x_fixed[k];
        }
        let y1 = factor.solve(&r);
        let mut y2 = DVector::zeros(2 * c);
        for (k, &dof) in self.dofs.iter().enumerate() {
            let (cols, vals) = factor.matrix.row(dof);
            let ay: f64 = cols.iter().zip(vals).map(|(&j, &v)| v * y1[j]).sum();
            y2[k] = y1[dof] - ay;
            y2[c + k] = -y1[dof];
        }
        let y3 = lu
            .solve(&y2)
            .ok_or_else(|| Error::numerical("singular inner system in the contact corrector"))?;
        let mut x = y1;
        for col in 0..2 * c {
            let coef = y3[col];
            if coef != 0.0 {
                for (xi, b) in x.iter_mut().zip(&self.b3[col * n..(col + 1) * n]) {
                    *xi -= b * coef;
                }
            }
        }
        for (k, &dof) in self.dofs.iter().enumerate() {
            x[dof] = x_fixed[k];
        }
        Ok(x)
    }
}

/// Refactorizes a matrix on a known pattern without any contact cache; used
/// by the Newton baseline every iteration.
pub fn factorize_plain(matrix: SymMatrix, counters: Arc<SolveCounters>) -> Result<SpdFactor> {
    SpdFactor::new(matrix, &[], false, counters)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcgOutcome {
    Converged { iterations: usize },
    /// Hit the iteration cap; the best iterate is returned.
    MaxIterations,
}

/// Jacobi-preconditioned conjugate gradient on `matrix x = b`, stopping at
/// `‖r‖ ≤ tol ‖b‖`. Non-positive curvature is reported as a numerical error.
pub fn pcg(
    matrix: &SymMatrix,
    b: &[f64],
    tol: f64,
    max_iters: usize,
    counters: &SolveCounters,
) -> Result<(Vec<f64>, PcgOutcome)> {
    counters.pcg_solves.fetch_add(1, Ordering::Relaxed);
    let n = matrix.dim();
    let inv_diag: Vec<f64> = matrix
        .diagonal()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let b_norm = norm(b);
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok((x, PcgOutcome::Converged { iterations: 0 }));
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 0..max_iters {
        matrix.mul_vec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::numerical("conjugate gradient met non-positive curvature"));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        counters.pcg_iterations.fetch_add(1, Ordering::Relaxed);
        if norm(&r) <= tol * b_norm {
            return Ok((x, PcgOutcome::Converged { iterations: it + 1 }));
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Ok((x, PcgOutcome::MaxIterations))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
