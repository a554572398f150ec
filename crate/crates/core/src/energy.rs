//! Quadratic projective energies: corotated elasticity, volume preservation,
//! muscle fibers and a soft collision penalty.
//!
//! Each term has the form `(w/2)‖G x − z*(G x)‖²` where `z*` is the closest
//! point on a constraint manifold. This module holds the per-point
//! projections and their exact Jacobians; global sums live in
//! [`crate::model`].

use nalgebra::{Matrix3, Matrix4, SMatrix, Vector3, Vector4};

use crate::error::{Error, Result};

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Matrix3x9 = SMatrix<f64, 3, 9>;

/// Largest Poisson's ratio accepted; beyond it the volume weight blows up.
pub const MAX_POISSON: f64 = 0.499;

const VOLUME_TOL: f64 = 1e-12;
const VOLUME_MAX_ITERS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialParams {
    pub youngs_modulus: f64,
    pub poissons_ratio: f64,
}

impl MaterialParams {
    pub fn new(youngs_modulus: f64, poissons_ratio: f64) -> Self {
        Self {
            youngs_modulus,
            poissons_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (e, nu) = (self.youngs_modulus, self.poissons_ratio);
        if !(e > 0.0) || !e.is_finite() {
            return Err(Error::invalid(format!("Young's modulus must be positive, got {e}")));
        }
        if !(nu > -1.0 && nu <= MAX_POISSON) {
            return Err(Error::invalid(format!(
                "Poisson's ratio must lie in (-1, {MAX_POISSON}], got {nu}"
            )));
        }
        Ok(())
    }
}

/// `(w_corotated, w_volume) = (2μ, λ)` from the Lamé parameters.
pub fn lame_weights(params: MaterialParams) -> Result<(f64, f64)> {
    params.validate()?;
    let (e, nu) = (params.youngs_modulus, params.poissons_ratio);
    let mu = e / (2.0 * (1.0 + nu));
    let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    Ok((2.0 * mu, lambda))
}

/// Rows `(w_corotated, w_volume)`, columns `(E, ν)`.
pub fn lame_weight_jacobian(params: MaterialParams) -> Result<[[f64; 2]; 2]> {
    params.validate()?;
    let (e, nu) = (params.youngs_modulus, params.poissons_ratio);
    let a = 1.0 + nu;
    let b = 1.0 - 2.0 * nu;
    Ok([
        [1.0 / a, -e / (a * a)],
        [nu / (a * b), e * (1.0 + 2.0 * nu * nu) / (a * a * b * b)],
    ])
}

/// Plane `n·x = offset` with unit normal `n`; the admissible side is `φ ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl Plane {
    pub fn new(normal: Vector3<f64>, offset: f64) -> Result<Self> {
        let len = normal.norm();
        if !len.is_finite() || (len - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("plane normal must have unit length"));
        }
        Ok(Self { normal, offset })
    }

    /// Ground plane `z = height`.
    pub fn ground(height: f64) -> Self {
        Self {
            normal: Vector3::z(),
            offset: height,
        }
    }

    pub fn signed_distance(&self, x: &Vector3<f64>) -> f64 {
        self.normal.dot(x) - self.offset
    }
}

/// SVD with both factors proper rotations: `F = U diag(σ) Vᵀ`, `|σ₁| ≥ |σ₂| ≥ |σ₃|`.
/// Only `σ₃` may be negative (inverted elements).
#[derive(Debug, Clone, Copy)]
pub struct SignedSvd {
    pub u: Matrix3<f64>,
    pub sigma: Vector3<f64>,
    pub v: Matrix3<f64>,
}

pub fn signed_svd(f: &Matrix3<f64>) -> SignedSvd {
    let svd = f.svd(true, true);
    let u0 = svd.u.expect("requested U");
    let v0 = svd.v_t.expect("requested Vᵀ").transpose();
    let s0 = svd.singular_values;

    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s0[b].total_cmp(&s0[a]));
    let mut u = Matrix3::from_columns(&order.map(|i| u0.column(i).into_owned()));
    let mut v = Matrix3::from_columns(&order.map(|i| v0.column(i).into_owned()));
    let mut sigma = Vector3::new(s0[order[0]], s0[order[1]], s0[order[2]]);

    if u.determinant() < 0.0 {
        u.column_mut(2).neg_mut();
        sigma[2] = -sigma[2];
    }
    if v.determinant() < 0.0 {
        v.column_mut(2).neg_mut();
        sigma[2] = -sigma[2];
    }
    SignedSvd { u, sigma, v }
}

pub fn project_corotated(f: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = signed_svd(f);
    svd.u * svd.v.transpose()
}

/// Flattened `∂R/∂F`, vec index `3i + j` for entry `(i, j)`.
pub fn corotated_jacobian(f: &Matrix3<f64>) -> Matrix9 {
    corotated_jacobian_from_svd(&signed_svd(f))
}

pub fn corotated_jacobian_from_svd(svd: &SignedSvd) -> Matrix9 {
    let s = svd.sigma;
    let floor = 1e-6 * s.abs().max();
    isotropic_jacobian(svd, &Matrix3::zeros(), |i, j| {
        (0.0, 2.0 / (s[i] + s[j]).max(floor))
    })
}

/// Jacobian of `F ↦ U diag(s(σ)) Vᵀ` for an isotropic map given `∂s/∂σ` and,
/// per off-diagonal pair, the coefficients multiplying the symmetric and
/// skew parts of `Uᵀ dF V`.
fn isotropic_jacobian(
    svd: &SignedSvd,
    ds_dsigma: &Matrix3<f64>,
    pair: impl Fn(usize, usize) -> (f64, f64),
) -> Matrix9 {
    let (u, v) = (&svd.u, &svd.v);
    let mut coef = [[(0.0, 0.0); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                coef[i][j] = pair(i, j);
            }
        }
    }
    let mut jac = Matrix9::zeros();
    for k in 0..3 {
        for l in 0..3 {
            // P = Uᵀ E_kl V
            let p = Matrix3::from_fn(|i, j| u[(k, i)] * v[(l, j)]);
            let dsig = p.diagonal();
            let ds = ds_dsigma * dsig;
            let mut q = Matrix3::from_diagonal(&ds);
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        let sym = 0.5 * (p[(i, j)] + p[(j, i)]);
                        let skew = 0.5 * (p[(i, j)] - p[(j, i)]);
                        let (a, b) = coef[i][j];
                        q[(i, j)] = a * sym + b * skew;
                    }
                }
            }
            let dz = u * q * v.transpose();
            let col = 3 * k + l;
            for i in 0..3 {
                for j in 0..3 {
                    jac[(3 * i + j, col)] = dz[(i, j)];
                }
            }
        }
    }
    jac
}

/// Target singular values for the volume projection together with the
/// multiplier of the product constraint.
#[derive(Debug, Clone, Copy)]
pub struct VolumeTarget {
    pub svd: SignedSvd,
    pub s: Vector3<f64>,
    pub multiplier: f64,
}

/// Closest matrix with unit determinant sharing the singular vectors of `F`.
pub fn project_volume(f: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let t = volume_target(f)?;
    Ok(t.svd.u * Matrix3::from_diagonal(&t.s) * t.svd.v.transpose())
}

pub fn volume_target(f: &Matrix3<f64>) -> Result<VolumeTarget> {
    let svd = signed_svd(f);
    let (s, multiplier) = volume_singular_values(&svd.sigma)?;
    Ok(VolumeTarget { svd, s, multiplier })
}

/// Minimizes `‖s − σ‖²` subject to `s₁ s₂ s₃ = 1`.
///
/// Stationarity gives `s_i² − σ_i s_i + μ = 0` for a shared `μ`, so each
/// `s_i` is one of the two roots of a quadratic. The roots nearest to `σ` give
/// a monotone equation `Σ ln s_i(μ) = 0` in one variable. Under strong
/// expansion a stationary point with the smallest value on the far root can
/// be closer (at `σ = 2·(1,1,1)` the symmetric point `s = (1,1,1)` is only a
/// saddle), so those candidates are also examined whenever they could win.
/// The 4×4 KKT Newton solve is the last resort.
pub fn volume_singular_values(sigma: &Vector3<f64>) -> Result<(Vector3<f64>, f64)> {
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite singular values in volume projection"));
    }
    let dist = |s: &Vector3<f64>| (s - sigma).norm_squared();
    let mut best = volume_near_branch(sigma);
    let expanding = sigma[2] > 0.0 && sigma.iter().product::<f64>() > 1.0;
    let far_can_win = best.is_none_or(|(s, _)| dist(&s) > 0.25 * sigma[2] * sigma[2]);
    if expanding && far_can_win {
        for cand in volume_far_branch(sigma) {
            if best.is_none_or(|(s, _)| dist(&cand.0) < dist(&s)) {
                best = Some(cand);
            }
        }
    }
    match best {
        Some(r) => Ok(r),
        None => volume_kkt_newton(sigma),
    }
}

/// Roots of `s² − σ s + μ = 0`; the last one on the far branch if `far_last`.
fn branch_roots(sigma: &Vector3<f64>, mu: f64, far_last: bool) -> (Vector3<f64>, Vector3<f64>) {
    let disc = sigma.map(|v| (v * v - 4.0 * mu).max(0.0).sqrt());
    let mut s = (sigma + disc) * 0.5;
    if far_last {
        s[2] = 0.5 * (sigma[2] - disc[2]);
    }
    (s, disc)
}

fn log_product(sigma: &Vector3<f64>, mu: f64, far_last: bool) -> f64 {
    let (s, _) = branch_roots(sigma, mu, far_last);
    if s.iter().any(|&v| v <= 0.0) {
        f64::NEG_INFINITY
    } else {
        s.map(f64::ln).sum()
    }
}

fn volume_near_branch(sigma: &Vector3<f64>) -> Option<(Vector3<f64>, f64)> {
    let mu_max = sigma.map(|v| v * v).min() / 4.0;
    let g0 = log_product(sigma, 0.0, false);
    if g0.abs() <= VOLUME_TOL {
        return Some((*sigma, 0.0));
    }
    if g0 > 0.0 {
        let g_max = log_product(sigma, mu_max, false);
        if g_max.abs() <= VOLUME_TOL {
            return Some((branch_roots(sigma, mu_max, false).0, mu_max));
        }
        if g_max > 0.0 {
            return None;
        }
        refine_secular_root(sigma, false, 0.0, mu_max)
    } else {
        let mut lo = -sigma.map(|v| v * v).max().max(1.0);
        for _ in 0..200 {
            if log_product(sigma, lo, false) >= 0.0 {
                return refine_secular_root(sigma, false, lo, 0.0);
            }
            lo *= 4.0;
        }
        None
    }
}

/// All stationary points with the smallest value on the far root, located by
/// scanning `μ` on a log grid and refining each sign change.
fn volume_far_branch(sigma: &Vector3<f64>) -> Vec<(Vector3<f64>, f64)> {
    const SAMPLES: i32 = 32;
    // Just below the branch point, where both roots coincide with the near one.
    let mu_max = sigma[2] * sigma[2] / 4.0 * (1.0 - 1e-6);
    let mut roots = Vec::new();
    let mut prev = (mu_max * 1e-8, log_product(sigma, mu_max * 1e-8, true));
    for k in (0..SAMPLES).rev() {
        let mu = mu_max * 10f64.powf(-8.0 * k as f64 / SAMPLES as f64);
        let g = log_product(sigma, mu, true);
        if g.abs() <= VOLUME_TOL {
            roots.push((branch_roots(sigma, mu, true).0, mu));
        } else if g.signum() != prev.1.signum() && prev.1.abs() > VOLUME_TOL {
            roots.extend(refine_secular_root(sigma, true, prev.0, mu));
        }
        prev = (mu, g);
    }
    roots
}

/// Safeguarded Newton on `Σ ln s_i(μ)` inside a sign-changing bracket.
fn refine_secular_root(
    sigma: &Vector3<f64>,
    far_last: bool,
    mut lo: f64,
    mut hi: f64,
) -> Option<(Vector3<f64>, f64)> {
    let lo_sign = log_product(sigma, lo, far_last).signum();
    let mut mu = 0.5 * (lo + hi);
    for _ in 0..VOLUME_MAX_ITERS {
        let (s, disc) = branch_roots(sigma, mu, far_last);
        let g = log_product(sigma, mu, far_last);
        if g.abs() <= VOLUME_TOL {
            return Some((s, mu));
        }
        if g.signum() == lo_sign {
            lo = mu;
        } else {
            hi = mu;
        }
        let dg: f64 = (0..3)
            .map(|i| {
                let ds = if far_last && i == 2 { 1.0 } else { -1.0 } / disc[i].max(1e-300);
                ds / s[i]
            })
            .sum();
        let mut next = mu - g / dg;
        if !next.is_finite() || next <= lo || next >= hi {
            next = 0.5 * (lo + hi);
        }
        if next == mu {
            break;
        }
        mu = next;
    }
    let (s, _) = branch_roots(sigma, mu, far_last);
    (log_product(sigma, mu, far_last).abs() <= 1e-10).then_some((s, mu))
}

fn volume_kkt_newton(sigma: &Vector3<f64>) -> Result<(Vector3<f64>, f64)> {
    let scale = sigma.abs().iter().product::<f64>().abs().cbrt().max(1e-3);
    let mut s = sigma.map(|v| if v.abs() < 1e-3 { 1e-3f64.copysign(v) } else { v }) / scale;
    // Start on the constraint: fix the sign so the product is positive.
    if s.iter().product::<f64>() < 0.0 {
        s[2] = -s[2];
    }
    let p: f64 = s.iter().product();
    s /= p.cbrt();
    let mut lambda = 0.0;
    let residual = |s: &Vector3<f64>, lambda: f64| -> Vector4<f64> {
        let gc = Vector3::new(s[1] * s[2], s[0] * s[2], s[0] * s[1]);
        let r = s - sigma + gc * lambda;
        Vector4::new(r[0], r[1], r[2], s[0] * s[1] * s[2] - 1.0)
    };
    for _ in 0..VOLUME_MAX_ITERS {
        let r = residual(&s, lambda);
        if r.norm() <= VOLUME_TOL * (1.0 + sigma.norm()) {
            return Ok((s, lambda / (s[0] * s[1] * s[2])));
        }
        let k = kkt_matrix(&s, lambda);
        let step = k
            .lu()
            .solve(&(-r))
            .ok_or_else(|| Error::numerical("singular KKT system in volume projection"))?;
        let mut alpha = 1.0;
        let r0 = r.norm();
        loop {
            let ns = s + step.fixed_rows::<3>(0) * alpha;
            let nl = lambda + step[3] * alpha;
            if residual(&ns, nl).norm() < r0 || alpha < 1e-8 {
                s = ns;
                lambda = nl;
                break;
            }
            alpha *= 0.5;
        }
    }
    Err(Error::numerical(format!(
        "volume projection did not converge for singular values {:?}",
        sigma.as_slice()
    )))
}

fn kkt_matrix(s: &Vector3<f64>, lambda: f64) -> Matrix4<f64> {
    let gc = Vector3::new(s[1] * s[2], s[0] * s[2], s[0] * s[1]);
    let mut k = Matrix4::zeros();
    for i in 0..3 {
        k[(i, i)] = 1.0;
        for j in 0..3 {
            if i != j {
                k[(i, j)] = lambda * s[3 - i - j];
            }
        }
        k[(i, 3)] = gc[i];
        k[(3, i)] = gc[i];
    }
    k
}

/// Flattened `∂D/∂F` for the volume projection.
pub fn volume_jacobian(f: &Matrix3<f64>) -> Result<Matrix9> {
    Ok(volume_jacobian_from_target(&volume_target(f)?))
}

pub fn volume_jacobian_from_target(t: &VolumeTarget) -> Matrix9 {
    let s = t.s;
    let sigma = t.svd.sigma;
    // Differentiate the KKT conditions in σ. The constraint multiplier here
    // is relative to c(s) = s₁s₂s₃ − 1, so it equals μ on the constraint.
    let k = kkt_matrix(&s, t.multiplier * s.iter().product::<f64>());
    let ds = match k.try_inverse() {
        Some(kinv) => Matrix3::from_fn(|i, j| kinv[(i, j)]),
        None => Matrix3::zeros(),
    };
    let floor = 1e-6 * sigma.abs().max().max(1e-300);
    let clamp = |d: f64| if d.abs() < floor { floor.copysign(d) } else { d };
    isotropic_jacobian(&t.svd, &ds, |i, j| {
        // (s_i − s_j)/(σ_i − σ_j) rewritten through the shared quadratic so it
        // stays finite when σ_i = σ_j.
        let sym = s[j] / clamp(s[i] + s[j] - sigma[i]);
        let skew = (s[i] + s[j]) / clamp(sigma[i] + sigma[j]);
        (sym, skew)
    })
}

/// Radial projection of `Fm` onto the sphere of radius `r`.
pub fn project_muscle(f: &Matrix3<f64>, fiber: &Vector3<f64>, r: f64) -> Vector3<f64> {
    let a = f * fiber;
    let len = a.norm();
    if len > 0.0 {
        a * (r / len)
    } else {
        fiber * r
    }
}

/// `∂p/∂a` for `p = r a/‖a‖`, `a = Fm`. Zero at `a = 0`.
pub fn muscle_jacobian_stretch(a: &Vector3<f64>, r: f64) -> Matrix3<f64> {
    let len = a.norm();
    if len == 0.0 {
        return Matrix3::zeros();
    }
    let n = a / len;
    (Matrix3::identity() - n * n.transpose()) * (r / len)
}

/// `∂a/∂F` as a 3×9 selector with entries `m_j` at `(i, 3i + j)`.
pub fn fiber_selector(fiber: &Vector3<f64>) -> Matrix3x9 {
    let mut s = Matrix3x9::zeros();
    for i in 0..3 {
        for j in 0..3 {
            s[(i, 3 * i + j)] = fiber[j];
        }
    }
    s
}

/// Flattened `∂p/∂F` (3×9).
pub fn muscle_jacobian(f: &Matrix3<f64>, fiber: &Vector3<f64>, r: f64) -> Matrix3x9 {
    muscle_jacobian_stretch(&(f * fiber), r) * fiber_selector(fiber)
}

pub fn project_soft_collision(x: &Vector3<f64>, plane: &Plane) -> Vector3<f64> {
    let phi = plane.signed_distance(x);
    if phi < 0.0 {
        x - plane.normal * phi
    } else {
        *x
    }
}

pub fn soft_collision_jacobian(x: &Vector3<f64>, plane: &Plane) -> Matrix3<f64> {
    if plane.signed_distance(x) < 0.0 {
        Matrix3::identity() - plane.normal * plane.normal.transpose()
    } else {
        Matrix3::identity()
    }
}

pub fn soft_collision_energy(x: &Vector3<f64>, plane: &Plane, weight: f64) -> f64 {
    0.5 * weight * (x - project_soft_collision(x, plane)).norm_squared()
}

pub fn flatten(m: &Matrix3<f64>) -> SMatrix<f64, 9, 1> {
    SMatrix::<f64, 9, 1>::from_fn(|k, _| m[(k / 3, k % 3)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Rotation3, Unit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        Rotation3::from_axis_angle(&Unit::new_normalize(axis), rng.random_range(-3.0..3.0)).into_inner()
    }

    fn random_f(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Matrix3<f64> {
        let s = Vector3::new(rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi));
        random_rotation(rng) * Matrix3::from_diagonal(&s) * random_rotation(rng)
    }

    fn fd_jacobian(f: &Matrix3<f64>, eps: f64, map: impl Fn(&Matrix3<f64>) -> Matrix3<f64>) -> Matrix9 {
        let mut jac = Matrix9::zeros();
        for k in 0..9 {
            let mut d = Matrix3::zeros();
            d[(k / 3, k % 3)] = eps;
            let col = flatten(&((map(&(f + d)) - map(&(f - d))) / (2.0 * eps)));
            jac.set_column(k, &col);
        }
        jac
    }

    #[test]
    fn lame_examples() {
        let (wc, wv) = lame_weights(MaterialParams::new(1e6, 0.4)).unwrap();
        assert_relative_eq!(wc, 2.0 * 1e6 / 2.8, max_relative = 1e-14);
        assert_relative_eq!(wv, 0.4e6 / (1.4 * 0.2), max_relative = 1e-14);
        assert_relative_eq!(wc, 7.1429e5, max_relative = 1e-4);
        assert_relative_eq!(wv, 1.4286e6, max_relative = 1e-4);
        assert_eq!(lame_weights(MaterialParams::new(1.0, 0.0)).unwrap(), (1.0, 0.0));
        let (wc2, wv2) = lame_weights(MaterialParams::new(2e6, 0.4)).unwrap();
        assert_eq!((wc2, wv2), (2.0 * wc, 2.0 * wv));
        assert!(lame_weights(MaterialParams::new(1e6, 0.4995)).is_err());
        assert!(lame_weights(MaterialParams::new(1e6, -1.0)).is_err());
        assert!(lame_weights(MaterialParams::new(0.0, 0.3)).is_err());
    }

    #[test]
    fn lame_jacobian_matches_differences() {
        let p = MaterialParams::new(3e5, 0.33);
        let jac = lame_weight_jacobian(p).unwrap();
        for (c, h) in [(0usize, 1.0), (1, 1e-6)] {
            let mut a = p;
            let mut b = p;
            if c == 0 {
                a.youngs_modulus += h;
                b.youngs_modulus -= h;
            } else {
                a.poissons_ratio += h;
                b.poissons_ratio -= h;
            }
            let (wa, va) = lame_weights(a).unwrap();
            let (wb, vb) = lame_weights(b).unwrap();
            assert_relative_eq!(jac[0][c], (wa - wb) / (2.0 * h), max_relative = 1e-6);
            assert_relative_eq!(jac[1][c], (va - vb) / (2.0 * h), max_relative = 1e-6);
        }
    }

    #[test]
    fn signed_svd_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let mut f = random_f(&mut rng, 0.2, 2.0);
            if rng.random_bool(0.3) {
                f.column_mut(0).neg_mut();
            }
            let s = signed_svd(&f);
            assert!((s.u * Matrix3::from_diagonal(&s.sigma) * s.v.transpose() - f).abs().max() < 1e-12);
            assert_relative_eq!(s.u.determinant(), 1.0, epsilon = 1e-12);
            assert_relative_eq!(s.v.determinant(), 1.0, epsilon = 1e-12);
            assert!(s.sigma[0] >= s.sigma[1] && s.sigma[1] >= s.sigma[2].abs());
            assert_eq!(s.sigma[2] < 0.0, f.determinant() < 0.0);
        }
    }

    #[test]
    fn corotated_examples() {
        assert!((project_corotated(&Matrix3::identity()) - Matrix3::identity()).abs().max() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_rotation(&mut rng);
        assert!((project_corotated(&q) - q).abs().max() < 1e-12);
        let d = Matrix3::from_diagonal(&Vector3::new(2.0, 0.5, 1.0));
        assert!((project_corotated(&d) - Matrix3::identity()).abs().max() < 1e-14);
        // Reflections are not rotations: the result keeps det = +1.
        let r = project_corotated(&Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -0.5)));
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn corotated_jacobian_at_identity() {
        let jac = corotated_jacobian(&Matrix3::identity());
        let skew = Matrix3::new(0.0, 0.3, -0.1, -0.3, 0.0, 0.7, 0.1, -0.7, 0.0);
        let sym = Matrix3::new(1.0, 0.2, 0.4, 0.2, -0.5, 0.3, 0.4, 0.3, 0.9);
        assert!((jac * flatten(&skew) - flatten(&skew)).abs().max() < 1e-12);
        assert!((jac * flatten(&sym)).abs().max() < 1e-12);
    }

    #[test]
    fn corotated_jacobian_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let f = random_f(&mut rng, 0.5, 2.0);
            let jac = corotated_jacobian(&f);
            let fd = fd_jacobian(&f, 1e-6, project_corotated);
            assert!((jac - fd).norm() <= 1e-4 * jac.norm().max(1e-12), "{}", (jac - fd).norm());
            assert!((jac - jac.transpose()).abs().max() < 1e-10);
        }
    }

    #[test]
    fn volume_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut f = random_f(&mut rng, 0.5, 2.0);
        f /= f.determinant().cbrt();
        assert!((project_volume(&f).unwrap() - f).abs().max() < 1e-10);

        let d = project_volume(&(Matrix3::identity() * 1.5)).unwrap();
        assert!((d - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn volume_of_doubled_identity_is_constrained_minimum() {
        // Independent oracle: parametrize unit-product triples by two logs and
        // grid-search the distance to (2, 2, 2).
        let target = Vector3::new(2.0, 2.0, 2.0);
        let mut best = (f64::INFINITY, Vector3::zeros());
        let n = 600;
        for a in 0..=n {
            for b in 0..=n {
                let p = -1.5 + 3.0 * a as f64 / n as f64;
                let q = -1.5 + 3.0 * b as f64 / n as f64;
                let s = Vector3::new(p.exp(), q.exp(), (-p - q).exp());
                let dist = (s - target).norm_squared();
                if dist < best.0 {
                    best = (dist, s);
                }
            }
        }
        let (s, _) = volume_singular_values(&target).unwrap();
        let dist = (s - target).norm_squared();
        assert!(dist <= best.0 + 1e-12);
        let mut sorted = s;
        sorted.as_mut_slice().sort_by(f64::total_cmp);
        let mut grid = best.1;
        grid.as_mut_slice().sort_by(f64::total_cmp);
        assert!((sorted - grid).abs().max() < 1e-2);

        // Closed form: two values solve a + 1/a² = 2, i.e. the golden ratio.
        let golden = 0.5 * (1.0 + 5f64.sqrt());
        assert!((s - Vector3::new(golden, golden, 1.0 / (golden * golden))).abs().max() < 1e-10);
        // The symmetric stationary point (1,1,1) is strictly worse.
        assert!(dist < (Vector3::repeat(1.0) - target).norm_squared() - 0.05);
        let d = project_volume(&(Matrix3::identity() * 2.0)).unwrap();
        assert_relative_eq!(d.determinant(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn volume_projection_beats_random_unit_product_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let sigma = Vector3::new(rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
            let (s, _) = volume_singular_values(&sigma).unwrap();
            assert_relative_eq!(s.iter().product::<f64>(), 1.0, epsilon = 1e-8);
            let d = (s - sigma).norm();
            for _ in 0..1000 {
                let p: f64 = rng.random_range(-1.5..1.5);
                let q: f64 = rng.random_range(-1.5..1.5);
                let sample = Vector3::new(p.exp(), q.exp(), (-p - q).exp());
                assert!(d <= (sample - sigma).norm() + 1e-12);
            }
        }
    }

    #[test]
    fn volume_projection_under_large_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..50 {
            let sigma = Vector3::new(rng.random_range(1.5..3.0), rng.random_range(1.5..3.0), rng.random_range(1.5..3.0));
            let mut sorted = sigma;
            sorted.as_mut_slice().sort_by(|a: &f64, b: &f64| b.total_cmp(a));
            let (s, _) = volume_singular_values(&sorted).unwrap();
            assert_relative_eq!(s.iter().product::<f64>(), 1.0, epsilon = 1e-8);
            let d = (s - sorted).norm();
            for _ in 0..2000 {
                let p: f64 = rng.random_range(-2.5..2.5);
                let q: f64 = rng.random_range(-2.5..2.5);
                let sample = Vector3::new(p.exp(), q.exp(), (-p - q).exp());
                assert!(d <= (sample - sorted).norm() + 1e-12);
            }
        }
    }

    #[test]
    fn volume_kkt_fallback_satisfies_constraint() {
        // Very anisotropic stretch: the principal branch cannot reach det = 1.
        let sigma = Vector3::new(10.0, 10.0, 0.1);
        assert!(volume_near_branch(&sigma).is_none());
        let (s, _) = volume_singular_values(&sigma).unwrap();
        assert_relative_eq!(s.iter().product::<f64>(), 1.0, epsilon = 1e-10);
        let gc = Vector3::new(s[1] * s[2], s[0] * s[2], s[0] * s[1]);
        // Stationarity: s − σ is parallel to ∇c.
        assert!((s - sigma).normalize().cross(&gc.normalize()).norm() < 1e-8);
    }

    #[test]
    fn volume_jacobian_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..60 {
            let mut f = random_f(&mut rng, 0.6, 1.6);
            if trial < 10 {
                f /= f.determinant().cbrt();
            }
            let jac = volume_jacobian(&f).unwrap();
            let fd = fd_jacobian(&f, 1e-6, |g| project_volume(g).unwrap());
            assert!((jac - fd).norm() <= 1e-4 * jac.norm().max(1e-12), "trial {trial}: {}", (jac - fd).norm());
            assert!((jac - jac.transpose()).abs().max() < 1e-9);
        }
        // Repeated singular values: the rewritten ratio stays finite.
        let jac = volume_jacobian(&(Matrix3::identity() * 1.3)).unwrap();
        let fd = fd_jacobian(&(Matrix3::identity() * 1.3), 1e-6, |g| project_volume(g).unwrap());
        assert!((jac - fd).norm() <= 1e-4 * jac.norm());
    }

    #[test]
    fn muscle_examples() {
        let m = Vector3::x();
        let f = Matrix3::identity() * 0.7;
        assert!((project_muscle(&f, &m, 0.7) - f * m).norm() < 1e-15);
        assert_eq!(project_muscle(&Matrix3::identity(), &m, 0.5), Vector3::new(0.5, 0.0, 0.0));
        assert_eq!(project_muscle(&Matrix3::zeros(), &m, 0.5), Vector3::new(0.5, 0.0, 0.0));
        assert_eq!(muscle_jacobian(&Matrix3::zeros(), &m, 0.5), Matrix3x9::zeros());
    }

    #[test]
    fn muscle_projection_beats_sphere_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let f = random_f(&mut rng, 0.5, 2.0);
            let m = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            let r = rng.random_range(0.3..1.5);
            let a = f * m;
            let d = (a - project_muscle(&f, &m, r)).norm();
            for _ in 0..10_000 {
                let q = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                if q.norm() < 1e-6 {
                    continue;
                }
                assert!(d <= (a - q.normalize() * r).norm() + 1e-12);
            }
        }
    }

    #[test]
    fn muscle_jacobian_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..30 {
            let f = random_f(&mut rng, 0.5, 2.0);
            let m = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            let r = rng.random_range(0.3..1.5);
            let jac = muscle_jacobian(&f, &m, r);
            for k in 0..9 {
                let mut d = Matrix3::zeros();
                d[(k / 3, k % 3)] = 1e-6;
                let fd = (project_muscle(&(f + d), &m, r) - project_muscle(&(f - d), &m, r)) / 2e-6;
                assert!((jac.column(k) - fd).norm() <= 1e-6 * (1.0 + fd.norm()));
            }
        }
    }

    #[test]
    fn soft_collision_examples() {
        let ground = Plane::ground(0.0);
        let above = Vector3::new(0.3, 0.2, 0.1);
        assert_eq!(project_soft_collision(&above, &ground), above);
        assert_eq!(soft_collision_energy(&above, &ground, 10.0), 0.0);
        assert_eq!(soft_collision_jacobian(&above, &ground), Matrix3::identity());
        let below = Vector3::new(0.0, 0.0, -0.2);
        assert_eq!(project_soft_collision(&below, &ground), Vector3::zeros());
        let tilted = Plane::new(Vector3::new(1.0, 1.0, 0.0).normalize(), 0.1).unwrap();
        let x = Vector3::new(-0.3, 0.05, 2.0);
        let phi = tilted.signed_distance(&x);
        assert!(phi < 0.0);
        assert_relative_eq!(soft_collision_energy(&x, &tilted, 7.0), 3.5 * phi * phi, max_relative = 1e-12);
        assert!(tilted.signed_distance(&project_soft_collision(&x, &tilted)).abs() < 1e-15);
        assert!(Plane::new(Vector3::new(0.0, 0.0, 2.0), 0.0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn projections_are_fixed_points(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_f(&mut rng, 0.4, 2.5);
            let r = project_corotated(&f);
            proptest::prop_assert!((project_corotated(&r) - r).abs().max() < 1e-10);
            let d = project_volume(&f).unwrap();
            proptest::prop_assert!((d.determinant() - 1.0).abs() < 1e-8);
            proptest::prop_assert!((project_volume(&d).unwrap() - d).abs().max() < 1e-10);
            let m = Vector3::new(rng.random_range(-1.0..1.0), 0.3, rng.random_range(-1.0..1.0)).normalize();
            let p = project_muscle(&f, &m, 0.8);
            proptest::prop_assert!((p.norm() - 0.8).abs() < 1e-12);
        }

        #[test]
        fn rotations_are_on_both_manifolds(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_rotation(&mut rng);
            proptest::prop_assert!((project_corotated(&q) - q).abs().max() < 1e-10);
            proptest::prop_assert!((project_volume(&q).unwrap() - q).abs().max() < 1e-10);
        }
    }
}
