//! Axis-angle, rotation-matrix and 6D rotation conversions.
//!
//! All kernels are generic over [`Real`] so the autodiff tape can obtain exact
//! Jacobians by evaluating them on dual numbers. Matrices are stored
//! row-major as `[S; 9]`; the 6D layout is column-major: first column, then
//! second column.

use nalgebra::{Matrix3, Vector3};

use crate::dual::{Dual, Real};
use crate::error::{Error, Result};

const TAYLOR_EPS: f64 = 1e-8;
const PI_BRANCH_SIN: f64 = 1e-4;
const DEGENERATE_NORM: f64 = 1e-8;
const ORTHO_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAngle(pub Vector3<f64>);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotMat(pub Matrix3<f64>);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot6D(pub [f64; 6]);

impl AxisAngle {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vector3::new(x, y, z))
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }
}

impl RotMat {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn to_array(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    pub fn from_array(a: &[f64; 9]) -> Self {
        Self(Matrix3::from_row_slice(a))
    }

    /// Frobenius norm of `mᵀm − I`.
    pub fn orthonormality_residual(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).norm()
    }
}

/// Rodrigues formula on a generic scalar.
pub fn axis_angle_to_mat_generic<S: Real>(v: [S; 3]) -> [S; 9] {
    let [x, y, z] = v;
    let theta2 = x * x + y * y + z * z;
    let (a, b) = if theta2.re() < TAYLOR_EPS * TAYLOR_EPS {
        // sinθ/θ ≈ 1 − θ²/6, (1 − cosθ)/θ² ≈ 1/2 − θ²/24
        (
            S::cst(1.0) - theta2.scale(1.0 / 6.0),
            S::cst(0.5) - theta2.scale(1.0 / 24.0),
        )
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (S::cst(1.0) - theta.cos()) / theta2)
    };
    let one = S::cst(1.0);
    // R = I + a K + b K², K = skew(v)
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, xz, yz) = (x * y, x * z, y * z);
    [
        one - b * (yy + zz),
        b * xy - a * z,
        b * xz + a * y,
        b * xy + a * z,
        one - b * (xx + zz),
        b * yz - a * x,
        b * xz - a * y,
        b * yz + a * x,
        one - b * (xx + yy),
    ]
}

/// Logarithm map on a generic scalar. Assumes a proper rotation.
pub fn mat_to_axis_angle_generic<S: Real>(m: [S; 9]) -> [S; 3] {
    let w = [m[7] - m[5], m[2] - m[6], m[3] - m[1]];
    let trace = m[0] + m[4] + m[8];
    let cos_t = (trace - S::cst(1.0)).scale(0.5);
    let w2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let sin_t_re = 0.5 * w2.re().sqrt();

    if sin_t_re < PI_BRANCH_SIN && cos_t.re() < 0.0 {
        // Near π: axis from the symmetric part, (R + Rᵀ)/2 − cosθ·I = (1 − cosθ) a aᵀ.
        let diag = [m[0] - cos_t, m[4] - cos_t, m[8] - cos_t];
        let k = (0..3)
            .max_by(|&i, &j| diag[i].re().total_cmp(&diag[j].re()))
            .unwrap_or(0);
        let sym = |r: usize, c: usize| (m[r * 3 + c] + m[c * 3 + r]).scale(0.5);
        let mut col = [S::cst(0.0); 3];
        for (r, slot) in col.iter_mut().enumerate() {
            *slot = if r == k { diag[k] } else { sym(r, k) };
        }
        let one_minus_cos = S::cst(1.0) - cos_t;
        let denom = (diag[k] * one_minus_cos).sqrt();
        let mut axis = [col[0] / denom, col[1] / denom, col[2] / denom];
        let dot = axis[0].re() * w[0].re() + axis[1].re() * w[1].re() + axis[2].re() * w[2].re();
        if dot < 0.0 {
            axis = [-axis[0], -axis[1], -axis[2]];
        }
        let sin_t = w2.sqrt().scale(0.5);
        let theta = sin_t.atan2(cos_t);
        return [theta * axis[0], theta * axis[1], theta * axis[2]];
    }

    if sin_t_re < TAYLOR_EPS {
        // θ/(2 sinθ) ≈ 1/2 + θ²/12 with θ² ≈ |w|²/4
        let f = S::cst(0.5) + w2.scale(1.0 / 48.0);
        return [w[0] * f, w[1] * f, w[2] * f];
    }

    let norm_w = w2.sqrt();
    let theta = norm_w.scale(0.5).atan2(cos_t);
    let f = theta / norm_w;
    [w[0] * f, w[1] * f, w[2] * f]
}

/// Gram-Schmidt decoding of the column-major 6D representation.
pub fn sixd_to_mat_generic<S: Real>(r: [S; 6]) -> Result<[S; 9]> {
    let c1 = [r[0], r[1], r[2]];
    let c2 = [r[3], r[4], r[5]];
    let n1 = (c1[0] * c1[0] + c1[1] * c1[1] + c1[2] * c1[2]).sqrt();
    if n1.re() < DEGENERATE_NORM {
        return Err(Error::DegenerateRotation("first column has zero norm"));
    }
    let b1 = [c1[0] / n1, c1[1] / n1, c1[2] / n1];
    let proj = b1[0] * c2[0] + b1[1] * c2[1] + b1[2] * c2[2];
    let u = [c2[0] - proj * b1[0], c2[1] - proj * b1[1], c2[2] - proj * b1[2]];
    let nu = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    if nu.re() < DEGENERATE_NORM {
        return Err(Error::DegenerateRotation("second column parallel to first"));
    }
    let b2 = [u[0] / nu, u[1] / nu, u[2] / nu];
    let b3 = [
        b1[1] * b2[2] - b1[2] * b2[1],
        b1[2] * b2[0] - b1[0] * b2[2],
        b1[0] * b2[1] - b1[1] * b2[0],
    ];
    Ok([
        b1[0], b2[0], b3[0], //
        b1[1], b2[1], b3[1], //
        b1[2], b2[2], b3[2],
    ])
}

pub fn axis_angle_to_matrix(v: &AxisAngle) -> RotMat {
    let m = axis_angle_to_mat_generic([v.0.x, v.0.y, v.0.z]);
    RotMat::from_array(&m)
}

pub fn matrix_to_axis_angle(m: &RotMat) -> Result<AxisAngle> {
    let residual = m.orthonormality_residual();
    if !(residual <= ORTHO_TOL) || m.0.determinant() < 0.0 {
        return Err(Error::NotOrthonormal(residual));
    }
    let v = mat_to_axis_angle_generic(m.to_array());
    Ok(AxisAngle(Vector3::new(v[0], v[1], v[2])))
}

pub fn sixd_to_matrix(r: &Rot6D) -> Result<RotMat> {
    let m = sixd_to_mat_generic(r.0)?;
    Ok(RotMat::from_array(&m))
}

pub fn matrix_to_sixd(m: &RotMat) -> Rot6D {
    let a = &m.0;
    Rot6D([
        a[(0, 0)],
        a[(1, 0)],
        a[(2, 0)],
        a[(0, 1)],
        a[(1, 1)],
        a[(2, 1)],
    ])
}

/// Value and row-major Jacobian `∂out[i]/∂in[j]` of a kernel evaluated on duals.
fn jacobian<const I: usize, const O: usize>(
    input: [f64; I],
    f: impl Fn([Dual<I>; I]) -> Result<[Dual<I>; O]>,
) -> Result<([f64; O], [[f64; I]; O])> {
    let mut x = [Dual::<I>::constant(0.0); I];
    for (i, slot) in x.iter_mut().enumerate() {
        *slot = Dual::variable(input[i], i);
    }
    let out = f(x)?;
    let mut val = [0.0; O];
    let mut jac = [[0.0; I]; O];
    for (o, d) in out.iter().enumerate() {
        val[o] = d.v;
        jac[o] = d.d;
    }
    Ok((val, jac))
}

pub fn axis_angle_to_mat_jacobian(v: [f64; 3]) -> ([f64; 9], [[f64; 3]; 9]) {
    jacobian(v, |x| Ok(axis_angle_to_mat_generic(x))).expect("total function")
}

pub fn mat_to_axis_angle_jacobian(m: [f64; 9]) -> ([f64; 3], [[f64; 9]; 3]) {
    jacobian(m, |x| Ok(mat_to_axis_angle_generic(x))).expect("total function")
}

pub fn sixd_to_mat_jacobian(r: [f64; 6]) -> Result<([f64; 9], [[f64; 6]; 9])> {
    jacobian(r, sixd_to_mat_generic)
}
