//! Fixed-size vector and matrix helpers over [`Real`].

use crate::scalar::Real;

pub type Vec2<T> = [T; 2];
pub type Vec3<T> = [T; 3];
pub type Vec4<T> = [T; 4];
pub type Mat2<T> = [[T; 2]; 2];
pub type Mat3<T> = [[T; 3]; 3];
pub type Mat4<T> = [[T; 4]; 4];

#[inline]
pub fn zero3<T: Real>() -> Vec3<T> {
    [T::zero(); 3]
}

#[inline]
pub fn add3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale3<T: Real>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot3<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm_sq<T: Real>(a: &[T]) -> T {
    a.iter().fold(T::zero(), |acc, &x| acc + x * x)
}

#[inline]
pub fn dist_sq<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

pub fn mat3_vec<T: Real>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    let mut out = zero3();
    for i in 0..3 {
        out[i] = m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2];
    }
    out
}

pub fn mat3_t_vec<T: Real>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    let mut out = zero3();
    for i in 0..3 {
        out[i] = m[0][i] * v[0] + m[1][i] * v[1] + m[2][i] * v[2];
    }
    out
}

pub fn matmul<T: Real, const N: usize, const K: usize, const M: usize>(
    a: &[[T; K]; N],
    b: &[[T; M]; K],
) -> [[T; M]; N] {
    let mut out = [[T::zero(); M]; N];
    for i in 0..N {
        for j in 0..M {
            let mut acc = T::zero();
            for k in 0..K {
                acc += a[i][k] * b[k][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn transpose<T: Real, const N: usize, const M: usize>(a: &[[T; M]; N]) -> [[T; N]; M] {
    let mut out = [[T::zero(); N]; M];
    for i in 0..N {
        for j in 0..M {
            out[j][i] = a[i][j];
        }
    }
    out
}

pub fn mat_add<T: Real, const N: usize, const M: usize>(
    a: &[[T; M]; N],
    b: &[[T; M]; N],
) -> [[T; M]; N] {
    let mut out = *a;
    for i in 0..N {
        for j in 0..M {
            out[i][j] += b[i][j];
        }
    }
    out
}

/// General 2×2 inverse; `None` when the determinant is not strictly positive
/// or not finite (covariances must be positive definite).
pub fn inverse2_spd<T: Real>(m: &Mat2<T>) -> Option<Mat2<T>> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if !(det > T::zero()) || !det.is_finite() {
        return None;
    }
    let inv = T::one() / det;
    Some([
        [m[1][1] * inv, -m[0][1] * inv],
        [-m[1][0] * inv, m[0][0] * inv],
    ])
}

/// Matrix of left multiplication by quaternion `q = (w, x, y, z)` in R⁴.
pub fn left_isoclinic<T: Real>(q: Vec4<T>) -> Mat4<T> {
    let [a, b, c, d] = q;
    [
        [a, -b, -c, -d],
        [b, a, -d, c],
        [c, d, a, -b],
        [d, -c, b, a],
    ]
}

/// Matrix of right multiplication by quaternion `q = (w, x, y, z)` in R⁴.
pub fn right_isoclinic<T: Real>(q: Vec4<T>) -> Mat4<T> {
    let [p, q1, r, s] = q;
    [
        [p, -q1, -r, -s],
        [q1, p, s, -r],
        [r, -s, p, q1],
        [s, r, -q1, p],
    ]
}

/// Pulls a gradient w.r.t. the entries of `left_isoclinic(q)` back to `q`.
pub fn left_isoclinic_grad<T: Real>(g: &Mat4<T>) -> Vec4<T> {
    [
        g[0][0] + g[1][1] + g[2][2] + g[3][3],
        -g[0][1] + g[1][0] - g[2][3] + g[3][2],
        -g[0][2] + g[1][3] + g[2][0] - g[3][1],
        -g[0][3] - g[1][2] + g[2][1] + g[3][0],
    ]
}

/// Pulls a gradient w.r.t. the entries of `right_isoclinic(q)` back to `q`.
pub fn right_isoclinic_grad<T: Real>(g: &Mat4<T>) -> Vec4<T> {
    [
        g[0][0] + g[1][1] + g[2][2] + g[3][3],
        -g[0][1] + g[1][0] + g[2][3] - g[3][2],
        -g[0][2] - g[1][3] + g[2][0] + g[3][1],
        -g[0][3] + g[1][2] - g[2][1] + g[3][0],
    ]
}

/// Normalizes `q`, returning `(q / |q|, |q|)`.
pub fn normalize4<T: Real>(q: Vec4<T>) -> (Vec4<T>, T) {
    let n = norm_sq(&q).sqrt();
    let inv = T::one() / n;
    ([q[0] * inv, q[1] * inv, q[2] * inv, q[3] * inv], n)
}

/// Gradient through `q ↦ q / |q|`.
pub fn normalize4_grad<T: Real>(qn: Vec4<T>, norm: T, g: Vec4<T>) -> Vec4<T> {
    let proj = qn[0] * g[0] + qn[1] * g[1] + qn[2] * g[2] + qn[3] * g[3];
    let inv = T::one() / norm;
    [
        (g[0] - qn[0] * proj) * inv,
        (g[1] - qn[1] * proj) * inv,
        (g[2] - qn[2] * proj) * inv,
        (g[3] - qn[3] * proj) * inv,
    ]
}

/// Symmetric 2×2 eigenvalues, largest first.
pub fn eig_sym2<T: Real>(m: &Mat2<T>) -> (T, T) {
    let a = m[0][0];
    let c = m[1][1];
    let b = (m[0][1] + m[1][0]) * T::lit(0.5);
    let half_tr = (a + c) * T::lit(0.5);
    let disc = (((a - c) * T::lit(0.5)).powi(2) + b * b).sqrt();
    (half_tr + disc, half_tr - disc)
}
