//! Closed-form 2x2 matrix helpers. `m[r][c]` is row `r`, column `c`.

pub type Mat2 = [[f64; 2]; 2];

pub const IDENTITY: Mat2 = [[1.0, 0.0], [0.0, 1.0]];
pub const ZERO: Mat2 = [[0.0; 2]; 2];

pub fn det(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// Inverse; the caller guarantees a nonzero determinant.
pub fn inverse(m: &Mat2) -> Mat2 {
    let d = det(m);
    [[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]]
}

pub fn mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut c = ZERO;
    for r in 0..2 {
        for col in 0..2 {
            c[r][col] = a[r][0] * b[0][col] + a[r][1] * b[1][col];
        }
    }
    c
}

pub fn transpose(m: &Mat2) -> Mat2 {
    [[m[0][0], m[1][0]], [m[0][1], m[1][1]]]
}

pub fn add(a: &Mat2, b: &Mat2) -> Mat2 {
    [[a[0][0] + b[0][0], a[0][1] + b[0][1]], [a[1][0] + b[1][0], a[1][1] + b[1][1]]]
}

pub fn scale(a: &Mat2, s: f64) -> Mat2 {
    [[a[0][0] * s, a[0][1] * s], [a[1][0] * s, a[1][1] * s]]
}

pub fn trace(m: &Mat2) -> f64 {
    m[0][0] + m[1][1]
}

pub fn apply(m: &Mat2, v: &[f64; 2]) -> [f64; 2] {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

/// `a^T M b`.
pub fn bilinear(a: &[f64; 2], m: &Mat2, b: &[f64; 2]) -> f64 {
    let mb = apply(m, b);
    a[0] * mb[0] + a[1] * mb[1]
}

/// Largest singular value.
pub fn spectral_norm(m: &Mat2) -> f64 {
    let mtm = mul(&transpose(m), m);
    let t = trace(&mtm);
    let d = det(&mtm);
    let disc = (0.25 * t * t - d).max(0.0).sqrt();
    (0.5 * t + disc).sqrt()
}

pub fn is_spd(m: &Mat2) -> bool {
    (m[0][1] - m[1][0]).abs() <= 1e-14 * (m[0][1].abs() + 1.0) && m[0][0] > 0.0 && det(m) > 0.0
}

/// Symmetric tensor with eigenvalue `along` on direction `(sin a, cos a)` and
/// `across` on the orthogonal direction `(cos a, -sin a)`.
pub fn anisotropic_tensor(along: f64, across: f64, angle: f64) -> Mat2 {
    let (s, c) = angle.sin_cos();
    let off = (along - across) * s * c;
    [[along * s * s + across * c * c, off], [off, along * c * c + across * s * s]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_round_trip() {
        let m = [[1.3, -0.4], [0.25, 0.9]];
        let p = mul(&m, &inverse(&m));
        for r in 0..2 {
            for c in 0..2 {
                assert!((p[r][c] - IDENTITY[r][c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn anisotropic_eigenpairs() {
        let t = anisotropic_tensor(2.0, 0.5, std::f64::consts::FRAC_PI_4);
        let (s, c) = std::f64::consts::FRAC_PI_4.sin_cos();
        let v = apply(&t, &[s, c]);
        assert!((v[0] - 2.0 * s).abs() < 1e-14 && (v[1] - 2.0 * c).abs() < 1e-14);
        let w = apply(&t, &[c, -s]);
        assert!((w[0] - 0.5 * c).abs() < 1e-14 && (w[1] + 0.5 * s).abs() < 1e-14);
        assert!(is_spd(&t));
        assert!((spectral_norm(&t) - 2.0).abs() < 1e-14);
    }
}
