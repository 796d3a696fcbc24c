//! Small fixed-size linear algebra: 3-vectors and affine 4x4 transforms.

pub type V3 = [f64; 3];

pub fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: V3) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: V3, b: V3) -> f64 {
    norm(sub(a, b))
}

/// Normalize; returns the zero vector unchanged if |a| < 1e-300.
pub fn normalize(a: V3) -> V3 {
    let n = norm(a);
    if n < 1e-300 {
        a
    } else {
        scale(a, 1.0 / n)
    }
}

pub fn lerp(a: V3, b: V3, t: f64) -> V3 {
    add(scale(a, 1.0 - t), scale(b, t))
}

/// Row-major 4x4 affine transform (last row assumed [0,0,0,1] throughout).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine(pub [f64; 16]);

impl Affine {
    pub const IDENTITY: Affine = Affine([
        1.0, 0.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    ]);

    pub fn translation(t: V3) -> Affine {
        let mut m = Affine::IDENTITY;
        m.0[3] = t[0];
        m.0[7] = t[1];
        m.0[11] = t[2];
        m
    }

    /// Rotation about a (not necessarily unit) axis by `angle` radians.
    /// A near-zero axis yields the identity.
    pub fn rotation(axis: V3, angle: f64) -> Affine {
        let n = norm(axis);
        if n < 1e-12 {
            return Affine::IDENTITY;
        }
        let [x, y, z] = scale(axis, 1.0 / n);
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        Affine([
            t * x * x + c,
            t * x * y - s * z,
            t * x * z + s * y,
            0.0,
            t * x * y + s * z,
            t * y * y + c,
            t * y * z - s * x,
            0.0,
            t * x * z - s * y,
            t * y * z + s * x,
            t * z * z + c,
            0.0,
            0.0,
            0.0,
            0.0,
            1.0,
        ])
    }

    pub fn mul(&self, rhs: &Affine) -> Affine {
        let a = &self.0;
        let b = &rhs.0;
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a[r * 4 + k] * b[k * 4 + c];
                }
                out[r * 4 + c] = acc;
            }
        }
        Affine(out)
    }

    pub fn transform_point(&self, p: V3) -> V3 {
        let m = &self.0;
        [
            m[0] * p[0] + m[1] * p[1] + m[2] * p[2] + m[3],
            m[4] * p[0] + m[5] * p[1] + m[6] * p[2] + m[7],
            m[8] * p[0] + m[9] * p[1] + m[10] * p[2] + m[11],
        ]
    }

    /// Apply only the linear part (for directions).
    pub fn transform_dir(&self, d: V3) -> V3 {
        let m = &self.0;
        [
            m[0] * d[0] + m[1] * d[1] + m[2] * d[2],
            m[4] * d[0] + m[5] * d[1] + m[6] * d[2],
            m[8] * d[0] + m[9] * d[1] + m[10] * d[2],
        ]
    }

    /// Determinant of the linear (upper-left 3x3) part.
    pub fn det3(&self) -> f64 {
        let m = &self.0;
        m[0] * (m[5] * m[10] - m[6] * m[9]) - m[1] * (m[4] * m[10] - m[6] * m[8])
            + m[2] * (m[4] * m[9] - m[5] * m[8])
    }

    /// Invert an affine transform via the adjugate of its linear part.
    /// Returns `None` when the linear part is singular.
    pub fn inverse(&self) -> Option<Affine> {
        let m = &self.0;
        let det = self.det3();
        let scale3 = self.linear_norm();
        if det.abs() < 1e-12 * scale3.powi(3).max(1e-30) {
            return None;
        }
        let inv_det = 1.0 / det;
        let r = [
            (m[5] * m[10] - m[6] * m[9]) * inv_det,
            (m[2] * m[9] - m[1] * m[10]) * inv_det,
            (m[1] * m[6] - m[2] * m[5]) * inv_det,
            (m[6] * m[8] - m[4] * m[10]) * inv_det,
            (m[0] * m[10] - m[2] * m[8]) * inv_det,
            (m[2] * m[4] - m[0] * m[6]) * inv_det,
            (m[4] * m[9] - m[5] * m[8]) * inv_det,
            (m[1] * m[8] - m[0] * m[9]) * inv_det,
            (m[0] * m[5] - m[1] * m[4]) * inv_det,
        ];
        let t = [m[3], m[7], m[11]];
        let nt = [
            -(r[0] * t[0] + r[1] * t[1] + r[2] * t[2]),
            -(r[3] * t[0] + r[4] * t[1] + r[5] * t[2]),
            -(r[6] * t[0] + r[7] * t[1] + r[8] * t[2]),
        ];
        Some(Affine([
            r[0], r[1], r[2], nt[0], //
            r[3], r[4], r[5], nt[1], //
            r[6], r[7], r[8], nt[2], //
            0.0, 0.0, 0.0, 1.0,
        ]))
    }

    /// Frobenius norm of the linear part; a scale estimate for tolerances.
    pub fn linear_norm(&self) -> f64 {
        let m = &self.0;
        let mut s = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                s += m[r * 4 + c] * m[r * 4 + c];
            }
        }
        (s / 3.0).sqrt()
    }

    /// Component-wise weighted sum `sum_i w_i * m_i` (blend skinning).
    pub fn blend(terms: &[(f64, Affine)]) -> Affine {
        let mut out = [0.0; 16];
        for (w, m) in terms {
            for i in 0..16 {
                out[i] += w * m.0[i];
            }
        }
        Affine(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rotation_preserves_length_and_composes() {
        let r = Affine::rotation([0.0, 1.0, 0.0], std::f64::consts::FRAC_PI_2);
        let p = r.transform_point([1.0, 0.0, 0.0]);
        assert_relative_eq!(p[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(p[2], -1.0, epsilon = 1e-12);
        let rr = r.mul(&r);
        let q = rr.transform_point([1.0, 0.0, 0.0]);
        assert_relative_eq!(q[0], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn inverse_round_trips() {
        let m = Affine::translation([0.3, -1.0, 2.0])
            .mul(&Affine::rotation([1.0, 2.0, 0.5], 0.7))
            .mul(&Affine::translation([-0.2, 0.4, 0.0]));
        let inv = m.inverse().unwrap();
        let id = m.mul(&inv);
        for (i, want) in Affine::IDENTITY.0.iter().enumerate() {
            assert_relative_eq!(id.0[i], *want, epsilon = 1e-12);
        }
    }

    #[test]
    fn singular_matrix_has_no_inverse() {
        let mut m = Affine::IDENTITY;
        m.0[0] = 0.0;
        assert!(m.inverse().is_none());
    }
}
