//! Small fixed-size geometry types: 3-vectors, Hamilton quaternions
//! (w, x, y, z, body-to-reference), planar SE(2) poses and 3x3 rotations.

use serde::{Deserialize, Serialize};

pub const TAU: f64 = std::f64::consts::TAU;

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % TAU;
    if r <= -std::f64::consts::PI {
        r += TAU;
    } else if r > std::f64::consts::PI {
        r -= TAU;
    }
    r
}

pub type Vec3 = [f64; 3];

pub fn v3_add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn v3_sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn v3_scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn v3_cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn v3_dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn v3_norm(a: Vec3) -> f64 {
    v3_dot(a, a).sqrt()
}

/// Unit quaternion, Hamilton convention, stored (w, x, y, z).
/// Represents the rotation taking body-frame vectors into the reference frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn from_yaw(yaw: f64) -> Quat {
        Quat {
            w: (yaw / 2.0).cos(),
            x: 0.0,
            y: 0.0,
            z: (yaw / 2.0).sin(),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Quat {
        let n = self.norm();
        Quat {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        }
    }

    /// Hamilton product `self ⊗ rhs`.
    pub fn mul(&self, rhs: &Quat) -> Quat {
        let (aw, ax, ay, az) = (self.w, self.x, self.y, self.z);
        let (bw, bx, by, bz) = (rhs.w, rhs.x, rhs.y, rhs.z);
        Quat {
            w: aw * bw - ax * bx - ay * by - az * bz,
            x: aw * bx + ax * bw + ay * bz - az * by,
            y: aw * by - ax * bz + ay * bw + az * bx,
            z: aw * bz + ax * by - ay * bx + az * bw,
        }
    }

    pub fn conj(&self) -> Quat {
        Quat {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Rotate a vector from the body frame into the reference frame.
    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let qv = Quat {
            w: 0.0,
            x: v[0],
            y: v[1],
            z: v[2],
        };
        let r = self.mul(&qv).mul(&self.conj());
        [r.x, r.y, r.z]
    }

    /// Z-axis Euler angle (yaw) of the rotation, ZYX convention.
    pub fn yaw(&self) -> f64 {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z))
    }

    /// Pitch (rotation about Y), used to reject near-gimbal-lock inputs.
    pub fn pitch(&self) -> f64 {
        let s = 2.0 * (self.w * self.y - self.z * self.x);
        s.clamp(-1.0, 1.0).asin()
    }

    pub fn to_matrix(&self) -> Mat3 {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }
}

pub type Mat3 = [[f64; 3]; 3];

pub const MAT3_IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat3_mul_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat3_transpose_mul_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

/// Planar rigid pose: position plus heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Se2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Se2 {
    pub const IDENTITY: Se2 = Se2 {
        x: 0.0,
        y: 0.0,
        yaw: 0.0,
    };

    pub fn new(x: f64, y: f64, yaw: f64) -> Se2 {
        Se2 {
            x,
            y,
            yaw: wrap_angle(yaw),
        }
    }

    /// `self ∘ rhs`: apply `rhs` in the local frame of `self`.
    pub fn compose(&self, rhs: &Se2) -> Se2 {
        let (s, c) = self.yaw.sin_cos();
        Se2 {
            x: self.x + c * rhs.x - s * rhs.y,
            y: self.y + s * rhs.x + c * rhs.y,
            yaw: wrap_angle(self.yaw + rhs.yaw),
        }
    }

    pub fn inverse(&self) -> Se2 {
        let (s, c) = self.yaw.sin_cos();
        Se2 {
            x: -(c * self.x + s * self.y),
            y: -(-s * self.x + c * self.y),
            yaw: wrap_angle(-self.yaw),
        }
    }

    /// Map a point from the local frame into the parent frame.
    pub fn transform(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.x + c * p[0] - s * p[1],
            self.y + s * p[0] + c * p[1],
        ]
    }

    /// Map a point from the parent frame into the local frame.
    pub fn transform_inv(&self, p: [f64; 2]) -> [f64; 2] {
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        let (s, c) = self.yaw.sin_cos();
        [c * dx + s * dy, -s * dx + c * dy]
    }
}

/// Rotate a planar vector by `angle`.
pub fn rot2(angle: f64, v: [f64; 2]) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Weighted rigid alignment of planar point pairs: the rotation angle and
/// translation minimizing `sum w_i ||R p_i + t - q_i||^2` (closed form via
/// the centered cross-covariance). Returns `None` for fewer than two pairs
/// or nonpositive total weight.
pub fn kabsch_2d(pairs: &[([f64; 2], [f64; 2], f64)]) -> Option<(f64, [f64; 2])> {
    if pairs.len() < 2 {
        return None;
    }
    let wsum: f64 = pairs.iter().map(|(_, _, w)| w).sum();
    if wsum <= 0.0 {
        return None;
    }
    let mut pc = [0.0; 2];
    let mut qc = [0.0; 2];
    for (p, q, w) in pairs {
        pc[0] += w * p[0];
        pc[1] += w * p[1];
        qc[0] += w * q[0];
        qc[1] += w * q[1];
    }
    for v in pc.iter_mut().chain(qc.iter_mut()) {
        *v /= wsum;
    }
    let mut cross = 0.0;
    let mut dot = 0.0;
    for (p, q, w) in pairs {
        let a = [p[0] - pc[0], p[1] - pc[1]];
        let b = [q[0] - qc[0], q[1] - qc[1]];
        cross += w * (a[0] * b[1] - a[1] * b[0]);
        dot += w * (a[0] * b[0] + a[1] * b[1]);
    }
    if cross == 0.0 && dot == 0.0 {
        return None;
    }
    let phi = cross.atan2(dot);
    let rp = rot2(phi, pc);
    Some((phi, [qc[0] - rp[0], qc[1] - rp[1]]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quat_yaw_roundtrip() {
        for &a in &[0.0, 0.3, -1.2, 3.0] {
            assert!((Quat::from_yaw(a).yaw() - a).abs() < 1e-12);
        }
    }

    #[test]
    fn quat_rotate_matches_matrix() {
        let q = Quat::from_yaw(0.7).mul(&Quat {
            w: (0.2f64).cos(),
            x: (0.2f64).sin(),
            y: 0.0,
            z: 0.0,
        });
        let q = q.normalized();
        let v = [0.3, -1.0, 2.0];
        let a = q.rotate(v);
        let b = mat3_mul_vec(&q.to_matrix(), v);
        for i in 0..3 {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn se2_compose_inverse() {
        let a = Se2::new(1.0, 2.0, 0.4);
        let b = Se2::new(-0.5, 0.3, -1.1);
        let c = a.compose(&b).compose(&b.inverse()).compose(&a.inverse());
        assert!(c.x.abs() < 1e-12 && c.y.abs() < 1e-12 && c.yaw.abs() < 1e-12);
    }

    #[test]
    fn se2_transform_consistency() {
        let t = Se2::new(0.2, -0.8, 1.3);
        let p = [3.0, 4.0];
        let q = t.transform(p);
        let r = t.transform_inv(q);
        assert!((r[0] - p[0]).abs() < 1e-12 && (r[1] - p[1]).abs() < 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert!((wrap_angle(-3.0 * std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn kabsch_recovers_known_transform() {
        let phi = 0.4;
        let t = [1.5, -0.7];
        let points = [[0.0, 0.0], [2.0, 1.0], [-1.0, 3.0], [4.0, -2.0]];
        let pairs: Vec<([f64; 2], [f64; 2], f64)> = points
            .iter()
            .map(|&p| {
                let r = rot2(phi, p);
                (p, [r[0] + t[0], r[1] + t[1]], 0.5 + p[0].abs())
            })
            .collect();
        let (got_phi, got_t) = kabsch_2d(&pairs).unwrap();
        assert!((got_phi - phi).abs() < 1e-12);
        assert!((got_t[0] - t[0]).abs() < 1e-12 && (got_t[1] - t[1]).abs() < 1e-12);
    }

    #[test]
    fn kabsch_degenerate_inputs() {
        assert!(kabsch_2d(&[([0.0, 0.0], [1.0, 0.0], 1.0)]).is_none());
        // Coincident points carry no rotation information.
        let pairs = [([1.0, 1.0], [2.0, 2.0], 1.0), ([1.0, 1.0], [2.0, 2.0], 1.0)];
        assert!(kabsch_2d(&pairs).is_none());
    }
}
