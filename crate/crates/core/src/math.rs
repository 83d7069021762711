//! Shared math helpers: angle arithmetic, axis-aligned boxes, deterministic hashing.

use serde::{Deserialize, Serialize};

/// 3D vector used across the crate.
pub type Vec3 = nalgebra::Vector3<f64>;

/// Normalize an angle to the half-open interval (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Smallest absolute wrapped difference |b - a|, in [0, pi].
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(b - a).abs()
}

/// Unwrap a yaw sequence in place so consecutive values never jump by more than pi.
pub fn unwrap_yaws(yaws: &mut [f64]) {
    for i in 1..yaws.len() {
        let d = wrap_angle(yaws[i] - yaws[i - 1]);
        yaws[i] = yaws[i - 1] + d;
    }
}

/// Round to the nearest multiple of `step`, halves away from zero.
pub fn round_to_multiple(x: f64, step: f64) -> f64 {
    if step <= 0.0 {
        return x;
    }
    (x / step).round() * step
}

/// Axis-aligned box, closed on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn min_v(&self) -> Vec3 {
        Vec3::new(self.min[0], self.min[1], self.min[2])
    }

    pub fn max_v(&self) -> Vec3 {
        Vec3::new(self.max[0], self.max[1], self.max[2])
    }

    pub fn extent(&self) -> Vec3 {
        self.max_v() - self.min_v()
    }

    pub fn center(&self) -> Vec3 {
        0.5 * (self.min_v() + self.max_v())
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        (0..3).all(|i| other.min[i] >= self.min[i] && other.max[i] <= self.max[i])
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|i| self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] < self.max[i])
    }

    /// Entry/exit parameters of the ray `origin + t * dir` through the box, if any,
    /// restricted to t >= 0. Uses the slab method.
    pub fn ray_intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = 0.0_f64;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i].abs() < 1e-15 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
            } else {
                let inv = 1.0 / dir[i];
                let mut ta = (self.min[i] - origin[i]) * inv;
                let mut tb = (self.max[i] - origin[i]) * inv;
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return None;
                }
            }
        }
        Some((t0, t1))
    }

    /// Signed-ish distance from a point to the box surface: 0 inside, Euclidean gap outside.
    pub fn distance_outside(&self, p: &Vec3) -> f64 {
        let mut d2 = 0.0;
        for i in 0..3 {
            let g = if p[i] < self.min[i] {
                self.min[i] - p[i]
            } else if p[i] > self.max[i] {
                p[i] - self.max[i]
            } else {
                0.0
            };
            d2 += g * g;
        }
        d2.sqrt()
    }
}

/// FNV-1a, used for stable digests and sub-seed derivation. Not cryptographic.
#[derive(Debug, Clone)]
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Self(0xcbf29ce484222325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    pub fn write_f64(&mut self, v: f64) {
        self.write(&v.to_bits().to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

/// Digest of a byte slice, hex-encoded.
pub fn digest_hex(bytes: &[u8]) -> String {
    let mut h = Fnv1a::new();
    h.write(bytes);
    format!("{:016x}", h.finish())
}

/// Derive a sub-seed from a root seed and a list of mixing values.
pub fn derive_seed(root: u64, parts: &[u64]) -> u64 {
    let mut h = Fnv1a::new();
    h.write_u64(root);
    for &p in parts {
        h.write_u64(p);
    }
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_keeps_half_open_interval() {
        assert!((wrap_angle(std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert!((wrap_angle(-std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
        assert!((wrap_angle(3.5) - (3.5 - 2.0 * std::f64::consts::PI)).abs() < 1e-12);
        assert_eq!(wrap_angle(0.25), 0.25);
    }

    #[test]
    fn round_half_away_from_zero() {
        assert!((round_to_multiple(0.333, 0.1) - 0.3).abs() < 1e-12);
        // Exactly representable half cases.
        assert_eq!(round_to_multiple(0.375, 0.25), 0.5);
        assert_eq!(round_to_multiple(-0.375, 0.25), -0.5);
        assert_eq!(round_to_multiple(0.0, 0.1), 0.0);
    }

    #[test]
    fn ray_box_hits_front_face() {
        let b = Aabb::new([5.0, -1.0, -1.0], [6.0, 1.0, 1.0]);
        let (t0, t1) = b
            .ray_intersect(&Vec3::zeros(), &Vec3::new(1.0, 0.0, 0.0))
            .unwrap();
        assert!((t0 - 5.0).abs() < 1e-12);
        assert!((t1 - 6.0).abs() < 1e-12);
        assert!(b.ray_intersect(&Vec3::zeros(), &Vec3::new(-1.0, 0.0, 0.0)).is_none());
    }

    #[test]
    fn unwrap_removes_jumps() {
        let mut y = vec![3.0, -3.0, 3.0];
        unwrap_yaws(&mut y);
        assert!((y[1] - (2.0 * std::f64::consts::PI - 3.0)).abs() < 1e-12);
        for w in y.windows(2) {
            assert!((w[1] - w[0]).abs() <= std::f64::consts::PI + 1e-12);
        }
    }
}
