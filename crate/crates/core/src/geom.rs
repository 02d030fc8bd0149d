use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

/// A point or direction in the world frame, meters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vec3(pub [f64; 3]);

impl Vec3 {
    pub const ZERO: Vec3 = Vec3([0.0; 3]);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3([x, y, z])
    }
    pub fn x(self) -> f64 {
        self.0[0]
    }
    pub fn y(self) -> f64 {
        self.0[1]
    }
    pub fn z(self) -> f64 {
        self.0[2]
    }
    pub fn dot(self, o: Vec3) -> f64 {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }
    pub fn cross(self, o: Vec3) -> Vec3 {
        let [a, b, c] = self.0;
        let [d, e, f] = o.0;
        Vec3([b * f - c * e, c * d - a * f, a * e - b * d])
    }
    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }
    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }
    pub fn dist(self, o: Vec3) -> f64 {
        (self - o).norm()
    }
    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }
    pub fn is_finite(self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        self * -1.0
    }
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|k| self.min.0[k] < self.max.0[k])
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|k| p.0[k] >= self.min.0[k] && p.0[k] <= self.max.0[k])
    }

    pub fn clamp(&self, p: Vec3) -> Vec3 {
        Vec3(std::array::from_fn(|k| p.0[k].clamp(self.min.0[k], self.max.0[k])))
    }

    /// Entry parameter in [0, 1] where the segment `a -> b` first touches the
    /// box, or `None` if it misses (slab test).
    pub fn segment_hit(&self, a: Vec3, b: Vec3) -> Option<f64> {
        let d = b - a;
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for k in 0..3 {
            if d.0[k].abs() < 1e-15 {
                if a.0[k] < self.min.0[k] || a.0[k] > self.max.0[k] {
                    return None;
                }
            } else {
                let inv = 1.0 / d.0[k];
                let mut ta = (self.min.0[k] - a.0[k]) * inv;
                let mut tb = (self.max.0[k] - a.0[k]) * inv;
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
        Some(t0)
    }

    pub fn intersects_segment(&self, a: Vec3, b: Vec3) -> bool {
        self.segment_hit(a, b).is_some()
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }
}
