//! Planar ego poses and rigid transforms between ego frames.

use std::f64::consts::PI;

use crate::geometry::grid::LabeledPointCloud;
use crate::scalar::{Scalar, Vec3};

/// Planar pose of an ego frame expressed in some reference frame.
/// `z` is never transformed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T> {
    pub x: T,
    pub y: T,
    pub yaw: T,
    pub frame: i64,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle<T: Scalar>(a: T) -> T {
    let pi = T::of(PI);
    let two_pi = T::of(2.0 * PI);
    let mut r = a % two_pi;
    if r > pi {
        r -= two_pi;
    } else if r <= -pi {
        r += two_pi;
    }
    r
}

impl<T: Scalar> Pose<T> {
    pub fn new(x: T, y: T, yaw: T, frame: i64) -> Self {
        Self {
            x,
            y,
            yaw: wrap_angle(yaw),
            frame,
        }
    }

    pub fn identity(frame: i64) -> Self {
        Self::new(T::zero(), T::zero(), T::zero(), frame)
    }

    /// Maps a point from this frame into the reference frame.
    pub fn to_reference(&self, p: &Vec3<T>) -> Vec3<T> {
        let (s, c) = self.yaw.sin_cos();
        [
            c * p[0] - s * p[1] + self.x,
            s * p[0] + c * p[1] + self.y,
            p[2],
        ]
    }

    /// Maps a point from the reference frame into this frame.
    pub fn from_reference(&self, p: &Vec3<T>) -> Vec3<T> {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy, p[2]]
    }

    /// `self ∘ delta`: applies a motion expressed in this frame.
    pub fn compose(&self, delta: &Pose<T>) -> Pose<T> {
        let (s, c) = self.yaw.sin_cos();
        Pose::new(
            self.x + c * delta.x - s * delta.y,
            self.y + s * delta.x + c * delta.y,
            self.yaw + delta.yaw,
            delta.frame,
        )
    }

    /// Pose of `other` expressed in this frame.
    pub fn relative(&self, other: &Pose<T>) -> Pose<T> {
        let p = self.from_reference(&[other.x, other.y, T::zero()]);
        Pose::new(p[0], p[1], other.yaw - self.yaw, other.frame)
    }
}

pub fn transform_point<T: Scalar>(p: &Vec3<T>, src: &Pose<T>, dst: &Pose<T>) -> Vec3<T> {
    dst.from_reference(&src.to_reference(p))
}

/// Re-expresses every point from frame `src` into frame `dst`.
pub fn transform_points<T: Scalar>(
    cloud: &LabeledPointCloud<T>,
    src: &Pose<T>,
    dst: &Pose<T>,
) -> LabeledPointCloud<T> {
    let mut out = cloud.clone();
    for p in &mut out.points {
        p.position = transform_point(&p.position, src, dst);
    }
    out
}
