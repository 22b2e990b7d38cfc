//! Small fixed-size vector helpers and rotation sampling.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;

use ribosphere_tensor::rng::normal;

pub type Point = [f64; 3];

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Point, c: f64) -> Point {
    [a[0] * c, a[1] * c, a[2] * c]
}

pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Point, b: Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

pub fn centroid(points: &[Point]) -> Point {
    let n = points.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in points {
        c = add(c, *p);
    }
    scale(c, 1.0 / n)
}

pub fn apply(r: &Matrix3<f64>, p: Point) -> Point {
    let v = r * Vector3::new(p[0], p[1], p[2]);
    [v.x, v.y, v.z]
}

/// Uniform rotation on SO(3) from a normalised Gaussian quaternion.
pub fn random_rotation_matrix<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    loop {
        let q = Quaternion::new(normal(rng), normal(rng), normal(rng), normal(rng));
        if q.norm() > 1e-12 {
            return *UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix();
        }
    }
}

/// Full pairwise distance matrix, row-major.
pub fn pairwise_distances(points: &[Point]) -> Vec<f64> {
    let n = points.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = dist(points[i], points[j]);
        }
    }
    out
}
