use serde::{Deserialize, Serialize};

/// A 3D point or vector in millimeters.
pub type Vec3 = [f64; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

/// Continuous joint locations (N×3, millimeters) with per-joint confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub joints: Vec<Vec3>,
    pub confidence: Vec<f64>,
}

impl Pose {
    pub fn new(joints: Vec<Vec3>) -> Self {
        let confidence = vec![1.0; joints.len()];
        Pose { joints, confidence }
    }

    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn translated(&self, t: Vec3) -> Pose {
        Pose {
            joints: self.joints.iter().map(|&j| add(j, t)).collect(),
            confidence: self.confidence.clone(),
        }
    }

    pub fn scaled(&self, s: f64) -> Pose {
        Pose {
            joints: self.joints.iter().map(|&j| scale(j, s)).collect(),
            confidence: self.confidence.clone(),
        }
    }

    /// Applies `p ↦ R·p + t` with a row-major 3×3 matrix.
    pub fn transformed(&self, r: &[[f64; 3]; 3], t: Vec3) -> Pose {
        Pose {
            joints: self
                .joints
                .iter()
                .map(|&p| add([dot(r[0], p), dot(r[1], p), dot(r[2], p)], t))
                .collect(),
            confidence: self.confidence.clone(),
        }
    }
}
