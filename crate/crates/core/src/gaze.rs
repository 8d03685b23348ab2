//! Gaze label algebra: pitch/yaw angles, unit direction vectors and the
//! angular error metric.
//!
//! Convention (normalized camera space, camera looking along +z, gaze
//! pointing back towards it): `x = -cos(p)·sin(y)`, `y = -sin(p)`,
//! `z = -cos(p)·cos(y)`.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gaze direction as (pitch, yaw) in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GazeLabel {
    pub pitch: f64,
    pub yaw: f64,
}

/// Unit 3-vector equivalent of a [`GazeLabel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl GazeLabel {
    pub const fn new(pitch: f64, yaw: f64) -> Self {
        GazeLabel { pitch, yaw }
    }

    /// Checked constructor for ingested labels: `|pitch| ≤ π/2`, `|yaw| ≤ π`.
    pub fn validated(pitch: f64, yaw: f64) -> Result<Self> {
        if !(pitch.is_finite() && yaw.is_finite()) || pitch.abs() > FRAC_PI_2 || yaw.abs() > PI {
            return Err(Error::Data(format!(
                "gaze label out of range: pitch {pitch}, yaw {yaw}"
            )));
        }
        Ok(GazeLabel { pitch, yaw })
    }

    pub fn to_vector(self) -> GazeVector {
        angles_to_vector(self)
    }

    /// Horizontal mirror: yaw changes sign, pitch is unchanged.
    pub fn flipped(self) -> Self {
        flip_label(self)
    }
}

impl GazeVector {
    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(&self, o: &GazeVector) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }
}

pub fn angles_to_vector(g: GazeLabel) -> GazeVector {
    let (sp, cp) = g.pitch.sin_cos();
    let (sy, cy) = g.yaw.sin_cos();
    GazeVector {
        x: -cp * sy,
        y: -sp,
        z: -cp * cy,
    }
}

/// Left inverse of [`angles_to_vector`]; the input is normalized first.
pub fn vector_to_angles(v: GazeVector) -> Result<GazeLabel> {
    let n = v.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Input("cannot convert a zero or non-finite vector to gaze angles".into()));
    }
    let (x, y, z) = (v.x / n, v.y / n, v.z / n);
    let pitch = (-y).clamp(-1.0, 1.0).asin();
    // yaw is undefined straight up/down; report 0 there
    let yaw = if x.hypot(z) < 1e-15 { 0.0 } else { (-x).atan2(-z) };
    Ok(GazeLabel { pitch, yaw })
}

/// Angle between two gaze directions, in degrees, within `[0, 180]`.
pub fn angular_error_deg(a: GazeLabel, b: GazeLabel) -> f64 {
    let (va, vb) = (a.to_vector(), b.to_vector());
    let cos = va.dot(&vb) / (va.norm() * vb.norm());
    cos.clamp(-1.0, 1.0).acos().to_degrees()
}

pub fn flip_label(g: GazeLabel) -> GazeLabel {
    GazeLabel {
        pitch: g.pitch,
        yaw: -g.yaw,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: GazeVector, b: (f64, f64, f64)) -> bool {
        (a.x - b.0).abs() < 1e-15 && (a.y - b.1).abs() < 1e-15 && (a.z - b.2).abs() < 1e-15
    }

    #[test]
    fn forward_convention() {
        assert!(close(angles_to_vector(GazeLabel::new(0.0, 0.0)), (0.0, 0.0, -1.0)));
        assert!(close(angles_to_vector(GazeLabel::new(FRAC_PI_2, 0.0)), (0.0, -1.0, 0.0)));
    }

    #[test]
    fn inverse_examples() {
        let g = vector_to_angles(GazeVector { x: 0.0, y: 0.0, z: -1.0 }).unwrap();
        assert_eq!((g.pitch, g.yaw), (0.0, 0.0));
        let g = vector_to_angles(GazeVector { x: 0.0, y: -1.0, z: 0.0 }).unwrap();
        assert!((g.pitch - FRAC_PI_2).abs() < 1e-15 && g.yaw.abs() < 1e-15);
        assert!(vector_to_angles(GazeVector { x: 0.0, y: 0.0, z: 0.0 }).is_err());
    }

    #[test]
    fn metric_examples() {
        let o = GazeLabel::new(0.0, 0.0);
        assert_eq!(angular_error_deg(o, o), 0.0);
        assert!((angular_error_deg(o, GazeLabel::new(0.0, FRAC_PI_2)) - 90.0).abs() < 1e-12);
        assert!((angular_error_deg(o, GazeLabel::new(0.0, PI)) - 180.0).abs() < 1e-12);
    }

    #[test]
    fn flip_examples() {
        assert_eq!(flip_label(GazeLabel::new(0.3, 0.2)), GazeLabel::new(0.3, -0.2));
        assert_eq!(flip_label(GazeLabel::new(0.5, 0.0)), GazeLabel::new(0.5, -0.0));
        assert!(GazeLabel::validated(2.0, 0.0).is_err());
        assert!(GazeLabel::validated(0.0, -3.2).is_err());
        assert!(GazeLabel::validated(0.0, f64::NAN).is_err());
    }

    fn label() -> impl Strategy<Value = GazeLabel> {
        (-FRAC_PI_2..=FRAC_PI_2, -PI..=PI).prop_map(|(p, y)| GazeLabel::new(p, y))
    }

    proptest! {
        #[test]
        fn vectors_are_unit(g in label()) {
            prop_assert!((g.to_vector().norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn round_trip(p in -1.5f64..1.5, y in -3.1f64..3.1) {
            let g = GazeLabel::new(p, y);
            let back = vector_to_angles(g.to_vector()).unwrap();
            prop_assert!((back.pitch - p).abs() < 1e-9 && (back.yaw - y).abs() < 1e-9);
        }

        #[test]
        fn metric_symmetric_and_triangle(a in label(), b in label(), c in label()) {
            prop_assert_eq!(angular_error_deg(a, b), angular_error_deg(b, a));
            let (ab, bc, ac) = (angular_error_deg(a, b), angular_error_deg(b, c), angular_error_deg(a, c));
            prop_assert!(ac <= ab + bc + 1e-9);
        }

        #[test]
        fn near_identical_labels_never_nan(g in label(), d in -1e-12f64..1e-12) {
            let e = angular_error_deg(g, GazeLabel::new(g.pitch + d, g.yaw - d));
            prop_assert!(e.is_finite() && (0.0..=180.0).contains(&e));
        }

        #[test]
        fn flip_error_zero_iff_yaw_zero(g in label()) {
            let f = flip_label(g);
            prop_assert_eq!(flip_label(f), g);
            let e = angular_error_deg(g, f);
            prop_assert_eq!(e, angular_error_deg(f, g));
            let vanishes = e.to_radians().abs() < 1e-12;
            if g.yaw == 0.0 { prop_assert!(vanishes); }
            if vanishes { prop_assert!(g.yaw.abs() < 1e-6 || (g.pitch.abs() - FRAC_PI_2).abs() < 1e-6 || (g.yaw.abs() - PI).abs() < 1e-6); }
        }
    }
}
