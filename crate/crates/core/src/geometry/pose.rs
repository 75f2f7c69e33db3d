use nalgebra::{Quaternion, UnitQuaternion, Vector3};

/// Angles below this use normalized lerp instead of slerp.
const SLERP_MIN_ANGLE: f64 = 1e-6;

/// Rigid transform: `p_world = rotation * p + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    /// Rotation about +z by `yaw` radians, then translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw), translation)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        // renormalized so that long composition chains stay on the unit sphere
        let mut rotation = self.rotation * other.rotation;
        rotation.renormalize();
        Pose {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Geodesic angle between the two rotations, radians in [0, π].
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        quaternion_angle(&self.rotation, &other.rotation)
    }

    pub fn translation_distance(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }
}

/// Rotation angle between two unit quaternions, accurate near zero.
pub(crate) fn quaternion_angle(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    let qa = a.quaternion().coords;
    let mut qb = b.quaternion().coords;
    if qa.dot(&qb) < 0.0 {
        qb = -qb;
    }
    // half angle between the 4-vectors, doubled
    4.0 * (qa - qb).norm().atan2((qa + qb).norm())
}

/// Interpolates between two poses: shortest-arc slerp on rotation, lerp on
/// translation. `alpha = 0` and `alpha = 1` return the endpoints exactly.
pub fn se3_interpolate(a: &Pose, b: &Pose, alpha: f64) -> Pose {
    if alpha <= 0.0 {
        return *a;
    }
    if alpha >= 1.0 {
        return *b;
    }
    let qa = a.rotation.quaternion().coords;
    let mut qb = b.rotation.quaternion().coords;
    if qa.dot(&qb) < 0.0 {
        qb = -qb;
    }
    let half = 2.0 * (qa - qb).norm().atan2((qa + qb).norm());
    let coords = if 2.0 * half < SLERP_MIN_ANGLE {
        qa * (1.0 - alpha) + qb * alpha
    } else {
        let s = half.sin();
        qa * (((1.0 - alpha) * half).sin() / s) + qb * ((alpha * half).sin() / s)
    };
    let rotation = UnitQuaternion::from_quaternion(Quaternion::from(coords));
    let translation = a.translation * (1.0 - alpha) + b.translation * alpha;
    Pose { rotation, translation }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    pub(crate) fn random_pose(rng: &mut impl Rng) -> Pose {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle = rng.random_range(0.0..PI);
        let rot = UnitQuaternion::from_scaled_axis(axis.normalize() * angle);
        let t = Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        Pose::new(rot, t)
    }

    #[test]
    fn long_composition_chains_stay_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = Pose::identity();
        for _ in 0..10_000 {
            let step = random_pose(&mut rng);
            p = p.compose(&step).compose(&step.inverse()).compose(&step);
        }
        assert!((p.rotation.quaternion().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn endpoints_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            assert_eq!(se3_interpolate(&a, &b, 0.0), a);
            assert_eq!(se3_interpolate(&a, &b, 1.0), b);
        }
    }

    #[test]
    fn midpoint_of_quarter_turn() {
        let a = Pose::identity();
        let b = Pose::from_yaw(PI / 2.0, Vector3::new(1.0, 0.0, 0.0));
        let m = se3_interpolate(&a, &b, 0.5);
        let expected = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), PI / 4.0);
        assert!(m.rotation.angle_to(&expected) < 1e-12);
        assert_relative_eq!(m.translation, Vector3::new(0.5, 0.0, 0.0), epsilon = 1e-15);
    }

    /// Independent route: q_a · exp(α · log(q_a⁻¹ q_b)) via axis-angle, taking
    /// the shortest arc.
    fn axis_angle_power(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, alpha: f64) -> UnitQuaternion<f64> {
        let rel = a.inverse() * b;
        let (axis, mut angle) = match rel.axis_angle() {
            Some((axis, angle)) => (axis.into_inner(), angle),
            None => return *a,
        };
        let mut axis = axis;
        if angle > PI {
            angle = 2.0 * PI - angle;
            axis = -axis;
        }
        a * UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), alpha * angle)
    }

    #[test]
    fn matches_axis_angle_power_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let m = se3_interpolate(&a, &b, 0.3);
            let oracle = axis_angle_power(&a.rotation, &b.rotation, 0.3);
            assert!(quaternion_angle(&m.rotation, &oracle) < 1e-9);
            assert_relative_eq!(
                m.translation,
                a.translation * 0.7 + b.translation * 0.3,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn tiny_angles_fall_back_to_nlerp() {
        let a = Pose::identity();
        let b = Pose::from_yaw(1e-8, Vector3::zeros());
        let m = se3_interpolate(&a, &b, 0.5);
        assert!((quaternion_angle(&a.rotation, &m.rotation) - 0.5e-8).abs() < 1e-15);
    }

    #[test]
    fn inverse_of_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let lhs = a.compose(&b).inverse();
            let rhs = b.inverse().compose(&a.inverse());
            assert!(lhs.rotation_angle_to(&rhs) < 1e-12);
            assert_relative_eq!(lhs.translation, rhs.translation, epsilon = 1e-12);
            assert!((a.rotation.norm() - 1.0).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn slerp_is_geodesic(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let m = se3_interpolate(&a, &b, alpha);
            let total = a.rotation_angle_to(&b);
            prop_assert!((a.rotation_angle_to(&m) - alpha * total).abs() < 1e-9);
        }

        #[test]
        fn composition_is_associative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = random_pose(&mut rng);
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!(l.rotation_angle_to(&r) < 1e-12);
            prop_assert!((l.translation - r.translation).norm() < 1e-12);
        }
    }
}
