use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::IoError;
use crate::geometry::Pose;
use crate::trajectory::{ContinuousTrajectory, TimedPose};

const SIG_DIGITS: i32 = 9;

/// Fixed notation with 9 significant digits for the integer part and
/// fraction together (`0.00000000`, `12.3456789`).
fn format_timestamp(t: f64) -> String {
    let int_digits = if t.abs() < 1.0 {
        1
    } else {
        t.abs().log10().floor() as i32 + 1
    };
    let decimals = (SIG_DIGITS - int_digits).max(0) as usize;
    format!("{t:.decimals$}")
}

/// Shortest of fixed or exponential notation with 9 significant digits and
/// no trailing zeros, like C's `%.9g`.
fn format_value(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{:.*e}", (SIG_DIGITS - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= SIG_DIGITS {
        let m = trim_zeros(mantissa);
        return format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (SIG_DIGITS - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn format_tum_line(tp: &TimedPose) -> String {
    let t = tp.pose.translation;
    let q = tp.pose.rotation.quaternion();
    let vals = [t.x, t.y, t.z, q.i, q.j, q.k, q.w].map(format_value);
    format!("{} {}\n", format_timestamp(tp.time), vals.join(" "))
}

/// `timestamp tx ty tz qx qy qz qw`, one line per control.
pub fn write_trajectory_tum(traj: &ContinuousTrajectory, path: &Path) -> Result<(), IoError> {
    if traj.is_empty() {
        return Err(IoError::EmptyTrajectory);
    }
    let text: String = traj.controls().iter().map(format_tum_line).collect();
    fs::write(path, text).map_err(|e| IoError::io(path, e))
}

pub fn parse_tum(text: &str) -> Result<ContinuousTrajectory, IoError> {
    let mut controls = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = format!("line {}", i + 1);
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| IoError::malformed(at.clone(), "non-numeric field"))?;
        let [t, x, y, z, qx, qy, qz, qw] = vals[..] else {
            return Err(IoError::malformed(
                at,
                format!("expected 8 fields, found {}", vals.len()),
            ));
        };
        let q = Quaternion::new(qw, qx, qy, qz);
        if !(q.norm() > 0.0) {
            return Err(IoError::malformed(at, "zero quaternion"));
        }
        let pose = Pose::new(UnitQuaternion::from_quaternion(q), Vector3::new(x, y, z));
        if controls.last().is_some_and(|c: &TimedPose| !(t > c.time)) {
            return Err(IoError::malformed(at, "timestamps must increase"));
        }
        controls.push(TimedPose::new(t, pose));
    }
    ContinuousTrajectory::from_controls(controls).map_err(|e| IoError::malformed("body", e.to_string()))
}

pub fn read_trajectory_tum(path: &Path) -> Result<ContinuousTrajectory, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    parse_tum(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_line() {
        let line = format_tum_line(&TimedPose::new(0.0, Pose::identity()));
        assert_eq!(line, "0.00000000 0 0 0 0 0 0 1\n");
    }

    #[test]
    fn value_formatting() {
        assert_eq!(format_value(0.5), "0.5");
        assert_eq!(format_value(-1.25), "-1.25");
        assert_eq!(format_value(1.0 / 3.0), "0.333333333");
        assert_eq!(format_value(123456.789012), "123456.789");
        assert_eq!(format_value(1e-7), "1e-07");
        assert_eq!(format_value(-0.0), "0");
        assert_eq!(format_value(2.5e12), "2.5e+12");
        assert_eq!(format_timestamp(12.5), "12.5000000");
        assert_eq!(format_timestamp(1234567890.75), "1234567891");
    }

    #[test]
    fn empty_trajectory_creates_no_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tum");
        assert!(matches!(
            write_trajectory_tum(&ContinuousTrajectory::new(), &path),
            Err(IoError::EmptyTrajectory)
        ));
        assert!(!path.exists());
    }

    #[test]
    fn round_trip_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let controls = (0..200)
            .map(|i| {
                let rot = UnitQuaternion::from_scaled_axis(Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ));
                let t = Vector3::new(
                    rng.random_range(-9.0..9.0),
                    rng.random_range(-9.0..9.0),
                    rng.random_range(-9.0..9.0),
                );
                TimedPose::new(i as f64 * 0.05, Pose::new(rot, t))
            })
            .collect();
        let traj = ContinuousTrajectory::from_controls(controls).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tum");
        write_trajectory_tum(&traj, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.ends_with('\n'));
        let back = read_trajectory_tum(&path).unwrap();
        assert_eq!(back.len(), traj.len());
        for (a, b) in traj.controls().iter().zip(back.controls()) {
            assert!((a.time - b.time).abs() < 1e-8);
            assert!(a.pose.translation_distance(&b.pose) < 1e-8);
            assert!(a.pose.rotation_angle_to(&b.pose) < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(parse_tum("0 1 2 3\n").is_err());
        assert!(parse_tum("1 0 0 0 0 0 0 1\n1 0 0 0 0 0 0 1\n").is_err());
        assert!(parse_tum("# header\n\n0 0 0 0 0 0 0 1\n").is_ok());
    }
}
