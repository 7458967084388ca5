//! 2D point agent pushed by a hidden rotational force field.

use std::f64::consts::PI;

use super::{EnvError, TaskSpec};

pub const TASK_COUNT: usize = 5000;
pub const HORIZON: usize = 10;
pub const GOAL: [f64; 2] = [1.0, 0.0];
pub const BOX: f64 = 2.0;

/// Task indices used for evaluation; excluded from meta-training sampling.
pub const TEST_TASK_INDICES: [usize; 6] = [2000, 2500, 3000, 3500, 4000, 4500];

/// Maps a grid index in `[0, 5000)` to its rotation `-π + 2π i / 5000`.
pub fn task_from_index(index: usize) -> Result<TaskSpec, EnvError> {
    if index >= TASK_COUNT {
        return Err(EnvError::TaskIndex {
            index,
            count: TASK_COUNT,
        });
    }
    TaskSpec::point(-PI + 2.0 * PI * index as f64 / TASK_COUNT as f64)
}

/// `clip(s + R(ω) clip(a))`, both clips to their boxes.
pub fn point_step(omega: f64, s: &[f64], a: &[f64]) -> [f64; 2] {
    let ax = a[0].clamp(-1.0, 1.0);
    let ay = a[1].clamp(-1.0, 1.0);
    let (sin, cos) = omega.sin_cos();
    [
        (s[0] + cos * ax - sin * ay).clamp(-BOX, BOX),
        (s[1] + sin * ax + cos * ay).clamp(-BOX, BOX),
    ]
}

/// Negative Euclidean distance of the reached state from the goal.
pub fn point_reward(s_next: &[f64]) -> f64 {
    -((s_next[0] - GOAL[0]).powi(2) + (s_next[1] - GOAL[1]).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: [f64; 2], b: [f64; 2]) -> bool {
        (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12
    }

    #[test]
    fn step_examples() {
        assert!(close(point_step(0.0, &[0.0, 0.0], &[1.0, 0.0]), [1.0, 0.0]));
        assert!(close(point_step(PI / 2.0, &[0.0, 0.0], &[1.0, 0.0]), [0.0, 1.0]));
        assert!(close(point_step(PI, &[1.9, 0.0], &[1.0, 0.0]), [0.9, 0.0]));
        // box clipping
        assert!(close(point_step(0.0, &[1.9, -1.5], &[1.0, -1.0]), [2.0, -2.0]));
        // action clipping
        assert!(close(point_step(0.0, &[0.0, 0.0], &[5.0, -0.5]), [1.0, -0.5]));
    }

    #[test]
    fn reward_examples() {
        assert_eq!(point_reward(&[1.0, 0.0]), 0.0);
        assert_eq!(point_reward(&[0.0, 0.0]), -1.0);
        assert!((point_reward(&[-2.0, 2.0]) + 13f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn grid_indices() {
        let omega = |i| match task_from_index(i).unwrap() {
            TaskSpec::Point { omega } => omega,
            _ => unreachable!(),
        };
        assert!(omega(2500).abs() < 1e-12);
        assert!((omega(2000) + 2.0 * PI / 10.0).abs() < 1e-12);
        assert!((omega(3000) - 2.0 * PI / 10.0).abs() < 1e-12);
        assert!((omega(4500) - 8.0 * PI / 10.0).abs() < 1e-12);
        assert!((omega(0) + PI).abs() < 1e-12);
        assert!(task_from_index(5000).is_err());
    }

    proptest! {
        #[test]
        fn opposite_rotations_reflect(omega in -PI..PI, sx in -1.0..1.0f64, sy in -1.0..1.0f64,
                                      ax in -1.5..1.5f64, ay in -1.5..1.5f64) {
            let p = point_step(omega, &[sx, sy], &[ax, ay]);
            let q = point_step(-omega, &[sx, -sy], &[ax, -ay]);
            prop_assert!((p[0] - q[0]).abs() < 1e-12);
            prop_assert!((p[1] + q[1]).abs() < 1e-12);
        }

        #[test]
        fn rotation_preserves_action_norm(omega in -PI..PI, ax in -1.5..1.5f64, ay in -1.5..1.5f64) {
            // start at the origin so the box never clips a unit-box action
            let p = point_step(omega, &[0.0, 0.0], &[ax, ay]);
            let clipped = (ax.clamp(-1.0, 1.0).powi(2) + ay.clamp(-1.0, 1.0).powi(2)).sqrt();
            prop_assert!(((p[0].powi(2) + p[1].powi(2)).sqrt() - clipped).abs() < 1e-12);
        }
    }
}
