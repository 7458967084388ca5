//! Cart-pole with a hidden additive bias on the observed pole angle.
//!
//! Classic Barto-Sutton dynamics, semi-implicit Euler at 50 Hz. State layout
//! is `[x, x_dot, theta, theta_dot]`.

pub const GRAVITY: f64 = 9.8;
pub const CART_MASS: f64 = 1.0;
pub const POLE_MASS: f64 = 0.1;
/// Half the pole length.
pub const POLE_HALF_LENGTH: f64 = 0.5;
pub const FORCE_LIMIT: f64 = 10.0;
pub const DT: f64 = 0.02;
pub const HORIZON: usize = 500;
pub const X_LIMIT: f64 = 2.4;
pub const ANGLE_LIMIT: f64 = 12.0 * std::f64::consts::PI / 180.0;
pub const MAX_BIAS: f64 = 8.0 * std::f64::consts::PI / 180.0;

/// Sensor biases (degrees) of the evaluation tasks.
pub const TEST_BIAS_DEGREES: [f64; 8] = [-7.0, -5.0, -3.0, -1.0, 1.0, 3.0, 5.0, 7.0];

const TOTAL_MASS: f64 = CART_MASS + POLE_MASS;
const POLE_MASS_LENGTH: f64 = POLE_MASS * POLE_HALF_LENGTH;

/// One integration step under `force` newtons (clipped to ±10 N).
pub fn cartpole_step(s: &[f64], force: f64) -> [f64; 4] {
    let force = force.clamp(-FORCE_LIMIT, FORCE_LIMIT);
    let [x, x_dot, theta, theta_dot] = [s[0], s[1], s[2], s[3]];
    let (sin, cos) = theta.sin_cos();
    let temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sin) / TOTAL_MASS;
    let theta_acc =
        (GRAVITY * sin - cos * temp) / (POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / TOTAL_MASS));
    let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS;
    let x_dot = x_dot + DT * x_acc;
    let theta_dot = theta_dot + DT * theta_acc;
    [x + DT * x_dot, x_dot, theta + DT * theta_dot, theta_dot]
}

/// Observation with the pole angle shifted by `bias`.
pub fn cartpole_observe(bias: f64, s: &[f64]) -> [f64; 4] {
    [s[0], s[1], s[2] + bias, s[3]]
}

/// Termination on the true state.
pub fn is_terminal(s: &[f64]) -> bool {
    s[0].abs() > X_LIMIT || s[2].abs() > ANGLE_LIMIT
}

/// Total mechanical energy with the pole modelled as a uniform rod.
pub fn energy(s: &[f64]) -> f64 {
    let [_, x_dot, theta, theta_dot] = [s[0], s[1], s[2], s[3]];
    let l = POLE_HALF_LENGTH;
    let kinetic = 0.5 * TOTAL_MASS * x_dot * x_dot
        + POLE_MASS * l * x_dot * theta_dot * theta.cos()
        + 0.5 * (4.0 / 3.0) * POLE_MASS * l * l * theta_dot * theta_dot;
    kinetic + POLE_MASS * GRAVITY * l * theta.cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upright_rest_is_a_fixed_point() {
        let s = [0.0; 4];
        assert_eq!(cartpole_step(&s, 0.0), [0.0; 4]);
    }

    #[test]
    fn small_tilt_grows() {
        let mut s = [0.0f64, 0.0, 0.01, 0.0];
        let mut prev = s[2].abs();
        for _ in 0..20 {
            s = cartpole_step(&s, 0.0);
            assert!(s[2].abs() >= prev);
            prev = s[2].abs();
        }
        assert!(s[2].abs() > 0.015, "angle only reached {}", s[2]);
    }

    #[test]
    fn dynamics_are_odd() {
        let mut p = [0.01, -0.02, 0.03, 0.05];
        let mut q = p.map(|v| -v);
        for t in 0..30 {
            let f = 3.0 * (t as f64 * 0.4).sin();
            p = cartpole_step(&p, f);
            q = cartpole_step(&q, -f);
            for i in 0..4 {
                assert!((p[i] + q[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn force_is_clipped() {
        let s = [0.0, 0.0, 0.05, 0.0];
        assert_eq!(cartpole_step(&s, 50.0), cartpole_step(&s, 10.0));
    }

    #[test]
    fn bias_shifts_only_the_observed_angle() {
        let s = [0.3, -0.1, 0.0, 0.2];
        assert_eq!(cartpole_observe(0.0, &s), s);
        let b = 8.0 * std::f64::consts::PI / 180.0;
        let o = cartpole_observe(b, &s);
        assert_eq!(o[2], b);
        assert_eq!([o[0], o[1], o[3]], [s[0], s[1], s[3]]);
    }

    #[test]
    fn termination_uses_the_true_angle() {
        let deg = std::f64::consts::PI / 180.0;
        let s = [0.0, 0.0, 11.9 * deg, 0.0];
        let observed = cartpole_observe(8.0 * deg, &s);
        assert!(observed[2] > ANGLE_LIMIT);
        assert!(!is_terminal(&s));
        assert!(is_terminal(&[0.0, 0.0, 12.1 * deg, 0.0]));
        assert!(is_terminal(&[2.5, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn energy_drift_is_small_without_control() {
        let mut s = [0.0, 0.0, 0.05, 0.0];
        let e0 = energy(&s);
        for _ in 0..50 {
            s = cartpole_step(&s, 0.0);
            let drift = (energy(&s) - e0).abs() / e0.abs();
            assert!(drift < 0.05, "drift {drift}");
        }
    }
}
