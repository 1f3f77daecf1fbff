//! Multi-phase grasp-and-lift proxy.
//!
//! State `(hx, hy, hz, grip, ox, oy, oz, held)`, action
//! `(vx, vy, vz, grip_delta)` in `[-1, 1]^4`. Per step:
//!
//! 1. the hand moves by `DT * v` inside the workspace;
//! 2. `grip += GRIP_RATE * grip_delta`, clipped to `[0, 1]`;
//! 3. a free object is grasped when the grip closes through `GRIP_CLOSED`
//!    with the hand within `GRASP_XY` horizontally and `GRASP_Z` vertically
//!    of it; a held object follows the hand and drops to the table if the
//!    grip opens below `GRIP_RELEASE`;
//! 4. success when the object is held above `LIFT_HEIGHT`.

use super::{EnvSpec, Region};

pub const DT: f64 = 0.05;
pub const GRIP_RATE: f64 = 0.25;
pub const GRIP_CLOSED: f64 = 0.8;
pub const GRIP_RELEASE: f64 = 0.5;
pub const GRASP_XY: f64 = 0.06;
pub const GRASP_Z: f64 = 0.05;
pub const LIFT_HEIGHT: f64 = 0.2;
pub const HAND_START: [f64; 3] = [0.0, 0.0, 0.3];
const Z_MAX: f64 = 0.5;
const XY_LIMIT: f64 = 1.0;
const EXPERT_GAIN: f64 = 6.0;
const EXPERT_TOL: f64 = 0.02;

pub fn spec() -> EnvSpec {
    EnvSpec {
        env_id: super::GRASP_LIFT_TOY.into(),
        state_dim: 8,
        action_dim: 4,
        action_bounds: vec![(-1.0, 1.0); 4],
        max_steps: 70,
        ind_region: Some(Region::new(&[0.2, -0.2], &[0.5, 0.2])),
        ood_region: Some(Region::new(&[0.55, -0.2], &[0.7, 0.2])),
    }
}

pub fn initial_state(object_xy: &[f64]) -> Vec<f64> {
    vec![
        HAND_START[0],
        HAND_START[1],
        HAND_START[2],
        0.0,
        object_xy[0],
        object_xy[1],
        0.0,
        0.0,
    ]
}

pub fn transition(state: &[f64], action: &[f64]) -> (Vec<f64>, bool) {
    let mut s = state.to_vec();
    s[0] = (state[0] + DT * action[0]).clamp(-XY_LIMIT, XY_LIMIT);
    s[1] = (state[1] + DT * action[1]).clamp(-XY_LIMIT, XY_LIMIT);
    s[2] = (state[2] + DT * action[2]).clamp(0.0, Z_MAX);
    let prev_grip = state[3];
    s[3] = (prev_grip + GRIP_RATE * action[3]).clamp(0.0, 1.0);

    let held = state[7] > 0.5;
    if held {
        if s[3] < GRIP_RELEASE {
            s[7] = 0.0;
            s[4] = s[0];
            s[5] = s[1];
            s[6] = 0.0;
        } else {
            s[4] = s[0];
            s[5] = s[1];
            s[6] = s[2];
        }
    } else {
        let dxy = ((s[0] - s[4]).powi(2) + (s[1] - s[5]).powi(2)).sqrt();
        let dz = (s[2] - s[6]).abs();
        if prev_grip < GRIP_CLOSED && s[3] >= GRIP_CLOSED && dxy < GRASP_XY && dz < GRASP_Z {
            s[7] = 1.0;
            s[4] = s[0];
            s[5] = s[1];
            s[6] = s[2];
        }
    }
    let success = s[7] > 0.5 && s[6] > LIFT_HEIGHT;
    (s, success)
}

/// Phase machine: align over the object, descend, close, lift.
pub fn expert(state: &[f64]) -> Vec<f64> {
    let p = |v: f64| (EXPERT_GAIN * v).clamp(-1.0, 1.0);
    if state[7] > 0.5 {
        return vec![0.0, 0.0, 1.0, 1.0];
    }
    let dx = state[4] - state[0];
    let dy = state[5] - state[1];
    let dz = state[6] - state[2];
    if (dx * dx + dy * dy).sqrt() > EXPERT_TOL {
        vec![p(dx), p(dy), 0.0, -1.0]
    } else if -dz > EXPERT_TOL {
        vec![p(dx), p(dy), p(dz), -1.0]
    } else {
        vec![p(dx), p(dy), 0.0, 1.0]
    }
}
