//! 2-D point mass. State `(px, py, gx, gy)`, action = velocity in `[-1, 1]^2`
//! integrated with `DT`. A step taken while `|pos - goal| < GOAL_RADIUS` is the
//! success transition; the point holds still on that step.

use super::{EnvSpec, Region};

pub const DT: f64 = 0.05;
pub const GOAL_RADIUS: f64 = 0.05;
pub const EXPERT_GAIN: f64 = 4.0;
const POS_LIMIT: f64 = 1.0;

pub fn spec() -> EnvSpec {
    EnvSpec {
        env_id: super::POINT_REACH_2D.into(),
        state_dim: 4,
        action_dim: 2,
        action_bounds: vec![(-1.0, 1.0); 2],
        max_steps: 60,
        ind_region: Some(Region::new(&[0.2, 0.2], &[0.6, 0.6])),
        ood_region: Some(Region::new(&[0.65, 0.2], &[0.85, 0.6])),
    }
}

pub fn initial_state(goal: &[f64]) -> Vec<f64> {
    vec![0.0, 0.0, goal[0], goal[1]]
}

pub fn at_goal(state: &[f64]) -> bool {
    let dx = state[0] - state[2];
    let dy = state[1] - state[3];
    (dx * dx + dy * dy).sqrt() < GOAL_RADIUS
}

pub fn transition(state: &[f64], action: &[f64]) -> (Vec<f64>, bool) {
    if at_goal(state) {
        return (state.to_vec(), true);
    }
    let mut next = state.to_vec();
    next[0] = (state[0] + DT * action[0]).clamp(-POS_LIMIT, POS_LIMIT);
    next[1] = (state[1] + DT * action[1]).clamp(-POS_LIMIT, POS_LIMIT);
    (next, false)
}

/// Per-axis proportional controller, saturated at the action bounds.
pub fn expert(state: &[f64]) -> Vec<f64> {
    (0..2)
        .map(|d| (EXPERT_GAIN * (state[d + 2] - state[d])).clamp(-1.0, 1.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standing_on_goal_succeeds_for_any_action() {
        let s = [0.4, 0.4, 0.4, 0.4];
        for a in [[1.0, 1.0], [-1.0, 0.3], [0.0, 0.0]] {
            let (next, success) = transition(&s, &a);
            assert!(success);
            assert_eq!(next, s.to_vec());
        }
    }

    #[test]
    fn far_from_goal_expert_saturates() {
        let a = expert(&[0.0, 0.0, 0.6, 0.1]);
        assert_eq!(a[0], 1.0);
        assert!((a[1] - 0.4).abs() < 1e-15);
        let a = expert(&[0.9, 0.9, 0.2, 0.2]);
        assert_eq!(a, vec![-1.0, -1.0]);
    }
}
