//! 1-D chain of `CELLS` cells. The state is the normalized cell index
//! `cell / (CELLS - 1)`. The action in `[-1, 1]` is rounded to a move in
//! `{-1, 0, +1}`. A step taken while standing on the last cell pays reward 1,
//! so from cell 0 the first reward arrives on step index `CELLS - 1`.

use super::EnvSpec;

pub const CELLS: usize = 20;

pub fn spec() -> EnvSpec {
    EnvSpec {
        env_id: super::CHAIN_SPARSE.into(),
        state_dim: 1,
        action_dim: 1,
        action_bounds: vec![(-1.0, 1.0)],
        max_steps: 2 * CELLS,
        ind_region: None,
        ood_region: None,
    }
}

pub fn cell_of(state: &[f64]) -> usize {
    let c = (state[0] * (CELLS - 1) as f64).round();
    c.clamp(0.0, (CELLS - 1) as f64) as usize
}

pub fn state_of(cell: usize) -> Vec<f64> {
    vec![cell as f64 / (CELLS - 1) as f64]
}

pub fn initial_state() -> Vec<f64> {
    state_of(0)
}

pub fn transition(state: &[f64], action: &[f64]) -> (Vec<f64>, bool) {
    let cell = cell_of(state);
    if cell == CELLS - 1 {
        return (state.to_vec(), true);
    }
    let mv = action[0].round() as i64;
    let next = (cell as i64 + mv).clamp(0, (CELLS - 1) as i64) as usize;
    (state_of(next), false)
}

pub fn expert(_state: &[f64]) -> Vec<f64> {
    vec![1.0]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dynamics_table() {
        assert_eq!(transition(&state_of(0), &[1.0]), (state_of(1), false));
        assert_eq!(transition(&state_of(0), &[0.7]), (state_of(1), false));
        assert_eq!(transition(&state_of(5), &[0.2]), (state_of(5), false));
        assert_eq!(transition(&state_of(5), &[-0.6]), (state_of(4), false));
        assert_eq!(transition(&state_of(0), &[-1.0]), (state_of(0), false));
        assert_eq!(transition(&state_of(18), &[1.0]), (state_of(19), false));
        assert_eq!(transition(&state_of(19), &[-1.0]), (state_of(19), true));
    }

    #[test]
    fn expert_moves_right() {
        for c in 0..CELLS - 1 {
            assert_eq!(expert(&state_of(c)), vec![1.0]);
        }
    }
}
