use super::{dist, ChunkPolicy, SimState, TaskSpec, ACTION_DIM};
use crate::error::Result;
use crate::policy::{ActionChunk, Observation};

/// Proportional controller for one step: approach the object, close on it,
/// carry it to the target, release.
pub fn expert_action(spec: &TaskSpec, state: &SimState) -> [f64; ACTION_DIM] {
    let (obj, tgt) = (spec.object(), spec.target());
    if spec.is_success(state) {
        return [0.0, 0.0, -1.0];
    }
    match state.held {
        Some(h) if h == obj => {
            let (dx, dy, arrives) = approach(state.gripper, state.targets[tgt], spec.max_step);
            [dx, dy, if arrives { -1.0 } else { 1.0 }]
        }
        Some(_) => [0.0, 0.0, -1.0],
        None => {
            let (dx, dy, arrives) = approach(state.gripper, state.objects[obj], spec.max_step);
            [dx, dy, if arrives { 1.0 } else { -1.0 }]
        }
    }
}

/// Unit-box action moving from `from` towards `to` by at most one step, and
/// whether it reaches `to`.
fn approach(from: [f64; 2], to: [f64; 2], max_step: f64) -> (f64, f64, bool) {
    let d = dist(from, to);
    if d <= max_step {
        return ((to[0] - from[0]) / max_step, (to[1] - from[1]) / max_step, true);
    }
    let scale = 1.0 / d;
    ((to[0] - from[0]) * scale, (to[1] - from[1]) * scale, false)
}

/// Plans an `H`-step chunk by rolling the controller forward on a copy of
/// the state.
pub fn scripted_expert(spec: &TaskSpec, state: &SimState, horizon: usize) -> Result<ActionChunk> {
    let mut sim = state.clone();
    let mut data = Vec::with_capacity(horizon * ACTION_DIM);
    for _ in 0..horizon {
        let action = expert_action(spec, &sim);
        sim.step(spec, &action)?;
        data.extend_from_slice(&action);
    }
    ActionChunk::new(horizon, ACTION_DIM, data)
}

/// The scripted controller as a [`ChunkPolicy`].
#[derive(Clone, Copy, Debug)]
pub struct ScriptedExpert {
    pub horizon: usize,
}

impl ChunkPolicy for ScriptedExpert {
    fn plan(&self, spec: &TaskSpec, state: &SimState, _: &Observation, _: &mut dyn rand::RngCore)
        -> Result<ActionChunk> {
        scripted_expert(spec, state, self.horizon)
    }
}
