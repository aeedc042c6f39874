//! Replay memory holding one demonstration per completed task, and mixed
//! batch construction.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::suite::{Step, Trajectory};

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    trajectory_index: usize,
    trajectory: Trajectory,
}

/// Manifest record of one stored trajectory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ManifestEntry {
    pub task_id: usize,
    pub trajectory_index: usize,
    pub n_steps: usize,
}

/// At most one stored trajectory per task; entries are never modified.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayMemory {
    entries: BTreeMap<usize, Entry>,
}

impl ReplayMemory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores one uniformly chosen trajectory of `demos` for `task_id`.
    pub fn store<R: Rng + ?Sized>(&mut self, task_id: usize, demos: &[Trajectory], rng: &mut R) -> Result<()> {
        if demos.is_empty() {
            return Err(Error::contract("cannot store from an empty demo list"));
        }
        if self.entries.contains_key(&task_id) {
            return Err(Error::contract(format!("task {task_id} already stored")));
        }
        let index = rng.gen_range(0..demos.len());
        if demos[index].steps.is_empty() {
            return Err(Error::contract("cannot store an empty trajectory"));
        }
        self.entries.insert(
            task_id,
            Entry {
                trajectory_index: index,
                trajectory: demos[index].clone(),
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, task_id: usize) -> Option<&Trajectory> {
        self.entries.get(&task_id).map(|e| &e.trajectory)
    }

    pub fn task_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    /// Stored steps in task order.
    pub fn steps(&self) -> impl Iterator<Item = &Step> {
        self.entries.values().flat_map(|e| e.trajectory.steps.iter())
    }

    pub fn total_steps(&self) -> usize {
        self.entries.values().map(|e| e.trajectory.steps.len()).sum()
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.entries
            .iter()
            .map(|(&task_id, e)| ManifestEntry {
                task_id,
                trajectory_index: e.trajectory_index,
                n_steps: e.trajectory.steps.len(),
            })
            .collect()
    }
}

/// Training batch; `replay_mask[i]` marks memory-sourced entries.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub steps: Vec<&'a Step>,
    pub replay_mask: Vec<bool>,
}

/// Number of replayed samples in a batch of `batch_size`.
pub fn replay_count(batch_size: usize, replay_fraction: f64) -> usize {
    ((replay_fraction * batch_size as f64).ceil() as usize).min(batch_size)
}

/// Draws `⌈replay_fraction·batch_size⌉` steps uniformly from memory (when it
/// is nonempty) and the rest uniformly from `current`. Replayed entries come
/// first.
pub fn make_batch<'a, R: Rng + ?Sized>(
    current: &'a [Step],
    memory: &'a ReplayMemory,
    batch_size: usize,
    replay_fraction: f64,
    rng: &mut R,
) -> Result<Batch<'a>> {
    if batch_size < 2 {
        return Err(Error::contract("batch_size must be at least 2"));
    }
    if current.is_empty() {
        return Err(Error::contract("current dataset is empty"));
    }
    if !(0.0..=1.0).contains(&replay_fraction) {
        return Err(Error::contract("replay_fraction must lie in [0, 1]"));
    }
    let n_replay = if memory.is_empty() {
        0
    } else {
        replay_count(batch_size, replay_fraction)
    };
    let mut steps = Vec::with_capacity(batch_size);
    if n_replay > 0 {
        let stored: Vec<&Step> = memory.steps().collect();
        steps.extend((0..n_replay).map(|_| stored[rng.gen_range(0..stored.len())]));
    }
    steps.extend((n_replay..batch_size).map(|_| &current[rng.gen_range(0..current.len())]));
    let mut replay_mask = vec![false; batch_size];
    replay_mask[..n_replay].fill(true);
    Ok(Batch { steps, replay_mask })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::policy::{ActionChunk, Instruction, Observation};

    fn step(tag: f64) -> Step {
        Step {
            obs: Observation {
                image: vec![0.0; 3],
                proprio: vec![tag],
            },
            chunk: ActionChunk::zeros(1, 1),
            instr: Instruction {
                verb: 0,
                object: 0,
                target: 0,
            },
        }
    }

    fn traj(task_id: usize, tags: &[f64]) -> Trajectory {
        Trajectory {
            task_id,
            steps: tags.iter().map(|&t| step(t)).collect(),
            success: true,
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// |count − n·p| within three binomial standard deviations.
    fn within_3_sigma(count: usize, n: usize, p: f64) -> bool {
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        (count as f64 - n as f64 * p).abs() <= 3.0 * sd
    }

    #[test]
    fn single_demo_is_stored() {
        let mut m = ReplayMemory::new();
        let d = traj(0, &[1.0, 2.0]);
        m.store(0, std::slice::from_ref(&d), &mut rng(1)).unwrap();
        assert_eq!(m.get(0), Some(&d));
        assert_eq!(m.manifest(), vec![ManifestEntry { task_id: 0, trajectory_index: 0, n_steps: 2 }]);
    }

    #[test]
    fn store_contract_errors() {
        let mut m = ReplayMemory::new();
        assert!(matches!(m.store(0, &[], &mut rng(1)), Err(Error::Contract(_))));
        m.store(0, &[traj(0, &[1.0])], &mut rng(1)).unwrap();
        assert!(matches!(m.store(0, &[traj(0, &[1.0])], &mut rng(1)), Err(Error::Contract(_))));
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn selection_is_seeded() {
        let demos: Vec<Trajectory> = (0..5).map(|i| traj(0, &[i as f64])).collect();
        let pick = |seed| {
            let mut m = ReplayMemory::new();
            m.store(0, &demos, &mut rng(seed)).unwrap();
            m.manifest()[0].trajectory_index
        };
        assert_eq!(pick(42), pick(42));
    }

    #[test]
    fn selection_is_uniform() {
        let demos: Vec<Trajectory> = (0..4).map(|i| traj(0, &[i as f64])).collect();
        let mut counts = [0usize; 4];
        let mut r = rng(7);
        let n = 10_000;
        for _ in 0..n {
            let mut m = ReplayMemory::new();
            m.store(0, &demos, &mut r).unwrap();
            counts[m.manifest()[0].trajectory_index] += 1;
        }
        assert!(counts.iter().all(|&c| within_3_sigma(c, n, 0.25)), "{counts:?}");
    }

    #[test]
    fn empty_memory_gives_unmasked_batch() {
        let current = vec![step(0.0), step(1.0)];
        let m = ReplayMemory::new();
        let b = make_batch(&current, &m, 8, 0.5, &mut rng(1)).unwrap();
        assert_eq!(b.steps.len(), 8);
        assert!(b.replay_mask.iter().all(|&x| !x));
    }

    #[test]
    fn replay_fraction_arithmetic() {
        let current = vec![step(0.0)];
        let mut m = ReplayMemory::new();
        m.store(3, &[traj(3, &[9.0])], &mut rng(1)).unwrap();
        let b = make_batch(&current, &m, 8, 0.5, &mut rng(2)).unwrap();
        assert_eq!(b.replay_mask.iter().filter(|&&x| x).count(), 4);
        for (s, &masked) in b.steps.iter().zip(&b.replay_mask) {
            assert_eq!(s.obs.proprio[0] == 9.0, masked);
        }
        assert_eq!(replay_count(5, 0.5), 3);
        assert_eq!(replay_count(32, 0.0), 0);
        assert_eq!(replay_count(32, 1.0), 32);
    }

    #[test]
    fn batch_contract_errors() {
        let m = ReplayMemory::new();
        assert!(make_batch(&[step(0.0)], &m, 1, 0.5, &mut rng(1)).is_err());
        assert!(make_batch(&[], &m, 4, 0.5, &mut rng(1)).is_err());
    }

    #[test]
    fn replayed_steps_are_uniform_over_memory() {
        let mut m = ReplayMemory::new();
        m.store(0, &[traj(0, &[0.0, 1.0])], &mut rng(1)).unwrap();
        m.store(1, &[traj(1, &[2.0, 3.0, 4.0])], &mut rng(1)).unwrap();
        let current = vec![step(-1.0)];
        let mut counts = [0usize; 5];
        let mut r = rng(3);
        let draws = 10_000;
        for _ in 0..draws {
            let b = make_batch(&current, &m, 2, 0.5, &mut r).unwrap();
            counts[b.steps[0].obs.proprio[0] as usize] += 1;
        }
        assert!(counts.iter().all(|&c| within_3_sigma(c, draws, 0.2)), "{counts:?}");
    }

    #[test]
    fn stored_trajectories_are_immutable_across_stores() {
        let mut m = ReplayMemory::new();
        let d0 = traj(0, &[1.0]);
        m.store(0, std::slice::from_ref(&d0), &mut rng(1)).unwrap();
        m.store(1, &[traj(1, &[2.0])], &mut rng(1)).unwrap();
        assert_eq!(m.get(0), Some(&d0));
    }
}
