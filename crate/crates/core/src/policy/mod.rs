//! Toy vision–language–action policy.
//!
//! Images are cut into square patches and embedded. A single-head
//! dot-product attention, queried by the instruction embedding together with
//! the proprioceptive state, pools the patches into a visual latent; the
//! fusion layer combines it with the language latent and proprio into
//! `z_fused`. A two-hidden-layer perceptron (the action expert) regresses the
//! flow-matching target `ω − a` from the noised chunk, the flow time and
//! `z_fused`.

mod params;
mod types;

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use params::{BoundParams, Param, ParamGroup, ParamId, ParamStore};
pub use types::{ActionChunk, Instruction, LatentPair, Observation};

/// Number of flow-time features fed to the action expert.
pub const TIME_FEATURES: usize = 4;

/// Vocabulary sizes of the instruction tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub verbs: usize,
    pub objects: usize,
    pub targets: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Self {
            verbs: 1,
            objects: 3,
            targets: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub channels: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub latent_dim: usize,
    pub proprio_dim: usize,
    pub horizon: usize,
    pub action_dim: usize,
    pub expert_hidden: usize,
    pub euler_steps: usize,
    pub vocab: Vocab,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            image_size: 16,
            patch_size: 4,
            latent_dim: 32,
            proprio_dim: 4,
            horizon: 8,
            action_dim: 3,
            expert_hidden: 64,
            euler_steps: 10,
            vocab: Vocab::default(),
        }
    }
}

impl PolicyConfig {
    pub fn num_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn chunk_len(&self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("latent_dim", self.latent_dim),
            ("proprio_dim", self.proprio_dim),
            ("horizon", self.horizon),
            ("action_dim", self.action_dim),
            ("expert_hidden", self.expert_hidden),
            ("euler_steps", self.euler_steps),
            ("vocab.verbs", self.vocab.verbs),
            ("vocab.objects", self.vocab.objects),
            ("vocab.targets", self.vocab.targets),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::config(format!("policy.{name}"), "must be positive"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "policy.patch_size",
                format!("must divide image_size {}", self.image_size),
            ));
        }
        Ok(())
    }
}

/// Groups that stop training once the base stage is complete. Fixed for the
/// lifetime of a continual run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub frozen_after_base: BTreeSet<ParamGroup>,
}

impl Default for Partition {
    fn default() -> Self {
        Self {
            frozen_after_base: [ParamGroup::Perception, ParamGroup::Instruction]
                .into_iter()
                .collect(),
        }
    }
}

impl Partition {
    pub fn is_trainable(&self, group: ParamGroup, stage: usize) -> bool {
        stage == 0 || !self.frozen_after_base.contains(&group)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct PolicyIds {
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    verb_emb: ParamId,
    object_emb: ParamId,
    target_emb: ParamId,
    w_q: ParamId,
    b_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
}

/// Policy inputs for a batch, already patchified.
#[derive(Clone, Debug)]
pub struct InputBatch {
    pub size: usize,
    /// `[B·P × patch_dim]`
    pub patches: Tensor,
    /// `[B × D_q]`
    pub proprio: Tensor,
    pub verbs: Vec<usize>,
    pub objects: Vec<usize>,
    pub targets: Vec<usize>,
}

impl InputBatch {
    pub fn new(config: &PolicyConfig, items: &[(&Observation, &Instruction)]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::contract("empty input batch"));
        }
        let (p, pd) = (config.num_patches(), config.patch_dim());
        let mut patches = Vec::with_capacity(items.len() * p * pd);
        let mut proprio = Vec::with_capacity(items.len() * config.proprio_dim);
        for (obs, instr) in items {
            obs.validate(config.channels, config.image_size, config.proprio_dim)?;
            check_instruction(config, instr)?;
            patchify_into(config, &obs.image, &mut patches);
            proprio.extend_from_slice(&obs.proprio);
        }
        Ok(Self {
            size: items.len(),
            patches: Tensor::new(vec![items.len() * p, pd], patches)?,
            proprio: Tensor::new(vec![items.len(), config.proprio_dim], proprio)?,
            verbs: items.iter().map(|(_, i)| i.verb).collect(),
            objects: items.iter().map(|(_, i)| i.object).collect(),
            targets: items.iter().map(|(_, i)| i.target).collect(),
        })
    }
}

fn check_instruction(config: &PolicyConfig, instr: &Instruction) -> Result<()> {
    let v = config.vocab;
    if instr.verb >= v.verbs || instr.object >= v.objects || instr.target >= v.targets {
        return Err(Error::Domain(format!(
            "instruction {instr:?} outside vocabulary {v:?}"
        )));
    }
    Ok(())
}

/// Appends the patches of one `C×S×S` image, row-major over the patch grid,
/// each patch flattened as (channel, row, column).
fn patchify_into(config: &PolicyConfig, image: &[f64], out: &mut Vec<f64>) {
    let (s, ps) = (config.image_size, config.patch_size);
    let grid = s / ps;
    for py in 0..grid {
        for px in 0..grid {
            for c in 0..config.channels {
                for dy in 0..ps {
                    let row = (c * s + py * ps + dy) * s + px * ps;
                    out.extend_from_slice(&image[row..row + ps]);
                }
            }
        }
    }
}

/// Flow-time features fed to the action expert.
pub fn time_features(tau: f64) -> [f64; TIME_FEATURES] {
    [
        2.0 * tau - 1.0,
        (PI * tau).sin(),
        (PI * tau).cos(),
        (2.0 * PI * tau).sin(),
    ]
}

/// Latent tensors of a batch on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LatentBatch<'t> {
    /// `[B × d]`
    pub z_v: Var<'t>,
    /// `[B × d]`
    pub z_l: Var<'t>,
    /// `[B × d]`
    pub z_fused: Var<'t>,
    /// `[B × P]`
    pub attn: Var<'t>,
}

impl<'t> LatentBatch<'t> {
    /// Places value-level latents on a tape.
    pub fn from_pairs(tape: &'t Tape, pairs: &[LatentPair], requires_grad: bool) -> Result<Self> {
        let stack = |f: fn(&LatentPair) -> &Vec<f64>| -> Result<Var<'t>> {
            let rows: Vec<Vec<f64>> = pairs.iter().map(|p| f(p).clone()).collect();
            Ok(tape.leaf(Tensor::from_rows(&rows)?, requires_grad))
        };
        if pairs.is_empty() {
            return Err(Error::contract("empty latent batch"));
        }
        Ok(Self {
            z_v: stack(|p| &p.z_v)?,
            z_l: stack(|p| &p.z_l)?,
            z_fused: stack(|p| &p.z_fused)?,
            attn: stack(|p| &p.attn)?,
        })
    }

    pub fn len(&self) -> usize {
        self.z_fused.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Constant copies with no gradient path.
    pub fn detach(&self) -> Self {
        Self {
            z_v: self.z_v.detach(),
            z_l: self.z_l.detach(),
            z_fused: self.z_fused.detach(),
            attn: self.attn.detach(),
        }
    }

    pub fn to_pairs(&self) -> Vec<LatentPair> {
        let (zv, zl, zf, at) = (
            self.z_v.value(),
            self.z_l.value(),
            self.z_fused.value(),
            self.attn.value(),
        );
        (0..self.len())
            .map(|r| LatentPair {
                z_v: zv.row(r).to_vec(),
                z_l: zl.row(r).to_vec(),
                z_fused: zf.row(r).to_vec(),
                attn: at.row(r).to_vec(),
            })
            .collect()
    }
}

/// The toy policy: configuration, parameters and trainable partition.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    config: PolicyConfig,
    partition: Partition,
    params: ParamStore,
    ids: PolicyIds,
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Tensor {
    let limit = gain * (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(&[rows, cols], -limit, limit, rng)
}

fn positional_table(config: &PolicyConfig) -> Tensor {
    let grid = config.image_size / config.patch_size;
    let d = config.latent_dim;
    let mut data = Vec::with_capacity(grid * grid * d);
    for py in 0..grid {
        for px in 0..grid {
            let x = (px as f64 + 0.5) / grid as f64;
            let y = (py as f64 + 0.5) / grid as f64;
            for j in 0..d {
                let freq = (1 + j / 4) as f64 * PI;
                data.push(match j % 4 {
                    0 => (freq * x).sin(),
                    1 => (freq * x).cos(),
                    2 => (freq * y).sin(),
                    _ => (freq * y).cos(),
                });
            }
        }
    }
    Tensor::from_parts(vec![grid * grid, d], data)
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, partition: Partition, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.latent_dim;
        let dq = config.proprio_dim;
        let h = config.expert_hidden;
        let a = config.chunk_len();
        let v = config.vocab;
        let mut ps = ParamStore::new();
        use ParamGroup::*;
        let ids = PolicyIds {
            patch_w: ps.add("perception.patch_w", Perception, glorot(config.patch_dim(), d, 1.0, rng)),
            patch_b: ps.add("perception.patch_b", Perception, Tensor::zeros(&[d])),
            pos: ps.add("perception.pos", Perception, positional_table(&config)),
            verb_emb: ps.add("instruction.verb", Instruction, Tensor::randn(&[v.verbs, d], 0.5, rng)),
            object_emb: ps.add("instruction.object", Instruction, Tensor::randn(&[v.objects, d], 0.5, rng)),
            target_emb: ps.add("instruction.target", Instruction, Tensor::randn(&[v.targets, d], 0.5, rng)),
            w_q: ps.add("fusion.w_q", Fusion, glorot(d + dq, d, 1.0, rng)),
            b_q: ps.add("fusion.b_q", Fusion, Tensor::zeros(&[d])),
            w_k: ps.add("fusion.w_k", Fusion, glorot(d, d, 1.0, rng)),
            w_v: ps.add("fusion.w_v", Fusion, glorot(d, d, 1.0, rng)),
            w_o: ps.add("fusion.w_o", Fusion, glorot(2 * d + dq, d, 1.0, rng)),
            b_o: ps.add("fusion.b_o", Fusion, Tensor::zeros(&[d])),
            w1: ps.add("expert.w1", ActionExpert, glorot(a + TIME_FEATURES + d, h, 1.0, rng)),
            b1: ps.add("expert.b1", ActionExpert, Tensor::zeros(&[h])),
            w2: ps.add("expert.w2", ActionExpert, glorot(h, h, 1.0, rng)),
            b2: ps.add("expert.b2", ActionExpert, Tensor::zeros(&[h])),
            w3: ps.add("expert.w3", ActionExpert, glorot(h, a, 0.5, rng)),
            b3: ps.add("expert.b3", ActionExpert, Tensor::zeros(&[a])),
        };
        Ok(Self {
            config,
            partition,
            params: ps,
            ids,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces all parameter values, e.g. from a checkpoint.
    pub fn load_params(&mut self, store: &ParamStore) -> Result<()> {
        self.params.copy_values_from(store)
    }

    /// Sets every action-expert weight to zero.
    pub fn zero_action_expert(&mut self) {
        for p in self.params.iter_mut() {
            if p.group == ParamGroup::ActionExpert {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
    }

    pub fn is_trainable(&self, group: ParamGroup, stage: usize) -> bool {
        self.partition.is_trainable(group, stage)
    }

    /// Binds parameters with the trainable set of `stage`.
    pub fn bind<'t>(&self, tape: &'t Tape, stage: usize) -> BoundParams<'t> {
        self.params.bind(tape, |g| self.partition.is_trainable(g, stage))
    }

    /// Encodes a batch into fused latents on `tape`.
    pub fn encode_batch<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        input: &InputBatch,
    ) -> Result<LatentBatch<'t>> {
        let c = &self.config;
        let (b, p, d) = (input.size, c.num_patches(), c.latent_dim);
        let ids = &self.ids;

        let patches = tape.constant(input.patches.clone());
        let proprio = tape.constant(input.proprio.clone());
        let tokens = patches
            .matmul(&bound.get(ids.patch_w))?
            .add(&bound.get(ids.patch_b).tile_rows(b * p)?)?;
        let keys = tokens.matmul(&bound.get(ids.w_k))?.reshape(&[b, p, d])?;
        let values = tokens
            .add(&bound.get(ids.pos).tile_rows(b)?)?
            .matmul(&bound.get(ids.w_v))?
            .reshape(&[b, p, d])?;

        let z_l = bound
            .get(ids.verb_emb)
            .select_rows(&input.verbs)?
            .add(&bound.get(ids.object_emb).select_rows(&input.objects)?)?
            .add(&bound.get(ids.target_emb).select_rows(&input.targets)?)?;

        let query = Var::concat(&[z_l, proprio], 1)?
            .matmul(&bound.get(ids.w_q))?
            .add(&bound.get(ids.b_q).tile_rows(b)?)?
            .reshape(&[b, 1, d])?;
        let attn3 = query
            .bmm(&keys, true)?
            .mul_scalar(1.0 / (d as f64).sqrt())?
            .softmax(2)?;
        let z_v = attn3.bmm(&values, false)?.reshape(&[b, d])?;
        let attn = attn3.reshape(&[b, p])?;

        let z_fused = Var::concat(&[z_v, z_l, proprio], 1)?
            .matmul(&bound.get(ids.w_o))?
            .add(&bound.get(ids.b_o).tile_rows(b)?)?
            .tanh()?;
        Ok(LatentBatch {
            z_v,
            z_l,
            z_fused,
            attn,
        })
    }

    /// Action-expert output `[B × H·D_a]` for noised chunks at flow times
    /// `taus`, conditioned on `z_fused`.
    pub fn velocity_batch<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        noised: Var<'t>,
        taus: &[f64],
        z_fused: Var<'t>,
    ) -> Result<Var<'t>> {
        if let Some(t) = taus.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain(format!("flow time {t} outside [0, 1]")));
        }
        let b = taus.len();
        let times: Vec<f64> = taus.iter().flat_map(|&t| time_features(t)).collect();
        let times = tape.constant(Tensor::new(vec![b, TIME_FEATURES], times)?);
        let ids = &self.ids;
        let h1 = Var::concat(&[noised, times, z_fused], 1)?
            .matmul(&bound.get(ids.w1))?
            .add(&bound.get(ids.b1).tile_rows(b)?)?
            .tanh()?;
        let h2 = h1
            .matmul(&bound.get(ids.w2))?
            .add(&bound.get(ids.b2).tile_rows(b)?)?
            .tanh()?;
        h2.matmul(&bound.get(ids.w3))?
            .add(&bound.get(ids.b3).tile_rows(b)?)
    }

    /// Fused latent of one observation and instruction.
    pub fn encode(&self, obs: &Observation, instr: &Instruction) -> Result<LatentPair> {
        let input = InputBatch::new(&self.config, &[(obs, instr)])?;
        let tape = Tape::new();
        let bound = self.params.bind_constant(&tape);
        let latent = self.encode_batch(&tape, &bound, &input)?;
        Ok(latent.to_pairs().remove(0))
    }

    /// Latents of many inputs, evaluated as one batch.
    pub fn encode_many(&self, items: &[(&Observation, &Instruction)]) -> Result<Vec<LatentPair>> {
        let input = InputBatch::new(&self.config, items)?;
        let tape = Tape::new();
        let bound = self.params.bind_constant(&tape);
        Ok(self.encode_batch(&tape, &bound, &input)?.to_pairs())
    }

    /// The action expert's estimate of `ω − a` for one noised chunk.
    pub fn predict_velocity(&self, noised: &ActionChunk, tau: f64, latent: &LatentPair) -> Result<Tensor> {
        let c = &self.config;
        if noised.horizon != c.horizon || noised.action_dim != c.action_dim {
            return Err(Error::shape(
                "predict_velocity",
                format!(
                    "chunk {}x{}, expected {}x{}",
                    noised.horizon, noised.action_dim, c.horizon, c.action_dim
                ),
            ));
        }
        if latent.z_fused.len() != c.latent_dim {
            return Err(Error::shape("predict_velocity", "latent width"));
        }
        let tape = Tape::new();
        let bound = self.params.bind_constant(&tape);
        let x = tape.constant(Tensor::new(vec![1, c.chunk_len()], noised.data.clone())?);
        let z = tape.constant(Tensor::new(vec![1, c.latent_dim], latent.z_fused.clone())?);
        let out = self.velocity_batch(&tape, &bound, x, &[tau], z)?.value();
        out.reshape(&[c.horizon, c.action_dim])
    }

    /// Integrates from Gaussian noise at flow time 0 to 1 with `n_steps`
    /// forward-Euler steps and clamps the result to `[-1, 1]`.
    ///
    /// The expert estimates `ω − a`, the negative of `d a_τ / dτ` along the
    /// interpolant `τ·a + (1 − τ)·ω`, so each step moves against it.
    pub fn sample_actions<R: Rng + ?Sized>(
        &self,
        obs: &Observation,
        instr: &Instruction,
        n_steps: usize,
        rng: &mut R,
    ) -> Result<ActionChunk> {
        let c = &self.config;
        let noise: Vec<f64> = (0..c.chunk_len())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        self.integrate_from(obs, instr, n_steps, noise)
    }

    /// Euler integration from a given initial noise chunk.
    pub fn integrate_from(
        &self,
        obs: &Observation,
        instr: &Instruction,
        n_steps: usize,
        noise: Vec<f64>,
    ) -> Result<ActionChunk> {
        if n_steps == 0 {
            return Err(Error::Domain("n_steps must be at least 1".into()));
        }
        let c = &self.config;
        if noise.len() != c.chunk_len() {
            return Err(Error::shape("integrate_from", "noise length"));
        }
        let input = InputBatch::new(c, &[(obs, instr)])?;
        let tape = Tape::new();
        let bound = self.params.bind_constant(&tape);
        let z = self.encode_batch(&tape, &bound, &input)?.z_fused;
        let dt = 1.0 / n_steps as f64;
        let mut x = Tensor::new(vec![1, c.chunk_len()], noise)?;
        for step in 0..n_steps {
            let tau = step as f64 * dt;
            let xv = tape.constant(x);
            let f = self.velocity_batch(&tape, &bound, xv, &[tau], z)?;
            x = xv.sub(&f.mul_scalar(dt)?)?.value();
        }
        ActionChunk::new(c.horizon, c.action_dim, x.into_data()).map(ActionChunk::clamped)
    }

    /// Frozen deep copy used as the teacher for the next stage.
    pub fn snapshot_teacher(&self) -> Teacher {
        Teacher {
            policy: self.clone(),
        }
    }
}

/// Frozen policy snapshot. It exposes only read access, and all of its
/// parameters bind as constants, so no gradient ever reaches it.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    policy: Policy,
}

impl Teacher {
    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn encode(&self, obs: &Observation, instr: &Instruction) -> Result<LatentPair> {
        self.policy.encode(obs, instr)
    }

    /// Teacher latents for a batch, as constants on `tape`.
    pub fn encode_batch<'t>(&self, tape: &'t Tape, input: &InputBatch) -> Result<LatentBatch<'t>> {
        let bound = self.policy.params.bind_constant(tape);
        self.policy.encode_batch(tape, &bound, input)
    }
}
