//! Training objectives.
//!
//! * flow matching on action chunks ([`flow_matching_loss`]),
//! * replay-anchored contrastive alignment ([`rac_loss`]),
//! * cross-modal mutual-information preservation ([`mi_loss`],
//!   [`mc_loss`], [`cmi_loss`]),
//! * their weighted sum ([`total_loss`]),
//! * the EWC penalty and its Fisher diagonal.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::policy::{BoundParams, LatentBatch, ParamGroup, ParamId, ParamStore, Policy};

/// Negative set of the contrastive denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSet {
    /// Student latent `i` against every teacher anchor in the batch.
    #[default]
    TeacherAnchors,
    /// Student latent `i` against its own anchor and the other student
    /// latents in the batch.
    StudentBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_rac: f64,
    pub lambda_cmi: f64,
    pub temperature: f64,
    pub negatives: NegativeSet,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rac: 0.1,
            lambda_cmi: 0.1,
            temperature: 0.07,
            negatives: NegativeSet::TeacherAnchors,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_rac >= 0.0 && self.lambda_rac.is_finite()) {
            return Err(Error::config("loss.lambda_rac", "must be a finite value >= 0"));
        }
        if !(self.lambda_cmi >= 0.0 && self.lambda_cmi.is_finite()) {
            return Err(Error::config("loss.lambda_cmi", "must be a finite value >= 0"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("loss.temperature", "must be a finite value > 0"));
        }
        Ok(())
    }
}

/// Sizes of the mutual-information estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Projection width `K`; distributions live on `K²` bins.
    pub bins: usize,
    pub hidden: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { bins: 8, hidden: 32 }
    }
}

/// Shared projections `V`, `L` and the joint perceptron.
#[derive(Clone, Debug, PartialEq)]
pub struct MiEstimator {
    config: EstimatorConfig,
    params: ParamStore,
    v_proj: ParamId,
    l_proj: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl MiEstimator {
    pub fn new<R: Rng + ?Sized>(latent_dim: usize, config: EstimatorConfig, rng: &mut R) -> Self {
        let k = config.bins;
        let mut params = ParamStore::new();
        let g = ParamGroup::Estimator;
        let scale = 1.0 / (latent_dim as f64).sqrt();
        let v_proj = params.add("estimator.v_proj", g, Tensor::randn(&[latent_dim, k], scale, rng));
        let l_proj = params.add("estimator.l_proj", g, Tensor::randn(&[latent_dim, k], scale, rng));
        let w1 = params.add(
            "estimator.w1",
            g,
            Tensor::randn(&[2 * k, config.hidden], 1.0 / (2.0 * k as f64).sqrt(), rng),
        );
        let b1 = params.add("estimator.b1", g, Tensor::zeros(&[config.hidden]));
        let w2 = params.add(
            "estimator.w2",
            g,
            Tensor::randn(&[config.hidden, k * k], 1.0 / (config.hidden as f64).sqrt(), rng),
        );
        let b2 = params.add("estimator.b2", g, Tensor::zeros(&[k * k]));
        Self {
            config,
            params,
            v_proj,
            l_proj,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn bins(&self) -> usize {
        self.config.bins
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundEstimator<'t, '_> {
        BoundEstimator {
            est: self,
            vars: self.params.bind(tape, |_| trainable),
        }
    }

    /// Wraps externally bound variables laid out like [`Self::params`].
    pub fn with_vars<'t>(&self, vars: BoundParams<'t>) -> Result<BoundEstimator<'t, '_>> {
        if vars.vars().len() != self.params.len() {
            return Err(Error::contract("estimator variable count differs"));
        }
        Ok(BoundEstimator { est: self, vars })
    }

    /// Zeroes the joint perceptron so that the joint distribution is uniform.
    pub fn zero_joint_mlp(&mut self) {
        for id in [self.w1, self.b1, self.w2, self.b2] {
            let shape = self.params.get(id).shape().to_vec();
            *self.params.get_mut(id) = Tensor::zeros(&shape);
        }
    }

    /// Overwrites the projection matrices.
    pub fn set_projections(&mut self, v_proj: Tensor, l_proj: Tensor) -> Result<()> {
        if v_proj.shape() != self.params.get(self.v_proj).shape()
            || l_proj.shape() != self.params.get(self.l_proj).shape()
        {
            return Err(Error::shape("set_projections", "projection shape"));
        }
        *self.params.get_mut(self.v_proj) = v_proj;
        *self.params.get_mut(self.l_proj) = l_proj;
        Ok(())
    }
}

/// Estimator parameters placed on a tape.
pub struct BoundEstimator<'t, 'e> {
    est: &'e MiEstimator,
    vars: BoundParams<'t>,
}

impl<'t> BoundEstimator<'t, '_> {
    pub fn vars(&self) -> &BoundParams<'t> {
        &self.vars
    }

    fn get(&self, id: ParamId) -> Var<'t> {
        self.vars.get(id)
    }
}

/// Replay-anchored contrastive loss.
///
/// With `v` the L2-normalised student latents and `u` the normalised teacher
/// anchors, the per-row loss is
/// `−log exp(⟨v_i, u_i⟩/τ) / Σ_j exp(⟨v_i, u_j⟩/τ)` (or with `⟨v_i, v_j⟩` for
/// `j ≠ i` under [`NegativeSet::StudentBatch`]), averaged over rows where
/// `replay_mask` is set. The anchors carry no gradient.
pub fn rac_loss<'t>(
    student: Var<'t>,
    anchors: Var<'t>,
    replay_mask: &[bool],
    temperature: f64,
    negatives: NegativeSet,
) -> Result<Var<'t>> {
    let shape = student.shape();
    if shape.len() != 2 || anchors.shape() != shape {
        return Err(Error::shape(
            "rac_loss",
            format!("student {shape:?} vs anchors {:?}", anchors.shape()),
        ));
    }
    let b = shape[0];
    if b < 2 {
        return Err(Error::contract("rac_loss needs a batch of at least 2"));
    }
    if replay_mask.len() != b {
        return Err(Error::contract("replay mask length differs from batch"));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Domain("temperature must be positive".into()));
    }
    let rows: Vec<usize> = (0..b).filter(|&i| replay_mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::contract("rac_loss needs at least one replayed sample"));
    }
    let tape = student.tape();
    let v = student.l2_normalize_rows()?;
    let u = anchors.detach().l2_normalize_rows()?;
    let cross = v.matmul(&u.transpose()?)?;
    let logits = match negatives {
        NegativeSet::TeacherAnchors => cross,
        NegativeSet::StudentBatch => {
            let eye: Vec<f64> = (0..b * b)
                .map(|k| if k / b == k % b { 1.0 } else { 0.0 })
                .collect();
            let off: Vec<f64> = eye.iter().map(|e| 1.0 - e).collect();
            let eye = tape.constant(Tensor::new(vec![b, b], eye)?);
            let off = tape.constant(Tensor::new(vec![b, b], off)?);
            let own = v.matmul(&v.transpose()?)?;
            cross.mul(&eye)?.add(&own.mul(&off)?)?
        }
    };
    let log_probs = logits.mul_scalar(1.0 / temperature)?.log_softmax(1)?;
    let picked: Vec<f64> = rows
        .iter()
        .flat_map(|&i| (0..b).map(move |j| if i == j { 1.0 } else { 0.0 }))
        .collect();
    let picked = tape.constant(Tensor::new(vec![rows.len(), b], picked)?);
    log_probs
        .select_rows(&rows)?
        .mul(&picked)?
        .sum()?
        .mul_scalar(-1.0 / rows.len() as f64)
}

/// Per-sample `F(z) = softmax(flatten((z_v·V)(z_l·L)ᵀ))` over `K²` bins.
pub fn project_f<'t>(z_v: Var<'t>, z_l: Var<'t>, est: &BoundEstimator<'t, '_>) -> Result<Var<'t>> {
    let v = z_v.matmul(&est.get(est.est.v_proj))?;
    let l = z_l.matmul(&est.get(est.est.l_proj))?;
    v.row_outer(&l)?.softmax(1)
}

/// Batch-mean marginal of per-sample `K²` distributions.
pub fn marginal<'t>(per_sample: Var<'t>) -> Result<Var<'t>> {
    per_sample.mean_axis(0)
}

/// Joint distribution over `K²` bins from the concatenated projections of
/// the teacher and student fused latents, passed through the joint
/// perceptron. The teacher side is detached.
pub fn joint_distribution<'t>(
    old_fused: Var<'t>,
    new_fused: Var<'t>,
    est: &BoundEstimator<'t, '_>,
) -> Result<Var<'t>> {
    let e = est.est;
    let b = new_fused.shape()[0];
    let old_side = old_fused.detach().matmul(&est.get(e.v_proj))?;
    let new_side = new_fused.matmul(&est.get(e.l_proj))?;
    let hidden = Var::concat(&[old_side, new_side], 1)?
        .matmul(&est.get(e.w1))?
        .add(&est.get(e.b1).tile_rows(b)?)?
        .tanh()?;
    hidden
        .matmul(&est.get(e.w2))?
        .add(&est.get(e.b2).tile_rows(b)?)?
        .softmax(1)
}

/// Product measure on `K×K` built from the row marginal of `p_old` and the
/// column marginal of `p_new`, flattened to `K²`.
pub fn product_of_marginals<'t>(p_old: Var<'t>, p_new: Var<'t>, bins: usize) -> Result<Var<'t>> {
    let rows = p_old.reshape(&[bins, bins])?.sum_axis(1)?.reshape(&[1, bins])?;
    let cols = p_new.reshape(&[bins, bins])?.sum_axis(0)?.reshape(&[1, bins])?;
    rows.row_outer(&cols)?.reshape(&[bins * bins])
}

fn check_batches(old: &LatentBatch<'_>, new: &LatentBatch<'_>) -> Result<usize> {
    let (a, b) = (old.len(), new.len());
    if a != b {
        return Err(Error::contract(format!("batch length mismatch: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::contract("empty batch"));
    }
    Ok(a)
}

fn batch_marginals<'t>(
    old: &LatentBatch<'t>,
    new: &LatentBatch<'t>,
    est: &BoundEstimator<'t, '_>,
) -> Result<(Var<'t>, Var<'t>)> {
    let p_old = marginal(project_f(old.z_v.detach(), old.z_l.detach(), est)?)?;
    let p_new = marginal(project_f(new.z_v, new.z_l, est)?)?;
    Ok((p_old, p_new))
}

fn mi_from_marginals<'t>(
    old: &LatentBatch<'t>,
    new: &LatentBatch<'t>,
    p_old: Var<'t>,
    p_new: Var<'t>,
    est: &BoundEstimator<'t, '_>,
) -> Result<Var<'t>> {
    let b = new.len();
    let joint = joint_distribution(old.z_fused, new.z_fused, est)?;
    let product = product_of_marginals(p_old, p_new, est.est.bins())?.tile_rows(b)?;
    joint.kl_divergence(&product)?.mul_scalar(-1.0 / b as f64)
}

/// Negative mutual-information estimate between teacher and student
/// latents: `−mean_b KL(joint_b ‖ p_old ⊗ p_new)`.
pub fn mi_loss<'t>(
    old: &LatentBatch<'t>,
    new: &LatentBatch<'t>,
    est: &BoundEstimator<'t, '_>,
) -> Result<Var<'t>> {
    check_batches(old, new)?;
    let (p_old, p_new) = batch_marginals(old, new, est)?;
    mi_from_marginals(old, new, p_old, p_new, est)
}

/// Marginal consistency `KL(p_new ‖ p_old)` between batch-mean projections.
pub fn mc_loss<'t>(
    old: &LatentBatch<'t>,
    new: &LatentBatch<'t>,
    est: &BoundEstimator<'t, '_>,
) -> Result<Var<'t>> {
    check_batches(old, new)?;
    let (p_old, p_new) = batch_marginals(old, new, est)?;
    p_new.kl_divergence(&p_old)
}

/// The two structural terms, sharing the marginal computation.
#[derive(Clone, Copy, Debug)]
pub struct CmiTerms<'t> {
    pub mi: Var<'t>,
    pub mc: Var<'t>,
    pub total: Var<'t>,
}

pub fn cmi_terms<'t>(
    old: &LatentBatch<'t>,
    new: &LatentBatch<'t>,
    est: &BoundEstimator<'t, '_>,
) -> Result<CmiTerms<'t>> {
    check_batches(old, new)?;
    let (p_old, p_new) = batch_marginals(old, new, est)?;
    let mi = mi_from_marginals(old, new, p_old, p_new, est)?;
    let mc = p_new.kl_divergence(&p_old)?;
    Ok(CmiTerms {
        mi,
        mc,
        total: mi.add(&mc)?,
    })
}

/// `mi_loss + mc_loss`.
pub fn cmi_loss<'t>(
    old: &LatentBatch<'t>,
    new: &LatentBatch<'t>,
    est: &BoundEstimator<'t, '_>,
) -> Result<Var<'t>> {
    Ok(cmi_terms(old, new, est)?.total)
}

/// Noise and flow times for one flow-matching evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowDraws {
    /// `[B × H·D_a]` standard normal noise `ω`.
    pub noise: Tensor,
    /// Per-sample flow time in `[0, 1]`.
    pub taus: Vec<f64>,
}

impl FlowDraws {
    pub fn sample<R: Rng + ?Sized>(batch: usize, chunk_len: usize, rng: &mut R) -> Self {
        let noise = (0..batch * chunk_len)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let taus = (0..batch).map(|_| rng.gen_range(0.0..=1.0)).collect();
        Self {
            noise: Tensor::from_parts(vec![batch, chunk_len], noise),
            taus,
        }
    }
}

/// Noised chunks `τ·a + (1 − τ)·ω` and regression targets `ω − a`.
pub fn flow_targets(chunks: &Tensor, draws: &FlowDraws) -> Result<(Tensor, Tensor)> {
    if chunks.shape() != draws.noise.shape() || chunks.rows() != draws.taus.len() {
        return Err(Error::shape(
            "flow_targets",
            format!("chunks {:?} vs noise {:?}", chunks.shape(), draws.noise.shape()),
        ));
    }
    let cols = chunks.cols();
    let mut noised = Vec::with_capacity(chunks.len());
    let mut target = Vec::with_capacity(chunks.len());
    for (r, &tau) in draws.taus.iter().enumerate() {
        for (a, w) in chunks.row(r).iter().zip(draws.noise.row(r)) {
            noised.push(tau * a + (1.0 - tau) * w);
            target.push(w - a);
        }
    }
    let shape = vec![chunks.rows(), cols];
    Ok((Tensor::new(shape.clone(), noised)?, Tensor::new(shape, target)?))
}

/// Flow-matching regression: mean over entries of
/// `(ω − a − f(τ·a + (1 − τ)·ω, τ, z))²`.
pub fn flow_matching_loss<'t>(
    policy: &Policy,
    bound: &BoundParams<'t>,
    z_fused: Var<'t>,
    chunks: &Tensor,
    draws: &FlowDraws,
) -> Result<Var<'t>> {
    let tape = z_fused.tape();
    let (noised, target) = flow_targets(chunks, draws)?;
    let prediction = policy.velocity_batch(tape, bound, tape.constant(noised), &draws.taus, z_fused)?;
    prediction.mse(&tape.constant(target))
}

/// `L_CL + λ_rac·L_RAC + λ_cmi·L_CMI`; absent terms contribute nothing.
pub fn total_loss<'t>(
    flow: Var<'t>,
    rac: Option<Var<'t>>,
    cmi: Option<Var<'t>>,
    weights: &LossWeights,
) -> Result<Var<'t>> {
    let mut total = flow;
    if let Some(rac) = rac {
        total = total.add(&rac.mul_scalar(weights.lambda_rac)?)?;
    }
    if let Some(cmi) = cmi {
        total = total.add(&cmi.mul_scalar(weights.lambda_cmi)?)?;
    }
    Ok(total)
}

/// Consolidation anchor of one completed stage: parameter values and their
/// Fisher diagonal (`None` for parameters that are not penalised).
#[derive(Clone, Debug, PartialEq)]
pub struct EwcAnchor {
    pub params: Vec<Tensor>,
    pub fisher: Vec<Option<Tensor>>,
}

/// Averages squared per-sample gradients over `n_samples` draws.
///
/// `sample_grads(i)` returns the per-parameter gradients of the `i`-th draw.
pub fn fisher_diagonal_with<F>(n_samples: usize, mut sample_grads: F) -> Result<Vec<Option<Tensor>>>
where
    F: FnMut(usize) -> Result<Vec<Option<Tensor>>>,
{
    if n_samples == 0 {
        return Err(Error::contract("fisher_diagonal needs n_samples >= 1"));
    }
    let mut acc: Vec<Option<Vec<f64>>> = Vec::new();
    for i in 0..n_samples {
        let grads = sample_grads(i)?;
        if acc.is_empty() {
            acc = vec![None; grads.len()];
        }
        for (slot, g) in acc.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            let sq = g.data().iter().map(|v| v * v);
            match slot {
                Some(a) => a.iter_mut().zip(sq).for_each(|(a, s)| *a += s),
                None => *slot = Some(sq.collect()),
            }
        }
    }
    let scale = 1.0 / n_samples as f64;
    let shapes = sample_shapes(&acc);
    acc.into_iter()
        .zip(shapes)
        .map(|(a, shape)| match (a, shape) {
            (Some(a), Some(shape)) => {
                Tensor::new(shape, a.into_iter().map(|v| v * scale).collect()).map(Some)
            }
            _ => Ok(None),
        })
        .collect()
}

fn sample_shapes(acc: &[Option<Vec<f64>>]) -> Vec<Option<Vec<usize>>> {
    acc.iter().map(|a| a.as_ref().map(|v| vec![v.len()])).collect()
}

/// Empirical Fisher diagonal of the flow-matching loss for the parameters
/// trainable at `stage`, from `n_samples` single-sample gradients.
pub fn fisher_diagonal<R: Rng + ?Sized>(
    policy: &Policy,
    stage: usize,
    dataset: &[crate::suite::Step],
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<Option<Tensor>>> {
    if dataset.is_empty() {
        return Err(Error::contract("fisher_diagonal needs a nonempty dataset"));
    }
    let config = policy.config().clone();
    let flat = fisher_diagonal_with(n_samples, |_| {
        let step = &dataset[rng.gen_range(0..dataset.len())];
        let input = crate::policy::InputBatch::new(&config, &[(&step.obs, &step.instr)])?;
        let chunks = Tensor::new(vec![1, config.chunk_len()], step.chunk.data.clone())?;
        let draws = FlowDraws::sample(1, config.chunk_len(), rng);
        let tape = Tape::new();
        let bound = policy.bind(&tape, stage);
        let latent = policy.encode_batch(&tape, &bound, &input)?;
        flow_matching_loss(policy, &bound, latent.z_fused, &chunks, &draws)?.backward()?;
        Ok(policy.params().collect_grads(&bound))
    })?;
    flat.into_iter()
        .zip(policy.params().iter())
        .map(|(f, p)| f.map(|f| f.reshape(p.value.shape())).transpose())
        .collect()
}

/// `(λ/2)·Σ_anchors Σ_i F_i (θ_i − θ*_i)²` over parameters with a Fisher
/// entry.
pub fn ewc_penalty<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    anchors: &[EwcAnchor],
    lambda: f64,
) -> Result<Var<'t>> {
    let mut total = tape.constant(Tensor::scalar(0.0)?);
    for anchor in anchors {
        if anchor.params.len() != bound.vars().len() || anchor.fisher.len() != bound.vars().len() {
            return Err(Error::contract("EWC anchor layout differs from parameters"));
        }
        for ((var, star), fisher) in bound.vars().iter().zip(&anchor.params).zip(&anchor.fisher) {
            let Some(fisher) = fisher else { continue };
            let diff = var.sub(&tape.constant(star.clone()))?;
            let term = diff.square()?.mul(&tape.constant(fisher.clone()))?.sum()?;
            total = total.add(&term)?;
        }
    }
    total.mul_scalar(lambda / 2.0)
}

#[cfg(test)]
mod tests;
