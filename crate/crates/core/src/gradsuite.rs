//! Finite-difference checks for every primitive and every loss, on random
//! instances with all dimensions at most 8.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::{analytic_gradients, compare, numeric_gradients, GradCheck};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::losses::{
    cmi_loss, ewc_penalty, flow_matching_loss, joint_distribution, mc_loss, mi_loss, project_f,
    rac_loss, total_loss, EstimatorConfig, EwcAnchor, FlowDraws, LossWeights, MiEstimator,
    NegativeSet,
};
use crate::policy::{BoundParams, Instruction, LatentBatch, Observation, Partition, Policy, PolicyConfig, Vocab};

/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-4;

type CaseFn = fn(&mut ChaCha8Rng, bool) -> Result<GradCheck>;

/// One named gradient check. `run` draws a fresh random instance.
#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    func: CaseFn,
}

impl GradCase {
    pub fn run(&self, rng: &mut ChaCha8Rng) -> Result<GradCheck> {
        (self.func)(rng, false)
    }

    /// Runs with one analytic gradient entry scaled by 1.01.
    pub fn run_corrupted(&self, rng: &mut ChaCha8Rng) -> Result<GradCheck> {
        (self.func)(rng, true)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
}

fn check<F>(f: F, inputs: &[Tensor], corrupt: bool) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut analytic = analytic_gradients(&f, inputs)?;
    if corrupt {
        let (i, j) = analytic
            .iter()
            .enumerate()
            .flat_map(|(i, t)| t.data().iter().enumerate().map(move |(j, v)| (i, j, v.abs())))
            .max_by(|a, b| a.2.total_cmp(&b.2))
            .map(|(i, j, _)| (i, j))
            .unwrap_or((0, 0));
        analytic[i].data_mut()[j] *= 1.01;
    }
    let numeric = numeric_gradients(&f, inputs)?;
    Ok(compare(&analytic, &numeric))
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 0.5, 2.0, rng)
}

/// Entries bounded away from zero, for kinked ops.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(shape, 0.1, 1.5, rng);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(2..=6), rng.gen_range(2..=6))
}

/// Reduces any output to a scalar by a fixed random weighting, so that ops
/// whose plain sum is constant still get a nontrivial gradient.
fn weighted<'t>(out: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    out.mul(&out.tape().constant(w.clone()))?.sum()
}

macro_rules! unary_case {
    ($name:literal, $gen:ident, |$x:ident| $body:expr) => {
        GradCase {
            name: $name,
            func: |rng, corrupt| {
                let (m, n) = dims(rng);
                let x = $gen(&[m, n], rng);
                let w = randn(&[m, n], rng);
                check(
                    move |_, v| {
                        let $x = v[0];
                        weighted($body?, &w)
                    },
                    &[x],
                    corrupt,
                )
            },
        }
    };
}

macro_rules! binary_case {
    ($name:literal, $gen_a:ident, $gen_b:ident, |$a:ident, $b:ident| $body:expr) => {
        GradCase {
            name: $name,
            func: |rng, corrupt| {
                let (m, n) = dims(rng);
                let a = $gen_a(&[m, n], rng);
                let b = $gen_b(&[m, n], rng);
                let w = randn(&[m, n], rng);
                check(
                    move |_, v| {
                        let ($a, $b) = (v[0], v[1]);
                        weighted($body?, &w)
                    },
                    &[a, b],
                    corrupt,
                )
            },
        }
    };
}

/// Checks for every differentiable tape primitive.
pub fn primitive_cases() -> Vec<GradCase> {
    vec![
        binary_case!("add", randn, randn, |a, b| a.add(&b)),
        binary_case!("sub", randn, randn, |a, b| a.sub(&b)),
        binary_case!("mul", randn, randn, |a, b| a.mul(&b)),
        binary_case!("div", randn, positive, |a, b| a.div(&b)),
        unary_case!("add_scalar", randn, |x| x.add_scalar(0.7)),
        unary_case!("mul_scalar", randn, |x| x.mul_scalar(-1.3)),
        unary_case!("neg", randn, |x| x.neg()),
        unary_case!("exp", randn, |x| x.exp()),
        unary_case!("log", positive, |x| x.log()),
        unary_case!("tanh", randn, |x| x.tanh()),
        unary_case!("relu", off_zero, |x| x.relu()),
        unary_case!("square", randn, |x| x.square()),
        unary_case!("softmax_rows", randn, |x| x.softmax(1)),
        unary_case!("softmax_cols", randn, |x| x.softmax(0)),
        unary_case!("log_softmax", randn, |x| x.log_softmax(1)),
        unary_case!("l2_normalize_rows", off_zero, |x| x.l2_normalize_rows()),
        unary_case!("transpose", randn, |x| x.transpose()?.transpose()),
        GradCase {
            name: "sum",
            func: |rng, corrupt| {
                let (m, n) = dims(rng);
                let x = randn(&[m, n], rng);
                check(|_, v| v[0].square()?.sum(), &[x], corrupt)
            },
        },
        GradCase {
            name: "mean",
            func: |rng, corrupt| {
                let (m, n) = dims(rng);
                let x = randn(&[m, n], rng);
                check(|_, v| v[0].square()?.mean(), &[x], corrupt)
            },
        },
        GradCase {
            name: "sum_axis",
            func: |rng, corrupt| {
                let (m, n) = dims(rng);
                let x = randn(&[m, n], rng);
                let w0 = randn(&[n], rng);
                let w1 = randn(&[m], rng);
                check(
                    move |_, v| {
                        weighted(v[0].sum_axis(0)?, &w0)?.add(&weighted(v[0].sum_axis(1)?, &w1)?)
                    },
                    &[x],
                    corrupt,
                )
            },
        },
        GradCase {
            name: "mean_axis",
            func: |rng, corrupt| {
                let (m, n) = dims(rng);
                let x = randn(&[m, n], rng);
                let w = randn(&[n], rng);
                check(move |_, v| weighted(v[0].mean_axis(0)?, &w), &[x], corrupt)
            },
        },
        GradCase {
            name: "matmul",
            func: |rng, corrupt| {
                let (m, k) = dims(rng);
                let n = rng.gen_range(1..=6);
                let a = randn(&[m, k], rng);
                let b = randn(&[k, n], rng);
                let w = randn(&[m, n], rng);
                check(move |_, v| weighted(v[0].matmul(&v[1])?, &w), &[a, b], corrupt)
            },
        },
        GradCase {
            name: "bmm",
            func: |rng, corrupt| {
                let (bt, m) = dims(rng);
                let (k, n) = dims(rng);
                let a = randn(&[bt, m, k], rng);
                let b = randn(&[bt, k, n], rng);
                let bt_ = randn(&[bt, n, k], rng);
                let w = randn(&[bt, m, n], rng);
                check(
                    move |_, v| {
                        let plain = weighted(v[0].bmm(&v[1], false)?, &w)?;
                        let trans = weighted(v[0].bmm(&v[2], true)?, &w)?;
                        plain.add(&trans)
                    },
                    &[a, b, bt_],
                    corrupt,
                )
            },
        },
        GradCase {
            name: "reshape",
            func: |rng, corrupt| {
                let (m, n) = dims(rng);
                let x = randn(&[m, n], rng);
                let w = randn(&[n, m], rng);
                check(move |_, v| weighted(v[0].reshape(&[n, m])?, &w), &[x], corrupt)
            },
        },
        GradCase {
            name: "concat",
            func: |rng, corrupt| {
                let (m, n) = dims(rng);
                let a = randn(&[m, n], rng);
                let b = randn(&[m, n], rng);
                let w0 = randn(&[2 * m, n], rng);
                let w1 = randn(&[m, 2 * n], rng);
                check(
                    move |_, v| {
                        let rows = weighted(Var::concat(&[v[0], v[1]], 0)?, &w0)?;
                        let cols = weighted(Var::concat(&[v[0].square()?, v[1]], 1)?, &w1)?;
                        rows.add(&cols)
                    },
                    &[a, b],
                    corrupt,
                )
            },
        },
        GradCase {
            name: "tile_rows",
            func: |rng, corrupt| {
                let (m, n) = dims(rng);
                let x = randn(&[n], rng);
                let w = randn(&[m, n], rng);
                check(move |_, v| weighted(v[0].tile_rows(m)?, &w), &[x], corrupt)
            },
        },
        GradCase {
            name: "select_rows",
            func: |rng, corrupt| {
                let (m, n) = dims(rng);
                let x = randn(&[m, n], rng);
                let rows: Vec<usize> = (0..5).map(|_| rng.gen_range(0..m)).collect();
                let w = randn(&[5, n], rng);
                check(move |_, v| weighted(v[0].select_rows(&rows)?, &w), &[x], corrupt)
            },
        },
        GradCase {
            name: "row_outer",
            func: |rng, corrupt| {
                let b = rng.gen_range(1..=4);
                let (k, m) = (rng.gen_range(1..=3), rng.gen_range(1..=2));
                let x = randn(&[b, k], rng);
                let y = randn(&[b, m], rng);
                let w = randn(&[b, k * m], rng);
                check(move |_, v| weighted(v[0].row_outer(&v[1])?, &w), &[x, y], corrupt)
            },
        },
        GradCase {
            name: "kl_divergence",
            func: |rng, corrupt| {
                let (m, n) = dims(rng);
                let x = randn(&[m, n], rng);
                let y = randn(&[m, n], rng);
                let a = randn(&[n], rng);
                let b = randn(&[n], rng);
                check(
                    |_, v| {
                        let rows = v[0].softmax(1)?.kl_divergence(&v[1].softmax(1)?)?;
                        let flat = v[2].softmax(0)?.kl_divergence(&v[3].softmax(0)?)?;
                        rows.add(&flat)
                    },
                    &[x, y, a, b],
                    corrupt,
                )
            },
        },
        GradCase {
            name: "mse",
            func: |rng, corrupt| {
                let (m, n) = dims(rng);
                let a = randn(&[m, n], rng);
                let b = randn(&[m, n], rng);
                check(|_, v| v[0].mse(&v[1]), &[a, b], corrupt)
            },
        },
    ]
}

const LATENT: usize = 6;
const BATCH: usize = 4;

fn small_estimator(rng: &mut ChaCha8Rng) -> MiEstimator {
    MiEstimator::new(LATENT, EstimatorConfig { bins: 2, hidden: 5 }, rng)
}

fn latents(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    (0..3).map(|_| randn(&[BATCH, LATENT], rng)).collect()
}

fn attn_placeholder<'t>(tape: &'t Tape) -> Var<'t> {
    tape.constant(Tensor::filled(&[BATCH, 2], 0.5))
}

fn batch_of<'t>(tape: &'t Tape, v: &[Var<'t>]) -> Result<LatentBatch<'t>> {
    Ok(LatentBatch {
        z_v: v[0],
        z_l: v[1],
        z_fused: v[2].tanh()?,
        attn: attn_placeholder(tape),
    })
}

/// Estimator params followed by the student's `z_v`, `z_l`, `z_fused`; the
/// teacher latents are fixed.
fn estimator_inputs(rng: &mut ChaCha8Rng) -> (MiEstimator, Vec<Tensor>, Vec<Tensor>) {
    let est = small_estimator(rng);
    let mut inputs: Vec<Tensor> = est.params().iter().map(|p| p.value.clone()).collect();
    inputs.extend(latents(rng));
    (est, inputs, latents(rng))
}

fn structural_case(
    rng: &mut ChaCha8Rng,
    corrupt: bool,
    loss: for<'t> fn(&LatentBatch<'t>, &LatentBatch<'t>, &crate::losses::BoundEstimator<'t, '_>) -> Result<Var<'t>>,
) -> Result<GradCheck> {
    let (est, inputs, old) = estimator_inputs(rng);
    let np = est.params().len();
    check(
        move |tape, v| {
            let bound = est.with_vars(BoundParams::from_vars(v[..np].to_vec()))?;
            let old_vars: Vec<Var<'_>> = old.iter().map(|t| tape.constant(t.clone())).collect();
            let old = batch_of(tape, &old_vars)?;
            let new = batch_of(tape, &v[np..])?;
            loss(&old, &new, &bound)
        },
        &inputs,
        corrupt,
    )
}

/// Policy small enough that every weight dimension is at most 8.
pub fn tiny_policy(rng: &mut ChaCha8Rng) -> Result<Policy> {
    let config = PolicyConfig {
        channels: 1,
        image_size: 4,
        patch_size: 2,
        latent_dim: 2,
        proprio_dim: 4,
        horizon: 1,
        action_dim: 2,
        expert_hidden: 8,
        euler_steps: 4,
        vocab: Vocab {
            verbs: 1,
            objects: 2,
            targets: 2,
        },
    };
    Policy::new(config, Partition::default(), rng)
}

fn tiny_batch(policy: &Policy, n: usize, rng: &mut ChaCha8Rng) -> Result<(crate::policy::InputBatch, Tensor)> {
    let c = policy.config();
    let items: Vec<(Observation, Instruction)> = (0..n)
        .map(|_| {
            let obs = Observation {
                image: (0..c.channels * c.image_size * c.image_size)
                    .map(|_| rng.gen_range(0.0..1.0))
                    .collect(),
                proprio: (0..c.proprio_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            };
            let instr = Instruction {
                verb: 0,
                object: rng.gen_range(0..c.vocab.objects),
                target: rng.gen_range(0..c.vocab.targets),
            };
            (obs, instr)
        })
        .collect();
    let refs: Vec<(&Observation, &Instruction)> = items.iter().map(|(o, i)| (o, i)).collect();
    let input = crate::policy::InputBatch::new(c, &refs)?;
    let chunks = Tensor::uniform(&[n, c.chunk_len()], -1.0, 1.0, rng);
    Ok((input, chunks))
}

fn policy_inputs(policy: &Policy) -> Vec<Tensor> {
    policy.params().iter().map(|p| p.value.clone()).collect()
}

/// Checks for every loss, taken with respect to all of its trainable inputs.
pub fn loss_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "rac_loss",
            func: |rng, corrupt| {
                let student = randn(&[BATCH + 1, LATENT], rng);
                let anchors = randn(&[BATCH + 1, LATENT], rng);
                let mask: Vec<bool> = (0..=BATCH).map(|i| i % 2 == 0).collect();
                check(
                    move |tape, v| {
                        let anchors = tape.constant(anchors.clone());
                        rac_loss(v[0], anchors, &mask, 0.5, NegativeSet::TeacherAnchors)
                    },
                    &[student],
                    corrupt,
                )
            },
        },
        GradCase {
            name: "rac_loss_student_negatives",
            func: |rng, corrupt| {
                let student = randn(&[BATCH + 1, LATENT], rng);
                let anchors = randn(&[BATCH + 1, LATENT], rng);
                let mask: Vec<bool> = (0..=BATCH).map(|i| i != 1).collect();
                check(
                    move |tape, v| {
                        let anchors = tape.constant(anchors.clone());
                        rac_loss(v[0], anchors, &mask, 0.5, NegativeSet::StudentBatch)
                    },
                    &[student],
                    corrupt,
                )
            },
        },
        GradCase {
            name: "project_f",
            func: |rng, corrupt| {
                let (est, inputs, _) = estimator_inputs(rng);
                let np = est.params().len();
                let w = randn(&[BATCH, 4], rng);
                check(
                    move |_, v| {
                        let bound = est.with_vars(BoundParams::from_vars(v[..np].to_vec()))?;
                        weighted(project_f(v[np], v[np + 1], &bound)?, &w)
                    },
                    &inputs,
                    corrupt,
                )
            },
        },
        GradCase {
            name: "joint_distribution",
            func: |rng, corrupt| {
                let (est, inputs, old) = estimator_inputs(rng);
                let np = est.params().len();
                let w = randn(&[BATCH, 4], rng);
                check(
                    move |tape, v| {
                        let bound = est.with_vars(BoundParams::from_vars(v[..np].to_vec()))?;
                        let old = tape.constant(old[2].clone());
                        weighted(joint_distribution(old, v[np + 2], &bound)?, &w)
                    },
                    &inputs,
                    corrupt,
                )
            },
        },
        GradCase {
            name: "mi_loss",
            func: |rng, corrupt| structural_case(rng, corrupt, mi_loss),
        },
        GradCase {
            name: "mc_loss",
            func: |rng, corrupt| structural_case(rng, corrupt, mc_loss),
        },
        GradCase {
            name: "cmi_loss",
            func: |rng, corrupt| structural_case(rng, corrupt, cmi_loss),
        },
        GradCase {
            name: "flow_matching_loss",
            func: |rng, corrupt| {
                let policy = tiny_policy(rng)?;
                let (input, chunks) = tiny_batch(&policy, 3, rng)?;
                let draws = FlowDraws::sample(3, policy.config().chunk_len(), rng);
                let inputs = policy_inputs(&policy);
                check(
                    move |tape, v| {
                        let bound = BoundParams::from_vars(v.to_vec());
                        let latent = policy.encode_batch(tape, &bound, &input)?;
                        flow_matching_loss(&policy, &bound, latent.z_fused, &chunks, &draws)
                    },
                    &inputs,
                    corrupt,
                )
            },
        },
        GradCase {
            name: "total_loss",
            func: |rng, corrupt| {
                let policy = tiny_policy(rng)?;
                let teacher = tiny_policy(rng)?.snapshot_teacher();
                let est = MiEstimator::new(2, EstimatorConfig { bins: 2, hidden: 5 }, rng);
                let (input, chunks) = tiny_batch(&policy, 3, rng)?;
                let draws = FlowDraws::sample(3, policy.config().chunk_len(), rng);
                let mut inputs = policy_inputs(&policy);
                let np = inputs.len();
                inputs.extend(est.params().iter().map(|p| p.value.clone()));
                let weights = LossWeights {
                    lambda_rac: 0.3,
                    lambda_cmi: 0.7,
                    temperature: 0.5,
                    negatives: NegativeSet::TeacherAnchors,
                };
                check(
                    move |tape, v| {
                        let bound = BoundParams::from_vars(v[..np].to_vec());
                        let est_bound = est.with_vars(BoundParams::from_vars(v[np..].to_vec()))?;
                        let new = policy.encode_batch(tape, &bound, &input)?;
                        let old = teacher.encode_batch(tape, &input)?;
                        let flow = flow_matching_loss(&policy, &bound, new.z_fused, &chunks, &draws)?;
                        let rac = rac_loss(new.z_fused, old.z_fused, &[true, false, true], 0.5, weights.negatives)?;
                        let cmi = cmi_loss(&old, &new, &est_bound)?;
                        total_loss(flow, Some(rac), Some(cmi), &weights)
                    },
                    &inputs,
                    corrupt,
                )
            },
        },
        GradCase {
            name: "ewc_penalty",
            func: |rng, corrupt| {
                let (m, n) = dims(rng);
                let params = vec![randn(&[m, n], rng), randn(&[n], rng)];
                let anchors: Vec<EwcAnchor> = (0..2)
                    .map(|_| EwcAnchor {
                        params: params.iter().map(|p| randn(p.shape(), rng)).collect(),
                        fisher: vec![Some(positive(&[m, n], rng)), Some(positive(&[n], rng))],
                    })
                    .collect();
                check(
                    move |tape, v| ewc_penalty(tape, &BoundParams::from_vars(v.to_vec()), &anchors, 3.0),
                    &params,
                    corrupt,
                )
            },
        },
    ]
}

/// Runs every case `instances` times and reports the worst error per case.
/// `corrupt` names a case whose analytic gradient is deliberately perturbed.
pub fn run_suite(instances: usize, seed: u64, corrupt: Option<&str>) -> Result<Vec<CaseReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    primitive_cases()
        .into_iter()
        .chain(loss_cases())
        .map(|case| {
            let mut total = GradCheck::default();
            for _ in 0..instances {
                let r = if corrupt == Some(case.name) {
                    case.run_corrupted(&mut rng)?
                } else {
                    case.run(&mut rng)?
                };
                total = total.merge(r);
            }
            Ok(CaseReport {
                name: case.name.to_string(),
                max_rel_error: total.max_rel_error,
                checked: total.checked,
                passed: total.max_rel_error < TOLERANCE && total.checked > 0,
            })
        })
        .collect()
}
