use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::policy::{Instruction, InputBatch, Observation, Partition, PolicyConfig};
use crate::suite::Step;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

// Scalar reference implementations, written without the tape.

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p.max(KL_EPS).ln() - q.max(KL_EPS).ln()))
        .sum()
}

const KL_EPS: f64 = 1e-8;

fn vec_mat(v: &[f64], m: &Tensor) -> Vec<f64> {
    (0..m.cols())
        .map(|j| v.iter().enumerate().map(|(i, x)| x * m.get(i, j)).sum())
        .collect()
}

fn rac_oracle(student: &[Vec<f64>], anchors: &[Vec<f64>], mask: &[bool], tau: f64, neg: NegativeSet) -> f64 {
    let v: Vec<Vec<f64>> = student.iter().map(|r| normalize(r)).collect();
    let u: Vec<Vec<f64>> = anchors.iter().map(|r| normalize(r)).collect();
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..v.len() {
        if !mask[i] {
            continue;
        }
        let logits: Vec<f64> = (0..v.len())
            .map(|j| match neg {
                NegativeSet::TeacherAnchors => dot(&v[i], &u[j]) / tau,
                NegativeSet::StudentBatch if j == i => dot(&v[i], &u[i]) / tau,
                NegativeSet::StudentBatch => dot(&v[i], &v[j]) / tau,
            })
            .collect();
        let denom: f64 = logits.iter().map(|l| l.exp()).sum();
        total += -(logits[i].exp() / denom).ln();
        count += 1;
    }
    total / count as f64
}

struct EstimatorWeights {
    v: Tensor,
    l: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

fn weights(est: &MiEstimator) -> EstimatorWeights {
    let p: Vec<Tensor> = est.params().iter().map(|p| p.value.clone()).collect();
    EstimatorWeights {
        v: p[0].clone(),
        l: p[1].clone(),
        w1: p[2].clone(),
        b1: p[3].clone(),
        w2: p[4].clone(),
        b2: p[5].clone(),
    }
}

fn f_oracle(w: &EstimatorWeights, zv: &[f64], zl: &[f64]) -> Vec<f64> {
    let a = vec_mat(zv, &w.v);
    let b = vec_mat(zl, &w.l);
    let outer: Vec<f64> = a.iter().flat_map(|x| b.iter().map(move |y| x * y)).collect();
    softmax(&outer)
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..rows[0].len()).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

fn joint_oracle(w: &EstimatorWeights, old: &[f64], new: &[f64]) -> Vec<f64> {
    let mut h = vec_mat(old, &w.v);
    h.extend(vec_mat(new, &w.l));
    let hidden: Vec<f64> = vec_mat(&h, &w.w1)
        .iter()
        .zip(w.b1.data())
        .map(|(x, b)| (x + b).tanh())
        .collect();
    let logits: Vec<f64> = vec_mat(&hidden, &w.w2).iter().zip(w.b2.data()).map(|(x, b)| x + b).collect();
    softmax(&logits)
}

struct Batch {
    zv: Vec<Vec<f64>>,
    zl: Vec<Vec<f64>>,
    zf: Vec<Vec<f64>>,
}

fn random_batch(b: usize, d: usize, rng: &mut ChaCha8Rng) -> Batch {
    let mut m = || rows(&Tensor::randn(&[b, d], 1.0, rng));
    Batch {
        zv: m(),
        zl: m(),
        zf: m(),
    }
}

/// Returns `(mi, mc)` computed by the reference code.
fn structural_oracle(w: &EstimatorWeights, k: usize, old: &Batch, new: &Batch) -> (f64, f64) {
    let p_old = mean_rows(&old.zv.iter().zip(&old.zl).map(|(v, l)| f_oracle(w, v, l)).collect::<Vec<_>>());
    let p_new = mean_rows(&new.zv.iter().zip(&new.zl).map(|(v, l)| f_oracle(w, v, l)).collect::<Vec<_>>());
    let row: Vec<f64> = (0..k).map(|a| (0..k).map(|b| p_old[a * k + b]).sum()).collect();
    let col: Vec<f64> = (0..k).map(|b| (0..k).map(|a| p_new[a * k + b]).sum()).collect();
    let product: Vec<f64> = row.iter().flat_map(|r| col.iter().map(move |c| r * c)).collect();
    let b = new.zf.len() as f64;
    let info: f64 = old
        .zf
        .iter()
        .zip(&new.zf)
        .map(|(o, n)| kl(&joint_oracle(w, o, n), &product))
        .sum::<f64>()
        / b;
    (-info, kl(&p_new, &p_old))
}

fn on_tape<'t>(tape: &'t Tape, b: &Batch, grad: bool) -> LatentBatch<'t> {
    let t = |r: &Vec<Vec<f64>>| tape.leaf(Tensor::from_rows(r).unwrap(), grad);
    LatentBatch {
        z_v: t(&b.zv),
        z_l: t(&b.zl),
        z_fused: t(&b.zf),
        attn: tape.constant(Tensor::filled(&[b.zf.len(), 1], 1.0)),
    }
}

// Contrastive loss.

#[test]
fn rac_is_ln_b_for_coincident_latents() {
    for tau in [0.07, 0.5, 3.0] {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::from_rows(&vec![vec![0.3, -1.2, 0.8]; 4]).unwrap(), true);
        let loss = rac_loss(z, z, &[true; 4], tau, NegativeSet::TeacherAnchors).unwrap();
        assert!((loss.item().unwrap() - 4f64.ln()).abs() < 1e-6);
    }
}

#[test]
fn rac_saturated_positive_is_near_zero() {
    let tape = Tape::new();
    let student = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let anchors = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap());
    let loss = rac_loss(student, anchors, &[true, false], 0.1, NegativeSet::TeacherAnchors)
        .unwrap()
        .item()
        .unwrap();
    let expected = (1.0 + (-20f64).exp()).ln();
    assert!((loss - expected).abs() < 1e-15);
    assert!((loss - 2.06e-9).abs() < 1e-11);
}

#[test]
fn rac_matches_direct_formula() {
    let mut r = rng(1);
    for neg in [NegativeSet::TeacherAnchors, NegativeSet::StudentBatch] {
        for _ in 0..10 {
            let s = rows(&Tensor::randn(&[5, 6], 1.0, &mut r));
            let a = rows(&Tensor::randn(&[5, 6], 1.0, &mut r));
            let mask: Vec<bool> = (0..5).map(|_| r.gen_bool(0.6)).collect();
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let tape = Tape::new();
            let loss = rac_loss(
                tape.constant(Tensor::from_rows(&s).unwrap()),
                tape.constant(Tensor::from_rows(&a).unwrap()),
                &mask,
                0.07,
                neg,
            )
            .unwrap();
            let oracle = rac_oracle(&s, &a, &mask, 0.07, neg);
            assert!((loss.item().unwrap() - oracle).abs() < 1e-10, "{neg:?}");
        }
    }
}

#[test]
fn rac_is_invariant_to_positive_rescaling() {
    let mut r = rng(2);
    let s = Tensor::randn(&[4, 5], 1.0, &mut r);
    let a = Tensor::randn(&[4, 5], 1.0, &mut r);
    let eval = |s: &Tensor, a: &Tensor| {
        let tape = Tape::new();
        rac_loss(tape.constant(s.clone()), tape.constant(a.clone()), &[true, true, false, true], 0.07, NegativeSet::TeacherAnchors)
            .unwrap()
            .item()
            .unwrap()
    };
    let base = eval(&s, &a);
    for c in [0.1, 10.0] {
        let scaled = s.map(|v| v * c).unwrap();
        assert!((eval(&scaled, &a) - base).abs() < 1e-9);
        let scaled = a.map(|v| v * c).unwrap();
        assert!((eval(&s, &scaled) - base).abs() < 1e-9);
    }
}

#[test]
fn rac_contract_errors() {
    let tape = Tape::new();
    let one = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
    assert!(matches!(rac_loss(one, one, &[true], 0.1, NegativeSet::TeacherAnchors), Err(Error::Contract(_))));
    let two = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    assert!(matches!(rac_loss(two, two, &[false, false], 0.1, NegativeSet::TeacherAnchors), Err(Error::Contract(_))));
}

#[test]
fn rac_anchors_receive_no_gradient() {
    let tape = Tape::new();
    let mut r = rng(3);
    let s = tape.leaf(Tensor::randn(&[3, 4], 1.0, &mut r), true);
    let a = tape.leaf(Tensor::randn(&[3, 4], 1.0, &mut r), true);
    rac_loss(s, a, &[true; 3], 0.07, NegativeSet::TeacherAnchors).unwrap().backward().unwrap();
    assert!(a.grad().unwrap().data().iter().all(|&g| g == 0.0));
    assert!(s.grad().unwrap().data().iter().any(|&g| g != 0.0));
}

// Projection and joint distribution.

fn estimator(seed: u64, d: usize, k: usize) -> MiEstimator {
    MiEstimator::new(d, EstimatorConfig { bins: k, hidden: 7 }, &mut rng(seed))
}

#[test]
fn zero_projection_gives_uniform_f() {
    let mut est = estimator(4, 5, 3);
    est.set_projections(Tensor::zeros(&[5, 3]), Tensor::randn(&[5, 3], 1.0, &mut rng(1))).unwrap();
    let tape = Tape::new();
    let b = est.bind(&tape, true);
    let z = tape.constant(Tensor::randn(&[2, 5], 1.0, &mut rng(2)));
    let f = project_f(z, z, &b).unwrap().value();
    assert!(f.data().iter().all(|&p| (p - 1.0 / 9.0).abs() < 1e-15));
}

#[test]
fn f_has_rank_one_log_structure() {
    // log F_ab = V_a·L_b − log Z, so log(F_ab / F_cb) / L_b = V_a − V_c for every b.
    let est = estimator(5, 6, 4);
    let w = weights(&est);
    let mut r = rng(6);
    for _ in 0..10 {
        let zv = Tensor::randn(&[6], 1.0, &mut r).into_data();
        let zl = Tensor::randn(&[6], 1.0, &mut r).into_data();
        let tape = Tape::new();
        let b = est.bind(&tape, false);
        let f = project_f(
            tape.constant(Tensor::matrix(1, 6, zv.clone()).unwrap()),
            tape.constant(Tensor::matrix(1, 6, zl.clone()).unwrap()),
            &b,
        )
        .unwrap()
        .value();
        assert!((f.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let v = vec_mat(&zv, &w.v);
        let l = vec_mat(&zl, &w.l);
        let (a, c) = (0, 3);
        for (bcol, lb) in l.iter().enumerate().take(4) {
            let odds = (f.data()[a * 4 + bcol] / f.data()[c * 4 + bcol]).ln();
            assert!((odds / lb - (v[a] - v[c])).abs() < 1e-8);
        }
    }
}

#[test]
fn joint_is_uniform_with_zero_mlp_and_rowwise_deterministic() {
    let mut est = estimator(7, 4, 3);
    let tape = Tape::new();
    let row = vec![0.2, -0.4, 0.9, 0.1];
    let z = tape.constant(Tensor::from_rows(&vec![row; 3]).unwrap());
    {
        let b = est.bind(&tape, true);
        let j = joint_distribution(z, z, &b).unwrap().value();
        for r in 0..3 {
            assert_eq!(j.row(r), j.row(0));
            assert!((j.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    est.zero_joint_mlp();
    let b = est.bind(&tape, true);
    let j = joint_distribution(z, z, &b).unwrap().value();
    assert!(j.data().iter().all(|&p| (p - 1.0 / 9.0).abs() < 1e-15));
}

// Mutual information and marginal consistency.

#[test]
fn mi_is_zero_when_joint_equals_product() {
    let mut est = estimator(8, 4, 3);
    est.zero_joint_mlp();
    est.set_projections(Tensor::zeros(&[4, 3]), Tensor::zeros(&[4, 3])).unwrap();
    let mut r = rng(9);
    let (old, new) = (random_batch(4, 4, &mut r), random_batch(4, 4, &mut r));
    let tape = Tape::new();
    let b = est.bind(&tape, true);
    let mi = mi_loss(&on_tape(&tape, &old, false), &on_tape(&tape, &new, true), &b).unwrap();
    assert!(mi.item().unwrap().abs() < 1e-12);
}

#[test]
fn structural_losses_match_reference_code() {
    let mut r = rng(10);
    for seed in 0..10 {
        let est = estimator(100 + seed, 5, 3);
        let w = weights(&est);
        let (old, new) = (random_batch(4, 5, &mut r), random_batch(4, 5, &mut r));
        let (mi_ref, mc_ref) = structural_oracle(&w, 3, &old, &new);
        let tape = Tape::new();
        let b = est.bind(&tape, true);
        let (o, n) = (on_tape(&tape, &old, false), on_tape(&tape, &new, true));
        let mi = mi_loss(&o, &n, &b).unwrap().item().unwrap();
        let mc = mc_loss(&o, &n, &b).unwrap().item().unwrap();
        let cmi = cmi_loss(&o, &n, &b).unwrap().item().unwrap();
        assert!((mi - mi_ref).abs() < 1e-10, "mi {mi} vs {mi_ref}");
        assert!((mc - mc_ref).abs() < 1e-10, "mc {mc} vs {mc_ref}");
        assert!((cmi - (mi_ref + mc_ref)).abs() < 1e-10);
        assert_eq!(cmi, mi + mc);
    }
}

#[test]
fn mc_is_zero_for_identical_batches_and_ln4_for_one_hot_against_uniform() {
    let mut r = rng(11);
    let est = estimator(12, 3, 2);
    let same = random_batch(3, 3, &mut r);
    let tape = Tape::new();
    let b = est.bind(&tape, true);
    let mc = mc_loss(&on_tape(&tape, &same, false), &on_tape(&tape, &same, true), &b).unwrap();
    assert!(mc.item().unwrap().abs() < 1e-12);

    // Teacher latents of zero project to the uniform distribution; huge
    // student latents saturate F onto a single bin.
    let mut est = estimator(13, 2, 2);
    est.set_projections(
        Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
    )
    .unwrap();
    let zeros = Batch {
        zv: vec![vec![0.0, 0.0]; 2],
        zl: vec![vec![0.0, 0.0]; 2],
        zf: vec![vec![0.0, 0.0]; 2],
    };
    let peaked = Batch {
        zv: vec![vec![10.0, 0.0]; 2],
        zl: vec![vec![10.0, 0.0]; 2],
        zf: vec![vec![0.0, 0.0]; 2],
    };
    let tape = Tape::new();
    let b = est.bind(&tape, true);
    let mc = mc_loss(&on_tape(&tape, &zeros, false), &on_tape(&tape, &peaked, true), &b).unwrap();
    assert!((mc.item().unwrap() - 4f64.ln()).abs() < 1e-6);
}

#[test]
fn cmi_is_zero_for_matching_independent_case() {
    let mut est = estimator(14, 4, 3);
    est.zero_joint_mlp();
    est.set_projections(Tensor::zeros(&[4, 3]), Tensor::zeros(&[4, 3])).unwrap();
    let same = random_batch(3, 4, &mut rng(15));
    let tape = Tape::new();
    let b = est.bind(&tape, true);
    let cmi = cmi_loss(&on_tape(&tape, &same, false), &on_tape(&tape, &same, true), &b).unwrap();
    assert!(cmi.item().unwrap() <= 1e-9);
}

#[test]
fn structural_losses_reject_mismatched_batches() {
    let est = estimator(16, 3, 2);
    let mut r = rng(17);
    let (a, b3) = (random_batch(2, 3, &mut r), random_batch(3, 3, &mut r));
    let tape = Tape::new();
    let b = est.bind(&tape, true);
    assert!(matches!(mi_loss(&on_tape(&tape, &a, false), &on_tape(&tape, &b3, true), &b), Err(Error::Contract(_))));
    assert!(matches!(mc_loss(&on_tape(&tape, &a, false), &on_tape(&tape, &b3, true), &b), Err(Error::Contract(_))));
}

#[test]
fn teacher_side_receives_no_gradient() {
    let est = estimator(18, 4, 3);
    let mut r = rng(19);
    let (old, new) = (random_batch(3, 4, &mut r), random_batch(3, 4, &mut r));
    let tape = Tape::new();
    let b = est.bind(&tape, true);
    let (o, n) = (on_tape(&tape, &old, true), on_tape(&tape, &new, true));
    cmi_loss(&o, &n, &b).unwrap().backward().unwrap();
    for v in [o.z_v, o.z_l, o.z_fused] {
        assert!(v.grad().unwrap().data().iter().all(|&g| g == 0.0));
    }
    assert!(n.z_fused.grad().unwrap().data().iter().any(|&g| g != 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn mi_nonpositive_mc_nonnegative(seed in 0u64..1_000_000, b in 1usize..6) {
        let est = estimator(seed, 4, 3);
        let mut r = rng(seed ^ 0x5eed);
        let (old, new) = (random_batch(b, 4, &mut r), random_batch(b, 4, &mut r));
        let tape = Tape::new();
        let be = est.bind(&tape, true);
        let (o, n) = (on_tape(&tape, &old, false), on_tape(&tape, &new, true));
        prop_assert!(mi_loss(&o, &n, &be).unwrap().item().unwrap() <= 1e-9);
        prop_assert!(mc_loss(&o, &n, &be).unwrap().item().unwrap() >= -1e-9);
    }

    #[test]
    fn rac_is_nonnegative(seed in 0u64..1_000_000) {
        let mut r = rng(seed);
        let tape = Tape::new();
        let s = tape.constant(Tensor::randn(&[4, 3], 1.0, &mut r));
        let a = tape.constant(Tensor::randn(&[4, 3], 1.0, &mut r));
        let l = rac_loss(s, a, &[true, false, true, true], 0.07, NegativeSet::TeacherAnchors).unwrap();
        prop_assert!(l.item().unwrap() >= 0.0);
    }
}

// Flow matching and the total objective.

fn small_policy(seed: u64) -> Policy {
    Policy::new(PolicyConfig::default(), Partition::default(), &mut rng(seed)).unwrap()
}

fn sample_inputs(p: &Policy, b: usize, r: &mut ChaCha8Rng) -> (InputBatch, Tensor) {
    let c = p.config();
    let obs: Vec<Observation> = (0..b)
        .map(|_| Observation {
            image: (0..c.channels * c.image_size * c.image_size).map(|_| r.gen_range(0.0..1.0)).collect(),
            proprio: (0..c.proprio_dim).map(|_| r.gen_range(-1.0..1.0)).collect(),
        })
        .collect();
    let instr = Instruction { verb: 0, object: 0, target: 1 };
    let items: Vec<_> = obs.iter().map(|o| (o, &instr)).collect();
    (InputBatch::new(c, &items).unwrap(), Tensor::uniform(&[b, c.chunk_len()], -1.0, 1.0, r))
}

#[test]
fn flow_loss_with_zero_expert_is_mean_squared_target() {
    let mut p = small_policy(20);
    p.zero_action_expert();
    let mut r = rng(21);
    let (input, chunks) = sample_inputs(&p, 3, &mut r);
    let draws = FlowDraws::sample(3, p.config().chunk_len(), &mut r);
    let tape = Tape::new();
    let bound = p.bind(&tape, 0);
    let z = p.encode_batch(&tape, &bound, &input).unwrap().z_fused;
    let loss = flow_matching_loss(&p, &bound, z, &chunks, &draws).unwrap().item().unwrap();
    let expected = chunks
        .data()
        .iter()
        .zip(draws.noise.data())
        .map(|(a, w)| (w - a).powi(2))
        .sum::<f64>()
        / chunks.len() as f64;
    assert!((loss - expected).abs() < 1e-12);

    // With ω = a the target vanishes, so the zero expert is exact.
    let exact = FlowDraws { noise: chunks.clone(), taus: draws.taus.clone() };
    let loss = flow_matching_loss(&p, &bound, z, &chunks, &exact).unwrap().item().unwrap();
    assert_eq!(loss, 0.0);
}

#[test]
fn flow_targets_follow_the_interpolant() {
    let chunks = Tensor::from_rows(&[vec![0.5, -1.0]]).unwrap();
    let draws = FlowDraws { noise: Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap(), taus: vec![0.25] };
    let (x, t) = flow_targets(&chunks, &draws).unwrap();
    assert_eq!(x.data(), &[0.25 * 0.5 + 0.75, -0.25 + 0.75]);
    assert_eq!(t.data(), &[0.5, 2.0]);
}

#[test]
fn total_loss_reduces_to_flow_and_is_linear() {
    let p = small_policy(22);
    let teacher = small_policy(23).snapshot_teacher();
    let est = MiEstimator::new(p.config().latent_dim, EstimatorConfig::default(), &mut rng(24));
    let mut r = rng(25);
    let (input, chunks) = sample_inputs(&p, 4, &mut r);
    let draws = FlowDraws::sample(4, p.config().chunk_len(), &mut r);
    let tape = Tape::new();
    let bound = p.bind(&tape, 1);
    let eb = est.bind(&tape, true);
    let new = p.encode_batch(&tape, &bound, &input).unwrap();
    let old = teacher.encode_batch(&tape, &input).unwrap();
    let flow = flow_matching_loss(&p, &bound, new.z_fused, &chunks, &draws).unwrap();
    let rac = rac_loss(new.z_fused, old.z_fused, &[true, true, false, false], 0.07, NegativeSet::TeacherAnchors).unwrap();
    let cmi = cmi_loss(&old, &new, &eb).unwrap();
    let at = |l1: f64, l2: f64| {
        let w = LossWeights { lambda_rac: l1, lambda_cmi: l2, ..LossWeights::default() };
        total_loss(flow, Some(rac), Some(cmi), &w).unwrap().item().unwrap()
    };
    assert_eq!(at(0.0, 0.0).to_bits(), flow.item().unwrap().to_bits());
    let (f, a, c) = (flow.item().unwrap(), rac.item().unwrap(), cmi.item().unwrap());
    assert!((at(0.1, 0.1) - (f + 0.1 * a + 0.1 * c)).abs() < 1e-12);
    let slope1 = at(0.3, 0.2) - at(0.1, 0.2);
    let slope2 = at(0.5, 0.2) - at(0.3, 0.2);
    assert!((slope1 - slope2).abs() < 1e-12);

    // Teacher parameters never enter the graph as gradient leaves.
    let total = total_loss(flow, Some(rac), Some(cmi), &LossWeights::default()).unwrap();
    total.backward().unwrap();
    for (param, var) in p.params().iter().zip(bound.vars()) {
        assert_eq!(var.grad().is_some(), p.is_trainable(param.group, 1));
    }
    assert!(!old.z_fused.requires_grad());
}

#[test]
fn loss_weights_are_validated() {
    assert!(LossWeights::default().validate().is_ok());
    let bad = LossWeights { lambda_rac: -0.1, ..LossWeights::default() };
    assert!(matches!(bad.validate(), Err(Error::Config { .. })));
    let bad = LossWeights { temperature: 0.0, ..LossWeights::default() };
    assert!(matches!(bad.validate(), Err(Error::Config { .. })));
}

// Consolidation.

#[test]
fn fisher_matches_scalar_model() {
    // loss_i = (θ·x_i − y_i)², gradient 2·x_i·(θ·x_i − y_i).
    let theta = 0.7;
    let data = [(1.0, 2.0), (-0.5, 0.3), (2.0, -1.0)];
    let fisher = fisher_diagonal_with(data.len(), |i| {
        let (x, y) = data[i];
        let tape = Tape::new();
        let t = tape.leaf(Tensor::vector(vec![theta]).unwrap(), true);
        t.mul_scalar(x)?.add_scalar(-y)?.square()?.sum()?.backward()?;
        Ok(vec![t.grad()])
    })
    .unwrap();
    let expected = data
        .iter()
        .map(|(x, y)| (2.0 * x * (theta * x - y)).powi(2))
        .sum::<f64>()
        / 3.0;
    let got = fisher[0].as_ref().unwrap().data()[0];
    assert!((got - expected).abs() < 1e-12);

    let zero = fisher_diagonal_with(4, |_| Ok(vec![Some(Tensor::zeros(&[3])), None])).unwrap();
    assert!(zero[0].as_ref().unwrap().data().iter().all(|&v| v == 0.0));
    assert!(zero[1].is_none());
    assert!(fisher_diagonal_with(0, |_| Ok(vec![])).is_err());
}

fn one_step(p: &Policy, r: &mut ChaCha8Rng) -> Step {
    let c = p.config();
    Step {
        obs: Observation {
            image: (0..c.channels * c.image_size * c.image_size).map(|_| r.gen_range(0.0..1.0)).collect(),
            proprio: (0..c.proprio_dim).map(|_| r.gen_range(-1.0..1.0)).collect(),
        },
        chunk: crate::policy::ActionChunk::new(c.horizon, c.action_dim, vec![0.2; c.chunk_len()]).unwrap(),
        instr: Instruction { verb: 0, object: 0, target: 1 },
    }
}

#[test]
fn policy_fisher_is_nonnegative_and_respects_partition() {
    let p = small_policy(26);
    let mut r = rng(27);
    let data: Vec<Step> = (0..3).map(|_| one_step(&p, &mut r)).collect();
    let f = fisher_diagonal(&p, 1, &data, 4, &mut r).unwrap();
    for (param, entry) in p.params().iter().zip(&f) {
        match entry {
            Some(t) => {
                assert!(p.is_trainable(param.group, 1));
                assert_eq!(t.shape(), param.value.shape());
                assert!(t.data().iter().all(|&v| v >= 0.0));
            }
            None => assert!(!p.is_trainable(param.group, 1)),
        }
    }
    assert!(matches!(fisher_diagonal(&p, 1, &[], 4, &mut r), Err(Error::Contract(_))));
}

#[test]
fn ewc_penalty_examples() {
    let tape = Tape::new();
    let theta = vec![Tensor::vector(vec![3.0]).unwrap()];
    let bound = BoundParams::from_vars(theta.iter().map(|t| tape.leaf(t.clone(), true)).collect());
    let at_anchor = EwcAnchor { params: theta.clone(), fisher: vec![Some(Tensor::vector(vec![1.0]).unwrap())] };
    assert_eq!(ewc_penalty(&tape, &bound, std::slice::from_ref(&at_anchor), 1000.0).unwrap().item().unwrap(), 0.0);
    let offset = EwcAnchor { params: vec![Tensor::vector(vec![1.0]).unwrap()], ..at_anchor };
    let p = ewc_penalty(&tape, &bound, &[offset], 1.0).unwrap().item().unwrap();
    assert!((p - 2.0).abs() < 1e-15);
}

#[test]
fn ewc_penalty_matches_direct_sum() {
    let mut r = rng(28);
    let params = [Tensor::randn(&[3, 2], 1.0, &mut r), Tensor::randn(&[4], 1.0, &mut r)];
    let anchors: Vec<EwcAnchor> = (0..2)
        .map(|k| EwcAnchor {
            params: params.iter().map(|p| Tensor::randn(p.shape(), 1.0, &mut r)).collect(),
            fisher: vec![
                Some(Tensor::uniform(&[3, 2], 0.0, 2.0, &mut r)),
                if k == 0 { None } else { Some(Tensor::uniform(&[4], 0.0, 2.0, &mut r)) },
            ],
        })
        .collect();
    let lambda = 7.5;
    let mut expected = 0.0;
    for a in &anchors {
        for ((p, s), f) in params.iter().zip(&a.params).zip(&a.fisher) {
            if let Some(f) = f {
                for i in 0..p.len() {
                    expected += f.data()[i] * (p.data()[i] - s.data()[i]).powi(2);
                }
            }
        }
    }
    expected *= lambda / 2.0;
    let tape = Tape::new();
    let bound = BoundParams::from_vars(params.iter().map(|t| tape.leaf(t.clone(), true)).collect());
    let got = ewc_penalty(&tape, &bound, &anchors, lambda).unwrap().item().unwrap();
    assert!((got - expected).abs() < 1e-10);
}
