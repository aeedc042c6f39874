use super::*;
use crate::suite::generate_tasks;

fn tiny_setup(n_tasks: usize) -> RunSetup {
    RunSetup {
        benchmark: Benchmark::one_by_one(n_tasks),
        policy: PolicyConfig {
            latent_dim: 8,
            expert_hidden: 16,
            euler_steps: 3,
            ..PolicyConfig::default()
        },
        suite: SuiteConfig::default(),
        train: TrainConfig {
            iterations_base: 6,
            iterations_incremental: 4,
            batch_size: 8,
            lr: 1e-3,
            demos_per_task: 2,
            eval_episodes: 2,
            fisher_samples: 4,
            probe_count: 4,
            ..TrainConfig::default()
        },
    }
}

fn tasks(n: usize) -> Vec<TaskSpec> {
    generate_tasks(n, 3, &SuiteConfig::default()).unwrap()
}

fn losses(setup: &RunSetup, strategy: Strategy, seed: u64) -> Vec<LossRecord> {
    let result = run_sequence(tasks(setup.benchmark.n_tasks), setup, strategy, seed).unwrap();
    result.reports.into_iter().flat_map(|r| r.losses).collect()
}

#[test]
fn benchmark_layouts() {
    let b = Benchmark {
        n_tasks: 5,
        base: 1,
        steps: 4,
        per_step: 1,
    };
    assert_eq!(b.num_stages(), 5);
    assert_eq!(b.stage_tasks(0), 0..1);
    assert_eq!(b.stage_tasks(3), 3..4);
    assert_eq!(b.label(), "B1-4N1");
    let b = Benchmark {
        n_tasks: 6,
        base: 2,
        steps: 2,
        per_step: 2,
    };
    assert_eq!(b.num_stages(), 3);
    assert_eq!(b.stage_tasks(2), 4..6);
    assert_eq!(b.stage_of(3), 1);
    let b = Benchmark {
        n_tasks: 2,
        base: 0,
        steps: 2,
        per_step: 1,
    };
    assert_eq!(b.num_stages(), 2);
    assert_eq!(b.stage_tasks(1), 1..2);
    let bad = Benchmark {
        n_tasks: 5,
        base: 1,
        steps: 2,
        per_step: 1,
    };
    assert!(matches!(bad.validate(), Err(Error::Config { .. })));
}

#[test]
fn two_task_run_fills_upper_triangle() {
    let mut setup = tiny_setup(2);
    setup.benchmark = Benchmark {
        n_tasks: 2,
        base: 0,
        steps: 2,
        per_step: 1,
    };
    let r = run_sequence(tasks(2), &setup, Strategy::Sequential, 1).unwrap().matrix;
    assert_eq!((r.tasks(), r.stages()), (2, 2));
    assert!(r.get(0, 0).is_some() && r.get(0, 1).is_some() && r.get(1, 1).is_some());
    assert_eq!(r.get(1, 0), None);
}

#[test]
fn base_stage_is_plain_flow_matching_for_every_strategy() {
    let mut setup = tiny_setup(2);
    setup.benchmark = Benchmark {
        n_tasks: 2,
        base: 2,
        steps: 0,
        per_step: 0,
    };
    let reference = losses(&setup, Strategy::Sequential, 4);
    for r in &reference {
        assert_eq!((r.rac, r.mi, r.mc, r.ewc), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.total, r.cl);
    }
    for s in [Strategy::Er, Strategy::Ewc, Strategy::Infovla, Strategy::Multitask] {
        assert_eq!(losses(&setup, s, 4), reference, "{s}");
    }
}

#[test]
fn infovla_without_alignment_terms_matches_replay() {
    let mut setup = tiny_setup(3);
    setup.train.loss.lambda_rac = 0.0;
    setup.train.loss.lambda_cmi = 0.0;
    let er = losses(&setup, Strategy::Er, 5);
    let info = losses(&setup, Strategy::Infovla, 5);
    assert_eq!(er.len(), info.len());
    for (a, b) in er.iter().zip(&info) {
        assert_eq!(a.cl.to_bits(), b.cl.to_bits(), "stage {} iter {}", a.stage, a.iter);
        assert_eq!(a.total.to_bits(), b.total.to_bits());
    }
    assert!(info.iter().any(|r| r.stage > 0 && r.rac > 0.0));
}

#[test]
fn runs_are_reproducible() {
    let setup = tiny_setup(3);
    for s in [Strategy::Infovla, Strategy::Ewc] {
        let a = run_sequence(tasks(3), &setup, s, 6).unwrap();
        let b = run_sequence(tasks(3), &setup, s, 6).unwrap();
        assert_eq!(a.matrix.to_csv(), b.matrix.to_csv());
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.memory, b.memory);
    }
}

#[test]
fn memory_grows_per_strategy() {
    let setup = tiny_setup(3);
    for s in Strategy::ALL {
        let mut run = ContinualRun::new(tasks(3), &setup, s, 7).unwrap();
        for k in 0..3 {
            run.run_next_stage().unwrap();
            let expected = if s.uses_memory() { k + 1 } else { 0 };
            assert_eq!(run.memory().len(), expected, "{s} after stage {k}");
            assert_eq!(run.teacher().is_some(), s == Strategy::Infovla, "{s}");
        }
        assert!(run.run_next_stage().is_err());
    }
}

#[test]
fn stored_replay_is_one_of_the_demos() {
    let setup = tiny_setup(2);
    let mut run = ContinualRun::new(tasks(2), &setup, Strategy::Er, 8).unwrap();
    run.run_next_stage().unwrap();
    let stored = run.memory().get(0).unwrap().clone();
    assert!(run.demos(0).contains(&stored));
    run.run_next_stage().unwrap();
    assert_eq!(run.memory().get(0), Some(&stored));
}

fn stage_one_inputs(setup: &RunSetup) -> (Policy, Vec<Step>, ReplayMemory, Teacher) {
    let run = ContinualRun::new(tasks(2), setup, Strategy::Infovla, 9).unwrap();
    let policy = run.policy().clone();
    let data: Vec<Step> = run.demos(1).iter().flat_map(|d| d.steps.clone()).collect();
    let mut memory = ReplayMemory::new();
    memory
        .store(0, run.demos(0), &mut derive_rng(9, Purpose::Replay, &[0]))
        .unwrap();
    let teacher = policy.snapshot_teacher();
    (policy, data, memory, teacher)
}

#[test]
fn infovla_needs_a_teacher_after_the_base_stage() {
    let setup = tiny_setup(2);
    let (mut policy, data, memory, _) = stage_one_inputs(&setup);
    let ctx = StageContext {
        stage: 1,
        strategy: Strategy::Infovla,
        config: &setup.train,
        seed: 9,
        data: &data,
        teacher: None,
        memory: &memory,
        ewc: &[],
    };
    assert!(matches!(run_stage(&mut policy, &ctx), Err(Error::Contract(_))));
}

#[test]
fn teacher_is_invariant_during_a_stage() {
    let setup = tiny_setup(2);
    let (mut policy, data, memory, teacher) = stage_one_inputs(&setup);
    let probes: Vec<(&Observation, &Instruction)> = data.iter().take(4).map(|s| (&s.obs, &s.instr)).collect();
    let encode = |t: &Teacher| {
        probes
            .iter()
            .map(|(o, i)| t.encode(o, i).unwrap())
            .collect::<Vec<_>>()
    };
    let before = encode(&teacher);
    let ctx = StageContext {
        stage: 1,
        strategy: Strategy::Infovla,
        config: &setup.train,
        seed: 9,
        data: &data,
        teacher: Some(&teacher),
        memory: &memory,
        ewc: &[],
    };
    run_stage(&mut policy, &ctx).unwrap();
    assert_eq!(encode(&teacher), before);
    assert_ne!(policy.params(), teacher.policy().params());
}

#[test]
fn baselines_reject_foreign_state() {
    let setup = tiny_setup(2);
    let (mut policy, data, memory, teacher) = stage_one_inputs(&setup);
    let mut ctx = StageContext {
        stage: 1,
        strategy: Strategy::Sequential,
        config: &setup.train,
        seed: 9,
        data: &data,
        teacher: None,
        memory: &memory,
        ewc: &[],
    };
    assert!(matches!(run_stage(&mut policy, &ctx), Err(Error::Contract(_))));
    let empty = ReplayMemory::new();
    ctx.memory = &empty;
    ctx.teacher = Some(&teacher);
    assert!(matches!(run_stage(&mut policy, &ctx), Err(Error::Contract(_))));
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let setup = tiny_setup(2);
    let (mut policy, mut data, _, _) = stage_one_inputs(&setup);
    for s in &mut data {
        s.chunk.data[0] = 1e200;
    }
    let memory = ReplayMemory::new();
    let ctx = StageContext {
        stage: 0,
        strategy: Strategy::Sequential,
        config: &setup.train,
        seed: 9,
        data: &data,
        teacher: None,
        memory: &memory,
        ewc: &[],
    };
    match run_stage(&mut policy, &ctx) {
        Err(Error::Numerical { stage, iteration, .. }) => assert_eq!((stage, iteration), (0, 0)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn ewc_penalty_appears_after_the_base_stage() {
    let setup = tiny_setup(2);
    let l = losses(&setup, Strategy::Ewc, 10);
    assert!(l.iter().filter(|r| r.stage == 0).all(|r| r.ewc == 0.0));
    let later: Vec<_> = l.iter().filter(|r| r.stage == 1).collect();
    assert_eq!(later[0].ewc, 0.0);
    assert!(later[1..].iter().all(|r| r.ewc > 0.0));
}

#[test]
fn frozen_groups_stay_fixed_after_the_base_stage() {
    let setup = tiny_setup(2);
    let mut run = ContinualRun::new(tasks(2), &setup, Strategy::Infovla, 11).unwrap();
    run.run_next_stage().unwrap();
    let after_base = run.policy().params().clone();
    run.run_next_stage().unwrap();
    for (a, b) in run.policy().params().iter().zip(after_base.iter()) {
        let frozen = !run.policy().is_trainable(a.group, 1);
        if frozen {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }
}

#[test]
fn streams_are_distinct_and_stable() {
    use rand::RngCore;
    let a = derive_rng(1, Purpose::Batches, &[0]).next_u64();
    assert_eq!(a, derive_rng(1, Purpose::Batches, &[0]).next_u64());
    assert_ne!(a, derive_rng(1, Purpose::Flow, &[0]).next_u64());
    assert_ne!(a, derive_rng(1, Purpose::Batches, &[1]).next_u64());
    assert_ne!(a, derive_rng(2, Purpose::Batches, &[0]).next_u64());
}

#[test]
fn losses_csv_layout() {
    let rec = LossRecord {
        stage: 1,
        iter: 2,
        cl: 0.5,
        rac: 0.0,
        mi: -0.25,
        mc: 0.125,
        ewc: 0.0,
        total: 0.5,
    };
    let text = losses_csv(&[rec]);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(LOSS_HEADER));
    let cells: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(cells.len(), 8);
    assert_eq!(cells[4].parse::<f64>().unwrap(), -0.25);
}

#[test]
fn invalid_setups_name_the_field() {
    let mut setup = tiny_setup(2);
    setup.train.replay_fraction = 1.5;
    match setup.validate() {
        Err(Error::Config { field, .. }) => assert_eq!(field, "train.replay_fraction"),
        other => panic!("{other:?}"),
    }
    let mut setup = tiny_setup(2);
    setup.policy.action_dim = 2;
    assert!(setup.validate().is_err());
}

#[test]
fn restored_run_continues_identically() {
    let setup = tiny_setup(3);
    for s in [Strategy::Infovla, Strategy::Ewc, Strategy::Er] {
        let full = run_sequence(tasks(3), &setup, s, 12).unwrap();
        let mut first = ContinualRun::new(tasks(3), &setup, s, 12).unwrap();
        let mut saved = Vec::new();
        for _ in 0..2 {
            let report = first.run_next_stage().unwrap();
            saved.push((first.policy().params().clone(), report));
        }
        let mut resumed = ContinualRun::new(tasks(3), &setup, s, 12).unwrap();
        for (params, report) in saved {
            resumed.restore_stage(&params, report).unwrap();
        }
        resumed.run_next_stage().unwrap();
        let resumed = resumed.finish().unwrap();
        assert_eq!(resumed.matrix.to_csv(), full.matrix.to_csv(), "{s}");
        assert_eq!(resumed.policy, full.policy, "{s}");
        assert_eq!(resumed.memory, full.memory, "{s}");
    }
}

#[test]
fn restore_rejects_mismatched_reports() {
    let setup = tiny_setup(2);
    let mut run = ContinualRun::new(tasks(2), &setup, Strategy::Er, 13).unwrap();
    let report = run.run_next_stage().unwrap();
    let params = run.policy().params().clone();
    let mut other = ContinualRun::new(tasks(2), &setup, Strategy::Sequential, 13).unwrap();
    assert!(matches!(other.restore_stage(&params, report), Err(Error::Contract(_))));
}
