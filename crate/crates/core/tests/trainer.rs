//! Training contracts: degenerate equivalences, teacher constancy, the
//! logged relaxation schedule, determinism and resumption.

use pcpr::data::{generate_domain, DomainDataset, SyntheticDomainSpec};
use pcpr::encoder::{EncoderConfig, EncoderParams};
use pcpr::losses::{relaxation_weight, DistillSpec, ScheduleSpec};
use pcpr::trainer::{
    checkpoint, joint_train, run_protocol, run_protocol_with, train_step, Method, Protocol, Resume, RunLog,
    StepState, TrainConfig, TrainError,
};

fn domains(n: u32) -> Vec<DomainDataset> {
    (0..n)
        .map(|id| {
            generate_domain(&SyntheticDomainSpec {
                name: format!("d{id}"),
                domain_id: id,
                seed: 900 + u64::from(id),
                num_places: 6,
                points_per_cloud: 24,
                landmarks_per_place: 2 + id as usize,
                ..SyntheticDomainSpec::default()
            })
            .unwrap()
        })
        .collect()
}

fn encoder() -> EncoderConfig {
    EncoderConfig {
        hidden_dims: vec![8, 8],
        descriptor_dim: 8,
        seed: 5,
        ..EncoderConfig::default()
    }
}

fn config(method: Method) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_anchors: 5,
        memory_capacity: 8,
        method,
        seed: 21,
        ..TrainConfig::default()
    }
}

/// Parameters after every step of a protocol run.
fn trajectory(ds: &[DomainDataset], cfg: &TrainConfig) -> Vec<Vec<f64>> {
    let mut snapshots = Vec::new();
    let mut log = RunLog::default();
    run_protocol_with(ds, &encoder(), cfg, Protocol::FourStep, None, &mut log, &mut |view| {
        snapshots.push(view.state.student.flat().to_vec());
        Ok(())
    })
    .unwrap();
    snapshots
}

#[test]
fn fine_tuning_equals_incloud_without_distillation_or_memory() {
    let ds = domains(3);
    let ft = trajectory(&ds, &config(Method::Ft));
    let mut degenerate = config(Method::InCloud);
    degenerate.distill.lambda_init = 0.0;
    degenerate.memory_capacity = 0;
    let inc = trajectory(&ds, &degenerate);
    assert_eq!(ft.len(), 3);
    for (a, b) in ft.iter().zip(&inc) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    // The real method does diverge.
    assert_ne!(trajectory(&ds, &config(Method::InCloud))[1], ft[1]);
}

#[test]
fn joint_on_one_domain_equals_first_step() {
    let ds = domains(1);
    let cfg = config(Method::InCloud);
    let mut log = RunLog::default();
    let joint = joint_train(&ds, &encoder(), &cfg, &mut log).unwrap();
    let mut state = StepState::new(&encoder(), &cfg).unwrap();
    train_step(&mut state, &[&ds[0]], 1, &cfg).unwrap();
    assert_eq!(joint.student, state.student);
    assert!(log.epochs().all(|e| e.distill == 0.0 && e.lambda == 0.0));
}

#[test]
fn teacher_is_frozen_within_a_step() {
    let ds = domains(2);
    let cfg = config(Method::InCloud);
    let mut state = StepState::new(&encoder(), &cfg).unwrap();
    train_step(&mut state, &[&ds[0]], 1, &cfg).unwrap();
    let probe: Vec<_> = ds[1].test_queries.iter().take(4).map(|s| s.cloud.as_ref()).collect();
    let before = state.student.forward(&probe).unwrap();
    // After the whole step the teacher still reproduces the step-1 student.
    train_step(&mut state, &[&ds[1]], 2, &cfg).unwrap();
    let teacher = state.teacher.as_ref().unwrap();
    assert_eq!(teacher.forward(&probe).unwrap(), before);
    assert_ne!(state.student.forward(&probe).unwrap(), before);
}

#[test]
fn logged_lambda_follows_the_schedule() {
    let ds = domains(2);
    let cfg = TrainConfig {
        epochs: 5,
        ..config(Method::InCloud)
    };
    let mut log = RunLog::default();
    run_protocol(&ds, &encoder(), &cfg, Protocol::FourStep, &mut log).unwrap();
    let step2: Vec<f64> = log.epochs().filter(|e| e.step == 2).map(|e| e.lambda).collect();
    assert_eq!(step2.len(), 5);
    for (epoch, l) in step2.iter().enumerate() {
        let expected = relaxation_weight(epoch as f64, &ScheduleSpec { total_epochs: 5 }, &DistillSpec::default());
        assert_eq!(*l, expected);
    }
    assert!(step2.windows(2).all(|w| w[1] < w[0]));
    assert!(log.epochs().filter(|e| e.step == 1).all(|e| e.lambda == 0.0));

    let mut flat_log = RunLog::default();
    run_protocol(&ds, &encoder(), &config(Method::AblNoRelax), Protocol::FourStep, &mut flat_log).unwrap();
    assert!(flat_log.epochs().filter(|e| e.step == 2).all(|e| e.lambda == 1.0));
}

#[test]
fn memory_entries_join_the_batches() {
    let ds = domains(2);
    let mut log = RunLog::default();
    run_protocol(&ds, &encoder(), &config(Method::InCloud), Protocol::FourStep, &mut log).unwrap();
    let memory: usize = log.epochs().filter(|e| e.step == 2).map(|e| e.memory_anchors).sum();
    assert_eq!(memory, 3 * 4);
    let mut ft_log = RunLog::default();
    run_protocol(&ds, &encoder(), &config(Method::Ft), Protocol::FourStep, &mut ft_log).unwrap();
    assert!(ft_log.epochs().all(|e| e.memory_anchors == 0));
}

#[test]
fn protocols_have_the_expected_shape() {
    let ds = domains(4);
    let mut log = RunLog::default();
    let two = run_protocol(&ds, &encoder(), &config(Method::InCloud), Protocol::TwoStep, &mut log).unwrap();
    assert_eq!(two.matrix.steps(), 2);
    assert_eq!(two.matrix.labels, vec!["d0".to_string(), "d1+d2+d3".to_string()]);
    assert_eq!(two.state.memory.counts().len(), 4);

    let err = run_protocol(&ds[..1], &encoder(), &config(Method::InCloud), Protocol::FourStep, &mut log).unwrap_err();
    assert!(matches!(err, TrainError::InsufficientDomains { needed: 2, got: 1 }));
}

#[test]
fn runs_are_reproducible() {
    let ds = domains(3);
    let run = || {
        let mut log = RunLog::default();
        run_protocol(&ds, &encoder(), &config(Method::InCloud), Protocol::FourStep, &mut log)
            .unwrap()
            .matrix
            .to_csv()
    };
    assert_eq!(run(), run());
}

#[test]
fn resuming_reproduces_later_steps_exactly() {
    let ds = domains(3);
    let cfg = TrainConfig {
        reset_optimizer: false,
        ..config(Method::InCloud)
    };
    let dir = tempfile::tempdir().unwrap();
    let echo = serde_json::json!({});
    let mut log = RunLog::default();
    let full = run_protocol_with(&ds, &encoder(), &cfg, Protocol::FourStep, None, &mut log, &mut |view| {
        checkpoint::write_step(dir.path(), view, &ds, &echo).map(|_| ())
    })
    .unwrap();

    let (resume, mut resumed_log): (Resume, RunLog) =
        checkpoint::read_step(&checkpoint::step_dir(dir.path(), 2), &ds, &encoder()).unwrap();
    assert_eq!(resume.state.completed_steps, 2);
    let again = run_protocol_with(&ds, &encoder(), &cfg, Protocol::FourStep, Some(resume), &mut resumed_log, &mut |_| {
        Ok(())
    })
    .unwrap();
    assert_eq!(again.matrix.to_csv(), full.matrix.to_csv());
    assert_eq!(again.state.student, full.state.student);
    assert_eq!(again.state.memory, full.state.memory);
    assert_eq!(resumed_log.epochs().count(), log.epochs().count());
}

#[test]
fn checkpoint_rejects_a_different_architecture() {
    let ds = domains(2);
    let dir = tempfile::tempdir().unwrap();
    let echo = serde_json::json!({});
    let mut log = RunLog::default();
    run_protocol_with(&ds, &encoder(), &config(Method::Ft), Protocol::FourStep, None, &mut log, &mut |view| {
        checkpoint::write_step(dir.path(), view, &ds, &echo).map(|_| ())
    })
    .unwrap();
    let other = EncoderConfig {
        hidden_dims: vec![4],
        ..encoder()
    };
    let err = checkpoint::read_step(&checkpoint::step_dir(dir.path(), 1), &ds, &other).unwrap_err();
    assert!(matches!(err, TrainError::Encoder(_)), "{err}");
    let params = EncoderParams::init(&encoder()).unwrap();
    assert_eq!(params.len(), encoder().param_count());
}
