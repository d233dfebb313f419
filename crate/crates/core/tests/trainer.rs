use fairpref::data::synthetic::{generate_synthetic, SyntheticSpec, TaskSpec};
use fairpref::data::{load_dataset, LoadedDataset};
use fairpref::trainer::{
    evaluate, run_sequence, train_task, train_task_traced, write_run_artifacts, EvalExample,
    Method, TaskDataset, TrainConfig,
};
use fairpref::{Error, Exec, PolicySnapshot};

fn single_task() -> LoadedDataset {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        name: "single".into(),
        tasks: vec![TaskSpec {
            samples: 556,
            observed_weights: vec![1.0],
            target_weights: None,
        }],
        vocab_size: 6,
        dim: 4,
        ..SyntheticSpec::reference()
    };
    generate_synthetic(&spec, dir.path(), Exec::Parallel).unwrap();
    load_dataset(dir.path()).unwrap()
}

fn small_sequence() -> LoadedDataset {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SyntheticSpec::reference();
    for t in &mut spec.tasks {
        t.samples = 600;
    }
    generate_synthetic(&spec, dir.path(), Exec::Parallel).unwrap();
    load_dataset(dir.path()).unwrap()
}

fn start(ds: &LoadedDataset) -> (PolicySnapshot, PolicySnapshot) {
    let p = PolicySnapshot::zeros(ds.vocab.clone(), ds.manifest.dim).unwrap();
    let r = p.freeze();
    (p, r)
}

fn as_eval(task: &TaskDataset) -> Vec<EvalExample> {
    task.train
        .iter()
        .map(|z| EvalExample {
            context: z.context.clone(),
            gold: z.chosen,
            group_id: z.group_id,
            record_id: z.record_id.clone(),
        })
        .collect()
}

#[test]
fn zero_steps_copies_input() {
    let ds = single_task();
    let (p, r) = start(&ds);
    let cfg = TrainConfig {
        steps: 0,
        ..TrainConfig::default()
    };
    let out = train_task(Exec::Parallel, &p, &r, &ds.tasks[0], &cfg).unwrap();
    assert_eq!(out, p);
}

#[test]
fn same_seed_same_weights() {
    let ds = single_task();
    let (p, r) = start(&ds);
    let cfg = TrainConfig {
        steps: 50,
        ..TrainConfig::default()
    };
    let a = train_task(Exec::Parallel, &p, &r, &ds.tasks[0], &cfg).unwrap();
    let b = train_task(Exec::Sequential, &p, &r, &ds.tasks[0], &cfg).unwrap();
    assert_eq!(a.to_checkpoint_json(), b.to_checkpoint_json());
    assert_ne!(a.weights(), p.weights());
    let other = TrainConfig { seed: 1, ..cfg };
    let c = train_task(Exec::Parallel, &p, &r, &ds.tasks[0], &other).unwrap();
    assert_ne!(a.weights(), c.weights());
}

#[test]
fn reference_single_task_is_learned() {
    let ds = single_task();
    assert_eq!(ds.tasks[0].train.len(), 500);
    let (p, r) = start(&ds);
    let train_eval = as_eval(&ds.tasks[0]);
    for method in [Method::FairDpo, Method::Dpo, Method::Kd, Method::Sft] {
        let cfg = TrainConfig {
            method,
            steps: 300,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let out = train_task(Exec::Parallel, &p, &r, &ds.tasks[0], &cfg).unwrap();
        let acc = evaluate(Exec::Parallel, &out, &train_eval, 1).unwrap().accuracy;
        assert!(acc >= 0.95, "{method:?}: {acc}");
    }
}

#[test]
fn full_batch_descent_is_monotone() {
    let ds = single_task();
    let (p, r) = start(&ds);
    for method in [Method::FairDpo, Method::Dpo, Method::Kd, Method::Sft] {
        let cfg = TrainConfig {
            method,
            steps: 60,
            learning_rate: 0.01,
            batch_size: usize::MAX,
            ..TrainConfig::default()
        };
        let objective = cfg.step_objective();
        let mut values = Vec::new();
        train_task_traced(Exec::Parallel, &p, &r, &ds.tasks[0], &cfg, |_, pol| {
            values.push(objective.value(Exec::Parallel, pol, &r, &ds.tasks[0].train).unwrap());
        })
        .unwrap();
        assert_eq!(values.len(), 61);
        for w in values.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{method:?}: {} -> {}", w[0], w[1]);
        }
        assert!(values[60] < values[0]);
    }
}

#[test]
fn gamma_zero_trajectory_matches_dpo() {
    let ds = single_task();
    let (p, r) = start(&ds);
    let mut cfg = TrainConfig {
        steps: 40,
        ..TrainConfig::default()
    };
    cfg.objective.gamma = 0.0;
    let mut fair = Vec::new();
    train_task_traced(Exec::Parallel, &p, &r, &ds.tasks[0], &cfg, |_, pol| {
        fair.push(pol.weights().to_vec())
    })
    .unwrap();
    cfg.method = Method::Dpo;
    let mut dpo = Vec::new();
    train_task_traced(Exec::Parallel, &p, &r, &ds.tasks[0], &cfg, |_, pol| {
        dpo.push(pol.weights().to_vec())
    })
    .unwrap();
    assert_eq!(fair.len(), 41);
    for (a, b) in fair.iter().zip(&dpo) {
        let ab: Vec<u64> = a.iter().map(|x| x.to_bits()).collect();
        let bb: Vec<u64> = b.iter().map(|x| x.to_bits()).collect();
        assert_eq!(ab, bb);
    }
}

#[test]
fn momentum_changes_the_path() {
    let ds = single_task();
    let (p, r) = start(&ds);
    let plain = TrainConfig {
        steps: 20,
        ..TrainConfig::default()
    };
    let heavy = TrainConfig {
        momentum: 0.9,
        ..plain.clone()
    };
    let a = train_task(Exec::Parallel, &p, &r, &ds.tasks[0], &plain).unwrap();
    let b = train_task(Exec::Parallel, &p, &r, &ds.tasks[0], &heavy).unwrap();
    assert_ne!(a.weights(), b.weights());
}

#[test]
fn trainer_errors() {
    let ds = single_task();
    let (p, r) = start(&ds);
    let cfg = TrainConfig::default();
    assert!(matches!(
        train_task(Exec::Parallel, &r, &r, &ds.tasks[0], &cfg),
        Err(Error::Frozen)
    ));
    assert!(train_task(Exec::Parallel, &p, &p, &ds.tasks[0], &cfg).is_err());
    let mut empty = ds.tasks[0].clone();
    empty.train.clear();
    assert!(train_task(Exec::Parallel, &p, &r, &empty, &cfg).is_err());
    let none = TrainConfig { steps: 0, ..cfg };
    assert!(train_task(Exec::Parallel, &p, &r, &empty, &none).is_ok());
}

#[test]
fn evaluation_examples() {
    let ds = single_task();
    let task = &ds.tasks[0];
    let v = ds.vocab.size();
    let d = ds.manifest.dim;
    // one-hot feature trick: context e_0 and weight row gold gets +50
    let eval: Vec<EvalExample> = task
        .eval
        .iter()
        .map(|e| EvalExample {
            context: fairpref::ContextFeatures::new(
                (0..d).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect(),
            )
            .unwrap(),
            ..e.clone()
        })
        .collect();
    for gold in 0..v {
        let mut w = vec![0.0; v * d];
        w[gold * d] = 50.0;
        let p = PolicySnapshot::from_weights(ds.vocab.clone(), d, w).unwrap();
        let only: Vec<EvalExample> = eval.iter().filter(|e| e.gold == gold).cloned().collect();
        if !only.is_empty() {
            assert_eq!(evaluate(Exec::Parallel, &p, &only, 1).unwrap().accuracy, 1.0);
        }
    }
    let uniform = PolicySnapshot::zeros(ds.vocab.clone(), d).unwrap();
    let acc = evaluate(Exec::Parallel, &uniform, &task.eval, 1).unwrap().accuracy;
    let zeros = task.eval.iter().filter(|e| e.gold == 0).count() as f64 / task.eval.len() as f64;
    assert_eq!(acc, zeros);
    assert!(evaluate(Exec::Parallel, &uniform, &[], 1).is_err());
    assert!(matches!(
        evaluate(Exec::Parallel, &uniform, &task.eval, 2),
        Err(Error::EmptyGroup { group: 1 })
    ));
}

#[test]
fn single_task_sequence() {
    let ds = single_task();
    let cfg = TrainConfig {
        steps: 30,
        ..TrainConfig::default()
    };
    let r = run_sequence(Exec::Parallel, &ds.tasks, &ds.vocab, 4, &cfg).unwrap();
    let a = r.matrix.get(0, 0).unwrap();
    assert_eq!((r.metrics.mft, r.metrics.mfn, r.metrics.maa), (a, a, a));
    assert!(r.metrics.bwt_degenerate);
    assert_eq!(r.metrics.bwt, 0.0);
    assert_eq!(r.checkpoints[0].reference.weights(), vec![0.0; 24].as_slice());
}

#[test]
fn sequence_is_deterministic_and_anchored() {
    let ds = small_sequence();
    let cfg = TrainConfig {
        steps: 40,
        ..TrainConfig::default()
    };
    let a = run_sequence(Exec::Parallel, &ds.tasks, &ds.vocab, 8, &cfg).unwrap();
    let b = run_sequence(Exec::Sequential, &ds.tasks, &ds.vocab, 8, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.matrix.tasks(), 2);
    for t in 1..a.checkpoints.len() {
        assert_eq!(
            a.checkpoints[t].reference.to_checkpoint_json(),
            a.checkpoints[t - 1].trained.to_checkpoint_json()
        );
    }
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    write_run_artifacts(d1.path(), &a).unwrap();
    write_run_artifacts(d2.path(), &b).unwrap();
    for f in ["matrix.csv", "groups.csv", "metrics.json", "step_1/policy.json", "step_2/policy.json"] {
        assert_eq!(
            std::fs::read(d1.path().join(f)).unwrap(),
            std::fs::read(d2.path().join(f)).unwrap()
        );
    }
    let groups = std::fs::read_to_string(d1.path().join("groups.csv")).unwrap();
    // step 1 sees task 1, step 2 sees both; three groups each
    assert_eq!(groups.lines().count(), 1 + 3 + 6);
    assert!(a.metrics.minority_final_acc.is_some());
}
