use super::*;
use crate::models::{Arch, CompTokens, ModelConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(arch: Arch, task: TaskId, seed: u64) -> Model<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::new(ModelConfig::tiny(arch), &task.spec(), &mut rng).unwrap()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn trace_covers_every_padded_step() {
    let task = TaskId::ReverseString;
    for arch in Arch::ALL {
        let m = model(arch, task, 0);
        let trace = record_trace(&m, task, &[0, 1, 1, 0]).unwrap();
        assert_eq!(trace.len(), 8, "{arch}");
        assert_eq!(trace.steps[3].token, 0);
        assert_eq!(trace.steps[4].token, m.vocab.empty());
        let s0 = &trace.steps[0];
        for s in &trace.steps {
            assert_eq!(s.hidden.len(), s0.hidden.len());
            assert_eq!(s.logits.len(), 2);
            assert_eq!(s.actions.len(), s0.actions.len());
            for (a, b) in s.memory.iter().zip(&s0.memory) {
                assert_eq!(a.cells.len(), b.cells.len());
                assert_eq!(a.head.is_some(), b.head.is_some());
            }
        }
        let expected_actions = match arch.memory() {
            crate::models::MemoryKind::None => 0,
            _ => 1,
        };
        assert_eq!(s0.actions.len(), expected_actions);
        let layers = if arch == Arch::Transformer { ModelConfig::tiny(arch).blocks + 1 } else { 0 };
        assert_eq!(s0.layers.len(), layers);
    }
}

#[test]
fn computation_steps_are_traced() {
    let task = TaskId::DuplicateString;
    let mut config = ModelConfig::tiny(Arch::TapeRnn);
    config.comp_tokens = CompTokens::Len;
    config.n_tapes = 2;
    let m = Model::<f64>::new(config, &task.spec(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let trace = record_trace(&m, task, &[1, 0, 1]).unwrap();
    assert_eq!(trace.len(), 3 + 3 + 6);
    assert_eq!(trace.steps[0].memory.len(), 2);
    let head_mass: f64 = trace.steps[5].memory[1].head.as_ref().unwrap().iter().sum();
    assert!((head_mass - 1.0).abs() < 1e-12);
}

#[test]
fn recording_is_pure() {
    let task = TaskId::ReverseString;
    for arch in Arch::ALL {
        let m = model(arch, task, 2);
        let input = [1, 0, 0, 1, 1];
        let before = m.params.snapshot();
        let a = record_trace(&m, task, &input).unwrap();
        let b = record_trace(&m, task, &input).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.params.snapshot(), before);
        let sample = TaskSample { task, length: 5, input: input.to_vec(), target: tasks::ground_truth(task, &input).unwrap() };
        let batch = batch_from_samples(vec![sample], &m.vocab, m.config.comp_tokens);
        let logits = m.predict(&batch.seq).unwrap();
        for (r, &(_, p)) in batch.seq.outputs.iter().enumerate() {
            let direct: Vec<f64> = logits.row(r).to_vec();
            assert_eq!(a.steps[p].logits, direct, "{arch}");
        }
    }
}

#[test]
fn stack_snapshots_are_padded() {
    let task = TaskId::ReverseString;
    let m = model(Arch::StackRnn, task, 3);
    let trace = record_trace(&m, task, &[0, 1, 0]).unwrap();
    let rows = trace.steps[0].memory[0].cells.len();
    assert_eq!(rows, trace.len() + 1);
    assert!(trace.steps[0].memory[0].cells[1..].iter().flatten().all(|&x| x == 0.0));
    let probs: f64 = trace.steps[2].actions[0].iter().sum();
    assert!((probs - 1.0).abs() < 1e-12);
}

#[test]
fn axis_aligned_points() {
    let points = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![2.0, 0.0], vec![-2.0, 0.0]];
    let p = pca(&points, 1).unwrap();
    assert_eq!(p.components[0], vec![1.0, 0.0]);
    let proj: Vec<f64> = p.projection.iter().map(|r| r[0]).collect();
    assert_eq!(proj, vec![1.0, -1.0, 2.0, -2.0]);
    assert!((p.explained_variance[0] - 2.5).abs() < 1e-12);
}

#[test]
fn sign_convention_and_rank_deficiency() {
    // Collinear points: the second component carries no variance.
    let points = vec![vec![0.0, 0.0], vec![-1.0, -2.0], vec![2.0, 4.0]];
    let p = pca(&points, 2).unwrap();
    let c = &p.components[0];
    let lead = if c[0].abs() > c[1].abs() { c[0] } else { c[1] };
    assert!(lead > 0.0);
    assert!(p.explained_variance[1].abs() < 1e-12);
    assert!(p.projection.iter().all(|r| r[1].abs() < 1e-12));
}

#[test]
fn invalid_pca_inputs() {
    assert!(pca(&[vec![1.0]], 1).is_err());
    assert!(pca(&[vec![1.0, 2.0], vec![3.0]], 1).is_err());
    assert!(pca(&[vec![1.0, 2.0], vec![3.0, 1.0]], 3).is_err());
    assert!(pca(&[vec![1.0, 2.0], vec![3.0, 1.0]], 0).is_err());
}

#[test]
fn full_rank_reconstruction() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let points = random_points(&mut rng, 20, 5);
    let p = pca(&points, 5).unwrap();
    for (x, coords) in points.iter().zip(&p.projection) {
        for (a, b) in p.reconstruct(coords).iter().zip(x) {
            assert!((a - b).abs() <= 1e-8);
        }
    }
}

#[test]
fn jacobi_eigenpairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 6;
    let b = random_points(&mut rng, d, d);
    let a: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| b[i][j] + b[j][i]).collect()).collect();
    let (values, vectors) = jacobi_eigen(&a, 1e-10).unwrap();
    for (lambda, v) in values.iter().zip(&vectors) {
        for i in 0..d {
            let av: f64 = (0..d).map(|j| a[i][j] * v[j]).sum();
            assert!((av - lambda * v[i]).abs() < 1e-8);
        }
    }
    for i in 0..d {
        for j in 0..d {
            let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(x, y)| x * y).sum();
            assert!((dot - f64::from(u8::from(i == j))).abs() < 1e-10);
        }
    }
    let trace: f64 = (0..d).map(|i| a[i][i]).sum();
    assert!((values.iter().sum::<f64>() - trace).abs() < 1e-9);
    assert!(values.windows(2).all(|w| w[0] >= w[1]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn spectrum_properties(seed in any::<u64>(), n in 2usize..15, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = random_points(&mut rng, n, d);
        let k = n.min(d);
        let p = pca(&points, k).unwrap();
        prop_assert!(p.explained_variance.windows(2).all(|w| w[0] >= w[1] - 1e-12));
        let total: f64 = (0..d)
            .map(|j| {
                let m = points.iter().map(|x| x[j]).sum::<f64>() / n as f64;
                points.iter().map(|x| (x[j] - m).powi(2)).sum::<f64>() / n as f64
            })
            .sum();
        prop_assert!(p.explained_variance.iter().sum::<f64>() <= total + 1e-9);
    }

    #[test]
    fn full_projection_preserves_distances(seed in any::<u64>(), n in 2usize..12, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = random_points(&mut rng, n.max(d), d);
        let p = pca(&points, d).unwrap();
        for i in 0..points.len() {
            for j in 0..points.len() {
                let before: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let after: f64 =
                    p.projection[i].iter().zip(&p.projection[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                prop_assert!((before - after).abs() <= 1e-8);
            }
        }
    }
}

#[test]
fn clusters_by_radius() {
    let points = vec![vec![0.0, 0.0], vec![0.05, 0.0], vec![1.0, 1.0], vec![1.0, 1.04], vec![5.0, 5.0]];
    assert_eq!(count_clusters(&points, 0.1), 3);
    assert_eq!(count_clusters(&points, 10.0), 1);
    assert_eq!(count_clusters(&points, 0.0), 5);
    assert!((diameter(&points) - 50f64.sqrt()).abs() < 1e-12);
    let four: Vec<Vec<f64>> = [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0), (10.0, 10.0)]
        .iter()
        .flat_map(|&(x, y)| (0..5).map(move |i| vec![x + 0.01 * i as f64, y, 0.3]))
        .collect();
    assert_eq!(state_clusters(&four).unwrap(), 4);
}

#[test]
fn export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for (arch, task) in [(Arch::TapeRnn, TaskId::DuplicateString), (Arch::StackLstm, TaskId::ReverseString), (Arch::Transformer, TaskId::ParityCheck)] {
        let m = model(arch, task, 4);
        let trace = record_trace(&m, task, &[0, 1, 1]).unwrap();
        let path = dir.path().join(arch.name());
        export_trace(&trace, &path).unwrap();
        assert_eq!(import_trace(&path).unwrap(), trace, "{arch}");
        let rows = std::fs::read_to_string(path.join("states.csv")).unwrap().lines().count() - 1;
        assert_eq!(rows, trace.len());
        let action_rows = std::fs::read_to_string(path.join("actions.csv")).unwrap().lines().count() - 1;
        assert_eq!(action_rows, trace.len() * trace.steps[0].actions.len());
    }
}

#[test]
fn plain_rnn_actions_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(Arch::Rnn, TaskId::EvenPairs, 5);
    let trace = record_trace(&m, TaskId::EvenPairs, &[0, 1, 0, 0]).unwrap();
    export_trace(&trace, dir.path()).unwrap();
    assert_eq!(std::fs::read_to_string(dir.path().join("actions.csv")).unwrap(), "step,memory\n");
    assert_eq!(std::fs::read_to_string(dir.path().join("memory.csv")).unwrap(), "step,memory,slot,head\n");
    let states = std::fs::read_to_string(dir.path().join("states.csv")).unwrap();
    assert!(states.starts_with("step,token,h0,h1,"));
    assert_eq!(states.lines().count(), 1 + 5);
    assert_eq!(import_trace(dir.path()).unwrap(), trace);
}

#[test]
fn import_rejects_damaged_bundles() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(Arch::StackRnn, TaskId::ReverseString, 6);
    export_trace(&record_trace(&m, TaskId::ReverseString, &[1, 1]).unwrap(), dir.path()).unwrap();
    std::fs::write(dir.path().join("actions.csv"), "step,memory,p0,p1,p2\n9,0,1,0,0\n").unwrap();
    assert!(import_trace(dir.path()).is_err());
    std::fs::remove_file(dir.path().join("memory.csv")).unwrap();
    assert!(import_trace(dir.path()).is_err());
}
