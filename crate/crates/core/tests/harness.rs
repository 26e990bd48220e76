use nabla_core::harness::{
    distill, load_checkpoint, save_checkpoint, synth_dataset, train, write_csv, AttentionMode, Dataset,
    ToyDiT, ToyDiTConfig, CSV_HEADER,
};
use nabla_core::{NablaError, Tensor, TokenGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(mode: AttentionMode, steps: usize) -> ToyDiTConfig {
    ToyDiTConfig {
        grid: TokenGrid::new(2, 8, 8, 2).unwrap(),
        depth: 1,
        train_steps: steps,
        batch: 2,
        train_samples: 8,
        val_samples: 2,
        val_every: 5,
        attention_mode: mode,
        ..ToyDiTConfig::default()
    }
}

fn losses(run: &nabla_core::harness::TrainRun) -> Vec<f64> {
    run.records.iter().map(|r| r.train_loss).collect()
}

#[test]
fn identical_seeds_give_identical_runs() {
    let config = small(AttentionMode::Nabla { thr: 0.6 }, 12);
    let data = Dataset::synth(&config).unwrap();
    let a = train(&config, &data).unwrap();
    let b = train(&config, &data).unwrap();
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(a.model, b.model);
    let vals: Vec<_> = a.records.iter().map(|r| r.val_loss).collect();
    assert_eq!(vals, b.records.iter().map(|r| r.val_loss).collect::<Vec<_>>());
}

#[test]
fn saturated_threshold_tracks_full_attention_bitwise() {
    let full = small(AttentionMode::Full, 10);
    let sat = small(AttentionMode::Nabla { thr: 1.0 }, 10);
    let data = Dataset::synth(&full).unwrap();
    let a = train(&full, &data).unwrap();
    let b = train(&sat, &data).unwrap();
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(a.model.params(), b.model.params());
    assert!(b.records.iter().all(|r| r.sparsity == 0.0));
}

#[test]
fn records_are_well_formed() {
    let config = small(AttentionMode::Full, 11);
    let data = Dataset::synth(&config).unwrap();
    let run = train(&config, &data).unwrap();
    assert_eq!(run.records.len(), 11);
    for (i, r) in run.records.iter().enumerate() {
        assert_eq!(r.step, i);
        assert!(r.train_loss.is_finite());
        assert!(r.step_seconds > 0.0);
        assert_eq!(r.val_loss.is_some(), i % 5 == 0 || i == 10);
    }
}

#[test]
fn nabla_masks_move_while_sta_stays_put() {
    let config = small(
        AttentionMode::NablaSta {
            thr: 0.5,
            window: (1, 1, 1),
        },
        30,
    );
    let data = Dataset::synth(&config).unwrap();
    let run = train(&config, &data).unwrap();
    let nabla: Vec<u64> = run.stats.iter().map(|s| s.nabla_popcount).collect();
    let sta: Vec<u64> = run.stats.iter().map(|s| s.sta_popcount).collect();
    assert!(
        nabla.iter().any(|&p| p != nabla[0]),
        "adaptive popcount never changed: {nabla:?}"
    );
    assert!(sta.iter().all(|&p| p == sta[0] && p > 0));
    assert!(run.records.iter().all(|r| r.sparsity > 0.0 && r.sparsity < 1.0));
}

#[test]
fn reorder_is_transparent_without_attention() {
    let config = small(AttentionMode::Identity, 0);
    let mut model = ToyDiT::init(&config, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let x = &synth_dataset(&config.grid, config.channels, 1, 9).unwrap()[0];
    let (with, _) = model.predict(AttentionMode::Identity, x, 0.4).unwrap();
    model.set_reorder(false).unwrap();
    let (without, _) = model.predict(AttentionMode::Identity, x, 0.4).unwrap();
    assert_eq!(with, without);
}

#[test]
fn reorder_changes_sparse_attention_blocks() {
    // Blocks are contiguous token runs, so the ordering matters once attention is sparse.
    let config = small(AttentionMode::Full, 0);
    let mut model = ToyDiT::init(&config, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let x = &synth_dataset(&config.grid, config.channels, 1, 9).unwrap()[0];
    let mode = AttentionMode::Nabla { thr: 0.3 };
    let (with, _) = model.predict(mode, x, 0.4).unwrap();
    model.set_reorder(false).unwrap();
    let (without, _) = model.predict(mode, x, 0.4).unwrap();
    assert_ne!(with, without);
}

#[test]
fn self_distillation_starts_at_zero() {
    let config = small(AttentionMode::Full, 6);
    let data = Dataset::synth(&config).unwrap();
    let teacher = train(&config, &data).unwrap().model;
    for mode in [AttentionMode::Full, AttentionMode::Nabla { thr: 1.0 }] {
        let run = distill(mode, AttentionMode::Full, &teacher, &config, &data).unwrap();
        assert_eq!(run.records[0].train_loss, 0.0, "{mode}");
        assert_eq!(run.records[0].val_loss, Some(0.0), "{mode}");
    }
    let sparse = distill(
        AttentionMode::Nabla { thr: 0.4 },
        AttentionMode::Full,
        &teacher,
        &config,
        &data,
    )
    .unwrap();
    assert!(sparse.records[0].train_loss > 0.0);
}

#[test]
fn divergence_reports_the_step() {
    let mut config = small(AttentionMode::Full, 50);
    config.lr = 1e30;
    let data = Dataset::synth(&config).unwrap();
    match train(&config, &data) {
        Err(NablaError::Divergence { step, loss }) => {
            assert!((1..50).contains(&step));
            assert!(!loss.is_finite());
        }
        other => panic!("expected divergence, got {:?}", other.map(|r| r.records.len())),
    }
}

#[test]
fn rejects_mismatched_data() {
    let config = small(AttentionMode::Full, 2);
    let data = Dataset {
        train: vec![Tensor::zeros(vec![4, config.channels]).unwrap()],
        val: vec![Tensor::zeros(vec![4, config.channels]).unwrap()],
    };
    assert!(matches!(train(&config, &data), Err(NablaError::Geometry(_))));
}

#[test]
fn checkpoint_round_trip() {
    let config = small(AttentionMode::Nabla { thr: 0.7 }, 3);
    let data = Dataset::synth(&config).unwrap();
    let model = train(&config, &data).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back, model);
}

#[test]
fn missing_checkpoint_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_checkpoint(dir.path().join("nope")),
        Err(NablaError::Io(_))
    ));
}

#[test]
fn csv_layout() {
    let config = small(AttentionMode::Full, 6);
    let data = Dataset::synth(&config).unwrap();
    let run = train(&config, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.csv");
    write_csv(&run.records, &path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 7);
    assert!(lines[2].split(',').nth(2).unwrap().is_empty());
    assert!(lines.iter().skip(1).all(|l| l.split(',').count() == 5));
}

/// Least-squares slope of `y` against its index.
fn slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = y.iter().sum::<f64>() / n;
    let num: f64 = y
        .iter()
        .enumerate()
        .map(|(i, v)| (i as f64 - mx) * (v - my))
        .sum();
    let den: f64 = (0..y.len()).map(|i| (i as f64 - mx).powi(2)).sum();
    num / den
}

#[test]
fn sparse_student_learns_from_the_teacher() {
    let config = ToyDiTConfig::default();
    let data = Dataset::synth(&config).unwrap();
    let teacher = train(&config, &data).unwrap().model;
    let run = distill(
        AttentionMode::Nabla { thr: 0.4 },
        AttentionMode::Full,
        &teacher,
        &config,
        &data,
    )
    .unwrap();
    let curve = losses(&run);
    assert_eq!(curve.len(), 200);
    assert!(curve[0] > 0.0);
    assert!(slope(&curve) < 0.0, "slope {}", slope(&curve));
    assert!(run.final_train_loss(10) < curve[0]);
}
