mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::toy_dataset;
use ppgnet::dataio::{Window, WindowedDataset, WeightsFile, WINDOW_LEN};
use ppgnet::model::{Block, ModelConfig, PpgNet};
use ppgnet::trainer::*;
use proptest::prelude::*;

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        epochs,
        ..Default::default()
    }
}

fn block_bits(model: &PpgNet, blocks: &[Block]) -> Vec<u64> {
    model
        .parameters()
        .iter()
        .filter(|p| blocks.contains(&p.block))
        .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let ds = toy_dataset(2, 4);
    let mut model = PpgNet::build(ModelConfig { dropout: 0.0, ..Default::default() }).unwrap();
    let before = model.clone();
    let config = TrainConfig {
        learning_rate: 0.0,
        shuffle: false,
        ..quick(3)
    };
    let history = train(&mut model, &ds, &config).unwrap();
    assert!(history.iter().all(|l| *l == history[0]));
    assert_eq!(block_bits(&model, &Block::ALL), block_bits(&before, &Block::ALL));
}

#[test]
fn a_seed_fixes_the_whole_run() {
    let ds = toy_dataset(2, 6);
    let run = |seed| {
        let mut m = PpgNet::build(ModelConfig::default()).unwrap();
        let h = train(&mut m, &ds, &TrainConfig { seed, ..quick(2) }).unwrap();
        (h, WeightsFile::from_model(&m))
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_ne!(a.0, run(2).0);
}

#[test]
fn training_reduces_the_loss() {
    let ds = toy_dataset(2, 8);
    let mut model = PpgNet::build(ModelConfig::default()).unwrap();
    let history = train(&mut model, &ds, &TrainConfig { batch_size: 16, ..quick(30) }).unwrap();
    let first: f64 = history[..10].iter().sum();
    let last: f64 = history[20..].iter().sum();
    assert!(last < first, "first ten {first}, last ten {last}");
}

#[test]
fn invalid_training_settings_are_rejected() {
    let ds = toy_dataset(1, 2);
    let mut m = PpgNet::build(ModelConfig::default()).unwrap();
    for bad in [
        TrainConfig { learning_rate: -0.1, ..quick(1) },
        TrainConfig { batch_size: 0, ..quick(1) },
        TrainConfig { epochs: 0, ..quick(1) },
        TrainConfig { sparse_fraction: Some(1.0), ..quick(1) },
    ] {
        assert!(train(&mut m, &ds, &bad).is_err());
    }
    assert!(train(&mut m, &WindowedDataset::default(), &quick(1)).is_err());
}

/// Windows with placeholder samples: fold planning only reads the ids.
fn id_dataset(per_subject: &[usize]) -> WindowedDataset {
    let windows = per_subject
        .iter()
        .enumerate()
        .flat_map(|(s, &n)| {
            (0..n).map(move |w| Window {
                samples: vec![0.0; WINDOW_LEN],
                label_bpm: 80.0,
                subject_id: format!("p{s:03}"),
                window_index: w,
            })
        })
        .collect();
    WindowedDataset::new(windows).unwrap()
}

fn check_partition(ds: &WindowedDataset, plan: &FoldPlan, subject_disjoint: bool) {
    let mut seen = vec![0usize; ds.len()];
    for fold in &plan.folds {
        for &i in &fold.test {
            seen[i] += 1;
        }
        let train: BTreeSet<usize> = fold.train.iter().copied().collect();
        assert!(fold.test.iter().all(|i| !train.contains(i)));
        assert_eq!(train.len() + fold.test.len(), ds.len());
        if subject_disjoint {
            let test_ids: BTreeSet<&str> = fold.test.iter().map(|&i| ds.windows()[i].subject_id.as_str()).collect();
            assert!(fold.train.iter().all(|&i| !test_ids.contains(ds.windows()[i].subject_id.as_str())));
        }
    }
    assert!(seen.iter().all(|&c| c == 1), "every window is tested exactly once");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn subject_folds_partition_the_dataset(
        sizes in prop::collection::vec(1usize..6, 2..20),
        k in 2usize..8,
        seed in any::<u64>(),
    ) {
        let ds = id_dataset(&sizes);
        let plan = FoldPlan::new(&ds, Scheme::KFold(k), seed);
        if k > sizes.len() {
            prop_assert!(plan.is_err());
        } else {
            let plan = plan.unwrap();
            prop_assert_eq!(plan.folds.len(), k);
            check_partition(&ds, &plan, true);
            let group_sizes: Vec<usize> = plan.folds.iter().map(|f| f.test_subjects.len()).collect();
            prop_assert!(group_sizes.iter().max().unwrap() - group_sizes.iter().min().unwrap() <= 1);
        }
        let loso = FoldPlan::new(&ds, Scheme::Loso, seed).unwrap();
        prop_assert_eq!(loso.folds.len(), sizes.len());
        check_partition(&ds, &loso, true);
    }

    #[test]
    fn window_folds_partition_the_dataset(sizes in prop::collection::vec(1usize..6, 1..8), k in 2usize..6, seed in any::<u64>()) {
        let ds = id_dataset(&sizes);
        prop_assume!(ds.len() >= k);
        let plan = FoldPlan::new(&ds, Scheme::KFoldWindows(k), seed).unwrap();
        check_partition(&ds, &plan, false);
    }

    #[test]
    fn sparse_split_takes_a_rounded_share_of_every_subject(
        sizes in prop::collection::vec(1usize..40, 1..6),
        fraction in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let ds = id_dataset(&sizes);
        let (train, rest) = sparse_subset(&ds, fraction, seed).unwrap();
        prop_assert_eq!(train.len() + rest.len(), ds.len());
        let mut per_subject: BTreeMap<&str, usize> = BTreeMap::new();
        for w in train.windows() {
            *per_subject.entry(w.subject_id.as_str()).or_default() += 1;
            prop_assert!(!rest.windows().iter().any(|r| r.subject_id == w.subject_id && r.window_index == w.window_index));
        }
        for (s, &n) in sizes.iter().enumerate() {
            let id = format!("p{s:03}");
            let expected = (fraction * n as f64).round() as usize;
            prop_assert_eq!(per_subject.get(id.as_str()).copied().unwrap_or(0), expected);
        }
    }
}

#[test]
fn fifty_subjects_in_five_folds_give_ten_each() {
    let ds = id_dataset(&[3; 50]);
    let plan = FoldPlan::new(&ds, Scheme::KFold(5), 0).unwrap();
    assert!(plan.folds.iter().all(|f| f.test_subjects.len() == 10 && f.train_subjects.len() == 40));

    let other = FoldPlan::new(&ds, Scheme::KFold(5), 1).unwrap();
    assert_ne!(plan, other);
    assert!(other.folds.iter().all(|f| f.test_subjects.len() == 10));

    let k_equals_n = FoldPlan::new(&ds, Scheme::KFold(50), 0).unwrap();
    assert!(k_equals_n.folds.iter().all(|f| f.test_subjects.len() == 1));
}

#[test]
fn schemes_parse_and_print() {
    for s in ["loso", "kfold:5", "kfold-windows:3", "holdout"] {
        assert_eq!(s.parse::<Scheme>().unwrap().to_string(), s);
    }
    for s in ["kfold:1", "kfold", "kfold:x", "leave-one-out"] {
        assert!(s.parse::<Scheme>().is_err(), "{s}");
    }
}

fn source_weights() -> WeightsFile {
    let mut m = PpgNet::build(ModelConfig { seed: 21, ..Default::default() }).unwrap();
    train(&mut m, &toy_dataset(2, 4), &quick(1)).unwrap();
    WeightsFile::from_model(&m)
}

fn setup(condition: Condition, epochs: usize) -> ConditionSetup {
    let mut s = ConditionSetup::for_condition(condition);
    s.train = TrainConfig { freeze: BTreeSet::new(), ..quick(epochs) };
    s.scheme = Scheme::KFold(2);
    s
}

#[test]
fn source_only_evaluation_trains_nothing() {
    let target = toy_dataset(2, 5);
    let weights = source_weights();
    let out = run_condition(Condition::SourceOnly, &target, Some(&weights), &setup(Condition::SourceOnly, 1)).unwrap();
    assert_eq!(out.report.meta.epochs, None);
    assert_eq!(out.report.meta.condition, Some(2));
    assert_eq!(out.report.pooled().n_windows, 10);
    assert_eq!(WeightsFile::from_model(&out.models[0]), weights);
    assert!(run_condition(Condition::SourceOnly, &target, None, &setup(Condition::SourceOnly, 1)).is_err());
}

#[test]
fn fine_tuning_moves_only_the_head() {
    let target = toy_dataset(4, 6);
    let weights = source_weights();
    let frozen = [Block::Inception, Block::SeqBlock1, Block::SeqBlock2, Block::Lstm1];
    let mut source = PpgNet::build(ModelConfig::default()).unwrap();
    weights.apply_to(&mut source).unwrap();

    for condition in [Condition::FineTune, Condition::SparseRetrain] {
        let out = run_condition(condition, &target, Some(&weights), &setup(condition, 1)).unwrap();
        assert_eq!(out.report.meta.trainable_parameters, 200_401);
        assert_eq!(out.report.meta.total_parameters, 400_589);
        for model in &out.models {
            assert_eq!(block_bits(model, &frozen), block_bits(&source, &frozen), "{condition:?}");
            assert_ne!(block_bits(model, &FINE_TUNED_BLOCKS), block_bits(&source, &FINE_TUNED_BLOCKS));
            assert_eq!(model.running_stats(), source.running_stats());
        }
    }
}

#[test]
fn sparse_retraining_scores_only_the_unseen_windows() {
    let target = toy_dataset(3, 20);
    let out = run_condition(Condition::SparseRetrain, &target, Some(&source_weights()), &setup(Condition::SparseRetrain, 1)).unwrap();
    let fold = &out.report.meta.folds[0];
    assert_eq!(fold.train_windows, 9);
    assert_eq!(fold.test_windows, 51);
    assert_eq!(out.report.rows().len(), 51);
}

#[test]
fn condition_numbers_and_epochs() {
    let defaults: Vec<Option<usize>> = (1..=4).map(|n| Condition::from_number(n).unwrap().default_epochs()).collect();
    assert_eq!(defaults, [Some(750), None, Some(65), Some(90)]);
    assert!(Condition::from_number(5).is_err());
}
