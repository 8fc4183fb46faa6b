use std::collections::BTreeSet;

use ppgnet::dataio::WeightsFile;
use ppgnet::model::{Block, ModelConfig, PpgNet};
use ppgnet::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn windows(n: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| (0..1000).map(|i| ((i as f64 + seed as f64 * 13.0) * 0.013 * (k + 1) as f64).sin()).collect())
        .collect()
}

fn labels(n: usize) -> Vec<f64> {
    (0..n).map(|i| 60.0 + 7.0 * i as f64).collect()
}

fn steps(model: &mut PpgNet, n: usize, seed: u64) -> Vec<f64> {
    let (x, y) = (windows(4, seed), labels(4));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| model.train_step(&x, &y, 0.02, &mut rng).unwrap()).collect()
}

fn block_values(model: &PpgNet, block: Block) -> Vec<u64> {
    model
        .parameters()
        .iter()
        .filter(|p| p.block == block)
        .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn published_configuration_has_the_expected_parameter_counts() {
    let mut model = PpgNet::build(ModelConfig::default()).unwrap();
    let counts = model.count_parameters();
    let per_block: Vec<usize> = Block::ALL.iter().map(|b| counts.block(*b)).collect();
    assert_eq!(per_block, [636, 20576, 61536, 117440, 200320, 81]);
    assert_eq!(counts.total, 400_589);
    assert_eq!(counts.trainable, 400_589);

    model.freeze_except(&[Block::Lstm2, Block::Linear].into());
    assert_eq!(model.count_parameters().trainable, 200_401);
}

#[test]
fn inconsistent_architectures_are_rejected() {
    let c = ModelConfig {
        inception_channels: vec![4, 3, 3, 3, 2],
        ..Default::default()
    };
    assert!(PpgNet::build(c).is_err());

    let mut c = ModelConfig::default();
    c.lstm2.input = 383;
    assert!(PpgNet::build(c).is_err());

    let mut c = ModelConfig::default();
    c.inception_kernels.pop();
    assert!(PpgNet::build(c).is_err());
}

#[test]
fn zero_parameters_give_a_zero_output() {
    let mut model = PpgNet::build(ModelConfig::default()).unwrap();
    for (_, _, values) in model.parameter_values_mut() {
        values.fill(0.0);
    }
    for p in model.predict(&windows(3, 1)).unwrap() {
        assert_eq!(p, 0.0);
    }
}

#[test]
fn batched_inference_matches_one_window_at_a_time() {
    let mut model = PpgNet::build(ModelConfig::default()).unwrap();
    steps(&mut model, 2, 4); // move the running statistics off their initial values
    let x = windows(70, 2);
    let batched = model.predict(&x).unwrap();
    for (w, b) in x.iter().zip(&batched) {
        assert!((model.forward(w).unwrap() - b).abs() < 1e-12);
    }
    assert_eq!(batched, model.predict(&x).unwrap());
}

#[test]
fn wrong_window_lengths_are_rejected() {
    let model = PpgNet::build(ModelConfig::default()).unwrap();
    assert!(matches!(model.forward(&[0.0; 999]), Err(Error::ShapeMismatch(_))));
}

#[test]
fn only_the_unfrozen_blocks_move() {
    let base = PpgNet::build(ModelConfig::default()).unwrap();
    let mut tuned = base.clone();
    tuned.freeze_except(&[Block::Lstm2, Block::Linear].into());
    steps(&mut tuned, 3, 7);
    for block in [Block::Inception, Block::SeqBlock1, Block::SeqBlock2, Block::Lstm1] {
        assert_eq!(block_values(&tuned, block), block_values(&base, block), "{block} moved");
    }
    for block in [Block::Lstm2, Block::Linear] {
        assert_ne!(block_values(&tuned, block), block_values(&base, block), "{block} did not move");
    }
    // Frozen normalization layers keep their running statistics too.
    assert_eq!(tuned.running_stats(), base.running_stats());
}

#[test]
fn unfreezing_everything_is_the_same_as_not_freezing() {
    let mut a = PpgNet::build(ModelConfig::default()).unwrap();
    let mut b = a.clone();
    b.freeze_except(&Block::ALL.into_iter().collect());
    assert_eq!(steps(&mut a, 2, 1), steps(&mut b, 2, 1));
    assert_eq!(WeightsFile::from_model(&a), WeightsFile::from_model(&b));
}

#[test]
fn freezing_everything_leaves_the_loss_constant() {
    let mut model = PpgNet::build(ModelConfig { dropout: 0.0, ..Default::default() }).unwrap();
    let before = model.clone();
    model.freeze_except(&BTreeSet::new());
    assert_eq!(model.count_parameters().trainable, 0);
    let losses = steps(&mut model, 3, 2);
    assert!(losses.iter().all(|l| *l == losses[0]));
    assert_eq!(WeightsFile::from_model(&model), WeightsFile::from_model(&before));
}

#[test]
fn unknown_block_names_cannot_be_unfrozen() {
    let mut model = PpgNet::build(ModelConfig::default()).unwrap();
    assert!(matches!(model.freeze_except_named(&["LSTM3"]), Err(Error::UnknownBlock(_))));
    model.freeze_except_named(&["LSTM2", "Linear"]).unwrap();
    assert!(model.is_trainable(Block::Linear) && !model.is_trainable(Block::Inception));
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let mut a = PpgNet::build(ModelConfig { seed: 3, ..Default::default() }).unwrap();
    let mut b = PpgNet::build(ModelConfig { seed: 3, ..Default::default() }).unwrap();
    assert_eq!(a, b);
    assert_eq!(steps(&mut a, 2, 9), steps(&mut b, 2, 9));
    assert_eq!(a, b);
    let c = PpgNet::build(ModelConfig { seed: 4, ..Default::default() }).unwrap();
    assert_ne!(WeightsFile::from_model(&c), WeightsFile::from_model(&PpgNet::build(ModelConfig { seed: 3, ..Default::default() }).unwrap()));
}
