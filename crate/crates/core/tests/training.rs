//! Longer training runs on the bundled corpora.

use carryon_core::basemodel::{BaseConfig, BaseModel, TokenSequence};
use carryon_core::carryon::{BaseInfo, CarryOn, CarryOnConfig, FfnConfig};
use carryon_core::data::{arithmetic_corpus, memorization_corpus, text_sequences};
use carryon_core::trainer::{train_carryon, AlphaMode, Corpora, LocalTapSource, TrainConfig, TrainReport};

fn frozen_base(seed: u64) -> BaseModel {
    let mut m = BaseModel::new(BaseConfig {
        dim: 32,
        layers: 2,
        heads: 2,
        max_seq: 64,
        seed,
        ..BaseConfig::default()
    })
    .unwrap();
    m.freeze();
    m
}

fn run(base: &BaseModel, cc: CarryOnConfig, train: &[TokenSequence], val: &[TokenSequence], tc: &TrainConfig) -> TrainReport {
    let mut carry = CarryOn::new(cc, vec![BaseInfo::from_model("base", base).unwrap()]).unwrap();
    let mut src = LocalTapSource::new(vec![base], &carry, 0).unwrap().with_cache();
    let data = Corpora {
        train,
        val,
        general: None,
    };
    train_carryon(&mut carry, &mut src, data, tc).unwrap()
}

fn epoch_means(r: &TrainReport, steps_per_epoch: usize) -> Vec<f64> {
    r.train_losses()
        .chunks(steps_per_epoch)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

#[test]
fn memorization_loss_falls_every_epoch() {
    let docs = memorization_corpus(3000, 16, 11);
    let seqs = text_sequences(&docs.join("\n"), 64).unwrap();
    assert_eq!(seqs.len(), 3000);
    let base = frozen_base(1);
    let cc = CarryOnConfig {
        d_carry: 32,
        layers: 1,
        heads: 2,
        ffn: FfnConfig::Dense { hidden: 128 },
        alpha_init: 1.0,
        ..CarryOnConfig::default()
    };
    let tc = TrainConfig {
        epochs: 5,
        batch_size: 16,
        lr: 3e-3,
        min_lr: 3e-4,
        mask_before: 1,
        alpha_mode: AlphaMode::Fixed,
        seed: 4,
        ..TrainConfig::default()
    };
    let r = run(&base, cc, &seqs, &seqs[..64], &tc);
    let means = epoch_means(&r, 3000usize.div_ceil(16));
    assert_eq!(means.len(), 5);
    for w in means.windows(2) {
        assert!(w[1] < w[0], "epoch means {means:?}");
    }
}

/// First step at which the trailing mean of `window` train losses is at or
/// below `threshold`.
fn steps_to(losses: &[f64], window: usize, threshold: f64) -> Option<usize> {
    (window..=losses.len()).find(|&end| losses[end - window..end].iter().sum::<f64>() / window as f64 <= threshold)
}

#[test]
fn bigger_carryon_reaches_the_threshold_sooner() {
    let seqs = text_sequences(&arithmetic_corpus(12_000, 5), 64).unwrap();
    let (train, val) = seqs.split_at(seqs.len() - 32);
    let base = frozen_base(2);
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 4,
        lr: 3e-3,
        min_lr: 3e-3,
        warmup_steps: 5,
        mask_before: 1,
        alpha_mode: AlphaMode::Fixed,
        seed: 9,
        ..TrainConfig::default()
    };
    let config = |hidden, layers| CarryOnConfig {
        d_carry: 32,
        layers,
        heads: 2,
        ffn: FfnConfig::Dense { hidden },
        alpha_init: 1.0,
        ..CarryOnConfig::default()
    };
    let small = run(&base, config(64, 1), train, val, &tc).train_losses();
    let large = run(&base, config(256, 3), train, val, &tc).train_losses();

    // The best smoothed loss the small carry-on ever reaches.
    let window = 20;
    let best_small = (window..=small.len())
        .map(|end| small[end - window..end].iter().sum::<f64>() / window as f64)
        .fold(f64::INFINITY, f64::min);
    let s = steps_to(&small, window, best_small).unwrap();
    let l = steps_to(&large, window, best_small).expect("large carry-on never reached the threshold");
    assert!(l < s, "large reached {best_small:.4} at step {l}, small at {s}");
}
