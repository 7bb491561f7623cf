//! The carry-on training loop.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::alpha::{
    balance_point_search, select_alpha_grid, select_alpha_neighborhood, AlphaMode, AlphaRecord, AlphaState,
};
use super::optim::{AdamWConfig, OptimState};
use super::schedule::CosineWarmup;
use super::source::TapSource;
use crate::basemodel::{BaseModel, TokenSequence};
use crate::carryon::{save_bundle, CarryOn, Mode, TapNodes};
use crate::error::{Error, Result};
use crate::evalkit::{prepare_examples, val_cross_entropy, Example};
use crate::numcore::{cross_entropy_next_token, named_rng, Float, Graph, Tensor, Var};

pub const DEFAULT_MASK_BEFORE: usize = 30;
pub const DEFAULT_MAX_SEQ_LEN: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub lr: Float,
    pub min_lr: Float,
    pub warmup_steps: usize,
    pub weight_decay: Float,
    pub mask_before: usize,
    pub max_seq_len: usize,
    pub alpha_mode: AlphaMode,
    /// Smallest α the balance search may reach.
    pub balance_floor: Float,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Where to write the last good bundle if training diverges.
    pub checkpoint: Option<PathBuf>,
    /// Base learning rate for joint training.
    pub base_lr: Float,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 4,
            lr: 1e-4,
            min_lr: 1e-5,
            warmup_steps: 10,
            weight_decay: 0.0,
            mask_before: DEFAULT_MASK_BEFORE,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            alpha_mode: AlphaMode::Grid,
            balance_floor: 0.01,
            max_steps: None,
            seed: 0,
            checkpoint: None,
            base_lr: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub split: Split,
    pub alpha: Float,
    pub loss: Float,
    pub lr: Float,
    pub wallclock_ms: u128,
}

pub const CURVE_HEADER: &str = "step,split,alpha,loss,lr,wallclock_ms";

pub fn curves_csv(points: &[CurvePoint]) -> String {
    let mut s = format!("{CURVE_HEADER}\n");
    for p in points {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.step,
            p.split.as_str(),
            p.alpha,
            p.loss,
            p.lr,
            p.wallclock_ms
        ));
    }
    s
}

pub fn write_curves_csv(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(curves_csv(points).as_bytes())?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub curves: Vec<CurvePoint>,
    pub alpha: AlphaState,
    /// Every parameter name the optimizer wrote.
    pub touched: BTreeSet<String>,
    pub initial_val_loss: Float,
    pub final_val_loss: Float,
    /// Payload bytes received from the tap source.
    pub bytes_received: u64,
}

impl TrainReport {
    pub fn train_losses(&self) -> Vec<Float> {
        self.curves.iter().filter(|p| p.split == Split::Train).map(|p| p.loss).collect()
    }

    pub fn bytes_per_step(&self) -> Float {
        if self.steps == 0 {
            0.0
        } else {
            self.bytes_received as Float / self.steps as Float
        }
    }
}

/// Train, validation, and (for balance mode) general-domain validation data.
#[derive(Clone, Copy, Debug)]
pub struct Corpora<'a> {
    pub train: &'a [TokenSequence],
    pub val: &'a [TokenSequence],
    pub general: Option<&'a [TokenSequence]>,
}

pub fn truncate_all(seqs: &[TokenSequence], max_len: usize) -> Vec<TokenSequence> {
    seqs.iter()
        .map(|s| {
            if s.len() <= max_len {
                s.clone()
            } else {
                TokenSequence::new(s.ids()[..max_len].to_vec(), usize::MAX, max_len).expect("prefix of a valid sequence")
            }
        })
        .collect()
}

fn check_lengths(seqs: &[TokenSequence], mask_before: usize, what: &str) -> Result<()> {
    if let Some((i, s)) = seqs.iter().enumerate().find(|(_, s)| s.len() - 1 <= mask_before) {
        return Err(Error::data(format!(
            "{what} sequence {i} has {} tokens; nothing is scored after masking the first {mask_before}",
            s.len()
        )));
    }
    Ok(())
}

fn total_steps(n_train: usize, cfg: &TrainConfig) -> usize {
    let per_epoch = n_train.div_ceil(cfg.batch_size);
    let all = per_epoch * cfg.epochs;
    cfg.max_steps.map_or(all, |m| m.min(all))
}

/// Chooses α for the next epoch. Evaluation only reads the parameters, so the
/// search leaves training state untouched.
fn select_alpha(
    carry: &CarryOn,
    state: &AlphaState,
    val: &[Example],
    general: Option<&[Example]>,
    cfg: &TrainConfig,
) -> Result<(Float, Vec<(Float, Float)>)> {
    let j = |a: Float| val_cross_entropy(carry, val, a, cfg.mask_before);
    match state.mode {
        AlphaMode::Fixed => Ok((state.alpha, Vec::new())),
        AlphaMode::Grid => {
            let s = select_alpha_grid(j)?;
            Ok((s.alpha, s.evaluated))
        }
        AlphaMode::Neighborhood => {
            let s = select_alpha_neighborhood(state.alpha, j)?;
            Ok((s.alpha, s.evaluated))
        }
        AlphaMode::Balance => {
            let general = general.ok_or_else(|| Error::config("balance mode needs a general validation set"))?;
            let r = balance_point_search(
                j,
                |a| val_cross_entropy(carry, general, a, cfg.mask_before),
                1.0,
                0.5,
                cfg.balance_floor,
            )?;
            Ok((r.alpha, r.probes.iter().map(|p| (p.alpha, p.j_custom)).collect()))
        }
    }
}

/// Builds one step's loss: the mean over the batch of each sequence's masked
/// mean next-token loss.
fn batch_loss(g: &mut Graph, losses: Vec<Var>) -> Result<Var> {
    let b = losses.len() as Float;
    let mut acc: Option<Var> = None;
    for l in losses {
        let l = if b > 1.0 { g.scale(l, 1.0 / b) } else { l };
        acc = Some(match acc {
            Some(a) => g.add(a, l)?,
            None => l,
        });
    }
    acc.ok_or_else(|| Error::data("empty batch"))
}

fn diverged(carry: &CarryOn, step: usize, cfg: &TrainConfig) -> Error {
    let checkpoint = cfg.checkpoint.as_ref().and_then(|p| match save_bundle(carry, p) {
        Ok(()) => Some(p.clone()),
        Err(e) => {
            log::error!("could not write checkpoint {}: {e}", p.display());
            None
        }
    });
    Error::Divergence { step, checkpoint }
}

/// Next-token training of the carry-on with a frozen base behind `source`.
pub fn train_carryon(
    carry: &mut CarryOn,
    source: &mut dyn TapSource,
    data: Corpora<'_>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    if data.train.is_empty() {
        return Err(Error::data("empty training set"));
    }
    let max_len = cfg.max_seq_len.min(source.max_len() + 1);
    let train = truncate_all(data.train, max_len);
    let val = truncate_all(data.val, max_len);
    check_lengths(&train, cfg.mask_before, "training")?;
    check_lengths(&val, cfg.mask_before, "validation")?;
    let val_ex = prepare_examples(source, &val)?;
    let general_ex = match data.general {
        Some(gs) => {
            let gs = truncate_all(gs, max_len);
            check_lengths(&gs, cfg.mask_before, "general")?;
            Some(prepare_examples(source, &gs)?)
        }
        None => None,
    };

    let total = total_steps(train.len(), cfg);
    let sched = CosineWarmup::new(cfg.warmup_steps, total, cfg.lr, cfg.min_lr);
    let mut opt = OptimState::new(
        carry.store(),
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut state = AlphaState::new(carry.alpha, cfg.alpha_mode);
    let clock = Instant::now();
    let mut curves = Vec::new();
    let initial_val = val_cross_entropy(carry, &val_ex, state.alpha, cfg.mask_before)?;
    curves.push(CurvePoint {
        step: 0,
        split: Split::Val,
        alpha: state.alpha,
        loss: initial_val,
        lr: sched.at(0),
        wallclock_ms: clock.elapsed().as_millis(),
    });
    let mut final_val = initial_val;
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut named_rng(cfg.seed, &format!("epoch.{epoch}")));
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break 'epochs;
            }
            let lr = sched.at(step);
            let progress = step as Float / total.max(1) as Float;
            let p = carry.router_dropout_at(progress);
            let mut rng = named_rng(cfg.seed, &format!("router.{step}"));
            let mut g = Graph::new();
            let alpha = g.constant(Tensor::scalar(state.alpha));
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &train[i];
                let taps = source.taps(s.inputs())?;
                let out = carry.forward_with(
                    &mut g,
                    &taps,
                    alpha,
                    Mode::Train {
                        router_dropout: p,
                        rng: &mut rng,
                    },
                )?;
                losses.push(cross_entropy_next_token(&mut g, out.logits, s.targets(), cfg.mask_before)?);
            }
            let loss = batch_loss(&mut g, losses)?;
            let l = g.value(loss).data()[0];
            if !l.is_finite() {
                return Err(diverged(carry, step, cfg));
            }
            let store = carry.store_mut();
            store.zero_grad();
            g.backward(loss)?.accumulate(&g, store);
            opt.step(store, lr)?;
            step += 1;
            curves.push(CurvePoint {
                step,
                split: Split::Train,
                alpha: state.alpha,
                loss: l,
                lr,
                wallclock_ms: clock.elapsed().as_millis(),
            });
        }
        let (chosen, evaluated) = select_alpha(carry, &state, &val_ex, general_ex.as_deref(), cfg)?;
        if !evaluated.is_empty() {
            log::info!(
                "epoch {epoch}: alpha candidates {}",
                evaluated
                    .iter()
                    .map(|(a, j)| format!("{a:.4}:{j:.5}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            );
        }
        state.alpha = chosen;
        carry.alpha = chosen;
        state.history.push(AlphaRecord {
            epoch,
            evaluated: evaluated.clone(),
            chosen,
        });
        final_val = match evaluated.iter().find(|(a, _)| *a == chosen) {
            Some(&(_, j)) if state.mode != AlphaMode::Balance => j,
            _ => val_cross_entropy(carry, &val_ex, chosen, cfg.mask_before)?,
        };
        curves.push(CurvePoint {
            step,
            split: Split::Val,
            alpha: chosen,
            loss: final_val,
            lr: sched.at(step),
            wallclock_ms: clock.elapsed().as_millis(),
        });
    }
    Ok(TrainReport {
        steps: step,
        curves,
        alpha: state,
        touched: opt.touched().clone(),
        initial_val_loss: initial_val,
        final_val_loss: final_val,
        bytes_received: source.bytes_received(),
    })
}

/// Trains the base together with the carry-on (local, passthrough taps only).
/// α stays fixed; the base is frozen again afterwards.
pub fn train_joint(
    carry: &mut CarryOn,
    base: &mut BaseModel,
    data: Corpora<'_>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if carry.bases().len() != 1 {
        return Err(Error::config("joint training supports exactly one base"));
    }
    if cfg.batch_size == 0 || data.train.is_empty() || data.val.is_empty() {
        return Err(Error::config("joint training needs data and a positive batch size"));
    }
    for p in base.store_mut().iter_mut() {
        p.trainable = true;
    }
    let max_len = cfg.max_seq_len.min(base.config().max_seq + 1);
    let train = truncate_all(data.train, max_len);
    let val = truncate_all(data.val, max_len);
    check_lengths(&train, cfg.mask_before, "training")?;
    check_lengths(&val, cfg.mask_before, "validation")?;
    let top = base.config().layers;
    let shallow = carry.config().shallow_depths.clone();
    let total = total_steps(train.len(), cfg);
    let sched = CosineWarmup::new(cfg.warmup_steps, total, cfg.lr, cfg.min_lr);
    let base_sched = CosineWarmup::new(cfg.warmup_steps, total, cfg.base_lr, cfg.base_lr * cfg.min_lr / cfg.lr.max(Float::MIN_POSITIVE));
    let adam = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = OptimState::new(carry.store(), adam);
    let mut base_opt = OptimState::new(base.store(), adam);
    let clock = Instant::now();
    let eval = |carry: &CarryOn, base: &BaseModel| -> Result<Float> {
        let mut src = super::source::LocalTapSource::new(vec![base], carry, 0)?;
        let ex = prepare_examples(&mut src, &val)?;
        val_cross_entropy(carry, &ex, carry.alpha, cfg.mask_before)
    };
    let initial_val = eval(carry, base)?;
    let mut curves = vec![CurvePoint {
        step: 0,
        split: Split::Val,
        alpha: carry.alpha,
        loss: initial_val,
        lr: sched.at(0),
        wallclock_ms: 0,
    }];
    let mut final_val = initial_val;
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut named_rng(cfg.seed, &format!("epoch.{epoch}")));
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break 'epochs;
            }
            let lr = sched.at(step);
            let p = carry.router_dropout_at(step as Float / total.max(1) as Float);
            let mut rng = named_rng(cfg.seed, &format!("router.{step}"));
            let mut g = Graph::new();
            let alpha = g.constant(Tensor::scalar(carry.alpha));
            let mut losses = Vec::new();
            for &i in chunk {
                let s = &train[i];
                let trace = base.forward(&mut g, &[s.inputs()], false)?;
                let nodes = vec![TapNodes {
                    deep: trace.taps[top],
                    shallow: shallow.iter().map(|&d| trace.taps[d]).collect(),
                }];
                let head = g.param(base.store(), base.head_param());
                let out = carry.forward_nodes(
                    &mut g,
                    &nodes,
                    alpha,
                    Some(head),
                    Mode::Train {
                        router_dropout: p,
                        rng: &mut rng,
                    },
                )?;
                losses.push(cross_entropy_next_token(&mut g, out.logits, s.targets(), cfg.mask_before)?);
            }
            let loss = batch_loss(&mut g, losses)?;
            let l = g.value(loss).data()[0];
            if !l.is_finite() {
                base.freeze();
                return Err(diverged(carry, step, cfg));
            }
            let grads = g.backward(loss)?;
            carry.store_mut().zero_grad();
            base.store_mut().zero_grad();
            grads.accumulate(&g, carry.store_mut());
            grads.accumulate(&g, base.store_mut());
            opt.step(carry.store_mut(), lr)?;
            base_opt.step(base.store_mut(), base_sched.at(step))?;
            step += 1;
            curves.push(CurvePoint {
                step,
                split: Split::Train,
                alpha: carry.alpha,
                loss: l,
                lr,
                wallclock_ms: clock.elapsed().as_millis(),
            });
        }
        carry.set_base_head(0, base.output_head().clone());
        final_val = eval(carry, base)?;
        curves.push(CurvePoint {
            step,
            split: Split::Val,
            alpha: carry.alpha,
            loss: final_val,
            lr: sched.at(step),
            wallclock_ms: clock.elapsed().as_millis(),
        });
    }
    base.freeze();
    let mut touched = opt.touched().clone();
    touched.extend(base_opt.touched().iter().map(|n| format!("base.{n}")));
    Ok(TrainReport {
        steps: step,
        curves,
        alpha: AlphaState::new(carry.alpha, AlphaMode::Fixed),
        touched,
        initial_val_loss: initial_val,
        final_val_loss: final_val,
        bytes_received: 0,
    })
}
