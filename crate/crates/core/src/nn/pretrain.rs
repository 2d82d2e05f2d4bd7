use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ToyTransformer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Fraction of the corpus held out for evaluation.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainSchedule {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            learning_rate: 3e-3,
            warmup_steps: 100,
            grad_clip: 1.0,
            holdout_fraction: 0.05,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    /// `None` when the corpus was too small to hold anything out.
    pub heldout_loss: Option<f64>,
    pub uniform_baseline: f64,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.99;
const ADAM_EPS: f64 = 1e-8;
// loss is re-estimated on at most this many held-in documents
const EVAL_DOCS: usize = 64;

/// Next-token pretraining with Adam, warmup and cosine decay. Consumes the
/// model and returns it frozen.
pub fn pretrain(
    mut model: ToyTransformer,
    corpus: &[Vec<u32>],
    schedule: &PretrainSchedule,
) -> Result<(ToyTransformer, PretrainReport)> {
    if model.is_frozen() {
        return Err(Error::Config("cannot pretrain a frozen model".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Empty("pretraining corpus"));
    }
    if schedule.batch_size == 0 || !(schedule.learning_rate > 0.0) {
        return Err(Error::Config("batch_size and learning_rate must be positive".into()));
    }
    for doc in corpus {
        model.check_tokens(doc)?;
    }
    let n_hold = if corpus.len() >= 2 {
        ((corpus.len() as f64 * schedule.holdout_fraction).round() as usize).min(corpus.len() - 1)
    } else {
        0
    };
    let (train, holdout) = corpus.split_at(corpus.len() - n_hold);

    let uniform_baseline = (model.config().vocab_size as f64).ln();
    let eval = |m: &ToyTransformer, docs: &[Vec<u32>]| -> Result<f64> {
        let docs = &docs[..docs.len().min(EVAL_DOCS)];
        let mut total = 0.0;
        for doc in docs {
            total += m.lm_loss(doc)?;
        }
        Ok(total / docs.len() as f64)
    };
    let initial_train_loss = eval(&model, train)?;

    let n = model.n_params();
    let mut grads = vec![0.0f32; n];
    let mut m1 = vec![0.0f64; n];
    let mut m2 = vec![0.0f64; n];
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let scale = 1.0 / schedule.batch_size as f32;

    for step in 0..schedule.steps {
        grads.fill(0.0);
        let mut batch_loss = 0.0;
        for _ in 0..schedule.batch_size {
            let doc = &train[rng.random_range(0..train.len())];
            batch_loss += model.lm_loss_and_grad(doc, &mut grads, scale)?;
        }
        batch_loss /= schedule.batch_size as f64;
        if !batch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "pretraining diverged at step {step} (loss {batch_loss})"
            )));
        }
        if step % 100 == 0 {
            log::debug!("pretrain step {step}: loss {batch_loss:.4}");
        }

        let mut clip = 1.0;
        if schedule.grad_clip > 0.0 {
            let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
            if norm > schedule.grad_clip {
                clip = schedule.grad_clip / norm;
            }
        }
        let lr = lr_at(schedule, step);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - ADAM_B1.powi(t);
        let bc2 = 1.0 - ADAM_B2.powi(t);
        let weights = model.weights_mut()?;
        for i in 0..n {
            let g = grads[i] as f64 * clip;
            m1[i] = ADAM_B1 * m1[i] + (1.0 - ADAM_B1) * g;
            m2[i] = ADAM_B2 * m2[i] + (1.0 - ADAM_B2) * g * g;
            let update = lr * (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + ADAM_EPS);
            weights[i] -= update as f32;
        }
    }

    let final_train_loss = eval(&model, train)?;
    let heldout_loss = if holdout.is_empty() {
        None
    } else {
        Some(eval(&model, holdout)?)
    };
    if !final_train_loss.is_finite() || heldout_loss.is_some_and(|l| !l.is_finite()) {
        return Err(Error::NonFinite("pretraining produced a non-finite loss".into()));
    }
    log::info!(
        "pretrained {} steps: train loss {initial_train_loss:.4} -> {final_train_loss:.4}, held-out {heldout_loss:?} (uniform {uniform_baseline:.4})",
        schedule.steps
    );
    model.freeze();
    Ok((
        model,
        PretrainReport {
            steps: schedule.steps,
            initial_train_loss,
            final_train_loss,
            heldout_loss,
            uniform_baseline,
        },
    ))
}

fn lr_at(s: &PretrainSchedule, step: usize) -> f64 {
    if step < s.warmup_steps {
        return s.learning_rate * (step + 1) as f64 / s.warmup_steps as f64;
    }
    let span = (s.steps - s.warmup_steps).max(1) as f64;
    let progress = (step - s.warmup_steps) as f64 / span;
    let floor = 0.1;
    s.learning_rate * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
