//! Local optimisation of the injection coefficients against the
//! answer-token negative log-likelihood, with every model weight held
//! fixed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::injection::{query_site, ContextVector, GradientVector, InjectionCoefficients};
use crate::nn::{Scalar, ToyTransformer, Transformer};
use crate::task::Rendered;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    GradientDescent,
    /// Heavy-ball momentum with coefficient 0.9.
    Momentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    #[default]
    Reverse,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub grad_mode: GradMode,
    /// Central-difference step in `FiniteDifference` mode.
    pub fd_step: f64,
    /// Inject only at the last prompt token instead of every position.
    pub last_position_only: bool,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            local_epochs: 1,
            learning_rate: 0.05,
            batch_size: 16,
            optimizer: Optimizer::GradientDescent,
            grad_mode: GradMode::Reverse,
            fd_step: 1e-3,
            last_position_only: false,
            seed: 0,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.fd_step.is_finite() && self.fd_step > 0.0) {
            return Err(Error::Config("fd_step must be finite and positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub coeffs: InjectionCoefficients,
    /// Summed loss over the whole calibration set before the first step.
    pub initial_loss: f64,
    /// Summed loss over the whole calibration set under `coeffs`.
    pub final_loss: f64,
    pub steps: usize,
    /// `final_loss <= initial_loss`.
    pub improved: bool,
}

/// Summed loss over indexed samples, and optionally its coefficient
/// gradient. The optimiser only sees this interface.
pub trait Objective {
    fn n_samples(&self) -> usize;

    fn loss(&self, coeffs: &InjectionCoefficients, indices: &[usize]) -> Result<f64>;

    fn loss_and_grad(&self, coeffs: &InjectionCoefficients, indices: &[usize]) -> Result<(f64, GradientVector)>;
}

/// Answer-token NLL of a frozen model under injection of one context
/// vector.
pub struct InjectedObjective<'a, T: Scalar = f32> {
    pub model: &'a Transformer<T>,
    pub vector: &'a ContextVector,
    pub data: &'a [Rendered],
    pub last_position_only: bool,
}

impl<T: Scalar> InjectedObjective<'_, T> {
    fn site(&self, r: &Rendered) -> crate::nn::InjectionSite {
        // the last prompt token is the one whose logits score the answer
        query_site(self.last_position_only, r.answer_span.start)
    }
}

impl<T: Scalar> Objective for InjectedObjective<'_, T> {
    fn n_samples(&self) -> usize {
        self.data.len()
    }

    fn loss(&self, coeffs: &InjectionCoefficients, indices: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for &i in indices {
            let r = &self.data[i];
            total += self
                .model
                .answer_loss(&r.tokens, r.answer_span.clone(), self.vector, coeffs, self.site(r))?;
        }
        Ok(total)
    }

    fn loss_and_grad(&self, coeffs: &InjectionCoefficients, indices: &[usize]) -> Result<(f64, GradientVector)> {
        let mut total = 0.0;
        let mut grad = GradientVector::zeros(coeffs.n_layers());
        for &i in indices {
            let r = &self.data[i];
            let (loss, g) =
                self.model
                    .loss_and_coeff_grad(&r.tokens, r.answer_span.clone(), self.vector, coeffs, self.site(r))?;
            total += loss;
            grad.add_assign(&g);
        }
        Ok((total, grad))
    }
}

/// Sum of per-example answer losses under `coeffs`.
pub fn calibration_loss(
    model: &ToyTransformer,
    vector: &ContextVector,
    coeffs: &InjectionCoefficients,
    batch: &[Rendered],
    last_position_only: bool,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("calibration batch"));
    }
    let objective = InjectedObjective {
        model,
        vector,
        data: batch,
        last_position_only,
    };
    objective.loss(coeffs, &(0..batch.len()).collect::<Vec<_>>())
}

/// Central finite differences of `objective` over every coefficient. The
/// effective step is measured after rounding the perturbed coefficients to
/// `f32`.
pub fn finite_difference_grad<O: Objective + ?Sized>(
    objective: &O,
    coeffs: &InjectionCoefficients,
    indices: &[usize],
    step: f64,
) -> Result<GradientVector> {
    let n = coeffs.len();
    let mut grad = Vec::with_capacity(n);
    let mut direction = vec![0.0; n];
    for i in 0..n {
        direction[i] = 1.0;
        let plus = coeffs.stepped(&direction, step)?;
        let minus = coeffs.stepped(&direction, -step)?;
        direction[i] = 0.0;
        let h = plus.as_slice()[i] as f64 - minus.as_slice()[i] as f64;
        let diff = objective.loss(&plus, indices)? - objective.loss(&minus, indices)?;
        grad.push(diff / h);
    }
    GradientVector::new(grad)
}

/// Mini-batch descent on the coefficients of any objective. Each step
/// moves along the mean per-sample gradient of its batch; batches are
/// reshuffled every epoch and the last one may be partial.
pub fn calibrate<O: Objective + ?Sized>(
    objective: &O,
    init: &InjectionCoefficients,
    cfg: &CalibrationConfig,
) -> Result<CalibrationResult> {
    cfg.validate()?;
    let n = objective.n_samples();
    if cfg.local_epochs == 0 {
        let loss = if n == 0 {
            0.0
        } else {
            objective.loss(init, &(0..n).collect::<Vec<_>>())?
        };
        return Ok(CalibrationResult {
            coeffs: init.clone(),
            initial_loss: loss,
            final_loss: loss,
            steps: 0,
            improved: true,
        });
    }
    if n == 0 {
        return Err(Error::Empty("calibration set"));
    }
    let all: Vec<usize> = (0..n).collect();
    let initial_loss = objective.loss(init, &all)?;
    if !initial_loss.is_finite() {
        return Err(Error::NonFinite(format!("initial calibration loss {initial_loss}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut coeffs = init.clone();
    let mut velocity = vec![0.0f64; init.len()];
    let mut order = all.clone();
    let mut steps = 0;
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let grad = match cfg.grad_mode {
                GradMode::Reverse => objective.loss_and_grad(&coeffs, batch).map(|(_, g)| g),
                GradMode::FiniteDifference => finite_difference_grad(objective, &coeffs, batch, cfg.fd_step),
            }
            .map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("calibration step {steps}: {msg}")),
                other => other,
            })?;
            let scale = 1.0 / batch.len() as f64;
            for (vel, &g) in velocity.iter_mut().zip(grad.as_slice()) {
                *vel = match cfg.optimizer {
                    Optimizer::GradientDescent => g * scale,
                    Optimizer::Momentum => MOMENTUM * *vel + g * scale,
                };
            }
            coeffs = coeffs
                .stepped(&velocity, -cfg.learning_rate)
                .map_err(|_| Error::NonFinite(format!("calibration step {steps}: coefficients diverged")))?;
            steps += 1;
        }
    }
    let final_loss = objective.loss(&coeffs, &all)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFinite(format!("calibration step {steps}: final loss {final_loss}")));
    }
    let improved = final_loss <= initial_loss;
    if !improved {
        log::warn!("calibration did not improve: {initial_loss:.6} -> {final_loss:.6}");
    }
    Ok(CalibrationResult {
        coeffs,
        initial_loss,
        final_loss,
        steps,
        improved,
    })
}

const MOMENTUM: f64 = 0.9;

/// Calibrate coefficients for one client's rendered demonstrations.
pub fn calibrate_local(
    model: &ToyTransformer,
    vector: &ContextVector,
    init: &InjectionCoefficients,
    data: &[Rendered],
    cfg: &CalibrationConfig,
) -> Result<CalibrationResult> {
    if !model.is_frozen() {
        return Err(Error::Config("calibration requires a frozen model".into()));
    }
    let objective = InjectedObjective {
        model,
        vector,
        data,
        last_position_only: cfg.last_position_only,
    };
    calibrate(&objective, init, cfg)
}

/// Worst relative disagreement between reverse-mode and central
/// finite-difference coefficient gradients on `batch`, computed in double
/// precision. Each coordinate's error is `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn grad_oracle_check(
    model: &ToyTransformer,
    vector: &ContextVector,
    coeffs: &InjectionCoefficients,
    batch: &[Rendered],
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let wide = model.cast::<f64>();
    let objective = InjectedObjective {
        model: &wide,
        vector,
        data: batch,
        last_position_only: false,
    };
    let all: Vec<usize> = (0..batch.len()).collect();
    let (_, analytic) = objective.loss_and_grad(coeffs, &all)?;
    let numeric = finite_difference_grad(&objective, coeffs, &all, step)?;
    Ok(analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-8))
        .fold(0.0, f64::max))
}
