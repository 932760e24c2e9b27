use super::{DenoiserConfig, ModelWeights, NULL_CLASS};
use crate::error::{Error, Result};
use crate::numerics::{randn, Rng, Tensor};

/// Plain SGD hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Probability of replacing the label with the null class.
    pub cond_drop: f64,
    /// Steps averaged into one log entry.
    pub log_every: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 8,
            lr: 0.1,
            clip_norm: 1.0,
            cond_drop: 0.15,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// `(step, mean loss over the preceding window)`.
    pub entries: Vec<(usize, f64)>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.entries {
            s.push_str(&format!("{step},{loss:.8}\n"));
        }
        s
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.1)
    }
}

/// Trains with the ε-prediction objective: `t` uniform over the training
/// steps, `z_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`, loss `mean((ε_θ(z_t, t, c) − ε)²)`.
pub fn train(
    images: &[Tensor],
    labels: &[usize],
    config: &DenoiserConfig,
    params: &TrainParams,
    alpha_bar: &[f64],
    rng: &mut Rng,
) -> Result<(ModelWeights, TrainLog)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "need a non-empty dataset with one label per image ({} images, {} labels)",
            images.len(),
            labels.len()
        )));
    }
    if params.batch_size == 0 || params.log_every == 0 || alpha_bar.is_empty() {
        return Err(Error::InvalidArgument("batch size, log interval and schedule must be non-empty".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= config.num_classes) {
        return Err(Error::UnknownClass(l));
    }
    let mut init_rng = rng.fork(0);
    let mut weights = ModelWeights::init(config, &mut init_rng)?;
    let mut grad = vec![0.0; weights.num_params()];
    let mut log = TrainLog::default();
    let mut window = 0.0;
    let mut window_len = 0;

    for step in 1..=params.steps {
        grad.fill(0.0);
        let mut batch_loss = 0.0;
        for _ in 0..params.batch_size {
            let i = rng.below(images.len());
            let t = rng.below(alpha_bar.len());
            let cond = if rng.uniform() <= params.cond_drop {
                NULL_CLASS
            } else {
                labels[i]
            };
            let noise = randn(images[i].shape(), rng);
            let a = alpha_bar[t];
            let z = images[i].zip_map(&noise, |x, e| a.sqrt() * x + (1.0 - a).sqrt() * e)?;
            batch_loss += weights.loss_and_grad(&z, t, cond, &noise, &mut grad)?;
        }
        batch_loss /= params.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: batch_loss,
            });
        }
        let inv_b = 1.0 / params.batch_size as f64;
        let norm = grad.iter().map(|g| (g * inv_b).powi(2)).sum::<f64>().sqrt();
        let clip = if norm > params.clip_norm {
            params.clip_norm / norm
        } else {
            1.0
        };
        let step_size = params.lr * inv_b * clip;
        for (w, g) in weights.values.iter_mut().zip(&grad) {
            *w -= step_size * g;
        }
        window += batch_loss;
        window_len += 1;
        if step % params.log_every == 0 || step == params.steps {
            log.entries.push((step, window / window_len as f64));
            window = 0.0;
            window_len = 0;
        }
    }
    if weights.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            step: params.steps,
            loss: f64::NAN,
        });
    }
    Ok((weights, log))
}
