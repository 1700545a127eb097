//! Class posterior, the contrastive loss over latent images and the
//! cross-domain consistency loss on prompt differentials.

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderBackend;
use crate::error::{OdgError, Result};
use crate::model::{ModelInput, ModelVars, OdgModel, SampleForward};
use crate::tape::{Tape, Var};

/// Class probabilities in classifier label order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub probs: Vec<f64>,
}

impl Posterior {
    /// Max-subtracted softmax.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(OdgError::InvalidArgument("no logits".into()));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(OdgError::NonFinite("logits".into()));
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        Ok(Self { probs: e.into_iter().map(|v| v / z).collect() })
    }

    /// Softmax of `similarity / tau`.
    pub fn from_similarities(sims: &[f64], tau: f64) -> Result<Self> {
        check_tau(tau)?;
        Self::from_logits(&sims.iter().map(|s| s / tau).collect::<Vec<_>>())
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn max_prob(&self) -> f64 {
        self.probs[self.argmax()]
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(OdgError::InvalidArgument(format!("temperature must be > 0, got {tau}")))
    }
}

pub fn class_posterior(model: &OdgModel, backend: &dyn EncoderBackend, input: &ModelInput<'_>, tau: f64) -> Result<Posterior> {
    check_tau(tau)?;
    Posterior::from_logits(&model.logits(backend, input, tau)?)
}

/// Mean of `-log p(label)` over the samples.
pub fn loss_con(tape: &mut Tape, forwards: &[(Var, usize)]) -> Result<Var> {
    if forwards.is_empty() {
        return Err(OdgError::InvalidArgument("empty batch".into()));
    }
    let mut terms = Vec::with_capacity(forwards.len());
    for (logits, label) in forwards {
        let n = tape.value(*logits).data.len();
        if *label >= n {
            return Err(OdgError::InvalidArgument(format!("label index {label} outside {n} classes")));
        }
        let lp = tape.log_softmax(*logits);
        terms.push(tape.pick(lp, *label)?);
    }
    let all = tape.concat_rows(&terms)?;
    let s = tape.sum(all);
    Ok(tape.scale(s, -1.0 / forwards.len() as f64))
}

/// One sample's contribution to the consistency loss.
#[derive(Clone, Debug)]
pub struct SemItem<'a> {
    /// Prompt differential for the sample's own label.
    pub xhat: Var,
    pub label: usize,
    pub domain: &'a str,
}

/// Mean over same-label, different-domain pairs of `1 - cos(|x̂_i|, |x̂_j|)`;
/// zero when no pair qualifies. Returns the loss node and the pair count.
pub fn loss_sem(tape: &mut Tape, items: &[SemItem<'_>]) -> Result<(Var, usize)> {
    let abs: Vec<Var> = items.iter().map(|it| tape.abs(it.xhat)).collect();
    let mut sims = Vec::new();
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            if items[i].label == items[j].label && items[i].domain != items[j].domain {
                sims.push(tape.cosine(abs[i], abs[j])?);
            }
        }
    }
    let n = sims.len();
    if n == 0 {
        return Ok((tape.constant(crate::tape::Tensor::vector(vec![0.0])), 0));
    }
    let all = tape.concat_rows(&sims)?;
    let s = tape.sum(all);
    let mean = tape.scale(s, -1.0 / n as f64);
    let one = tape.constant(crate::tape::Tensor::vector(vec![1.0]));
    let mean = tape.reshape(mean, vec![1])?;
    Ok((tape.add(one, mean)?, n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_con: f64,
    pub l_sem: f64,
    pub total: f64,
    pub n_sem_pairs: usize,
}

impl LossReport {
    pub fn new(l_con: f64, l_sem: f64, n_sem_pairs: usize) -> Self {
        Self { l_con, l_sem, total: l_con + l_sem, n_sem_pairs }
    }
}

/// A labeled training example.
#[derive(Clone, Copy, Debug)]
pub struct LabeledInput<'a> {
    pub input: ModelInput<'a>,
    pub label: usize,
    /// Domain (or pseudo-domain) used for consistency pairs.
    pub domain: &'a str,
}

/// Result of building the full objective on a tape.
#[derive(Clone, Debug)]
pub struct Objective {
    pub vars: ModelVars,
    pub total: Var,
    pub report: LossReport,
}

/// Both loss terms of a batch as separate tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct BatchLosses {
    pub con: Var,
    pub sem: Var,
    pub n_sem_pairs: usize,
}

/// `L_con` and `L_sem` for a batch on already bound parameters.
pub fn batch_losses(
    tape: &mut Tape,
    model: &OdgModel,
    vars: &ModelVars,
    backend: &dyn EncoderBackend,
    batch: &[LabeledInput<'_>],
    tau: f64,
) -> Result<BatchLosses> {
    let mut logits = Vec::with_capacity(batch.len());
    let mut sem = Vec::with_capacity(batch.len());
    for item in batch {
        let SampleForward { logits: l, xhat } = model.forward(tape, vars, backend, &item.input, tau)?;
        logits.push((l, item.label));
        sem.push(SemItem { xhat: xhat[item.label], label: item.label, domain: item.domain });
    }
    let con = loss_con(tape, &logits)?;
    let con = tape.reshape(con, vec![1])?;
    let (sem, n_sem_pairs) = loss_sem(tape, &sem)?;
    Ok(BatchLosses { con, sem, n_sem_pairs })
}

/// `L_con + L_sem` for a batch on a fresh set of bound parameters.
pub fn total_loss(
    tape: &mut Tape,
    model: &OdgModel,
    backend: &dyn EncoderBackend,
    batch: &[LabeledInput<'_>],
    tau: f64,
    use_sem: bool,
) -> Result<Objective> {
    let vars = model.bind(tape);
    let losses = batch_losses(tape, model, &vars, backend, batch, tau)?;
    let l_con = tape.scalar(losses.con);
    let (total, l_sem, pairs) = if use_sem {
        let l = tape.scalar(losses.sem);
        (tape.add(losses.con, losses.sem)?, l, losses.n_sem_pairs)
    } else {
        (losses.con, 0.0, 0)
    };
    Ok(Objective { vars, total, report: LossReport::new(l_con, l_sem, pairs) })
}
