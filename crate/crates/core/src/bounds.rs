//! Sample-compression risk bounds.
//!
//! * [`bound_b`]: the single-set bound minimized by mP2L's early stopping.
//! * [`theorem1_bound`]: the single-set bound with an explicit message prior.
//! * [`theorem5_two_set_bound`]: two compression sets, no `2√(n−m)` factor.
//! * [`epsilon_term`] / [`theorem3_task_bound`]: the per-task continual bound.
//! * [`test_set_bound`]: the Chernoff test-set bound.
//!
//! Every complexity term is assembled in log space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kl_inverse, ln_zeta, log_binomial, Probability};

fn ln_delta(delta: Probability) -> Result<f64> {
    if delta.get() <= 0.0 {
        return Err(Error::Domain("delta must be in (0, 1]".into()));
    }
    Ok(delta.get().ln())
}

fn as_u64(v: usize) -> u64 {
    v as u64
}

/// Bound minimized during mP2L early stopping:
/// `kl⁻¹(loss, [ln(2√(n−c)) + ln C(n,c) − ln ζ(c) − ln δ] / (n−c))`.
pub fn bound_b(n: usize, complement_loss: Probability, c_size: usize, delta: Probability) -> Result<Probability> {
    if c_size > n {
        return Err(Error::Domain(format!("compression size {c_size} exceeds n = {n}")));
    }
    if c_size == n {
        return Err(Error::DegenerateComplement);
    }
    let rest = (n - c_size) as f64;
    let budget = (2.0f64.ln() + 0.5 * rest.ln() + log_binomial(as_u64(n), as_u64(c_size))?
        - ln_zeta(as_u64(c_size))
        - ln_delta(delta)?)
        / rest;
    kl_inverse(complement_loss, budget)
}

/// Single compression set with a message of log-probability `message_log_prob`.
pub fn theorem1_bound(
    n: usize,
    m: usize,
    message_log_prob: f64,
    complement_loss: Probability,
    delta: Probability,
) -> Result<Probability> {
    if !(message_log_prob <= 0.0) {
        return Err(Error::Domain(format!("message log-probability {message_log_prob} must be <= 0")));
    }
    if m >= n {
        return Err(if m == n {
            Error::DegenerateComplement
        } else {
            Error::Domain(format!("compression size {m} exceeds n = {n}"))
        });
    }
    let rest = (n - m) as f64;
    let budget = (2.0f64.ln() + 0.5 * rest.ln() + log_binomial(as_u64(n), as_u64(m))?
        - ln_zeta(as_u64(m))
        - message_log_prob
        - ln_delta(delta)?)
        / rest;
    kl_inverse(complement_loss, budget)
}

/// Two disjoint compression sets `i`, `j` with priors
/// `C(n,|i|)⁻¹ζ(|i|)` and `C(n−|i|,|j|)⁻¹ζ(|j|)`.
pub fn theorem5_two_set_bound(
    n: usize,
    i_size: usize,
    j_size: usize,
    message_log_prob: f64,
    complement_loss: Probability,
    delta: Probability,
) -> Result<Probability> {
    if !(message_log_prob <= 0.0) {
        return Err(Error::Domain(format!("message log-probability {message_log_prob} must be <= 0")));
    }
    let used = i_size
        .checked_add(j_size)
        .filter(|&u| u <= n)
        .ok_or_else(|| Error::Domain(format!("|i| + |j| = {i_size} + {j_size} exceeds n = {n}")))?;
    if used == n {
        return Err(Error::DegenerateComplement);
    }
    let budget = (log_binomial(as_u64(n), as_u64(i_size))? - ln_zeta(as_u64(i_size))
        + log_binomial(as_u64(n - i_size), as_u64(j_size))?
        - ln_zeta(as_u64(j_size))
        - message_log_prob
        - ln_delta(delta)?)
        / (n - used) as f64;
    kl_inverse(complement_loss, budget)
}

/// Chernoff test-set bound for `n` held-out evaluations.
pub fn test_set_bound(n: usize, empirical_loss: Probability, delta: Probability) -> Result<Probability> {
    if n == 0 {
        return Err(Error::DegenerateComplement);
    }
    kl_inverse(empirical_loss, -ln_delta(delta)? / n as f64)
}

/// Complexity term of the per-task continual bound:
///
/// `ln(T/δ) + ln C(n,|i|) + ln C(n−|i|,|j|) + |j| ln(T−1) − ln ζ(|i|) − ln ζ(|j|) − Σ ln ζ(μ2)`.
pub fn epsilon_term(
    n_t: usize,
    i_size: usize,
    j_size: usize,
    task_count: usize,
    mu2: &[u64],
    delta: Probability,
) -> Result<f64> {
    if task_count == 0 {
        return Err(Error::Domain("task count must be positive".into()));
    }
    if mu2.len() != task_count {
        return Err(Error::Domain(format!(
            "mu2 has {} entries for {task_count} tasks",
            mu2.len()
        )));
    }
    if i_size.checked_add(j_size).is_none_or(|u| u > n_t) {
        return Err(Error::Domain(format!("|i| + |j| = {i_size} + {j_size} exceeds n_t = {n_t}")));
    }
    if j_size > 0 && task_count == 1 {
        return Err(Error::Domain("a second compression set needs at least two tasks".into()));
    }
    let removal_messages = if j_size == 0 {
        0.0
    } else {
        j_size as f64 * ((task_count - 1) as f64).ln()
    };
    let mu2_prior: f64 = mu2.iter().map(|&k| ln_zeta(k)).sum();
    Ok((task_count as f64).ln() - ln_delta(delta)?
        + log_binomial(as_u64(n_t), as_u64(i_size))?
        + log_binomial(as_u64(n_t - i_size), as_u64(j_size))?
        + removal_messages
        - ln_zeta(as_u64(i_size))
        - ln_zeta(as_u64(j_size))
        - mu2_prior)
}

/// Inputs of one per-task certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateInputs {
    pub task_id: usize,
    pub n_t: usize,
    pub i_size: usize,
    pub j_size: usize,
    pub mu2: Vec<u64>,
    pub complement_loss: Probability,
    pub delta: Probability,
    pub task_count: usize,
}

/// `kl⁻¹(loss, ε / (n_t − |i| − |j|))`.
pub fn theorem3_task_bound(inputs: &CertificateInputs) -> Result<Probability> {
    let used = inputs.i_size + inputs.j_size;
    if used > inputs.n_t {
        return Err(Error::Domain(format!("|i| + |j| = {used} exceeds n_t = {}", inputs.n_t)));
    }
    if used == inputs.n_t {
        return Err(Error::DegenerateComplement);
    }
    let eps = epsilon_term(
        inputs.n_t,
        inputs.i_size,
        inputs.j_size,
        inputs.task_count,
        &inputs.mu2,
        inputs.delta,
    )?;
    kl_inverse(inputs.complement_loss, eps / (inputs.n_t - used) as f64)
}

/// Per-task risk certificate after `T` tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub task_id: usize,
    pub n_t: usize,
    pub i_size: usize,
    pub j_size: usize,
    pub mu2: Vec<u64>,
    pub complement_loss: Probability,
    pub delta: Probability,
    #[serde(rename = "T")]
    pub task_count: usize,
    pub bound: Probability,
}

impl Certificate {
    pub fn compute(inputs: CertificateInputs) -> Result<Certificate> {
        let bound = theorem3_task_bound(&inputs)?;
        Ok(Certificate::with_bound(inputs, bound))
    }

    /// Like [`Certificate::compute`], but a complement left empty by the
    /// compression sets yields the vacuous bound 1 instead of an error.
    pub fn compute_or_vacuous(inputs: CertificateInputs) -> Result<Certificate> {
        match theorem3_task_bound(&inputs) {
            Ok(bound) => Ok(Certificate::with_bound(inputs, bound)),
            Err(Error::DegenerateComplement) => Ok(Certificate::with_bound(inputs, Probability::ONE)),
            Err(e) => Err(e),
        }
    }

    fn with_bound(inputs: CertificateInputs, bound: Probability) -> Certificate {
        Certificate {
            task_id: inputs.task_id,
            n_t: inputs.n_t,
            i_size: inputs.i_size,
            j_size: inputs.j_size,
            mu2: inputs.mu2,
            complement_loss: inputs.complement_loss,
            delta: inputs.delta,
            task_count: inputs.task_count,
            bound,
        }
    }

    pub fn is_vacuous(&self) -> bool {
        self.bound == Probability::ONE
    }
}
