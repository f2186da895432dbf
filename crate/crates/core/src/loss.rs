//! Divergence variants and plain (untracked) evaluation helpers for the loss
//! ops recorded on the tape.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_softmax, Tensor};

/// Which divergence `Tape::kl_divergence` computes between the reference
/// distribution `P` and the candidate `Q`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum KlVariant {
    /// `KL(P ‖ Q)`
    Forward,
    /// `KL(Q ‖ P)`
    Reverse,
    /// `KL(P ‖ λP + (1-λ)Q)`
    Skewed(f64),
}

impl fmt::Display for KlVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KlVariant::Forward => write!(f, "forward"),
            KlVariant::Reverse => write!(f, "reverse"),
            KlVariant::Skewed(l) => write!(f, "skewed({l})"),
        }
    }
}

impl FromStr for KlVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(KlVariant::Forward),
            "reverse" => Ok(KlVariant::Reverse),
            _ => {
                let inner = s
                    .strip_prefix("skewed(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| Error::config("kl_variant", format!("unknown variant `{s}`")))?;
                let lambda: f64 = inner
                    .parse()
                    .map_err(|_| Error::config("kl_variant", format!("bad skew `{inner}`")))?;
                if !(0.0..1.0).contains(&lambda) {
                    return Err(Error::config("kl_variant", "skew must lie in [0, 1)"));
                }
                Ok(KlVariant::Skewed(lambda))
            }
        }
    }
}

/// Mean masked cross-entropy of plain logits, no tape involved.
pub fn cross_entropy_value(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if t >= logits.cols() {
            return Err(Error::contract(format!("target {t} out of range")));
        }
        total -= log_softmax(logits.row(i))[t];
        count += 1;
    }
    if count == 0 {
        return Err(Error::contract("cross_entropy: mask selects no positions"));
    }
    Ok(total / count as f64)
}
