//! Synthetic next-token tasks with exact labels.
//!
//! `copy`: the sequence repeats with period `shift`, so the correct next
//! token is always the one `shift` positions back. `modadd`: each token is
//! the sum of the previous two modulo `modulus`. Both are deterministic
//! given a seeded generator, and every position from `rule_start()` on has
//! a rule-determined target.

use crate::error::{NgcError, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Modadd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub length: usize,
    pub vocab: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modulus: Option<usize>,
}

impl TaskSpec {
    pub fn copy(length: usize, vocab: usize, shift: usize) -> TaskSpec {
        TaskSpec {
            kind: TaskKind::Copy,
            length,
            vocab,
            shift: Some(shift),
            modulus: None,
        }
    }

    pub fn modadd(length: usize, vocab: usize, modulus: usize) -> TaskSpec {
        TaskSpec {
            kind: TaskKind::Modadd,
            length,
            vocab,
            shift: None,
            modulus: Some(modulus),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length < 2 || self.vocab < 2 {
            return Err(NgcError::InvalidInput(
                "task needs length >= 2 and vocab >= 2".into(),
            ));
        }
        match self.kind {
            TaskKind::Copy => {
                let shift = self.shift.ok_or_else(|| {
                    NgcError::InvalidInput("copy task needs a shift".into())
                })?;
                if shift < 1 || shift >= self.length {
                    return Err(NgcError::InvalidInput(format!(
                        "shift {shift} outside [1, length)"
                    )));
                }
            }
            TaskKind::Modadd => {
                let modulus = self.modulus.ok_or_else(|| {
                    NgcError::InvalidInput("modadd task needs a modulus".into())
                })?;
                if modulus < 2 || modulus > self.vocab {
                    return Err(NgcError::InvalidInput(format!(
                        "modulus {modulus} outside [2, vocab]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// First position whose token is determined by the rule.
    pub fn rule_start(&self) -> usize {
        match self.kind {
            TaskKind::Copy => self.shift.unwrap_or(1),
            TaskKind::Modadd => 2,
        }
    }

    pub fn gen_sequence(&self, rng: &mut impl Rng) -> Vec<usize> {
        let mut seq = Vec::with_capacity(self.length);
        match self.kind {
            TaskKind::Copy => {
                let shift = self.shift.expect("validated");
                for _ in 0..shift.min(self.length) {
                    seq.push(rng.random_range(0..self.vocab));
                }
                for t in shift..self.length {
                    seq.push(seq[t - shift]);
                }
            }
            TaskKind::Modadd => {
                let modulus = self.modulus.expect("validated");
                seq.push(rng.random_range(0..modulus));
                seq.push(rng.random_range(0..modulus));
                for t in 2..self.length {
                    seq.push((seq[t - 1] + seq[t - 2]) % modulus);
                }
            }
        }
        seq
    }

    /// Supervised (position, target) pairs: predicting token t+1 from the
    /// prefix ending at t, for every rule-determined t+1.
    pub fn targets(&self, seq: &[usize]) -> Vec<(usize, usize)> {
        let start = self.rule_start();
        (0..seq.len().saturating_sub(1))
            .filter(|&t| t + 1 >= start)
            .map(|t| (t, seq[t + 1]))
            .collect()
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<TaskSpec> {
        let spec: TaskSpec = serde_json::from_slice(&std::fs::read(path)?)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn copy_sequences_are_periodic() {
        let task = TaskSpec::copy(12, 64, 3);
        task.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq = task.gen_sequence(&mut rng);
        for t in 3..12 {
            assert_eq!(seq[t], seq[t - 3]);
        }
        for (t, y) in task.targets(&seq) {
            assert_eq!(y, seq[t + 1]);
            assert!(t + 1 >= 3);
        }
    }

    #[test]
    fn modadd_follows_recurrence() {
        let task = TaskSpec::modadd(10, 64, 7);
        task.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = task.gen_sequence(&mut rng);
        for t in 2..10 {
            assert_eq!(seq[t], (seq[t - 1] + seq[t - 2]) % 7);
        }
    }

    #[test]
    fn json_schema_shape() {
        let task = TaskSpec::copy(16, 64, 3);
        let json = serde_json::to_value(&task).unwrap();
        assert_eq!(json["kind"], "copy");
        assert_eq!(json["length"], 16);
        assert_eq!(json["shift"], 3);
        assert!(json.get("modulus").is_none());
        let back: TaskSpec = serde_json::from_value(json).unwrap();
        assert_eq!(back, task);
    }

    #[test]
    fn validation_rejects_bad_specs() {
        assert!(TaskSpec::copy(8, 64, 0).validate().is_err());
        assert!(TaskSpec::copy(8, 64, 8).validate().is_err());
        assert!(TaskSpec::modadd(8, 4, 9).validate().is_err());
    }
}
