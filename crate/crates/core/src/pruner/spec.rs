use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::PrunerError;

/// Where zeros may go.
///
/// `NM` is stored as `(zeros_per_group, group_size)`; the conventional
/// "2:4" label means 2 nonzeros in every aligned group of 4, i.e.
/// `zeros_per_group = 2, group_size = 4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityPattern {
    Unstructured,
    NM {
        zeros_per_group: usize,
        group_size: usize,
    },
}

impl SparsityPattern {
    /// The "2:4" pattern.
    pub const TWO_FOUR: SparsityPattern = SparsityPattern::NM {
        zeros_per_group: 2,
        group_size: 4,
    };
}

impl fmt::Display for SparsityPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SparsityPattern::Unstructured => f.write_str("unstructured"),
            SparsityPattern::NM {
                zeros_per_group,
                group_size,
            } => write!(f, "{}:{}", group_size - zeros_per_group, group_size),
        }
    }
}

impl FromStr for SparsityPattern {
    type Err = PrunerError;

    /// Accepts `unstructured` or `kept:group`, e.g. `2:4`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("unstructured") {
            return Ok(SparsityPattern::Unstructured);
        }
        let bad = || PrunerError::InvalidSpec(format!("unrecognized pattern {s:?}"));
        let (kept, group) = s.split_once(':').ok_or_else(bad)?;
        let kept: usize = kept.trim().parse().map_err(|_| bad())?;
        let group: usize = group.trim().parse().map_err(|_| bad())?;
        if group == 0 || kept == 0 || kept > group {
            return Err(bad());
        }
        Ok(SparsityPattern::NM {
            zeros_per_group: group - kept,
            group_size: group,
        })
    }
}

pub const DEFAULT_BLOCK_SIZE: usize = 128;
pub const DEFAULT_QUANT_GROUP: usize = 128;

/// What to prune and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    /// Target zero fraction per row for unstructured pruning; ignored by
    /// the n:m pattern, whose fraction is fixed by the group shape.
    pub sparsity: f64,
    pub pattern: SparsityPattern,
    /// Columns per mask-selection block. `1` selects exact greedy OBS.
    pub block_size: usize,
    /// Round-to-nearest bit width applied after pruning, if any.
    pub bits: Option<u8>,
    pub quant_group: usize,
}

impl Default for PruneSpec {
    fn default() -> Self {
        Self {
            sparsity: 0.5,
            pattern: SparsityPattern::Unstructured,
            block_size: DEFAULT_BLOCK_SIZE,
            bits: None,
            quant_group: DEFAULT_QUANT_GROUP,
        }
    }
}

impl PruneSpec {
    pub fn unstructured(sparsity: f64) -> Self {
        Self {
            sparsity,
            ..Self::default()
        }
    }

    pub fn nm(zeros_per_group: usize, group_size: usize) -> Self {
        Self {
            sparsity: zeros_per_group as f64 / group_size.max(1) as f64,
            pattern: SparsityPattern::NM {
                zeros_per_group,
                group_size,
            },
            ..Self::default()
        }
    }

    pub fn with_block_size(mut self, block_size: usize) -> Self {
        self.block_size = block_size;
        self
    }

    pub fn with_bits(mut self, bits: Option<u8>, quant_group: usize) -> Self {
        self.bits = bits;
        self.quant_group = quant_group;
        self
    }

    /// Checks these settings against a layer of width `m`.
    pub fn validate(&self, m: usize) -> Result<(), PrunerError> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(PrunerError::InvalidSpec(format!(
                "sparsity {} outside [0, 1)",
                self.sparsity
            )));
        }
        if self.block_size == 0 {
            return Err(PrunerError::InvalidSpec("block_size must be ≥ 1".into()));
        }
        if let Some(b) = self.bits {
            if !(2..=8).contains(&b) {
                return Err(PrunerError::InvalidSpec(format!("bits {b} outside 2..=8")));
            }
            if self.quant_group == 0 {
                return Err(PrunerError::InvalidSpec("quant_group must be ≥ 1".into()));
            }
        }
        if let SparsityPattern::NM {
            zeros_per_group,
            group_size,
        } = self.pattern
        {
            if group_size == 0 || zeros_per_group >= group_size {
                return Err(PrunerError::InvalidSpec(format!(
                    "n:m pattern needs zeros_per_group < group_size, got {zeros_per_group}/{group_size}"
                )));
            }
            if m % group_size != 0 {
                return Err(PrunerError::GroupMismatch {
                    width: m,
                    group_size,
                });
            }
        }
        Ok(())
    }

    /// Zeros each row of width `m` must end up with.
    pub fn zeros_per_row(&self, m: usize) -> usize {
        match self.pattern {
            SparsityPattern::Unstructured => zero_quota(self.sparsity, 0, m),
            SparsityPattern::NM {
                zeros_per_group,
                group_size,
            } => m / group_size * zeros_per_group,
        }
    }

    /// True when pruning cannot change anything.
    pub fn is_identity(&self, m: usize) -> bool {
        self.zeros_per_row(m) == 0
    }
}

/// Unstructured zeros falling in columns `[start, end)` when a row is
/// cut into blocks; quotas over any partition of `0..m` sum to `⌊s·m⌋`.
pub(crate) fn zero_quota(sparsity: f64, start: usize, end: usize) -> usize {
    let cum = |c: usize| (sparsity * c as f64 + 1e-9).floor() as usize;
    cum(end) - cum(start)
}
