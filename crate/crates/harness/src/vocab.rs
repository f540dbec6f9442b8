//! Token id layout shared by the synthetic tasks.
//!
//! One embedding table serves text and visual cells: cell symbols are
//! ordinary token ids. Each cell symbol is a (key, class) pair; questions
//! reference keys, answers are class tokens.

use serde::{Deserialize, Serialize};

use vlsched_core::{CoreError, Result};

pub const PAD: usize = 0;
/// Reserved routing token; never emitted by data generation.
pub const ROUTE: usize = 1;
pub const TASK_COARSE: usize = 2;
pub const TASK_FINE: usize = 3;
pub const ASK: usize = 4;
/// The unique marker cell of the fine task.
pub const MARKER: usize = 5;

/// Fixed token ids below the class block.
const RESERVED: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub keys: usize,
    pub classes: usize,
}

impl Vocab {
    pub fn new(keys: usize, classes: usize) -> Result<Self> {
        if keys == 0 || classes == 0 {
            return Err(CoreError::InvalidArgument("keys and classes must be positive".into()));
        }
        Ok(Vocab { keys, classes })
    }

    pub fn size(&self) -> usize {
        RESERVED + self.classes + self.keys + self.keys * self.classes
    }

    pub fn class_token(&self, class: usize) -> usize {
        debug_assert!(class < self.classes);
        RESERVED + class
    }

    pub fn key_token(&self, key: usize) -> usize {
        debug_assert!(key < self.keys);
        RESERVED + self.classes + key
    }

    pub fn cell_token(&self, key: usize, class: usize) -> usize {
        debug_assert!(key < self.keys && class < self.classes);
        RESERVED + self.classes + self.keys + key * self.classes + class
    }

    pub fn class_of_token(&self, token: usize) -> Option<usize> {
        (RESERVED..RESERVED + self.classes).contains(&token).then(|| token - RESERVED)
    }

    pub fn key_of_token(&self, token: usize) -> Option<usize> {
        let lo = RESERVED + self.classes;
        (lo..lo + self.keys).contains(&token).then(|| token - lo)
    }

    /// Decodes a cell token into its (key, class) pair.
    pub fn cell_of_token(&self, token: usize) -> Option<(usize, usize)> {
        let lo = RESERVED + self.classes + self.keys;
        if token < lo || token >= self.size() {
            return None;
        }
        let idx = token - lo;
        Some((idx / self.classes, idx % self.classes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_blocks_do_not_collide() {
        let v = Vocab::new(6, 6).unwrap();
        assert_eq!(v.size(), 6 + 6 + 6 + 36);
        let mut seen = std::collections::BTreeSet::new();
        for t in [PAD, ROUTE, TASK_COARSE, TASK_FINE, ASK, MARKER] {
            assert!(seen.insert(t));
        }
        for c in 0..6 {
            assert!(seen.insert(v.class_token(c)));
        }
        for k in 0..6 {
            assert!(seen.insert(v.key_token(k)));
        }
        for k in 0..6 {
            for c in 0..6 {
                assert!(seen.insert(v.cell_token(k, c)));
            }
        }
        assert_eq!(seen.len(), v.size());
        assert_eq!(*seen.iter().max().unwrap(), v.size() - 1);
    }

    #[test]
    fn decoders_invert_encoders() {
        let v = Vocab::new(4, 7).unwrap();
        assert_eq!(v.cell_of_token(v.cell_token(3, 5)), Some((3, 5)));
        assert_eq!(v.class_of_token(v.class_token(6)), Some(6));
        assert_eq!(v.key_of_token(v.key_token(2)), Some(2));
        assert_eq!(v.cell_of_token(ASK), None);
        assert_eq!(v.class_of_token(v.key_token(0)), None);
    }
}
