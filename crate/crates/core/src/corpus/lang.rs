// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FIRST_CONTENT;
use crate::error::{Error, Result};

/// One synthetic language: a contiguous block of content token ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguageSpec {
    pub name: String,
    pub first_id: usize,
    pub size: usize,
    /// Relative share of this language in the training mix.
    pub resource_weight: f64,
}

impl SyntheticLanguageSpec {
    pub fn contains(&self, token: usize) -> bool {
        token >= self.first_id && token < self.first_id + self.size
    }

    pub fn token(&self, index: usize) -> usize {
        self.first_id + index
    }
}

/// The high-resource language A (the English analog), the low-resource
/// language B, and the bijection between their content vocabularies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguagePair {
    pub a: SyntheticLanguageSpec,
    pub b: SyntheticLanguageSpec,
    /// `b_to_a[i]` is the A content index paired with B content index `i`.
    pub b_to_a: Vec<usize>,
    #[serde(skip)]
    a_to_b: Vec<usize>,
}

impl LanguagePair {
    /// Two adjacent `size`-token languages starting at [`FIRST_CONTENT`],
    /// paired by a seeded random permutation.
    pub fn new(size: usize, weight_a: f64, weight_b: f64, seed: u64) -> Result<Self> {
        let mut perm: Vec<usize> = (0..size).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self::from_parts(
            SyntheticLanguageSpec {
                name: "lang_a".into(),
                first_id: FIRST_CONTENT,
                size,
                resource_weight: weight_a,
            },
            SyntheticLanguageSpec {
                name: "lang_b".into(),
                first_id: FIRST_CONTENT + size,
                size,
                resource_weight: weight_b,
            },
            perm,
        )
    }

    pub fn from_parts(
        a: SyntheticLanguageSpec,
        b: SyntheticLanguageSpec,
        b_to_a: Vec<usize>,
    ) -> Result<Self> {
        let mut pair = Self {
            a,
            b,
            b_to_a,
            a_to_b: Vec::new(),
        };
        pair.validate()?;
        pair.a_to_b = vec![0; pair.a.size];
        for (bi, &ai) in pair.b_to_a.iter().enumerate() {
            pair.a_to_b[ai] = bi;
        }
        Ok(pair)
    }

    /// Restores the inverse map after deserialization.
    pub fn rebuilt(self) -> Result<Self> {
        Self::from_parts(self.a, self.b, self.b_to_a)
    }

    pub fn validate(&self) -> Result<()> {
        for l in [&self.a, &self.b] {
            if l.size == 0 {
                return Err(Error::config(format!(
                    "language {} has an empty vocabulary",
                    l.name
                )));
            }
            if l.first_id < FIRST_CONTENT {
                return Err(Error::config(format!(
                    "language {} overlaps the control ids",
                    l.name
                )));
            }
            if !(l.resource_weight >= 0.0 && l.resource_weight.is_finite()) {
                return Err(Error::config(format!(
                    "language {} has an invalid resource weight",
                    l.name
                )));
            }
        }
        let (a0, a1) = (self.a.first_id, self.a.first_id + self.a.size);
        let (b0, b1) = (self.b.first_id, self.b.first_id + self.b.size);
        if a0 < b1 && b0 < a1 {
            return Err(Error::config("language vocabularies overlap"));
        }
        if self.a.size != self.b.size || self.b_to_a.len() != self.b.size {
            return Err(Error::config(
                "token bijection needs equal vocabulary sizes",
            ));
        }
        let mut seen = vec![false; self.a.size];
        for &i in &self.b_to_a {
            if i >= self.a.size || std::mem::replace(&mut seen[i], true) {
                return Err(Error::config("token map is not a bijection"));
            }
        }
        Ok(())
    }

    /// Smallest vocabulary that holds both languages.
    pub fn vocab_end(&self) -> usize {
        (self.a.first_id + self.a.size).max(self.b.first_id + self.b.size)
    }

    /// Maps a B content token to A; every other token passes through.
    pub fn to_a(&self, token: usize) -> usize {
        if self.b.contains(token) {
            self.a.token(self.b_to_a[token - self.b.first_id])
        } else {
            token
        }
    }

    /// Maps an A content token to B; every other token passes through.
    pub fn to_b(&self, token: usize) -> usize {
        if self.a.contains(token) {
            self.b.token(self.a_to_b[token - self.a.first_id])
        } else {
            token
        }
    }

    pub fn seq_to_a(&self, tokens: &[usize]) -> Vec<usize> {
        tokens.iter().map(|&t| self.to_a(t)).collect()
    }

    pub fn seq_to_b(&self, tokens: &[usize]) -> Vec<usize> {
        tokens.iter().map(|&t| self.to_b(t)).collect()
    }
}
