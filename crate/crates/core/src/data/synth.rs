use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, Dataset, ItemId, Session, Split};

/// How the label of a generated session is derived from its items.
#[derive(Clone, Debug, PartialEq)]
pub enum Rule {
    /// `label = (last + 1) mod N`.
    Successor,
    /// `label = perm[last]` for a permutation fixed by `seed`, so that
    /// train and test splits drawn with different RNGs share the rule.
    Permutation { seed: u64 },
    /// Easy/hard mixture. Items in `[0, N/4)` are "pivot" items. A session
    /// ending on a non-pivot item is easy: `label = (last + 1) mod N`. A
    /// session ending on a pivot is hard: `label = (first + 1) mod N`, so the
    /// model has to look past the most recent click. `hard_fraction` of
    /// sessions are hard.
    Mixture { hard_fraction: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_items: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a label is replaced by a uniformly random item.
    pub noise: f64,
    pub rule: Rule,
}

impl SyntheticSpec {
    pub fn successor(num_items: usize, noise: f64) -> Self {
        Self {
            num_items,
            min_len: 1,
            max_len: 8,
            noise,
            rule: Rule::Successor,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.num_items < 2 || self.num_items >= ItemId::MAX as usize {
            return bad(format!("num_items must be in [2, {}), got {}", ItemId::MAX, self.num_items));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!(
                "need 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise must be in [0, 1], got {}", self.noise));
        }
        if let Rule::Mixture { hard_fraction } = self.rule {
            if !(0.0..=1.0).contains(&hard_fraction) {
                return bad(format!("hard_fraction must be in [0, 1], got {hard_fraction}"));
            }
            if self.num_items < 8 {
                return bad("mixture rule needs at least 8 items".into());
            }
            if self.max_len < 2 {
                return bad("mixture rule needs max_len >= 2".into());
            }
        }
        Ok(())
    }

    /// Best achievable P@1: predict the rule's label, right whenever the
    /// label was not replaced and whenever the random replacement
    /// happens to coincide with it.
    pub fn bayes_optimal_p1(&self) -> f64 {
        1.0 - self.noise + self.noise / self.num_items as f64
    }

    fn pivots(&self) -> usize {
        self.num_items / 4
    }
}

struct Labeler {
    n: usize,
    perm: Option<Vec<ItemId>>,
}

impl Labeler {
    fn new(spec: &SyntheticSpec) -> Self {
        let perm = match spec.rule {
            Rule::Permutation { seed } => {
                let mut p: Vec<ItemId> = (0..spec.num_items as ItemId).collect();
                p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                Some(p)
            }
            _ => None,
        };
        Self { n: spec.num_items, perm }
    }

    fn next(&self, item: ItemId) -> ItemId {
        match &self.perm {
            Some(p) => p[item as usize],
            None => ((item as usize + 1) % self.n) as ItemId,
        }
    }
}

/// Draws `n_sessions` samples following `spec`. Item sequences are uniform
/// over the catalog with lengths uniform in `[min_len, max_len]`.
pub fn generate_synthetic<R: Rng + ?Sized>(spec: &SyntheticSpec, n_sessions: usize, rng: &mut R) -> Result<Dataset, DataError> {
    spec.validate()?;
    let n = spec.num_items as ItemId;
    let labeler = Labeler::new(spec);
    let mut sessions = Vec::with_capacity(n_sessions);
    for _ in 0..n_sessions {
        let (items, clean) = match spec.rule {
            Rule::Successor | Rule::Permutation { .. } => {
                let len = rng.gen_range(spec.min_len..=spec.max_len);
                let items: Vec<ItemId> = (0..len).map(|_| rng.gen_range(0..n)).collect();
                let label = labeler.next(*items.last().expect("len >= 1"));
                (items, label)
            }
            Rule::Mixture { hard_fraction } => {
                let pivots = spec.pivots() as ItemId;
                let hard = rng.gen_bool(hard_fraction);
                let len = rng.gen_range(spec.min_len.max(2)..=spec.max_len);
                let mut items: Vec<ItemId> = (0..len - 1).map(|_| rng.gen_range(0..n)).collect();
                let last = if hard {
                    rng.gen_range(0..pivots)
                } else {
                    rng.gen_range(pivots..n)
                };
                items.push(last);
                let label = if hard { labeler.next(items[0]) } else { labeler.next(last) };
                (items, label)
            }
        };
        let label = if spec.noise > 0.0 && rng.gen_bool(spec.noise) {
            rng.gen_range(0..n)
        } else {
            clean
        };
        sessions.push(Session::new(items, label));
    }
    Dataset::new(sessions, spec.num_items, Split::Train)
}
