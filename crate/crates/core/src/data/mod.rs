//! Session datasets: file formats, vocabulary, prefix augmentation,
//! batching and synthetic generators.

mod augment;
mod batch;
mod native;
pub mod pickle;
mod synth;
mod vocab;

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub use augment::{augment_prefixes, Augmented};
pub use batch::{make_batches, Batch, Batches};
pub use native::{parse_native, write_native};
pub use synth::{generate_synthetic, Rule, SyntheticSpec};
pub use vocab::{Vocab, VocabPolicy};

/// Dense internal item index in `[0, num_items)`.
pub type ItemId = u32;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("pickle offset {offset}: {reason}")]
    Pickle { offset: usize, reason: String },
    #[error("dataset has no samples")]
    Empty,
    #[error("session {index} is empty")]
    EmptySession { index: usize },
    #[error("item {id} out of range for a catalog of {num_items} items")]
    ItemOutOfRange { id: u64, num_items: usize },
    #[error("unknown item {0:?} (not in the vocabulary)")]
    UnknownItem(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One next-item sample: the observed prefix and the item clicked next.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Session {
    pub items: Vec<ItemId>,
    pub label: ItemId,
}

impl Session {
    pub fn new(items: Vec<ItemId>, label: ItemId) -> Self {
        Self { items, label }
    }

    /// Keeps only the most recent `max_len` items.
    pub fn truncate_front(&mut self, max_len: usize) {
        if self.items.len() > max_len {
            self.items.drain(..self.items.len() - max_len);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    sessions: Vec<Session>,
    num_items: usize,
    split: Split,
}

impl Dataset {
    /// Validates that the dataset is nonempty and every ID fits the catalog.
    pub fn new(sessions: Vec<Session>, num_items: usize, split: Split) -> Result<Self, DataError> {
        if sessions.is_empty() {
            return Err(DataError::Empty);
        }
        for (index, s) in sessions.iter().enumerate() {
            if s.items.is_empty() {
                return Err(DataError::EmptySession { index });
            }
            if let Some(&id) = s.items.iter().chain([&s.label]).find(|&&id| id as usize >= num_items) {
                return Err(DataError::ItemOutOfRange {
                    id: id.into(),
                    num_items,
                });
            }
        }
        Ok(Self {
            sessions,
            num_items,
            split,
        })
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Widens the catalog, e.g. after the test split added unseen items.
    pub fn with_num_items(mut self, num_items: usize) -> Self {
        assert!(num_items >= self.num_items, "catalog cannot shrink");
        self.num_items = num_items;
        self
    }

    /// First `n` samples, for desk-scale subsampling.
    pub fn head(&self, n: usize) -> Result<Self, DataError> {
        Self::new(self.sessions[..n.min(self.len())].to_vec(), self.num_items, self.split)
    }

    pub fn stats(&self) -> DatasetStats {
        let distinct: HashSet<ItemId> = self
            .sessions
            .iter()
            .flat_map(|s| s.items.iter().copied().chain([s.label]))
            .collect();
        let total_len: usize = self.sessions.iter().map(|s| s.items.len()).sum();
        DatasetStats {
            samples: self.len(),
            catalog: self.num_items,
            distinct_items: distinct.len(),
            avg_len: total_len as f64 / self.len() as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetStats {
    pub samples: usize,
    pub catalog: usize,
    pub distinct_items: usize,
    pub avg_len: f64,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "samples={} catalog={} distinct_items={} avg_len={:.2}",
            self.samples, self.catalog, self.distinct_items, self.avg_len
        )
    }
}

/// On-disk dataset encodings accepted by [`load_dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    /// One sample per line: `item item ... | label`.
    Native,
    /// A pickled `(sequences, labels)` pair, as distributed with the public
    /// preprocessed Tmall / RetailRocket splits. Samples are taken as-is
    /// (they are already prefix-augmented).
    Pickle,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "native" | "txt" => Ok(Format::Native),
            "pickle" | "pkl" => Ok(Format::Pickle),
            other => Err(format!("unknown dataset format {other:?} (expected native or pickle)")),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Native => "native",
            Format::Pickle => "pickle",
        })
    }
}

/// Decodes a dataset from memory. Item tokens are mapped through `vocab`,
/// which grows or rejects unseen tokens according to `policy`; sessions
/// longer than `max_len` keep their most recent items. The resulting
/// catalog size is the vocabulary size after loading.
pub fn decode_dataset(
    bytes: &[u8],
    format: Format,
    vocab: &mut Vocab,
    policy: VocabPolicy,
    max_len: Option<usize>,
    split: Split,
) -> Result<Dataset, DataError> {
    let mut sessions = match format {
        Format::Native => {
            let text = std::str::from_utf8(bytes).map_err(|e| DataError::Parse {
                line: 1 + bytes[..e.valid_up_to()].iter().filter(|b| **b == b'\n').count(),
                reason: "invalid UTF-8".into(),
            })?;
            parse_native(text, vocab, policy)?
        }
        Format::Pickle => {
            let lists = pickle::parse_two_lists(bytes)?;
            let mut out = Vec::with_capacity(lists.labels.len());
            for (seq, label) in lists.sequences.iter().zip(&lists.labels) {
                let items = seq
                    .iter()
                    .map(|id| vocab.resolve(&id.to_string(), policy))
                    .collect::<Result<Vec<_>, _>>()?;
                out.push(Session::new(items, vocab.resolve(&label.to_string(), policy)?));
            }
            out
        }
    };
    if let Some(max_len) = max_len {
        sessions.iter_mut().for_each(|s| s.truncate_front(max_len));
    }
    Dataset::new(sessions, vocab.len(), split)
}

pub fn load_dataset(
    path: &Path,
    format: Format,
    vocab: &mut Vocab,
    policy: VocabPolicy,
    max_len: Option<usize>,
    split: Split,
) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path)?;
    decode_dataset(&bytes, format, vocab, policy, max_len, split)
}
