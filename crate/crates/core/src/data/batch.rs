use rand::seq::SliceRandom;
use rand::Rng;

use super::{Dataset, ItemId, Session};

/// Right-padded block of sessions.
///
/// Padding cells hold [`Batch::PAD`], which lies outside every catalog and
/// is masked out of the model entirely.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Row-major `size × width` item grid.
    pub ids: Vec<ItemId>,
    pub width: usize,
    pub lengths: Vec<usize>,
    pub labels: Vec<ItemId>,
}

impl Batch {
    pub const PAD: ItemId = ItemId::MAX;

    pub fn from_sessions<'a, I>(sessions: I) -> Self
    where
        I: IntoIterator<Item = &'a Session>,
    {
        let sessions: Vec<&Session> = sessions.into_iter().collect();
        let width = sessions.iter().map(|s| s.items.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(sessions.len() * width);
        for s in &sessions {
            ids.extend_from_slice(&s.items);
            ids.extend(std::iter::repeat_n(Self::PAD, width - s.items.len()));
        }
        Self {
            ids,
            width,
            lengths: sessions.iter().map(|s| s.items.len()).collect(),
            labels: sessions.iter().map(|s| s.label).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    /// The unpadded items of row `b`.
    pub fn session(&self, b: usize) -> &[ItemId] {
        &self.ids[b * self.width..b * self.width + self.lengths[b]]
    }

    /// `mask[b * width + j]` is true iff position `j` of row `b` is a real item.
    pub fn mask(&self) -> Vec<bool> {
        self.lengths
            .iter()
            .flat_map(|&len| (0..self.width).map(move |j| j < len))
            .collect()
    }
}

/// Iterator over one epoch of batches.
pub struct Batches<'d> {
    dataset: &'d Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let sessions = self.dataset.sessions();
        let batch = Batch::from_sessions(self.order[self.cursor..end].iter().map(|&i| &sessions[i]));
        self.cursor = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.cursor).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

impl ExactSizeIterator for Batches<'_> {}

/// Splits the dataset into batches of `batch_size` (the last may be
/// smaller), covering every sample exactly once. Shuffling draws from `rng`
/// only when `shuffle` is set.
///
/// # Panics
/// If `batch_size` is zero.
pub fn make_batches<'d, R: Rng + ?Sized>(dataset: &'d Dataset, batch_size: usize, shuffle: bool, rng: &mut R) -> Batches<'d> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle {
        order.shuffle(rng);
    }
    Batches {
        dataset,
        order,
        batch_size,
        cursor: 0,
    }
}
