use super::{ItemId, Session};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Augmented {
    pub sessions: Vec<Session>,
    /// Raw sessions with fewer than two items, which yield no sample.
    pub skipped: usize,
}

/// Expands each raw session `[i1, ..., im]` into the `m - 1` samples
/// `([i1], i2), ([i1, i2], i3), ...`.
pub fn augment_prefixes<S: AsRef<[ItemId]>>(raw: &[S]) -> Augmented {
    let mut out = Augmented::default();
    for session in raw {
        let items = session.as_ref();
        if items.len() < 2 {
            out.skipped += 1;
            continue;
        }
        for end in 1..items.len() {
            out.sessions.push(Session::new(items[..end].to_vec(), items[end]));
        }
    }
    if out.skipped > 0 {
        log::warn!("skipped {} raw sessions shorter than two items", out.skipped);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_items_two_samples() {
        let out = augment_prefixes(&[vec![10, 11, 12]]);
        assert_eq!(out.sessions, vec![Session::new(vec![10], 11), Session::new(vec![10, 11], 12)]);
        assert_eq!(out.skipped, 0);
    }

    #[test]
    fn length_two_gives_one_and_length_one_is_skipped() {
        let out = augment_prefixes(&[vec![1, 2], vec![5]]);
        assert_eq!(out.sessions, vec![Session::new(vec![1], 2)]);
        assert_eq!(out.skipped, 1);
    }
}
