use std::collections::HashMap;
use std::io::Write;

use sha2::{Digest, Sha256};

use super::{DataError, ItemId};

/// Whether tokens missing from the vocabulary are added or rejected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VocabPolicy {
    Extend,
    Frozen,
}

/// Bidirectional map between original item tokens and dense internal IDs,
/// assigned in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    index: HashMap<String, ItemId>,
    tokens: Vec<String>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Vocabulary whose tokens are the decimal strings `0..n`.
    pub fn identity(n: usize) -> Self {
        let mut v = Self::new();
        for i in 0..n {
            v.intern(&i.to_string());
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn intern(&mut self, token: &str) -> ItemId {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as ItemId;
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), id);
        id
    }

    pub fn get(&self, token: &str) -> Option<ItemId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: ItemId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn resolve(&mut self, token: &str, policy: VocabPolicy) -> Result<ItemId, DataError> {
        match policy {
            VocabPolicy::Extend => Ok(self.intern(token)),
            VocabPolicy::Frozen => self.get(token).ok_or_else(|| DataError::UnknownItem(token.to_owned())),
        }
    }

    /// Two whitespace-separated columns per line: original token, internal ID.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (id, token) in self.tokens.iter().enumerate() {
            writeln!(w, "{token}\t{id}")?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("tokens are UTF-8")
    }

    /// Parses the two-column form. Internal IDs must be exactly `0..n` (in
    /// any line order) and tokens must be unique.
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut pairs: Vec<(usize, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| DataError::Parse { line: i + 1, reason };
            let mut cols = line.split_whitespace();
            let (Some(token), Some(id), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(err("expected two columns: original-id internal-id".into()));
            };
            let id: usize = id.parse().map_err(|_| err(format!("bad internal id {id:?}")))?;
            if id > ItemId::MAX as usize - 1 {
                return Err(err(format!("internal id {id} too large")));
            }
            pairs.push((id, token.to_owned()));
        }
        let n = pairs.len();
        let mut tokens: Vec<Option<String>> = vec![None; n];
        let mut index = HashMap::with_capacity(n);
        for (id, token) in pairs {
            let slot = tokens.get_mut(id).ok_or_else(|| DataError::Parse {
                line: 0,
                reason: format!("internal ids must be dense 0..{n}, found {id}"),
            })?;
            if slot.is_some() {
                return Err(DataError::Parse {
                    line: 0,
                    reason: format!("internal id {id} assigned twice"),
                });
            }
            if index.insert(token.clone(), id as ItemId).is_some() {
                return Err(DataError::Parse {
                    line: 0,
                    reason: format!("token {token:?} listed twice"),
                });
            }
            *slot = Some(token);
        }
        let tokens = tokens.into_iter().map(|t| t.expect("dense ids checked above")).collect();
        Ok(Self { index, tokens })
    }

    /// Hex SHA-256 of the two-column text form.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_text().as_bytes());
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn first_seen_order() {
        let mut v = Vocab::new();
        assert_eq!(v.intern("x"), 0);
        assert_eq!(v.intern("y"), 1);
        assert_eq!(v.intern("x"), 0);
        assert_eq!(v.token(1), Some("y"));
        assert!(matches!(v.resolve("z", VocabPolicy::Frozen), Err(DataError::UnknownItem(t)) if t == "z"));
        assert_eq!(v.resolve("z", VocabPolicy::Extend).unwrap(), 2);
    }

    #[test]
    fn parse_rejects_gaps_and_duplicates() {
        assert!(Vocab::parse("a 0\nb 2\n").is_err());
        assert!(Vocab::parse("a 0\nb 0\n").is_err());
        assert!(Vocab::parse("a 0\na 1\n").is_err());
        assert!(Vocab::parse("a 0 extra\n").is_err());
        let v = Vocab::parse("b 1\na 0\n\n").unwrap();
        assert_eq!(v.get("a"), Some(0));
        assert_eq!(v.token(1), Some("b"));
    }

    proptest! {
        #[test]
        fn internal_original_internal_round_trip(tokens in proptest::collection::vec("[a-z0-9]{1,6}", 1..40)) {
            let mut v = Vocab::new();
            for t in &tokens {
                v.intern(t);
            }
            let reloaded = Vocab::parse(&v.to_text()).unwrap();
            prop_assert_eq!(&reloaded, &v);
            for id in 0..v.len() as ItemId {
                let original = v.token(id).unwrap();
                prop_assert_eq!(reloaded.get(original), Some(id));
            }
        }
    }
}
