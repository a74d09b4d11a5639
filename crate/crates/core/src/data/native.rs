use std::io::Write;

use super::{DataError, Session, Vocab, VocabPolicy};

/// Parses the line format `tok tok ... | label`. Blank lines and lines
/// starting with `#` are skipped. Line numbers in errors are 1-based.
pub fn parse_native(text: &str, vocab: &mut Vocab, policy: VocabPolicy) -> Result<Vec<Session>, DataError> {
    let mut sessions = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: &str| DataError::Parse {
            line: i + 1,
            reason: reason.to_owned(),
        };
        let (lhs, rhs) = line.split_once('|').ok_or_else(|| err("missing '|' separator"))?;
        if rhs.contains('|') {
            return Err(err("more than one '|' separator"));
        }
        let mut label_tokens = rhs.split_whitespace();
        let (Some(label), None) = (label_tokens.next(), label_tokens.next()) else {
            return Err(err("expected exactly one label token after '|'"));
        };
        let items = lhs
            .split_whitespace()
            .map(|tok| vocab.resolve(tok, policy))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| match e {
                DataError::UnknownItem(tok) => err(&format!("unknown item {tok:?}")),
                other => other,
            })?;
        if items.is_empty() {
            return Err(err("session has no items before '|'"));
        }
        let label = vocab
            .resolve(label, policy)
            .map_err(|_| err(&format!("unknown label {label:?}")))?;
        sessions.push(Session::new(items, label));
    }
    Ok(sessions)
}

/// Writes sessions in the native format using the vocabulary's original tokens.
pub fn write_native<W: Write>(mut w: W, sessions: &[Session], vocab: &Vocab) -> std::io::Result<()> {
    let tok = |id| vocab.token(id).expect("session ids come from this vocabulary");
    for s in sessions {
        let items: Vec<&str> = s.items.iter().map(|&id| tok(id)).collect();
        writeln!(w, "{} | {}", items.join(" "), tok(s.label))?;
    }
    Ok(())
}
