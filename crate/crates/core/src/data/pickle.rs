//! Reader for the pickled `(sequences, labels)` pair used by the public
//! preprocessed session datasets.
//!
//! Only the opcodes needed to rebuild nested lists/tuples of integers are
//! interpreted; anything else is rejected with its byte offset. Objects live
//! in an arena indexed by position so memo references can alias without
//! reference counting.

use std::collections::HashMap;

use super::DataError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TwoLists {
    pub sequences: Vec<Vec<i64>>,
    pub labels: Vec<i64>,
}

#[derive(Debug)]
enum Obj {
    Int(i64),
    List(Vec<usize>),
    Tuple(Vec<usize>),
}

enum Slot {
    Mark,
    Obj(usize),
}

struct Machine<'a> {
    bytes: &'a [u8],
    pos: usize,
    arena: Vec<Obj>,
    stack: Vec<Slot>,
    memo: HashMap<u32, usize>,
}

fn fail<T>(offset: usize, reason: impl Into<String>) -> Result<T, DataError> {
    Err(DataError::Pickle {
        offset,
        reason: reason.into(),
    })
}

impl<'a> Machine<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => fail(self.pos, "truncated input"),
        }
    }

    fn byte(&mut self) -> Result<u8, DataError> {
        Ok(self.take(1)?[0])
    }

    fn u32_le(&mut self) -> Result<u32, DataError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn line(&mut self) -> Result<&'a str, DataError> {
        let start = self.pos;
        let rel = self.bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(DataError::Pickle {
                offset: start,
                reason: "unterminated text argument".into(),
            })?;
        self.pos = start + rel + 1;
        std::str::from_utf8(&self.bytes[start..start + rel]).or_else(|_| fail(start, "non-UTF-8 text argument"))
    }

    fn alloc(&mut self, obj: Obj) -> usize {
        self.arena.push(obj);
        self.arena.len() - 1
    }

    fn push_obj(&mut self, obj: Obj) {
        let id = self.alloc(obj);
        self.stack.push(Slot::Obj(id));
    }

    fn pop_obj(&mut self, at: usize) -> Result<usize, DataError> {
        match self.stack.pop() {
            Some(Slot::Obj(id)) => Ok(id),
            Some(Slot::Mark) => fail(at, "unexpected mark"),
            None => fail(at, "stack underflow"),
        }
    }

    fn top_obj(&self, at: usize) -> Result<usize, DataError> {
        match self.stack.last() {
            Some(Slot::Obj(id)) => Ok(*id),
            _ => fail(at, "expected an object on the stack"),
        }
    }

    /// Pops everything above the most recent mark, and the mark itself.
    fn pop_to_mark(&mut self, at: usize) -> Result<Vec<usize>, DataError> {
        let mark = self
            .stack
            .iter()
            .rposition(|s| matches!(s, Slot::Mark))
            .ok_or(DataError::Pickle {
                offset: at,
                reason: "no mark on the stack".into(),
            })?;
        let items = self
            .stack
            .drain(mark + 1..)
            .map(|s| match s {
                Slot::Obj(id) => id,
                Slot::Mark => unreachable!("rposition found the last mark"),
            })
            .collect();
        self.stack.pop();
        Ok(items)
    }

    fn extend_list(&mut self, list: usize, items: Vec<usize>, at: usize) -> Result<(), DataError> {
        match &mut self.arena[list] {
            Obj::List(v) => {
                v.extend(items);
                Ok(())
            }
            _ => fail(at, "append target is not a list"),
        }
    }

    fn memo_get(&self, key: u32, at: usize) -> Result<usize, DataError> {
        self.memo.get(&key).copied().ok_or(DataError::Pickle {
            offset: at,
            reason: format!("memo key {key} not set"),
        })
    }

    fn run(mut self) -> Result<(Vec<Obj>, usize), DataError> {
        loop {
            let at = self.pos;
            let op = self.byte()?;
            match op {
                0x80 => {
                    let proto = self.byte()?;
                    if !(2..=5).contains(&proto) {
                        return fail(at, format!("unsupported protocol {proto}"));
                    }
                }
                0x95 => {
                    self.take(8)?;
                }
                b']' => self.push_obj(Obj::List(Vec::new())),
                b')' => self.push_obj(Obj::Tuple(Vec::new())),
                b'(' => self.stack.push(Slot::Mark),
                b'l' => {
                    let items = self.pop_to_mark(at)?;
                    self.push_obj(Obj::List(items));
                }
                b't' => {
                    let items = self.pop_to_mark(at)?;
                    self.push_obj(Obj::Tuple(items));
                }
                0x85..=0x87 => {
                    let n = (op - 0x84) as usize;
                    if self.stack.len() < n {
                        return fail(at, "stack underflow");
                    }
                    let mut items = Vec::with_capacity(n);
                    for _ in 0..n {
                        items.push(self.pop_obj(at)?);
                    }
                    items.reverse();
                    self.push_obj(Obj::Tuple(items));
                }
                b'a' => {
                    let item = self.pop_obj(at)?;
                    let list = self.top_obj(at)?;
                    self.extend_list(list, vec![item], at)?;
                }
                b'e' => {
                    let items = self.pop_to_mark(at)?;
                    let list = self.top_obj(at)?;
                    self.extend_list(list, items, at)?;
                }
                b'J' => {
                    let v = self.u32_le()? as i32;
                    self.push_obj(Obj::Int(v.into()));
                }
                b'K' => {
                    let v = self.byte()?;
                    self.push_obj(Obj::Int(v.into()));
                }
                b'M' => {
                    let b = self.take(2)?;
                    self.push_obj(Obj::Int(u16::from_le_bytes([b[0], b[1]]).into()));
                }
                0x8a => {
                    let n = self.byte()? as usize;
                    let b = self.take(n)?;
                    if n > 8 {
                        return fail(at, "integer wider than 64 bits");
                    }
                    let mut buf = if b.last().is_some_and(|&x| x & 0x80 != 0) {
                        [0xff; 8]
                    } else {
                        [0; 8]
                    };
                    buf[..n].copy_from_slice(b);
                    self.push_obj(Obj::Int(i64::from_le_bytes(buf)));
                }
                b'I' | b'L' => {
                    let text = self.line()?;
                    let digits = text.strip_suffix('L').unwrap_or(text);
                    let v = match digits {
                        "00" => 0,
                        "01" => 1,
                        d => d.parse::<i64>().or_else(|_| fail(at, format!("bad integer {d:?}")))?,
                    };
                    self.push_obj(Obj::Int(v));
                }
                b'q' => {
                    let key = self.byte()?.into();
                    let top = self.top_obj(at)?;
                    self.memo.insert(key, top);
                }
                b'r' => {
                    let key = self.u32_le()?;
                    let top = self.top_obj(at)?;
                    self.memo.insert(key, top);
                }
                0x94 => {
                    let key = self.memo.len() as u32;
                    let top = self.top_obj(at)?;
                    self.memo.insert(key, top);
                }
                b'h' => {
                    let key = self.byte()?.into();
                    let id = self.memo_get(key, at)?;
                    self.stack.push(Slot::Obj(id));
                }
                b'j' => {
                    let key = self.u32_le()?;
                    let id = self.memo_get(key, at)?;
                    self.stack.push(Slot::Obj(id));
                }
                b'.' => {
                    let root = self.pop_obj(at)?;
                    return Ok((self.arena, root));
                }
                other => return fail(at, format!("unsupported opcode 0x{other:02x}")),
            }
        }
    }
}

fn children(arena: &[Obj], id: usize) -> Option<&[usize]> {
    match &arena[id] {
        Obj::List(v) | Obj::Tuple(v) => Some(v),
        Obj::Int(_) => None,
    }
}

fn int(arena: &[Obj], id: usize) -> Option<i64> {
    match arena[id] {
        Obj::Int(v) => Some(v),
        _ => None,
    }
}

/// Decodes a pickle whose root is a two-element list or tuple holding a
/// list of integer lists and a list of integers of the same length.
pub fn parse_two_lists(bytes: &[u8]) -> Result<TwoLists, DataError> {
    let machine = Machine {
        bytes,
        pos: 0,
        arena: Vec::new(),
        stack: Vec::new(),
        memo: HashMap::new(),
    };
    let (arena, root) = machine.run()?;
    let shape_err = |reason: &str| DataError::Pickle {
        offset: 0,
        reason: reason.to_owned(),
    };
    let top = children(&arena, root).ok_or_else(|| shape_err("root is not a sequence"))?;
    let [seqs, labels] = top else {
        return Err(shape_err("root must hold exactly two lists"));
    };
    let seqs = children(&arena, *seqs).ok_or_else(|| shape_err("first element is not a list"))?;
    let labels = children(&arena, *labels).ok_or_else(|| shape_err("second element is not a list"))?;
    if seqs.len() != labels.len() {
        return Err(shape_err(&format!("{} sequences but {} labels", seqs.len(), labels.len())));
    }
    let sequences = seqs
        .iter()
        .map(|&s| {
            children(&arena, s)
                .ok_or_else(|| shape_err("sequence is not a list"))?
                .iter()
                .map(|&i| int(&arena, i).ok_or_else(|| shape_err("sequence item is not an integer")))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let labels = labels
        .iter()
        .map(|&i| int(&arena, i).ok_or_else(|| shape_err("label is not an integer")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TwoLists { sequences, labels })
}
