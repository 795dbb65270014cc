//! Mixed two-domain event sequences, the line format that carries them, and
//! item vocabularies.
//!
//! File format: UTF-8, one sequence per line, tab-separated `<domain>:<item>`
//! tokens with domain in {A, B}, chronological order. The final token of each
//! domain is that domain's ground truth.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

/// One of the two item universes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::A => Domain::B,
            Domain::B => Domain::A,
        }
    }

    pub const BOTH: [Domain; 2] = [Domain::A, Domain::B];
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::A => write!(f, "A"),
            Domain::B => write!(f, "B"),
        }
    }
}

/// A pair of values, one per domain.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PerDomain<T> {
    pub a: T,
    pub b: T,
}

impl<T> PerDomain<T> {
    pub fn new(a: T, b: T) -> Self {
        PerDomain { a, b }
    }

    pub fn get(&self, d: Domain) -> &T {
        match d {
            Domain::A => &self.a,
            Domain::B => &self.b,
        }
    }

    pub fn get_mut(&mut self, d: Domain) -> &mut T {
        match d {
            Domain::A => &mut self.a,
            Domain::B => &mut self.b,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> PerDomain<U> {
        PerDomain {
            a: f(&self.a),
            b: f(&self.b),
        }
    }
}

/// One consumed item: which domain it belongs to and its external item id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub domain: Domain,
    pub item: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("parse error at column {column}: {message}")]
pub struct ParseError {
    /// 1-based byte column of the offending token.
    pub column: usize,
    pub message: String,
}

/// One account's interleaved two-domain event list.
///
/// Alignment indices, per-position targets and final ground truths are all
/// derived from the event list on demand; nothing redundant is stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedSequence {
    events: Vec<Event>,
}

impl MixedSequence {
    pub fn new(events: Vec<Event>) -> Self {
        MixedSequence { events }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Number of events belonging to `domain`.
    pub fn count(&self, domain: Domain) -> usize {
        self.events.iter().filter(|e| e.domain == domain).count()
    }

    /// Index of the most recent event of the *other* domain strictly before
    /// `pos`, if any. Monotone non-decreasing in `pos`.
    pub fn last_other_before(&self, pos: usize) -> Option<usize> {
        let other = self.events[pos].domain.other();
        (0..pos).rev().find(|&i| self.events[i].domain == other)
    }

    /// The domain's final event item — the evaluation ground truth.
    pub fn final_item(&self, domain: Domain) -> Option<u32> {
        self.events
            .iter()
            .rev()
            .find(|e| e.domain == domain)
            .map(|e| e.item)
    }

    /// The sequence with the domain's final event removed; what the model
    /// sees when predicting that domain's ground truth.
    pub fn without_final(&self, domain: Domain) -> MixedSequence {
        let mut events = self.events.clone();
        if let Some(pos) = events.iter().rposition(|e| e.domain == domain) {
            events.remove(pos);
        }
        MixedSequence { events }
    }

    /// Teacher-forcing targets for `domain`: every in-domain event except the
    /// first, as `(global position, item)`. The prediction for each target
    /// may use only events strictly before its position.
    pub fn targets(&self, domain: Domain) -> Vec<(usize, u32)> {
        let mut seen = false;
        let mut out = Vec::new();
        for (pos, e) in self.events.iter().enumerate() {
            if e.domain != domain {
                continue;
            }
            if seen {
                out.push((pos, e.item));
            }
            seen = true;
        }
        out
    }

    /// Checks the constraints a training sequence must satisfy: at least one
    /// event in each domain.
    pub fn valid_for_training(&self) -> bool {
        self.count(Domain::A) >= 1 && self.count(Domain::B) >= 1
    }

    /// Parse one line of the sequence file format.
    pub fn parse_line(line: &str) -> Result<Self, ParseError> {
        if line.is_empty() {
            return Err(ParseError {
                column: 1,
                message: "empty sequence line".into(),
            });
        }
        let mut events = Vec::new();
        let mut column = 1usize;
        for token in line.split('\t') {
            events.push(parse_token(token, column)?);
            column += token.len() + 1;
        }
        Ok(MixedSequence { events })
    }

    /// Inverse of [`MixedSequence::parse_line`]; round-trips byte-exactly.
    pub fn to_line(&self) -> String {
        self.events
            .iter()
            .map(|e| format!("{}:{}", e.domain, e.item))
            .collect::<Vec<_>>()
            .join("\t")
    }
}

fn parse_token(token: &str, column: usize) -> Result<Event, ParseError> {
    let err = |message: String| ParseError { column, message };
    let (dom, item) = token
        .split_once(':')
        .ok_or_else(|| err(format!("token `{token}` is missing `:`")))?;
    let domain = match dom {
        "A" => Domain::A,
        "B" => Domain::B,
        _ => return Err(err(format!("unknown domain tag `{dom}`"))),
    };
    if item.is_empty() || !item.bytes().all(|b| b.is_ascii_digit()) {
        return Err(err(format!("item id `{item}` is not a decimal number")));
    }
    if item.len() > 1 && item.starts_with('0') {
        return Err(err(format!("item id `{item}` has leading zeros")));
    }
    let item: u32 = item
        .parse()
        .map_err(|_| err(format!("item id `{item}` out of range")))?;
    Ok(Event { domain, item })
}

/// Item id <-> dense index bijection for one domain, frozen on the training
/// split. Indices follow first appearance, so they are deterministic for a
/// given corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    domain: Domain,
    ids: Vec<u32>,
    index: HashMap<u32, usize>,
}

impl Vocabulary {
    pub fn from_sequences(domain: Domain, seqs: &[MixedSequence]) -> Self {
        let mut ids = Vec::new();
        let mut index = HashMap::new();
        for seq in seqs {
            for e in seq.events() {
                if e.domain == domain && !index.contains_key(&e.item) {
                    index.insert(e.item, ids.len());
                    ids.push(e.item);
                }
            }
        }
        Vocabulary { domain, ids, index }
    }

    /// A vocabulary from an explicit id list (checkpoint restore).
    pub fn from_ids(domain: Domain, ids: Vec<u32>) -> Self {
        let index = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Vocabulary { domain, ids, index }
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn id_at(&self, index: usize) -> u32 {
        self.ids[index]
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// FNV-1a over the id list in index order; used to pair checkpoints with
    /// the data they were trained on.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for &id in &self.ids {
            for byte in id.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_simple_line() {
        let s = MixedSequence::parse_line("A:12\tB:4\tA:7").unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.count(Domain::A), 2);
        assert_eq!(s.count(Domain::B), 1);
        assert_eq!(s.final_item(Domain::A), Some(7));
        assert_eq!(s.final_item(Domain::B), Some(4));
    }

    #[test]
    fn empty_line_is_a_parse_error() {
        assert!(MixedSequence::parse_line("").is_err());
    }

    #[test]
    fn malformed_token_reports_column() {
        let err = MixedSequence::parse_line("A:12\tC:4").unwrap_err();
        assert_eq!(err.column, 6);
        let err = MixedSequence::parse_line("A:12\tB:x4").unwrap_err();
        assert_eq!(err.column, 6);
        let err = MixedSequence::parse_line("A:007").unwrap_err();
        assert_eq!(err.column, 1);
    }

    #[test]
    fn round_trip_is_identity() {
        let line = "A:12\tB:4\tA:7\tB:0";
        let s = MixedSequence::parse_line(line).unwrap();
        assert_eq!(s.to_line(), line);
    }

    #[test]
    fn alignment_is_monotone_and_correct() {
        let s = MixedSequence::parse_line("A:1\tA:2\tB:9\tA:3\tB:8\tA:4").unwrap();
        // A events at 0,1,3,5; B events at 2,4.
        assert_eq!(s.last_other_before(0), None);
        assert_eq!(s.last_other_before(1), None);
        assert_eq!(s.last_other_before(3), Some(2));
        assert_eq!(s.last_other_before(5), Some(4));
        // B's view: most recent A before position 2 is 1, before 4 is 3.
        assert_eq!(s.last_other_before(2), Some(1));
        assert_eq!(s.last_other_before(4), Some(3));
    }

    #[test]
    fn targets_skip_first_in_domain_event() {
        let s = MixedSequence::parse_line("A:1\tB:9\tA:2\tA:3\tB:8").unwrap();
        assert_eq!(s.targets(Domain::A), vec![(2, 2), (3, 3)]);
        assert_eq!(s.targets(Domain::B), vec![(4, 8)]);
    }

    #[test]
    fn without_final_removes_only_that_domain() {
        let s = MixedSequence::parse_line("A:1\tB:9\tA:2\tB:8").unwrap();
        let wa = s.without_final(Domain::A);
        assert_eq!(wa.to_line(), "A:1\tB:9\tB:8");
        let wb = s.without_final(Domain::B);
        assert_eq!(wb.to_line(), "A:1\tB:9\tA:2");
    }

    #[test]
    fn vocabulary_is_a_bijection_in_first_appearance_order() {
        let seqs = vec![
            MixedSequence::parse_line("A:5\tA:3\tB:1").unwrap(),
            MixedSequence::parse_line("A:3\tA:9\tB:2").unwrap(),
        ];
        let v = Vocabulary::from_sequences(Domain::A, &seqs);
        assert_eq!(v.ids(), &[5, 3, 9]);
        for idx in 0..v.len() {
            assert_eq!(v.index_of(v.id_at(idx)), Some(idx));
        }
        assert_eq!(v.index_of(1), None);
    }
}
