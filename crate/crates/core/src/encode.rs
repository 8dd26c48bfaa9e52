//! Text encoding of trajectories as token-id sequences.
//!
//! Grammar:
//!
//! ```text
//! sequence := <BOS> visit ( => visit )* <EOS>
//! visit    := arrival time is T_k , location is G_m , duration is D_n
//! ```
//!
//! Field values are single tokens (`T_0..`, `G_1..`, `D_1..`), so a visit
//! block is always 12 tokens long.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::{GridSpec, TimeSpec};
use crate::traj::{Trajectory, Visit};

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const SEP: TokenId = 2;
pub const ARRIVAL: TokenId = 3;
pub const TIME: TokenId = 4;
pub const IS: TokenId = 5;
pub const LOCATION: TokenId = 6;
pub const DURATION: TokenId = 7;
pub const COMMA: TokenId = 8;

const TEMPLATE: [&str; 9] = ["<BOS>", "<EOS>", "=>", "arrival", "time", "is", "location", "duration", ","];

/// Tokens in one encoded visit.
pub const VISIT_TOKENS: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(v: Vec<TokenId>) -> Self {
        TokenSequence(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence ended without <EOS>")]
    MissingEOS,
    #[error("at token {position}: expected {expected}, found {found}")]
    ParseError { position: usize, expected: &'static str, found: String },
    #[error("visit {0:?} cannot be encoded with this vocabulary")]
    Unencodable(Visit),
    #[error("unknown token `{0}`")]
    UnknownToken(String),
}

/// Which block of the vocabulary a token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Template(TokenId),
    Time(u32),
    Location(u32),
    Duration(u32),
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    slots: u32,
    cells: u32,
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Template tokens, then `T_0..T_{slots-1}`, `G_1..G_{cells}`, `D_1..D_{slots}`.
    pub fn build(grid: &GridSpec, ts: &TimeSpec) -> Self {
        Self::with_sizes(ts.slots_per_day(), grid.n_cells())
    }

    pub fn with_sizes(slots: u32, cells: u32) -> Self {
        let mut tokens: Vec<String> = TEMPLATE.iter().map(|s| s.to_string()).collect();
        tokens.extend((0..slots).map(|k| format!("T_{k}")));
        tokens.extend((1..=cells).map(|m| format!("G_{m}")));
        tokens.extend((1..=slots).map(|n| format!("D_{n}")));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        Vocabulary { slots, cells, tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn slots(&self) -> u32 {
        self.slots
    }

    pub fn cells(&self) -> u32 {
        self.cells
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    fn time_base(&self) -> u32 {
        TEMPLATE.len() as u32
    }

    fn location_base(&self) -> u32 {
        self.time_base() + self.slots
    }

    fn duration_base(&self) -> u32 {
        self.location_base() + self.cells
    }

    pub fn time_token(&self, slot: u32) -> Option<TokenId> {
        (slot < self.slots).then(|| self.time_base() + slot)
    }

    pub fn location_token(&self, cell: u32) -> Option<TokenId> {
        (1..=self.cells).contains(&cell).then(|| self.location_base() + cell - 1)
    }

    pub fn duration_token(&self, slots: u32) -> Option<TokenId> {
        (1..=self.slots).contains(&slots).then(|| self.duration_base() + slots - 1)
    }

    pub fn classify(&self, id: TokenId) -> TokenClass {
        let (t, l, d) = (self.time_base(), self.location_base(), self.duration_base());
        match id {
            _ if id < t => TokenClass::Template(id),
            _ if id < l => TokenClass::Time(id - t),
            _ if id < d => TokenClass::Location(id - l + 1),
            _ if (id as usize) < self.tokens.len() => TokenClass::Duration(id - d + 1),
            _ => TokenClass::Invalid,
        }
    }

    /// SHA-256 over the ordered token strings, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Whitespace-joined token strings, for debugging dumps.
    pub fn render(&self, seq: &TokenSequence) -> String {
        seq.0
            .iter()
            .map(|&id| self.token(id).map(str::to_string).unwrap_or_else(|| format!("<#{id}>")))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse_text(&self, text: &str) -> Result<TokenSequence, CodecError> {
        text.split_whitespace()
            .map(|t| self.id(t).ok_or_else(|| CodecError::UnknownToken(t.to_string())))
            .collect::<Result<Vec<_>, _>>()
            .map(TokenSequence)
    }

    fn describe(&self, id: TokenId) -> String {
        self.token(id).map(|t| format!("`{t}`")).unwrap_or_else(|| format!("out-of-range id {id}"))
    }

    /// The 12 tokens of one visit.
    pub fn encode_visit(&self, v: &Visit) -> Result<[TokenId; VISIT_TOKENS], CodecError> {
        let err = || CodecError::Unencodable(*v);
        Ok([
            ARRIVAL,
            TIME,
            IS,
            self.time_token(v.arrival).ok_or_else(err)?,
            COMMA,
            LOCATION,
            IS,
            self.location_token(v.location).ok_or_else(err)?,
            COMMA,
            DURATION,
            IS,
            self.duration_token(v.duration).ok_or_else(err)?,
        ])
    }

    pub fn encode(&self, traj: &Trajectory) -> Result<TokenSequence, CodecError> {
        let mut ids = Vec::with_capacity(1 + traj.len() * (VISIT_TOKENS + 1));
        ids.push(BOS);
        for (i, v) in traj.visits.iter().enumerate() {
            if i > 0 {
                ids.push(SEP);
            }
            ids.extend_from_slice(&self.encode_visit(v)?);
        }
        ids.push(EOS);
        Ok(TokenSequence(ids))
    }

    /// Strict parse. Visits come back in textual order with no reordering or
    /// overlap checks.
    pub fn decode(&self, seq: &TokenSequence) -> Result<Trajectory, CodecError> {
        let visits = Parser { vocab: self, ids: &seq.0, pos: 0 }.sequence()?;
        Ok(Trajectory::new(String::new(), visits))
    }

    /// Reorder whole visit blocks by a uniformly random permutation. Tokens
    /// inside each block are untouched.
    pub fn permute<R: Rng + ?Sized>(&self, seq: &TokenSequence, rng: &mut R) -> Result<TokenSequence, CodecError> {
        let mut visits = self.decode(seq)?.visits;
        visits.shuffle(rng);
        self.encode(&Trajectory::new(String::new(), visits))
    }
}

struct Parser<'a> {
    vocab: &'a Vocabulary,
    ids: &'a [TokenId],
    pos: usize,
}

impl Parser<'_> {
    fn fail<T>(&self, expected: &'static str) -> Result<T, CodecError> {
        let found = match self.ids.get(self.pos) {
            Some(&id) => self.vocab.describe(id),
            None => "end of sequence".to_string(),
        };
        Err(CodecError::ParseError { position: self.pos, expected, found })
    }

    fn expect(&mut self, tok: TokenId, name: &'static str) -> Result<(), CodecError> {
        match self.ids.get(self.pos) {
            Some(&id) if id == tok => {
                self.pos += 1;
                Ok(())
            }
            _ => self.fail(name),
        }
    }

    fn value(&mut self, pick: fn(TokenClass) -> Option<u32>, name: &'static str) -> Result<u32, CodecError> {
        match self.ids.get(self.pos).and_then(|&id| pick(self.vocab.classify(id))) {
            Some(v) => {
                self.pos += 1;
                Ok(v)
            }
            None => self.fail(name),
        }
    }

    fn visit(&mut self) -> Result<Visit, CodecError> {
        self.expect(ARRIVAL, "`arrival`")?;
        self.expect(TIME, "`time`")?;
        self.expect(IS, "`is`")?;
        let arrival = self.value(|c| if let TokenClass::Time(k) = c { Some(k) } else { None }, "time value")?;
        self.expect(COMMA, "`,`")?;
        self.expect(LOCATION, "`location`")?;
        self.expect(IS, "`is`")?;
        let location = self.value(|c| if let TokenClass::Location(m) = c { Some(m) } else { None }, "location value")?;
        self.expect(COMMA, "`,`")?;
        self.expect(DURATION, "`duration`")?;
        self.expect(IS, "`is`")?;
        let duration = self.value(|c| if let TokenClass::Duration(n) = c { Some(n) } else { None }, "duration value")?;
        Ok(Visit::new(arrival, location, duration))
    }

    fn sequence(mut self) -> Result<Vec<Visit>, CodecError> {
        if self.ids.is_empty() {
            return Err(CodecError::EmptySequence);
        }
        self.expect(BOS, "`<BOS>`")?;
        let mut visits = vec![self.visit()?];
        loop {
            match self.ids.get(self.pos) {
                None => return Err(CodecError::MissingEOS),
                Some(&EOS) => {
                    self.pos += 1;
                    break;
                }
                Some(&SEP) => {
                    self.pos += 1;
                    visits.push(self.visit()?);
                }
                Some(_) => return self.fail("`=>` or `<EOS>`"),
            }
        }
        if self.pos != self.ids.len() {
            return self.fail("end of sequence");
        }
        Ok(visits)
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        write!(f, "[{}]", ids.join(" "))
    }
}
