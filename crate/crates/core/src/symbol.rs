//! The 12-symbol alphabet: digits `0`–`9`, `+` (id 10) and `=` (id 11).

use std::fmt;

/// Number of distinct output symbols.
pub const NUM_SYMBOLS: usize = 12;

/// Id of the `+` operator.
pub const PLUS: u8 = 10;

/// Id of the `=` operator.
pub const EQUALS: u8 = 11;

/// One output symbol. Ids `0..=9` are digits, [`PLUS`] and [`EQUALS`] are the operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Symbol(u8);

impl Symbol {
    pub const PLUS: Symbol = Symbol(PLUS);
    pub const EQUALS: Symbol = Symbol(EQUALS);

    /// Returns `None` when `id` is outside `0..12`.
    pub fn new(id: u8) -> Option<Symbol> {
        ((id as usize) < NUM_SYMBOLS).then_some(Symbol(id))
    }

    /// # Panics
    /// Panics when `d > 9`.
    pub fn digit(d: u8) -> Symbol {
        assert!(d < 10, "digit out of range: {d}");
        Symbol(d)
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_digit(self) -> bool {
        self.0 < 10
    }

    pub fn to_char(self) -> char {
        match self.0 {
            PLUS => '+',
            EQUALS => '=',
            d => char::from(b'0' + d),
        }
    }

    pub fn from_char(c: char) -> Option<Symbol> {
        match c {
            '+' => Some(Symbol::PLUS),
            '=' => Some(Symbol::EQUALS),
            '0'..='9' => Some(Symbol(c as u8 - b'0')),
            _ => None,
        }
    }

    /// All symbols in id order.
    pub fn all() -> impl Iterator<Item = Symbol> {
        (0..NUM_SYMBOLS as u8).map(Symbol)
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_char())
    }
}

/// Parses a label string such as `"12+34=46"`. Any character outside the
/// alphabet makes the whole parse fail.
pub fn parse_symbols(s: &str) -> Option<Vec<Symbol>> {
    s.chars().map(Symbol::from_char).collect()
}

/// Renders a symbol sequence back to its label string.
pub fn format_symbols(seq: &[Symbol]) -> String {
    seq.iter().map(|s| s.to_char()).collect()
}
