use std::fmt;

use crate::symbol::Symbol;

/// Default maximum number of digits per number.
pub const MAX_DIGITS: usize = 3;

/// Digit counts of the three numbers of an `a+b=c` layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Split {
    pub len_a: usize,
    pub len_b: usize,
    pub len_c: usize,
}

impl Split {
    /// Length of the symbol sequence this split lays out.
    pub fn seq_len(&self) -> usize {
        self.len_a + self.len_b + self.len_c + 2
    }

    pub fn plus_pos(&self) -> usize {
        self.len_a
    }

    pub fn equals_pos(&self) -> usize {
        self.len_a + self.len_b + 1
    }

    /// Sequence position of digit `j` (0 = least significant) of `a`.
    #[inline]
    pub fn pos_a(&self, j: usize) -> usize {
        self.len_a - 1 - j
    }

    #[inline]
    pub fn pos_b(&self, j: usize) -> usize {
        self.len_a + self.len_b - j
    }

    #[inline]
    pub fn pos_c(&self, j: usize) -> usize {
        self.seq_len() - 1 - j
    }

    /// All splits of a length-`m` sequence with 1..=`max_digits` digits per
    /// number, ordered by `(len_a, len_b)`.
    pub fn enumerate(m: usize, max_digits: usize) -> Vec<Split> {
        let mut out = Vec::new();
        for len_a in 1..=max_digits {
            for len_b in 1..=max_digits {
                let Some(len_c) = m.checked_sub(len_a + len_b + 2) else { continue };
                if (1..=max_digits).contains(&len_c) {
                    out.push(Split { len_a, len_b, len_c });
                }
            }
        }
        out
    }
}

/// Which part of the `a+b=c` template a sequence breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntaxViolation {
    PlusCount(usize),
    EqualsCount(usize),
    EqualsBeforePlus,
    EmptySegment(Segment),
    SegmentTooLong(Segment, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    A,
    B,
    C,
}

impl fmt::Display for SyntaxViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SyntaxViolation::PlusCount(n) => write!(f, "expected one '+', found {n}"),
            SyntaxViolation::EqualsCount(n) => write!(f, "expected one '=', found {n}"),
            SyntaxViolation::EqualsBeforePlus => write!(f, "'=' precedes '+'"),
            SyntaxViolation::EmptySegment(s) => write!(f, "number {s:?} has no digits"),
            SyntaxViolation::SegmentTooLong(s, n) => write!(f, "number {s:?} has {n} digits"),
        }
    }
}

/// Decodes `a+b=c` into its three integers (leading zeros allowed).
pub fn decode_numbers(y: &[Symbol]) -> Result<(u64, u64, u64), SyntaxViolation> {
    decode_numbers_with(y, MAX_DIGITS)
}

pub fn decode_numbers_with(y: &[Symbol], max_digits: usize) -> Result<(u64, u64, u64), SyntaxViolation> {
    let split = parse_split(y, max_digits)?;
    let number = |range: std::ops::Range<usize>| y[range].iter().fold(0u64, |n, d| n * 10 + d.id() as u64);
    let p = split.plus_pos();
    let q = split.equals_pos();
    Ok((number(0..p), number(p + 1..q), number(q + 1..y.len())))
}

/// Checks the template and returns the implied split.
pub fn parse_split(y: &[Symbol], max_digits: usize) -> Result<Split, SyntaxViolation> {
    let plus: Vec<usize> = positions(y, Symbol::PLUS);
    let equals: Vec<usize> = positions(y, Symbol::EQUALS);
    if plus.len() != 1 {
        return Err(SyntaxViolation::PlusCount(plus.len()));
    }
    if equals.len() != 1 {
        return Err(SyntaxViolation::EqualsCount(equals.len()));
    }
    let (p, q) = (plus[0], equals[0]);
    if q < p {
        return Err(SyntaxViolation::EqualsBeforePlus);
    }
    let lens = [(Segment::A, p), (Segment::B, q - p - 1), (Segment::C, y.len() - q - 1)];
    for (seg, n) in lens {
        if n == 0 {
            return Err(SyntaxViolation::EmptySegment(seg));
        }
    }
    for (seg, n) in lens {
        if n > max_digits {
            return Err(SyntaxViolation::SegmentTooLong(seg, n));
        }
    }
    Ok(Split { len_a: lens[0].1, len_b: lens[1].1, len_c: lens[2].1 })
}

fn positions(y: &[Symbol], s: Symbol) -> Vec<usize> {
    y.iter().enumerate().filter(|(_, &v)| v == s).map(|(i, _)| i).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Validity {
    Valid,
    SyntacticError,
    SemanticError,
}

/// Classifies a sequence against the template and the `a + b = c` rule.
pub fn validate(y: &[Symbol]) -> Validity {
    validate_with(y, MAX_DIGITS)
}

pub fn validate_with(y: &[Symbol], max_digits: usize) -> Validity {
    match decode_numbers_with(y, max_digits) {
        Err(_) => Validity::SyntacticError,
        Ok((a, b, c)) if a + b == c => Validity::Valid,
        Ok(_) => Validity::SemanticError,
    }
}
