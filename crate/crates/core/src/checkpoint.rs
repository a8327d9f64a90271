//! Plain-text checkpoints: a versioned header line, then named sections.
//!
//! ```text
//! #nester-cnn v1
//! conv1.bias 16
//! 0 0 0 ...
//! ```
//!
//! Values are written with Rust's shortest round-trip formatting, so a
//! save/load cycle reproduces every `f64` bit for bit.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::CheckpointError;

/// One named block of values.
#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Writes `header` and the sections. Non-finite values are refused.
pub fn write_sections<W: Write>(mut w: W, header: &str, sections: &[(&str, &[usize], &[f64])]) -> Result<(), CheckpointError> {
    let mut out = String::new();
    writeln!(out, "{header}").unwrap();
    for (name, shape, values) in sections {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(CheckpointError::Parse { line: 0, msg: format!("section {name} holds non-finite value {v}") });
        }
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        writeln!(out, "{name} {}", dims.join("x")).unwrap();
        let mut first = true;
        for v in values.iter() {
            if !first {
                out.push(' ');
            }
            first = false;
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    w.write_all(out.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_sections`], checking the header.
pub fn read_sections<R: BufRead>(r: R, header: &str) -> Result<Vec<Section>, CheckpointError> {
    let mut lines = r.lines().enumerate();
    let first = match lines.next() {
        Some((_, l)) => l?,
        None => String::new(),
    };
    if first.trim_end() != header {
        return Err(CheckpointError::Version { expected: header.to_string(), found: first });
    }
    let mut sections = Vec::new();
    while let Some((i, line)) = lines.next() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |line: usize, msg: String| CheckpointError::Parse { line: line + 1, msg };
        let (name, dims) = line.split_once(' ').ok_or_else(|| parse_err(i, format!("expected `name shape`, found `{line}`")))?;
        let shape = dims
            .trim()
            .split('x')
            .map(|d| d.parse::<usize>().map_err(|_| parse_err(i, format!("bad dimension `{d}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        let expected: usize = shape.iter().product();
        let (j, body) = match lines.next() {
            Some((j, l)) => (j, l?),
            None => return Err(parse_err(i + 1, format!("section {name}: missing values"))),
        };
        let values = body
            .split_whitespace()
            .map(|t| match t.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_err(j, format!("section {name}: bad value `{t}`"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != expected {
            return Err(parse_err(j, format!("section {name}: expected {expected} values, found {}", values.len())));
        }
        sections.push(Section { name: name.to_string(), shape, values });
    }
    Ok(sections)
}

/// Looks up a section by name and checks its shape.
pub fn take_section(sections: &mut Vec<Section>, name: &str, shape: Option<&[usize]>) -> Result<Section, CheckpointError> {
    let idx = sections
        .iter()
        .position(|s| s.name == name)
        .ok_or_else(|| CheckpointError::Parse { line: 0, msg: format!("missing section {name}") })?;
    let s = sections.remove(idx);
    if let Some(shape) = shape {
        if s.shape != shape {
            return Err(CheckpointError::Parse { line: 0, msg: format!("section {name}: expected shape {shape:?}, found {:?}", s.shape) });
        }
    }
    Ok(s)
}
