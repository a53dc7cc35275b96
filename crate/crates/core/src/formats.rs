//! Line-oriented text formats for feature tables.
//!
//! `EMB1`: header `EMB1 <N> <D>`, then N rows `<id> <x1> .. <xD>`.
//! `FRM1`: header `FRM1 <N> <T> <D>`, then N·T rows `<id> <frame> <x1> .. <xD>`.
//! Blank lines and lines starting with `#` are skipped. Values are written in
//! scientific notation with 17 significant digits so they re-parse exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Matrix;

/// Formats a value with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub(crate) fn push_row(out: &mut String, values: &[f64]) {
    for v in values {
        out.push(' ');
        out.push_str(&fmt_f64(*v));
    }
}

/// Iterates `(line_number, line)` skipping blanks and comments.
pub(crate) fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub(crate) fn parse_num<T: std::str::FromStr>(
    file: &str,
    line: usize,
    tok: Option<&str>,
    what: &str,
) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::parse(file, line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| Error::parse(file, line, format!("invalid {what} `{tok}`")))
}

fn parse_values<'a>(
    file: &str,
    line: usize,
    toks: impl Iterator<Item = &'a str>,
    dim: usize,
) -> Result<Vec<f64>> {
    let values = toks
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(file, line, format!("invalid value `{t}`")))
        })
        .collect::<Result<Vec<f64>>>()?;
    if values.len() != dim {
        return Err(Error::DimMismatch {
            expected: dim,
            got: values.len(),
        });
    }
    Ok(values)
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Rows of an EMB1 file in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbRows {
    pub ids: Vec<String>,
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
}

pub fn encode_emb1(ids: &[String], rows: &[Vec<f64>]) -> String {
    let dim = rows.first().map_or(0, Vec::len);
    let mut out = format!("EMB1 {} {}\n", ids.len(), dim);
    for (id, row) in ids.iter().zip(rows) {
        out.push_str(id);
        push_row(&mut out, row);
        out.push('\n');
    }
    out
}

pub fn decode_emb1(file: &str, text: &str) -> Result<EmbRows> {
    let mut lines = content_lines(text);
    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::parse(file, 1, "missing EMB1 header"))?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some("EMB1") {
        return Err(Error::parse(file, hline, "expected `EMB1 <N> <D>` header"));
    }
    let n: usize = parse_num(file, hline, toks.next(), "count")?;
    let dim: usize = parse_num(file, hline, toks.next(), "dimension")?;
    if dim == 0 {
        return Err(Error::parse(file, hline, "dimension must be positive"));
    }
    if toks.next().is_some() {
        return Err(Error::parse(file, hline, "trailing tokens in header"));
    }

    let mut ids = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    let mut seen = HashMap::with_capacity(n);
    let mut last_line = hline;
    for (ln, line) in lines {
        last_line = ln;
        if ids.len() == n {
            return Err(Error::parse(file, ln, format!("more than {n} rows")));
        }
        let mut toks = line.split_whitespace();
        let id = toks.next().unwrap_or_default().to_string();
        let row = parse_values(file, ln, toks, dim)?;
        if seen.insert(id.clone(), ()).is_some() {
            return Err(Error::DuplicateId(id));
        }
        ids.push(id);
        rows.push(row);
    }
    if ids.len() != n {
        return Err(Error::parse(
            file,
            last_line,
            format!("header declares {n} rows, found {}", ids.len()),
        ));
    }
    Ok(EmbRows { ids, dim, rows })
}

/// Per-item frame matrices of an FRM1 file, items in first-seen order.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRows {
    pub ids: Vec<String>,
    pub frames: Vec<Matrix>,
}

pub fn encode_frm1(ids: &[String], frames: &[Matrix]) -> String {
    let t = frames.first().map_or(0, Matrix::rows);
    let d = frames.first().map_or(0, Matrix::cols);
    let mut out = format!("FRM1 {} {} {}\n", ids.len(), t, d);
    for (id, m) in ids.iter().zip(frames) {
        for f in 0..m.rows() {
            let _ = write!(out, "{id} {f}");
            push_row(&mut out, m.row(f));
            out.push('\n');
        }
    }
    out
}

pub fn decode_frm1(file: &str, text: &str) -> Result<FrameRows> {
    let mut lines = content_lines(text);
    let (hline, header) = lines
        .next()
        .ok_or_else(|| Error::parse(file, 1, "missing FRM1 header"))?;
    let mut toks = header.split_whitespace();
    if toks.next() != Some("FRM1") {
        return Err(Error::parse(file, hline, "expected `FRM1 <N> <T> <D>` header"));
    }
    let n: usize = parse_num(file, hline, toks.next(), "count")?;
    let t: usize = parse_num(file, hline, toks.next(), "frame count")?;
    let d: usize = parse_num(file, hline, toks.next(), "dimension")?;
    if t == 0 || d == 0 {
        return Err(Error::parse(file, hline, "frame count and dimension must be positive"));
    }

    let mut index: HashMap<String, usize> = HashMap::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    let mut data: Vec<Vec<Option<Vec<f64>>>> = Vec::with_capacity(n);
    let mut rows_seen = 0usize;
    let mut last_line = hline;
    for (ln, line) in lines {
        last_line = ln;
        let mut toks = line.split_whitespace();
        let id = toks.next().unwrap_or_default();
        let f: usize = parse_num(file, ln, toks.next(), "frame index")?;
        if f >= t {
            return Err(Error::parse(file, ln, format!("frame index {f} not in [0, {t})")));
        }
        let row = parse_values(file, ln, toks, d)?;
        let slot = match index.get(id) {
            Some(&k) => k,
            None => {
                if ids.len() == n {
                    return Err(Error::parse(file, ln, format!("more than {n} items")));
                }
                index.insert(id.to_string(), ids.len());
                ids.push(id.to_string());
                data.push(vec![None; t]);
                ids.len() - 1
            }
        };
        if data[slot][f].replace(row).is_some() {
            return Err(Error::parse(file, ln, format!("duplicate frame {f} for `{id}`")));
        }
        rows_seen += 1;
    }
    if ids.len() != n || rows_seen != n * t {
        return Err(Error::parse(
            file,
            last_line,
            format!(
                "header declares {n} items x {t} frames, found {} items / {rows_seen} rows",
                ids.len()
            ),
        ));
    }
    let frames = data
        .into_iter()
        .map(|rows| {
            let flat: Vec<f64> = rows.into_iter().flatten().flatten().collect();
            Matrix::new(t, d, flat)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameRows { ids, frames })
}

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn fnv1a64_hex(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emb1_header_and_rows() {
        let text = "EMB1 2 3\n# comment\na 1 2 3\nb 4.5 -1e-3 0\n";
        let t = decode_emb1("t", text).unwrap();
        assert_eq!(t.ids, vec!["a", "b"]);
        assert_eq!(t.dim, 3);
        assert_eq!(t.rows[1], vec![4.5, -1e-3, 0.0]);
    }

    #[test]
    fn emb1_count_mismatch() {
        let err = decode_emb1("t", "EMB1 3 2\na 1 2\nb 3 4\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = decode_emb1("t", "EMB1 1 2\na 1 2\nb 3 4\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn emb1_bad_rows() {
        assert!(matches!(
            decode_emb1("t", "EMB1 2 2\na 1 2\na 3 4\n"),
            Err(Error::DuplicateId(id)) if id == "a"
        ));
        assert!(matches!(
            decode_emb1("t", "EMB1 1 2\na 1 2 3\n"),
            Err(Error::DimMismatch { expected: 2, got: 3 })
        ));
        assert!(matches!(
            decode_emb1("t", "EMB1 1 2\na 1 x\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            decode_emb1("t", "EMB2 1 2\na 1 2\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn frm1_parses_out_of_order_frames() {
        let text = "FRM1 2 2 2\na 1 3 4\na 0 1 2\nb 0 5 6\nb 1 7 8\n";
        let f = decode_frm1("f", text).unwrap();
        assert_eq!(f.ids, vec!["a", "b"]);
        assert_eq!(f.frames[0].row(0), &[1.0, 2.0]);
        assert_eq!(f.frames[0].row(1), &[3.0, 4.0]);
    }

    #[test]
    fn frm1_rejects_bad_frame_index() {
        let text = "FRM1 1 2 1\na 0 1\na 2 3\n";
        assert!(matches!(
            decode_frm1("f", text),
            Err(Error::Parse { line: 3, .. })
        ));
        let text = "FRM1 1 2 1\na 0 1\n";
        assert!(matches!(decode_frm1("f", text), Err(Error::Parse { .. })));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64_hex(b"foobar"), "85944171f73967e8");
    }

    proptest::proptest! {
        #[test]
        fn emb1_round_trip_is_bit_exact(rows in proptest::collection::vec(
            proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::ZERO, 4), 1..6)
        ) {
            let ids: Vec<String> = (0..rows.len()).map(|i| format!("id{i}")).collect();
            let back = decode_emb1("p", &encode_emb1(&ids, &rows)).unwrap();
            proptest::prop_assert_eq!(back.ids, ids);
            for (a, b) in back.rows.iter().zip(&rows) {
                for (x, y) in a.iter().zip(b) {
                    proptest::prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}
