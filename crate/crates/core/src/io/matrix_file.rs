//! Matrix files.
//!
//! Text: a header line `m n`, then `m` lines of `n` whitespace-separated
//! decimal floats. Values are written in shortest round-trip form, so a
//! write/read cycle is bit-exact.
//!
//! Binary: magic `LDUMTX`, `m` and `n` as little-endian u32, then `m·n`
//! little-endian f64 in row-major order. [`read_matrix`] detects the encoding
//! from the magic.

use std::fmt::Write as _;
use std::path::Path;

use crate::linalg::DenseMatrix;

use super::FormatError;

pub const MATRIX_MAGIC: &[u8; 6] = b"LDUMTX";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixEncoding {
    Text,
    Binary,
}

pub fn write_matrix_text(m: &DenseMatrix) -> String {
    let mut out = String::new();
    writeln!(out, "{} {}", m.rows(), m.cols()).unwrap();
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
    out
}

pub fn write_matrix_binary(m: &DenseMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(MATRIX_MAGIC.len() + 8 + 8 * m.as_slice().len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_matrix(m: &DenseMatrix, encoding: MatrixEncoding) -> Vec<u8> {
    match encoding {
        MatrixEncoding::Text => write_matrix_text(m).into_bytes(),
        MatrixEncoding::Binary => write_matrix_binary(m),
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> FormatError {
    FormatError::Parse {
        line,
        message: message.into(),
    }
}

pub fn parse_matrix_text(text: &str) -> Result<DenseMatrix, FormatError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (hdr_no, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty matrix file"))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    if dims.len() != 2 {
        return Err(parse_err(hdr_no + 1, "header must be `m n`"));
    }
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| parse_err(hdr_no + 1, format!("bad dimension {s:?}: {e}")))
    };
    let (rows, cols) = (parse_dim(dims[0])?, parse_dim(dims[1])?);
    if rows == 0 || cols == 0 {
        return Err(parse_err(hdr_no + 1, "dimensions must be positive"));
    }
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen_rows = 0;
    for (no, line) in lines {
        if seen_rows == rows {
            return Err(parse_err(no + 1, "more rows than the header declares"));
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|e| parse_err(no + 1, format!("bad number {tok:?}: {e}")))?;
            if !v.is_finite() {
                return Err(parse_err(no + 1, format!("non-finite value {tok:?}")));
            }
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(parse_err(
                no + 1,
                format!("expected {cols} values, found {}", data.len() - before),
            ));
        }
        seen_rows += 1;
    }
    if seen_rows != rows {
        return Err(parse_err(
            0,
            format!("expected {rows} rows, found {seen_rows}"),
        ));
    }
    Ok(DenseMatrix::new(rows, cols, data)?)
}

pub fn parse_matrix_binary(bytes: &[u8]) -> Result<DenseMatrix, FormatError> {
    let hdr = MATRIX_MAGIC.len() + 8;
    if bytes.len() < hdr || &bytes[..MATRIX_MAGIC.len()] != MATRIX_MAGIC {
        return Err(FormatError::BadMagic);
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let expected = hdr + 8 * rows * cols;
    if bytes.len() != expected {
        return Err(FormatError::LengthMismatch {
            expected,
            got: bytes.len(),
        });
    }
    let data = bytes[hdr..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DenseMatrix::new(rows, cols, data)?)
}

/// Decodes either encoding.
pub fn read_matrix(bytes: &[u8]) -> Result<DenseMatrix, FormatError> {
    if bytes.starts_with(MATRIX_MAGIC) {
        parse_matrix_binary(bytes)
    } else {
        let text =
            std::str::from_utf8(bytes).map_err(|e| parse_err(0, format!("not UTF-8: {e}")))?;
        parse_matrix_text(text)
    }
}

pub fn read_matrix_file(path: &Path) -> Result<DenseMatrix, FormatError> {
    read_matrix(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn text_format_by_hand() {
        let m = parse_matrix_text("2 3\n1 2 3\n-4.5 0 1e-3\n").unwrap();
        assert_eq!(m.shape(), (2, 3));
        assert_eq!(m[(1, 2)], 1e-3);
        assert!(matches!(
            parse_matrix_text("2 2\n1 2\n3\n"),
            Err(FormatError::Parse { line: 3, .. })
        ));
        assert!(parse_matrix_text("2 2\n1 2\n").is_err());
        assert!(parse_matrix_text("1 1\nnan\n").is_err());
        assert!(parse_matrix_text("0 1\n").is_err());
        assert!(parse_matrix_text("").is_err());
        assert!(parse_matrix_text("1 1\n1\n2\n").is_err());
    }

    #[test]
    fn detects_encoding() {
        let m = DenseMatrix::from_rows(&[vec![1.0, -2.5], vec![1e300, 3e-300]]).unwrap();
        assert_eq!(read_matrix(&write_matrix_binary(&m)).unwrap(), m);
        assert_eq!(read_matrix(write_matrix_text(&m).as_bytes()).unwrap(), m);
        let mut short = write_matrix_binary(&m);
        short.pop();
        assert!(matches!(
            read_matrix(&short),
            Err(FormatError::LengthMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn text_round_trip_is_bit_exact(rows in 1usize..6, cols in 1usize..6, vals in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 36)) {
            let m = DenseMatrix::new(rows, cols, vals[..rows * cols].to_vec()).unwrap();
            let back = parse_matrix_text(&write_matrix_text(&m)).unwrap();
            prop_assert_eq!(back.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
