//! Text formats: JSON-lines measurement records and CSV outputs.
//!
//! A measurement line looks like
//! `{"t": 1, "y": [0.3], "A": [[1.0, 0.0]], "Q": [[1.0]], "b": [0.0]}`;
//! `Q` defaults to the identity and `b` to no offset.

use std::io::{self, BufRead, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::estimator::{EstimatorState, MeasurementBatch};
use crate::simulation::McSummary;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchRecord {
    pub t: u64,
    pub y: Vec<f64>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
}

fn rows_to_matrix(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if let Some(bad) = rows.iter().position(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!(
            "row {bad} of {what} has {} entries, expected {ncols}",
            rows[bad].len()
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl BatchRecord {
    /// `n_states` is needed only for a batch with no rows, whose width cannot be read off `A`.
    pub fn into_batch(self, n_states: Option<usize>) -> Result<MeasurementBatch> {
        let m = self.a.len();
        let n = match (self.a.first(), n_states) {
            (Some(row), _) => row.len(),
            (None, Some(n)) => n,
            (None, None) => {
                return Err(Error::Dimension(
                    "empty A with no earlier batch to fix the state dimension".into(),
                ))
            }
        };
        if let Some(expected) = n_states {
            if n != expected {
                return Err(Error::Dimension(format!(
                    "A has {n} columns, earlier batches have {expected}"
                )));
            }
        }
        let a = rows_to_matrix(&self.a, n, "A")?;
        let q = match &self.q {
            Some(rows) => {
                if rows.len() != m {
                    return Err(Error::Dimension(format!(
                        "Q has {} rows, expected {m}",
                        rows.len()
                    )));
                }
                rows_to_matrix(rows, m, "Q")?
            }
            None => DMatrix::identity(m, m),
        };
        MeasurementBatch::new(
            self.t,
            DVector::from_vec(self.y),
            a,
            q,
            self.b.map(DVector::from_vec),
        )
    }

    pub fn from_batch(batch: &MeasurementBatch) -> Self {
        Self {
            t: batch.t,
            y: batch.y.iter().copied().collect(),
            a: matrix_to_rows(&batch.a),
            q: Some(matrix_to_rows(&batch.q)),
            b: batch.b.as_ref().map(|b| b.iter().copied().collect()),
        }
    }
}

/// Parses one JSON line; `line_no` is 1-based and only used in messages.
pub fn parse_batch_line(
    line: &str,
    line_no: usize,
    n_states: Option<usize>,
) -> Result<MeasurementBatch> {
    let record: BatchRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    record.into_batch(n_states).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })
}

pub fn batch_to_json(batch: &MeasurementBatch) -> String {
    serde_json::to_string(&BatchRecord::from_batch(batch)).expect("plain data serializes")
}

/// Lazily parses a JSON-lines stream, skipping blank lines.
///
/// Each item carries its 1-based line number. The state dimension is fixed by
/// the first non-empty batch.
pub struct BatchReader<R> {
    lines: io::Lines<R>,
    line_no: usize,
    n_states: Option<usize>,
}

impl<R: BufRead> BatchReader<R> {
    pub fn new(reader: R, n_states: Option<usize>) -> Self {
        Self {
            lines: reader.lines(),
            line_no: 0,
            n_states,
        }
    }
}

#[derive(Debug)]
pub enum ReadError {
    Io(io::Error),
    Data(Error),
}

impl<R: BufRead> Iterator for BatchReader<R> {
    type Item = std::result::Result<(usize, MeasurementBatch), ReadError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(ReadError::Io(e))),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(
                parse_batch_line(&line, self.line_no, self.n_states)
                    .map(|batch| {
                        self.n_states.get_or_insert(batch.n_states());
                        (self.line_no, batch)
                    })
                    .map_err(ReadError::Data),
            );
        }
    }
}

/// Shortest decimal text that parses back to the same `f64`.
///
/// Plain notation for moderate magnitudes, scientific otherwise.
pub fn format_float(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-5..1e16).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

pub fn write_csv_row<W: Write>(out: &mut W, first: &str, values: &[f64]) -> io::Result<()> {
    out.write_all(first.as_bytes())?;
    for v in values {
        out.write_all(b",")?;
        out.write_all(format_float(*v).as_bytes())?;
    }
    out.write_all(b"\n")
}

pub fn estimate_header(n_states: usize) -> String {
    let mut h = String::from("t");
    for i in 1..=n_states {
        h.push_str(&format!(",x_hat_{i}"));
    }
    h
}

pub fn write_estimate_row<W: Write>(out: &mut W, state: &EstimatorState) -> io::Result<()> {
    write_csv_row(out, &state.t.to_string(), state.x_hat.as_slice())
}

pub fn write_summary_csv<W: Write>(out: &mut W, summary: &McSummary) -> io::Result<()> {
    writeln!(out, "t,mean_error,rms_error")?;
    for (i, (m, r)) in summary.mean_error.iter().zip(&summary.rms_error).enumerate() {
        write_csv_row(out, &(i + 1).to_string(), &[*m, *r])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_line_parses_with_defaults() {
        let b = parse_batch_line(r#"{"t": 1, "y": [1.0], "A": [[1.0]]}"#, 1, None).unwrap();
        assert_eq!(b.q, DMatrix::identity(1, 1));
        assert!(b.b.is_none());
    }

    #[test]
    fn batch_round_trips_bitwise() {
        let batch = MeasurementBatch::new(
            3,
            DVector::from_vec(vec![0.1 + 0.2, -1e-300]),
            DMatrix::from_row_slice(2, 3, &[1.0 / 3.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            Some(DVector::from_vec(vec![std::f64::consts::PI, 0.0])),
        )
        .unwrap();
        let back = parse_batch_line(&batch_to_json(&batch), 1, None).unwrap();
        assert_eq!(back, batch);
    }

    #[test]
    fn ragged_or_mismatched_lines_fail_with_line_number() {
        let err = parse_batch_line(r#"{"t": 1, "y": [1.0, 2.0], "A": [[1.0, 0.0], [1.0]]}"#, 7, None)
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 7, .. }));
        let err = parse_batch_line(r#"{"t": 1, "y": [1.0], "A": [[1.0, 0.0]]}"#, 2, Some(3))
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(parse_batch_line("not json", 1, None).is_err());
        assert!(parse_batch_line(r#"{"t": 1, "y": [], "A": [], "z": 1}"#, 1, Some(2)).is_err());
    }

    #[test]
    fn empty_batch_needs_known_width() {
        let line = r#"{"t": 2, "y": [], "A": []}"#;
        assert!(parse_batch_line(line, 1, None).is_err());
        let b = parse_batch_line(line, 1, Some(4)).unwrap();
        assert_eq!((b.n_meas(), b.n_states()), (0, 4));
    }

    #[test]
    fn reader_skips_blank_lines_and_counts() {
        let text = "\n{\"t\":1,\"y\":[1],\"A\":[[1,0]]}\n\n{\"t\":2,\"y\":[],\"A\":[]}\n";
        let items: Vec<_> = BatchReader::new(text.as_bytes(), None)
            .map(|r| r.unwrap().0)
            .collect();
        assert_eq!(items, vec![2, 4]);
    }

    #[test]
    fn float_text_round_trips() {
        for x in [0.5, 1.0, -0.0, 1e-7, 123456.789, 1e300, 5e-324, 0.1 + 0.2] {
            assert_eq!(format_float(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
        assert_eq!(format_float(0.5), "0.5");
        assert_eq!(format_float(1.0), "1");
        assert_eq!(format_float(1e-7), "1e-7");
    }

    #[test]
    fn estimate_rows() {
        let mut out = Vec::new();
        writeln!(out, "{}", estimate_header(1)).unwrap();
        write_estimate_row(&mut out, &EstimatorState { x_hat: DVector::from_vec(vec![0.5]), t: 1 })
            .unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "t,x_hat_1\n1,0.5\n");
    }
}
