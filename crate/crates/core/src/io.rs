//! Matrix serialization: `{rows, cols, data}` JSON with row-major data, and
//! headerless CSV with one matrix row per line.

use std::io::{Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Wire form of a dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixJson {
    pub fn from_array(values: &Array2<f64>) -> Self {
        let (rows, cols) = values.dim();
        Self {
            rows,
            cols,
            data: values.iter().copied().collect(),
        }
    }

    pub fn into_array(self) -> Result<Array2<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::DimensionMismatch(format!(
                "declared {}x{} matrix but data holds {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Array2::from_shape_vec((self.rows, self.cols), self.data).map_err(|e| Error::DimensionMismatch(e.to_string()))
    }
}

pub fn matrix_to_json(values: &Array2<f64>) -> Result<String> {
    Ok(serde_json::to_string(&MatrixJson::from_array(values))?)
}

pub fn matrix_from_json(text: &str) -> Result<Array2<f64>> {
    serde_json::from_str::<MatrixJson>(text)?.into_array()
}

/// Reads a headerless CSV matrix. Rows of unequal length are rejected with the
/// offending line number.
pub fn read_csv_matrix<R: Read>(reader: R) -> Result<Array2<f64>> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (line, record) in csv.records().enumerate() {
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { expected_len, len, .. } => Error::DimensionMismatch(format!(
                "line {}: expected {expected_len} fields, found {len}",
                line + 1
            )),
            _ => Error::Parse(e.to_string()),
        })?;
        cols.get_or_insert(record.len());
        for (col, field) in record.iter().enumerate() {
            let value: f64 = field
                .parse()
                .map_err(|_| Error::Parse(format!("line {}, column {}: cannot parse {field:?}", line + 1, col + 1)))?;
            data.push(value);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Parse("empty matrix".into()))?;
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::DimensionMismatch(e.to_string()))
}

pub fn write_csv_matrix<W: Write>(writer: W, values: &Array2<f64>) -> Result<()> {
    let mut csv = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    for row in values.rows() {
        csv.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| Error::Parse(e.to_string()))?;
    }
    csv.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn json_layout_is_row_major() {
        let m = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let text = matrix_to_json(&m).unwrap();
        assert_eq!(text, r#"{"rows":2,"cols":3,"data":[1.0,2.0,3.0,4.0,5.0,6.0]}"#);
        assert_eq!(matrix_from_json(&text).unwrap(), m);
    }

    #[test]
    fn json_dimension_mismatch_rejected() {
        let err = matrix_from_json(r#"{"rows":2,"cols":2,"data":[1,2,3]}"#).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn csv_roundtrip_preserves_bits() {
        let m = array![[0.1, -1.0 / 3.0], [1e-300, 6.02e23]];
        let mut buf = Vec::new();
        write_csv_matrix(&mut buf, &m).unwrap();
        assert_eq!(read_csv_matrix(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn ragged_csv_reports_line() {
        let err = read_csv_matrix("1,2\n3\n".as_bytes()).unwrap_err();
        match err {
            Error::DimensionMismatch(msg) => assert!(msg.contains("line 2"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_garbage_is_parse_error() {
        assert!(matches!(read_csv_matrix("1,abc\n".as_bytes()), Err(Error::Parse(_))));
        assert!(matches!(read_csv_matrix("".as_bytes()), Err(Error::Parse(_))));
    }
}
