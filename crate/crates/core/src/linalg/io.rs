//! Comma-separated matrix files: one row per line, `#` comment lines, no header.

use std::io::{Read, Write};
use std::path::Path;

use super::{LinalgError, Matrix};

pub fn read_matrix<R: Read>(reader: R) -> Result<Matrix, LinalgError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| LinalgError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        let row = record
            .iter()
            .map(|field| {
                let v: f64 = field
                    .parse()
                    .map_err(|_| LinalgError::Parse { line, msg: format!("not a number: {field:?}") })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(LinalgError::Parse { line, msg: format!("non-finite value {field:?}") })
                }
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(LinalgError::Parse {
                    line,
                    msg: format!("expected {} values, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(LinalgError::Empty);
    }
    Matrix::from_rows(&rows)
}

pub fn read_matrix_file(path: &Path) -> Result<Matrix, LinalgError> {
    read_matrix(std::fs::File::open(path)?)
}

pub fn write_matrix<W: Write>(writer: W, m: &Matrix) -> Result<(), LinalgError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|x| format!("{x:?}")))
            .map_err(|e| LinalgError::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_matrix_file(path: &Path, m: &Matrix) -> Result<(), LinalgError> {
    write_matrix(std::fs::File::create(path)?, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_comments_and_whitespace() {
        let text = "# value matrix\n# second comment\n1, 2.5\n-3,4e-1\n";
        let m = read_matrix(text.as_bytes()).unwrap();
        assert_eq!(m.to_rows(), vec![vec![1.0, 2.5], vec![-3.0, 0.4]]);
    }

    #[test]
    fn roundtrip_is_exact() {
        let m = Matrix::from_rows(&[vec![0.1, 1.0 / 3.0, -2e-300], vec![1e10, -0.0, 7.0]]).unwrap();
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        assert_eq!(read_matrix(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn rejects_ragged_and_garbage() {
        assert!(matches!(read_matrix("1,2\n3\n".as_bytes()), Err(LinalgError::Parse { line: 2, .. })));
        assert!(read_matrix("1,x\n".as_bytes()).is_err());
        assert!(read_matrix("1,NaN\n".as_bytes()).is_err());
        assert!(matches!(read_matrix("# only comments\n".as_bytes()), Err(LinalgError::Empty)));
    }
}
