//! Comma-separated tables: a header row, '#' comment lines, real-valued fields.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{CliError, CliResult};

/// Header plus rows of reals, each row tagged with its 1-based line number.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub lines: Vec<u64>,
}

impl Table {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn column(&self, j: usize) -> Array1<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }

    /// Rows × the first `ncols` columns.
    pub fn leading_columns(&self, ncols: usize) -> Array2<f64> {
        Array2::from_shape_fn((self.rows.len(), ncols), |(i, j)| self.rows[i][j])
    }
}

pub fn parse_table(text: &str, path: &Path) -> CliResult<Table> {
    let parse_error = |line: u64, message: String| CliError::Parse { path: path.to_path_buf(), line, message };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| parse_error(e.position().map_or(1, |p| p.line()), e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(parse_error(1, "missing header row".into()));
    }
    // the reader's positions skip comment lines, so number the records here
    let record_lines: Vec<u64> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| {
            let l = l.trim_end_matches('\r');
            !l.is_empty() && !l.starts_with('#')
        })
        .map(|(i, _)| i as u64 + 1)
        .collect();
    let line_of = |record: usize| record_lines.get(record + 1).copied().unwrap_or(record_lines.len() as u64 + 1);
    let header_line = record_lines.first().copied().unwrap_or(1);
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = if e.position().is_some() { line_of(k) } else { header_line };
            let message = match e.kind() {
                csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
                    format!("expected {expected_len} fields, found {len}")
                }
                _ => e.to_string(),
            };
            parse_error(line, message)
        })?;
        let line = line_of(k);
        let row = record
            .iter()
            .enumerate()
            .map(|(j, field)| {
                let v: f64 = field
                    .parse()
                    .map_err(|_| parse_error(line, format!("column '{}': '{field}' is not a number", header[j])))?;
                if !v.is_finite() {
                    return Err(parse_error(line, format!("column '{}': non-finite value '{field}'", header[j])));
                }
                Ok(v)
            })
            .collect::<CliResult<Vec<f64>>>()?;
        rows.push(row);
        lines.push(line);
    }
    Ok(Table { header, rows, lines })
}

pub fn read_table(path: &Path) -> CliResult<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_table(&text, path)
}

/// Write a header and rows of reals. Values use the shortest representation
/// that reads back to the same `f64`.
pub fn write_table<W: Write>(mut out: W, header: &[String], rows: impl IntoIterator<Item = Vec<f64>>) -> std::io::Result<()> {
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        let fields: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn write_table_file(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<f64>>) -> CliResult<()> {
    let mut buf = Vec::new();
    write_table(&mut buf, header, rows).expect("writing to memory");
    std::fs::write(path, buf).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> CliResult<Table> {
        parse_table(s, Path::new("obs.csv"))
    }

    #[test]
    fn comments_and_values() {
        let t = parse("# generated\nx,y,value\n0.5,1,2.25\n# mid comment\n-1e-3,2,3\n").unwrap();
        assert_eq!(t.header, vec!["x", "y", "value"]);
        assert_eq!(t.rows, vec![vec![0.5, 1.0, 2.25], vec![-1e-3, 2.0, 3.0]]);
        assert_eq!(t.lines, vec![3, 5]);
        assert_eq!(t.column_index("value"), Some(2));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse("x,value\n1,2\n3,abc\n").unwrap_err();
        assert_eq!(e.to_string(), "obs.csv:3: column 'value': 'abc' is not a number");
        let e = parse("x,value\n1,2\n3\n").unwrap_err();
        assert!(e.to_string().starts_with("obs.csv:3:"), "{e}");
        let e = parse("x,value\n1,NaN\n").unwrap_err();
        assert!(e.to_string().starts_with("obs.csv:2:"), "{e}");
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn round_trip_is_exact() {
        let values = vec![vec![0.1, 1.0 / 3.0, -2.5e-300], vec![1e21, 0.0, 123456.789]];
        let mut buf = Vec::new();
        write_table(&mut buf, &["a".into(), "b".into(), "c".into()], values.clone()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("a,b,c\n0.1,0.3333333333333333,"));
        let t = parse(&text).unwrap();
        assert_eq!(t.rows, values);
    }
}
