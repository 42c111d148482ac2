//! Report files: CSV with 17 significant digits and LF endings, pretty JSON.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

/// Lossless scientific notation.
pub fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(v) => fmt_num(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

/// Collects the files written by one run.
#[derive(Debug)]
pub struct RunOutput {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl RunOutput {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(RunOutput {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    pub fn csv<I>(&mut self, name: &str, header: &[&str], rows: I) -> Result<PathBuf, CliError>
    where
        I: IntoIterator<Item = Vec<Cell>>,
    {
        let path = self.dir.join(name);
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(&path)?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(row.iter().map(Cell::render))?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
        self.files.push(path.clone());
        Ok(path)
    }

    /// Two-column plot data.
    pub fn plot(&mut self, name: &str, columns: (&str, &str), points: &[(f64, f64)]) -> Result<PathBuf, CliError> {
        self.csv(
            name,
            &[columns.0, columns.1],
            points.iter().map(|(a, b)| vec![Cell::Num(*a), Cell::Num(*b)]),
        )
    }

    pub fn json(&mut self, name: &str, value: &serde_json::Value) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        let mut buf = Vec::new();
        let mut ser = serde_json::Serializer::with_formatter(&mut buf, SciFormatter(PrettyFormatter::new()));
        value.serialize(&mut ser)?;
        buf.push(b'\n');
        fs::write(&path, buf).map_err(|e| CliError::io(&path, e))?;
        self.files.push(path.clone());
        Ok(path)
    }
}

/// Pretty JSON whose floats use the same notation as the CSV files.
struct SciFormatter<'a>(PrettyFormatter<'a>);

impl Formatter for SciFormatter<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(fmt_num(value).as_bytes())
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_array(writer)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_array(writer)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(writer, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_array_value(writer)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_object(writer)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_object(writer)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(writer, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.begin_object_value(writer)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.0.end_object_value(writer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_floats_use_scientific_notation() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = RunOutput::new(dir.path()).unwrap();
        let path = out.json("s.json", &serde_json::json!({"a": 0.5, "n": 3, "v": [1.0]})).unwrap();
        let text = fs::read_to_string(path).unwrap();
        assert!(text.contains("\"a\": 5.0000000000000000e-1"), "{text}");
        assert!(text.contains("\"n\": 3"));
        let back: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(back["a"], 0.5);
    }

    #[test]
    fn csv_has_lf_endings_and_full_digits() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = RunOutput::new(dir.path()).unwrap();
        let path = out.csv("t.csv", &["x", "label"], vec![vec![Cell::Num(0.1), Cell::from("a,b")]]).unwrap();
        let text = fs::read_to_string(path).unwrap();
        assert_eq!(text, "x,label\n1.0000000000000001e-1,\"a,b\"\n");
    }
}
