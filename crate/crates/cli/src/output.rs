//! Result files: `#` header with the resolved configuration, then plain CSV.

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::CliError;

pub const FORMAT_VERSION: &str = "maglev-mpc-csv/1";

/// Columns plus rows of already formatted cells.
#[derive(Debug, Clone)]
pub struct Table {
    pub columns: Vec<&'static str>,
    /// Columns holding wall-clock measurements; they vary between runs.
    pub timing: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&'static str], timing: &[&'static str]) -> Self {
        debug_assert!(timing.iter().all(|t| columns.contains(t)));
        Self {
            columns: columns.to_vec(),
            timing: timing.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn render(&self, command: &str, config: &RunConfig) -> Result<String, CliError> {
        let mut head = format!("# format = {FORMAT_VERSION}\n# command = {command}\n# timing_columns = {}\n", self.timing.join(","));
        for (k, v) in config.entries() {
            head.push_str(&format!("# {k} = {v}\n"));
        }
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(head.into_bytes());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write(&self, dir: &Path, name: &str, command: &str, config: &RunConfig) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(name);
        std::fs::write(&path, self.render(command, config)?)?;
        Ok(path)
    }
}

/// Cell text for a float; Rust's shortest round-trip form.
pub fn num(v: f64) -> String {
    v.to_string()
}

/// Content of a result file with its timing columns removed, for
/// reproducibility comparisons.
pub fn without_timing(text: &str) -> Result<String, CliError> {
    let timing: Vec<&str> = text
        .lines()
        .find_map(|l| l.strip_prefix("# timing_columns = "))
        .map(|l| l.split(',').filter(|s| !s.is_empty()).collect())
        .unwrap_or_default();
    let mut out: String = text.lines().take_while(|l| l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    let keep: Vec<usize> = (0..header.len()).filter(|&i| !timing.contains(&&header[i])).collect();
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(keep.iter().map(|&i| &header[i]))?;
    for rec in r.records() {
        let rec = rec?;
        w.write_record(keep.iter().map(|&i| &rec[i]))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
    out.push_str(std::str::from_utf8(&bytes).expect("csv output is utf-8"));
    Ok(out)
}

/// Reads a result file back as its header and rows.
pub fn read_rows(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()?;
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> Table {
        let mut t = Table::new(&["a", "wall", "b"], &["wall"]);
        t.push(vec![num(1.5), num(0.25), "x".into()]);
        t.push(vec![num(-2.0), num(0.75), "y".into()]);
        t
    }

    #[test]
    fn header_carries_format_and_config() {
        let text = table().render("simulate", &RunConfig::default()).unwrap();
        assert!(text.starts_with("# format = maglev-mpc-csv/1\n# command = simulate\n# timing_columns = wall\n"));
        assert!(text.contains("# plant.m = 600\n"));
        assert!(!text.contains('\r'));
        assert!(text.ends_with("a,wall,b\n1.5,0.25,x\n-2,0.75,y\n"));
    }

    #[test]
    fn timing_columns_are_stripped() {
        let cfg = RunConfig::default();
        let a = table().render("x", &cfg).unwrap();
        let mut other = table();
        other.rows[0][1] = num(9.0);
        let b = other.render("x", &cfg).unwrap();
        assert_ne!(a, b);
        assert_eq!(without_timing(&a).unwrap(), without_timing(&b).unwrap());
        assert!(without_timing(&a).unwrap().ends_with("a,b\n1.5,x\n-2,y\n"));
    }

    #[test]
    fn rows_read_back() {
        let text = table().render("x", &RunConfig::default()).unwrap();
        let (h, rows) = read_rows(&text).unwrap();
        assert_eq!(h, vec!["a", "wall", "b"]);
        assert_eq!(rows[1], vec!["-2", "0.75", "y"]);
    }
}
