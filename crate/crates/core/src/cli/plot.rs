//! Plot-ready CSV tables. Floats are written as `{:.16e}` (17 significant
//! digits), so identical values always produce identical bytes.

use std::path::{Path, PathBuf};

use anyhow::Context;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(u64),
    Float(f64),
    Text(String),
    Bool(bool),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => format!("{v:.16e}"),
            Cell::Text(s) => s.clone(),
            Cell::Bool(b) => b.to_string(),
        }
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width differs from header");
        self.rows.push(row);
    }

    pub fn to_csv_string(&self) -> anyhow::Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render))?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }
}

/// `log10` that keeps exact zeros visible as `-inf`.
pub fn log10_or_neg_inf(v: f64) -> f64 {
    if v > 0.0 {
        v.log10()
    } else {
        f64::NEG_INFINITY
    }
}

/// Writes `<dir>/<name>.csv` for each table and returns the paths.
pub fn emit_plot_data(dir: &Path, tables: &[(&str, &Table)]) -> anyhow::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for (name, table) in tables {
        let path = dir.join(format!("{name}.csv"));
        std::fs::write(&path, table.to_csv_string()?).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_table_is_header_only() {
        let t = Table::new(&["t", "b", "log10_var_g1", "ci"]);
        assert_eq!(t.to_csv_string().unwrap(), "t,b,log10_var_g1,ci\n");
    }

    #[test]
    fn floats_use_seventeen_digits() {
        let mut t = Table::new(&["x", "y"]);
        t.push(vec![1usize.into(), 0.1f64.into()]);
        t.push(vec![2usize.into(), log10_or_neg_inf(0.0).into()]);
        assert_eq!(t.to_csv_string().unwrap(), "x,y\n1,1.0000000000000001e-1\n2,-inf\n");
    }

    #[test]
    fn writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let t = Table::new(&["a"]);
        let paths = emit_plot_data(dir.path(), &[("fig1a", &t)]).unwrap();
        assert_eq!(std::fs::read_to_string(&paths[0]).unwrap(), "a\n");
    }
}
