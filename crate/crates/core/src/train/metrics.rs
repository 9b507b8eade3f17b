use std::fmt::Display;
use std::fs;
use std::path::Path;

use crate::error::Result;

/// Event log with one `iteration<TAB>key<TAB>value` line per event.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MetricsLog {
    lines: Vec<String>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, iteration: usize, key: &str, value: impl Display) {
        self.lines.push(format!("{iteration}\t{key}\t{value}"));
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    /// Values recorded under `key`, in order, parsed as numbers.
    pub fn values(&self, key: &str) -> Vec<(usize, f64)> {
        self.lines
            .iter()
            .filter_map(|l| {
                let mut it = l.split('\t');
                let (i, k, v) = (it.next()?, it.next()?, it.next()?);
                (k == key).then(|| Some((i.parse().ok()?, v.parse().ok()?))).flatten()
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = self.lines.join("\n");
        if !s.is_empty() {
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}
