//! One report shape for every subcommand, rendered as an aligned table, CSV
//! or versioned JSON.

use serde_json::{json, Map, Value};

use crate::config::Format;

pub const SCHEMA_VERSION: u32 = 1;

pub struct Report {
    pub command: &'static str,
    pub seed: u64,
    /// Lines printed above the table.
    pub summary: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
    /// Extra JSON fields next to `rows`.
    pub extra: Map<String, Value>,
    pub failed: bool,
}

impl Report {
    pub fn new<S: Into<String>>(
        command: &'static str,
        seed: u64,
        columns: impl IntoIterator<Item = S>,
    ) -> Self {
        Self {
            command,
            seed,
            summary: Vec::new(),
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
            extra: Map::new(),
            failed: false,
        }
    }

    pub fn row(&mut self, cells: Vec<Value>) {
        debug_assert_eq!(cells.len(), self.columns.len());
        self.rows.push(cells);
    }

    pub fn render(&self, format: Format) -> anyhow::Result<String> {
        Ok(match format {
            Format::Table => self.table(),
            Format::Csv => self.csv()?,
            Format::Json => self.json()? + "\n",
        })
    }

    fn json(&self) -> serde_json::Result<String> {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                Value::Object(
                    self.columns
                        .iter()
                        .cloned()
                        .zip(r.iter().cloned())
                        .collect(),
                )
            })
            .collect();
        let mut out = Map::new();
        out.insert("schema_version".into(), json!(SCHEMA_VERSION));
        out.insert("command".into(), json!(self.command));
        out.insert("seed".into(), json!(self.seed));
        out.insert("passed".into(), json!(!self.failed));
        for (k, v) in &self.extra {
            out.insert(k.clone(), v.clone());
        }
        out.insert("rows".into(), Value::Array(rows));
        serde_json::to_string_pretty(&Value::Object(out))
    }

    fn csv(&self) -> anyhow::Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r.iter().map(cell))?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    fn table(&self) -> String {
        let mut out = format!("seed {}\n", self.seed);
        for line in &self.summary {
            out.push_str(line);
            out.push('\n');
        }
        if self.rows.is_empty() {
            return out;
        }
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| r.iter().map(cell).collect())
            .collect();
        let widths: Vec<usize> = (0..self.columns.len())
            .map(|i| {
                cells
                    .iter()
                    .map(|r| r[i].len())
                    .chain([self.columns[i].len()])
                    .max()
                    .unwrap()
            })
            .collect();
        let line = |items: Vec<&str>| {
            let padded: Vec<String> = items
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:<w$}"))
                .collect();
            padded.join("  ").trim_end().to_string() + "\n"
        };
        out.push_str(&line(self.columns.iter().map(String::as_str).collect()));
        for r in &cells {
            out.push_str(&line(r.iter().map(String::as_str).collect()));
        }
        out
    }
}

/// Plain text for a cell. Floats use the shortest round-trip form.
fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        Value::Number(n) => match (n.as_u64(), n.as_i64(), n.as_f64()) {
            (Some(u), _, _) => u.to_string(),
            (_, Some(i), _) => i.to_string(),
            (_, _, Some(f)) => format!("{f:?}"),
            _ => n.to_string(),
        },
        other => other.to_string(),
    }
}
