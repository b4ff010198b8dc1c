use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::eval::WerTable;
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 5] = ["name", "split", "non_dominant", "novel", "dominant"];

/// One table row; WERs are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub split: String,
    pub non_dominant: Option<f64>,
    pub novel: Option<f64>,
    pub dominant: Option<f64>,
}

impl ReportRow {
    pub fn from_table(name: impl Into<String>, split: impl Into<String>, wer: &WerTable) -> Self {
        let pct = |v: Option<f64>| v.map(|x| x * 100.0);
        ReportRow {
            name: name.into(),
            split: split.into(),
            non_dominant: pct(wer.non_dominant),
            novel: pct(wer.novel),
            dominant: pct(wer.dominant),
        }
    }

    fn cells(&self) -> [String; 5] {
        [
            self.name.clone(),
            self.split.clone(),
            cell(self.non_dominant),
            cell(self.novel),
            cell(self.dominant),
        ]
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

fn parse_cell(s: &str) -> Result<Option<f64>> {
    if s == "-" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Contract(format!("bad report cell `{s}`")))
}

pub fn to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(r.cells())?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Contract(e.to_string()))
}

pub fn from_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::Contract(format!("unexpected report header {header:?}")));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(ReportRow {
                name: rec[0].to_string(),
                split: rec[1].to_string(),
                non_dominant: parse_cell(&rec[2])?,
                novel: parse_cell(&rec[3])?,
                dominant: parse_cell(&rec[4])?,
            })
        })
        .collect()
}

pub fn to_markdown(title: &str, rows: &[ReportRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {title}\n");
    let _ = writeln!(s, "Average WER (%)\n");
    let _ = writeln!(s, "| model | split | non-dominant | novel | dominant |");
    let _ = writeln!(s, "|---|---|---:|---:|---:|");
    for r in rows {
        let c = r.cells();
        let _ = writeln!(s, "| {} | {} | {} | {} | {} |", c[0], c[1], c[2], c[3], c[4]);
    }
    s
}
