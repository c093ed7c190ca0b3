//! Label-file parsing: tab- or comma-separated rows mapping an image name
//! and extracted text to the five category labels.
//!
//! The textual-label-to-ordinal table lives in `assets/label_map.tsv` and can
//! be overridden at runtime, since label spellings vary across dataset
//! releases.

use std::collections::HashMap;
use std::path::Path;

use crate::data::LabelSet;
use crate::error::{Error, Result};

/// The default mapping table compiled into the binary.
pub const DEFAULT_LABEL_MAP: &str = include_str!("../../assets/label_map.tsv");

const COLUMNS: [&str; 7] = [
    "image_name",
    "text",
    "humour",
    "sarcasm",
    "offensive",
    "motivational",
    "overall_sentiment",
];

/// Per-column label-string to ordinal mapping.
#[derive(Debug, Clone)]
pub struct LabelMap {
    map: HashMap<(String, String), u8>,
}

impl LabelMap {
    pub fn parse(text: &str) -> Result<LabelMap> {
        let mut map = HashMap::new();
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::Format(format!(
                    "label map line {}: expected column<TAB>label<TAB>ordinal",
                    line_no + 1
                )));
            }
            let ordinal: u8 = parts[2].parse().map_err(|_| {
                Error::Format(format!("label map line {}: bad ordinal `{}`", line_no + 1, parts[2]))
            })?;
            map.insert((parts[0].to_string(), parts[1].to_string()), ordinal);
        }
        if map.is_empty() {
            return Err(Error::Format("label map has no entries".into()));
        }
        Ok(LabelMap { map })
    }

    pub fn default_map() -> LabelMap {
        LabelMap::parse(DEFAULT_LABEL_MAP).expect("compiled-in label map parses")
    }

    pub fn load(path: &Path) -> Result<LabelMap> {
        LabelMap::parse(&std::fs::read_to_string(path)?)
    }

    fn lookup(&self, column: &str, label: &str) -> Option<u8> {
        self.map.get(&(column.to_string(), label.to_string())).copied()
    }
}

/// One parsed row: image file name, extracted text, labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRow {
    pub image_name: String,
    pub text: String,
    pub labels: LabelSet,
}

/// Split one line on `sep`, honoring double-quoted fields when `sep` is a
/// comma (quotes escape by doubling). Tab-separated files take fields
/// verbatim.
fn split_row(line: &str, sep: char) -> Vec<String> {
    if sep == '\t' {
        return line.split('\t').map(|s| s.to_string()).collect();
    }
    let mut fields = Vec::new();
    let mut field = String::new();
    let mut chars = line.chars().peekable();
    let mut in_quotes = false;
    while let Some(c) = chars.next() {
        if in_quotes {
            if c == '"' {
                if chars.peek() == Some(&'"') {
                    chars.next();
                    field.push('"');
                } else {
                    in_quotes = false;
                }
            } else {
                field.push(c);
            }
        } else if c == '"' && field.is_empty() {
            in_quotes = true;
        } else if c == sep {
            fields.push(std::mem::take(&mut field));
        } else {
            field.push(c);
        }
    }
    fields.push(field);
    fields
}

/// Parse a label file with the compiled-in mapping table.
pub fn parse_label_file(path: &Path) -> Result<Vec<LabelRow>> {
    parse_label_file_with_map(path, &LabelMap::default_map())
}

pub fn parse_label_file_with_map(path: &Path, map: &LabelMap) -> Result<Vec<LabelRow>> {
    let text = std::fs::read_to_string(path)?;
    let path_str = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{path_str}: empty file")))?;
    let sep = if header.contains('\t') { '\t' } else { ',' };
    let header_fields: Vec<String> = split_row(header, sep)
        .iter()
        .map(|h| h.trim().to_lowercase())
        .collect();
    let mut column_at = Vec::with_capacity(COLUMNS.len());
    for want in COLUMNS {
        let idx = header_fields
            .iter()
            .position(|h| h == want)
            .ok_or_else(|| Error::Format(format!("{path_str}: missing column `{want}`")))?;
        column_at.push(idx);
    }

    let parse_label = |column: &str, raw: &str, row: usize| -> Result<u8> {
        let label = raw.trim().to_lowercase().replace(' ', "_");
        map.lookup(column, &label).ok_or_else(|| Error::Parse {
            path: path_str.clone(),
            row,
            message: format!("unknown {column} label `{raw}`"),
        })
    };

    let mut rows = Vec::new();
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row = line_no + 1; // 1-based, header included
        let fields = split_row(line, sep);
        if fields.len() < header_fields.len() {
            return Err(Error::Parse {
                path: path_str.clone(),
                row,
                message: format!(
                    "{} fields, header has {}",
                    fields.len(),
                    header_fields.len()
                ),
            });
        }
        let get = |i: usize| fields[column_at[i]].trim().to_string();
        let labels = LabelSet {
            sentiment: parse_label("overall_sentiment", &get(6), row)?,
            humor: parse_label("humour", &get(2), row)?,
            sarcasm: parse_label("sarcasm", &get(3), row)?,
            offense: parse_label("offensive", &get(4), row)?,
            motivation: parse_label("motivational", &get(5), row)?,
        };
        labels.validate().map_err(|e| Error::Parse {
            path: path_str.clone(),
            row,
            message: e.to_string(),
        })?;
        rows.push(LabelRow {
            image_name: get(0),
            text: get(1),
            labels,
        });
    }
    Ok(rows)
}
