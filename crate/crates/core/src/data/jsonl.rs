//! JSONL readers and writers for samples and category labels.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Category, Sample};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct RawSample {
    id: Option<String>,
    prompt: String,
    response: Option<String>,
    responses: Option<Vec<String>>,
}

/// Category labels for one sample. Positions index the response tokens,
/// 0-based, with index len(response tokens) standing for eos.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelEntry {
    pub sample_id: String,
    pub positions: Vec<usize>,
    pub category: Category,
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// One sample per line; `response` (string) and `responses` (array) are
/// mutually exclusive. Blank lines are skipped; order is preserved and line
/// numbers are attached to every error.
pub fn load_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample = serde_json::from_str(&line)
            .map_err(|e| parse_error(path, lineno, e.to_string()))?;
        let responses = match (raw.response, raw.responses) {
            (Some(_), Some(_)) => {
                return Err(parse_error(
                    path,
                    lineno,
                    "both `response` and `responses` present",
                ))
            }
            (Some(one), None) => vec![one],
            (None, Some(many)) => many,
            (None, None) => {
                return Err(parse_error(
                    path,
                    lineno,
                    "neither `response` nor `responses` present",
                ))
            }
        };
        let id = raw.id.unwrap_or_else(|| format!("line{lineno}"));
        samples.push(
            Sample::new(id, raw.prompt, responses)
                .map_err(|e| parse_error(path, lineno, e.to_string()))?,
        );
    }
    Ok(samples)
}

pub fn save_jsonl(samples: &[Sample], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for sample in samples {
        // Single-reference samples serialize with the scalar `response` key.
        if sample.responses.len() == 1 {
            serde_json::to_writer(
                &mut out,
                &serde_json::json!({
                    "id": sample.id,
                    "prompt": sample.prompt,
                    "response": sample.responses[0],
                }),
            )?;
        } else {
            serde_json::to_writer(&mut out, sample)?;
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Label JSONL: one `{sample_id, positions, category}` object per line,
/// category restricted to core or trivial.
pub fn load_labels(path: &Path) -> Result<Vec<LabelEntry>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: LabelEntry = serde_json::from_str(&line)
            .map_err(|e| parse_error(path, lineno, e.to_string()))?;
        if entry.category == Category::Unlabeled {
            return Err(parse_error(
                path,
                lineno,
                "label files may only contain core or trivial",
            ));
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn save_labels(entries: &[LabelEntry], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for entry in entries {
        serde_json::to_writer(&mut out, entry)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
