//! Line-delimited JSON datasets: one [`HapticSequence`] per line.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sequence::HapticSequence;

/// One JSON record per line. Reals use the shortest decimal text that parses
/// back to the same 64-bit value.
pub fn dataset_to_string(sequences: &[HapticSequence]) -> Result<String> {
    let mut out = String::new();
    for seq in sequences {
        out.push_str(&serde_json::to_string(seq).map_err(|e| Error::Invalid(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses and validates records; blank lines are skipped. Errors carry the
/// 1-based line number.
pub fn parse_dataset(text: &str) -> Result<Vec<HapticSequence>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Dataset { line: i + 1, message };
        let seq: HapticSequence = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        seq.validate().map_err(|e| fail(e.to_string()))?;
        out.push(seq);
    }
    Ok(out)
}

pub fn save_dataset(sequences: &[HapticSequence], path: &Path) -> Result<()> {
    fs::write(path, dataset_to_string(sequences)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<HapticSequence>> {
    parse_dataset(&fs::read_to_string(path)?)
}
