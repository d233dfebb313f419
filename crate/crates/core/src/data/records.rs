use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::objectives::PreferenceTriple;
use crate::policy::{ContextFeatures, Vocabulary};
use crate::trainer::EvalExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionSource {
    Synthetic,
    Llm,
    HumanVerified,
}

/// One JSONL row. In eval files `chosen` is the gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceRecord {
    pub record_id: String,
    pub task_id: usize,
    pub group_id: usize,
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_text: Option<String>,
    pub chosen: String,
    pub rejected: String,
    pub rejection_source: RejectionSource,
}

impl PreferenceRecord {
    /// Checks label membership and `chosen != rejected`. An empty `rejected`
    /// is accepted only when `allow_pending` is set.
    pub fn check(&self, vocab: &Vocabulary, allow_pending: bool) -> std::result::Result<(), String> {
        if self.record_id.is_empty() {
            return Err("empty record_id".into());
        }
        if vocab.index_of(&self.chosen).is_none() {
            return Err(format!(
                "record {}: unknown chosen label {:?}",
                self.record_id, self.chosen
            ));
        }
        if self.rejected.is_empty() && allow_pending {
            return Ok(());
        }
        if vocab.index_of(&self.rejected).is_none() {
            return Err(format!(
                "record {}: unknown rejected label {:?}",
                self.record_id, self.rejected
            ));
        }
        if self.chosen == self.rejected {
            return Err(format!(
                "record {}: chosen and rejected are both {:?}",
                self.record_id, self.chosen
            ));
        }
        if self.features.iter().any(|x| !x.is_finite()) {
            return Err(format!("record {}: non-finite feature", self.record_id));
        }
        Ok(())
    }

    pub fn to_triple(&self, vocab: &Vocabulary) -> Result<PreferenceTriple> {
        let idx = |l: &str| {
            vocab
                .index_of(l)
                .ok_or_else(|| Error::invalid(format!("unknown label {l:?}")))
        };
        PreferenceTriple::new(
            ContextFeatures::new(self.features.clone())?,
            idx(&self.chosen)?,
            idx(&self.rejected)?,
            self.group_id,
            self.task_id,
            self.record_id.clone(),
        )
    }

    pub fn to_eval(&self, vocab: &Vocabulary) -> Result<EvalExample> {
        Ok(EvalExample {
            context: ContextFeatures::new(self.features.clone())?,
            gold: vocab
                .index_of(&self.chosen)
                .ok_or_else(|| Error::invalid(format!("unknown label {:?}", self.chosen)))?,
            group_id: self.group_id,
            record_id: self.record_id.clone(),
        })
    }
}

/// One compact JSON object per line, newline-terminated.
pub fn to_jsonl(records: &[PreferenceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: &Path, records: &[PreferenceRecord]) -> Result<()> {
    write_atomic(path, to_jsonl(records).as_bytes())
}

/// Parses JSONL text; `path` only labels diagnostics. Line numbers are 1-based.
pub fn parse_jsonl(
    text: &str,
    path: &Path,
    vocab: &Vocabulary,
    allow_pending: bool,
) -> Result<Vec<PreferenceRecord>> {
    let err = |line: usize, message: String| Error::Record {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let rec: PreferenceRecord =
            serde_json::from_str(line).map_err(|e| err(lineno, format!("malformed record: {e}")))?;
        rec.check(vocab, allow_pending).map_err(|m| err(lineno, m))?;
        if !seen.insert(rec.record_id.clone()) {
            return Err(err(lineno, format!("duplicate record_id {}", rec.record_id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_validate_jsonl(path: &Path, vocab: &Vocabulary) -> Result<Vec<PreferenceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, path, vocab, false)
}

/// As [`load_validate_jsonl`], but rows may leave `rejected` empty.
pub fn load_pending_jsonl(path: &Path, vocab: &Vocabulary) -> Result<Vec<PreferenceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, path, vocab, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, chosen: &str, rejected: &str) -> PreferenceRecord {
        PreferenceRecord {
            record_id: id.into(),
            task_id: 0,
            group_id: 1,
            features: vec![0.5, -1.25],
            prompt_text: None,
            chosen: chosen.into(),
            rejected: rejected.into(),
            rejection_source: RejectionSource::Synthetic,
        }
    }

    fn parse(text: &str) -> Result<Vec<PreferenceRecord>> {
        parse_jsonl(text, Path::new("t.jsonl"), &Vocabulary::numbered(3).unwrap(), false)
    }

    #[test]
    fn round_trip() {
        let mut a = rec("a", "ans_0", "ans_1");
        a.prompt_text = Some("what?".into());
        let recs = vec![a, rec("b", "ans_2", "ans_0")];
        assert_eq!(parse(&to_jsonl(&recs)).unwrap(), recs);
    }

    #[test]
    fn diagnostics_carry_line_numbers() {
        let good = to_jsonl(&[rec("a", "ans_0", "ans_1")]);
        let cases = [
            (format!("{good}{{not json\n"), 2, "malformed"),
            (to_jsonl(&[rec("a", "ans_0", "ans_1"), rec("zz", "ans_1", "ans_1")]), 2, "zz"),
            (to_jsonl(&[rec("a", "ans_0", "ans_1"), rec("a", "ans_1", "ans_2")]), 2, "duplicate"),
            (to_jsonl(&[rec("q", "ans_9", "ans_1")]), 1, "unknown"),
        ];
        for (text, line, needle) in cases {
            match parse(&text) {
                Err(Error::Record { line: l, message, .. }) => {
                    assert_eq!(l, line);
                    assert!(message.contains(needle), "{message}");
                }
                other => panic!("expected record error, got {other:?}"),
            }
        }
    }

    #[test]
    fn pending_rows() {
        let text = to_jsonl(&[rec("a", "ans_0", "")]);
        assert!(parse(&text).is_err());
        let v = Vocabulary::numbered(3).unwrap();
        assert_eq!(parse_jsonl(&text, Path::new("x"), &v, true).unwrap().len(), 1);
    }
}
