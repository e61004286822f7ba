//! Streaming reader for line-delimited QA datasets.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::knowledge::QARecord;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: field {field:?} is empty")]
    EmptyField { line: usize, field: &'static str },
    #[error("duplicate id {id:?} on lines {first} and {second}")]
    DuplicateId { id: String, first: usize, second: usize },
    #[error("unknown dataset format {0:?}: expected jsonl")]
    UnknownFormat(String),
}

/// On-disk dataset layout. Only line-delimited JSON is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    #[default]
    Jsonl,
}

impl FromStr for DatasetFormat {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" | "ndjson" => Ok(Self::Jsonl),
            other => Err(DatasetError::UnknownFormat(other.to_string())),
        }
    }
}

/// Iterator over the records of a line-delimited file, one line in memory at
/// a time. Blank lines are skipped; line numbers are 1-based.
pub struct QaReader<R> {
    lines: io::Lines<R>,
    line: usize,
    path: PathBuf,
    first_seen: HashMap<String, usize>,
}

impl<R: BufRead> QaReader<R> {
    pub fn new(reader: R, path: impl Into<PathBuf>) -> Self {
        Self {
            lines: reader.lines(),
            line: 0,
            path: path.into(),
            first_seen: HashMap::new(),
        }
    }

    fn parse(&mut self, text: &str) -> Result<QARecord, DatasetError> {
        let line = self.line;
        let rec: QARecord = serde_json::from_str(text).map_err(|e| DatasetError::Parse {
            line,
            message: e.to_string(),
        })?;
        for (field, value) in [("id", &rec.id), ("question", &rec.question), ("answer", &rec.answer)] {
            if value.trim().is_empty() {
                return Err(DatasetError::EmptyField { line, field });
            }
        }
        if let Some(&first) = self.first_seen.get(&rec.id) {
            return Err(DatasetError::DuplicateId {
                id: rec.id,
                first,
                second: line,
            });
        }
        self.first_seen.insert(rec.id.clone(), line);
        Ok(rec)
    }
}

impl<R: BufRead> Iterator for QaReader<R> {
    type Item = Result<QARecord, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(source) => {
                    return Some(Err(DatasetError::Io {
                        path: self.path.clone(),
                        source,
                    }))
                }
            };
            self.line += 1;
            if text.trim().is_empty() {
                continue;
            }
            return Some(self.parse(&text));
        }
    }
}

/// Reads every record of a dataset file in file order, stopping at the first
/// invalid row.
pub fn ingest_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Vec<QARecord>, DatasetError> {
    let path = path.as_ref();
    let DatasetFormat::Jsonl = format;
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    QaReader::new(BufReader::new(file), path).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(text: &str) -> Result<Vec<QARecord>, DatasetError> {
        QaReader::new(text.as_bytes(), "mem").collect()
    }

    #[test]
    fn three_rows_in_order() {
        let rs = read(concat!(
            r#"{"id": "q1", "question": "Is this a CT?", "answer": "yes", "split": "train"}"#,
            "\n\n",
            r#"{"id": "q2", "question": "Which organ?", "answer": "liver", "image_ref": "img_7"}"#,
            "\n",
            r#"{"id": "q3", "question": "Abnormal?", "answer": "no", "split": "test"}"#,
        ))
        .unwrap();
        let ids: Vec<&str> = rs.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["q1", "q2", "q3"]);
        assert_eq!(rs[1].image_ref.as_deref(), Some("img_7"));
    }

    #[test]
    fn empty_answer_names_line() {
        let err = read(concat!(
            r#"{"id": "a", "question": "q", "answer": "x"}"#,
            "\n",
            r#"{"id": "b", "question": "q", "answer": "  "}"#,
        ))
        .unwrap_err();
        assert!(matches!(err, DatasetError::EmptyField { line: 2, field: "answer" }));
        assert_eq!(err.to_string(), "line 2: field \"answer\" is empty");
    }

    #[test]
    fn duplicate_names_both_lines() {
        let err = read(concat!(
            r#"{"id": "a", "question": "q", "answer": "x"}"#,
            "\n\n",
            r#"{"id": "a", "question": "q2", "answer": "y"}"#,
        ))
        .unwrap_err();
        assert!(matches!(err, DatasetError::DuplicateId { first: 1, second: 3, .. }));
    }

    #[test]
    fn parse_errors_name_line() {
        let err = read("{\"id\": \"a\", \"question\": \"q\"}").unwrap_err();
        assert!(matches!(err, DatasetError::Parse { line: 1, .. }));
        let err = read("not json").unwrap_err();
        assert!(matches!(err, DatasetError::Parse { line: 1, .. }));
        let bad_split = r#"{"id": "a", "question": "q", "answer": "x", "split": "dev"}"#;
        assert!(matches!(read(bad_split), Err(DatasetError::Parse { .. })));
    }

    #[test]
    fn format_tags() {
        assert_eq!("jsonl".parse::<DatasetFormat>().unwrap(), DatasetFormat::Jsonl);
        assert!("csv".parse::<DatasetFormat>().is_err());
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            ingest_dataset("/nonexistent/qa.jsonl", DatasetFormat::Jsonl),
            Err(DatasetError::Io { .. })
        ));
    }
}
