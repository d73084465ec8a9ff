use super::PipelineError;
use crate::molgraph::parse_smiles;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Regression,
    Classification,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Regression => "regression",
            Task::Classification => "classification",
        })
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "regression" => Ok(Task::Regression),
            "classification" => Ok(Task::Classification),
            other => Err(format!("unknown task {other:?} (expected regression or classification)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub smiles: String,
    pub targets: Vec<f64>,
    /// Concatenated provider descriptions, once fetched.
    pub description: Option<String>,
    /// Parsed few-shot prediction in original target units, once fetched.
    pub h_pred: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub records: Vec<Record>,
    pub target_names: Vec<String>,
    pub task: Task,
    /// Rows dropped because their SMILES did not parse.
    pub dropped: usize,
}

impl LabeledDataset {
    /// Builds a dataset from `(smiles, targets)` pairs, dropping rows whose
    /// SMILES does not parse.
    pub fn from_pairs(
        pairs: Vec<(String, Vec<f64>)>,
        target_names: Vec<String>,
        task: Option<Task>,
    ) -> Result<Self, PipelineError> {
        let c = target_names.len();
        let mut records = Vec::with_capacity(pairs.len());
        let mut dropped = 0;
        for (line, (smiles, targets)) in pairs.into_iter().enumerate() {
            if targets.len() != c {
                return Err(PipelineError::RaggedRow { line: line + 2, expected: c, got: targets.len() });
            }
            if parse_smiles(&smiles).is_err() {
                dropped += 1;
                continue;
            }
            records.push(Record { smiles, targets, description: None, h_pred: None });
        }
        if records.is_empty() {
            return Err(PipelineError::NoValidRows { dropped });
        }
        let inferred = if records.iter().flat_map(|r| &r.targets).all(|&v| v == 0.0 || v == 1.0) {
            Task::Classification
        } else {
            Task::Regression
        };
        let task = task.unwrap_or(inferred);
        if task == Task::Classification {
            if let Some(v) = records.iter().flat_map(|r| &r.targets).find(|&&v| v != 0.0 && v != 1.0) {
                return Err(PipelineError::BadTarget { line: 0, value: v.to_string() });
            }
        }
        Ok(Self { records, target_names, task, dropped })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn targets(&self) -> usize {
        self.target_names.len()
    }

    pub fn smiles(&self) -> Vec<String> {
        self.records.iter().map(|r| r.smiles.clone()).collect()
    }
}

pub fn load_csv(path: &Path, task: Option<Task>) -> Result<LabeledDataset, PipelineError> {
    let file = std::fs::File::open(path).map_err(|e| PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    read_csv(file, task)
}

/// Reads `smiles,<t1>,...,<tc>` CSV text.
pub fn read_csv<R: Read>(reader: R, task: Option<Task>) -> Result<LabeledDataset, PipelineError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| PipelineError::Csv(e.to_string()))?.clone();
    if header.len() < 2 || !header[0].eq_ignore_ascii_case("smiles") {
        return Err(PipelineError::MissingHeader);
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut pairs = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| PipelineError::Csv(e.to_string()))?;
        if row.len() != header.len() {
            return Err(PipelineError::RaggedRow { line, expected: names.len(), got: row.len().saturating_sub(1) });
        }
        let targets = row
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| PipelineError::BadTarget { line, value: v.to_string() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        pairs.push((row[0].to_string(), targets));
    }
    LabeledDataset::from_pairs(pairs, names, task)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drops_bad_smiles() {
        let ds = read_csv("smiles,y\nCCO,1.5\nC1CC,2\nCC,0.5\n".as_bytes(), None).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dropped, 1);
        assert_eq!(ds.targets(), 1);
        assert_eq!(ds.task, Task::Regression);
    }

    #[test]
    fn infers_classification() {
        let ds = read_csv("smiles,a,b\nCCO,1,0\nCC,0,0\n".as_bytes(), None).unwrap();
        assert_eq!(ds.task, Task::Classification);
        assert_eq!(ds.target_names, vec!["a", "b"]);
        let forced = read_csv("smiles,a\nCCO,1\nCC,0\n".as_bytes(), Some(Task::Regression)).unwrap();
        assert_eq!(forced.task, Task::Regression);
    }

    #[test]
    fn header_and_row_errors() {
        assert!(matches!(read_csv("mol,y\nCC,1\n".as_bytes(), None), Err(PipelineError::MissingHeader)));
        assert!(matches!(read_csv("smiles\nCC\n".as_bytes(), None), Err(PipelineError::MissingHeader)));
        assert!(matches!(read_csv("smiles,y\nCC,abc\n".as_bytes(), None), Err(PipelineError::BadTarget { line: 2, .. })));
        assert!(matches!(read_csv("smiles,y\nC1C,1\n".as_bytes(), None), Err(PipelineError::NoValidRows { dropped: 1 })));
        assert!(matches!(read_csv("smiles,y\n".as_bytes(), None), Err(PipelineError::NoValidRows { dropped: 0 })));
    }
}
