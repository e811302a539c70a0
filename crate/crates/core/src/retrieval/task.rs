use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    #[serde(rename = "_id")]
    pub id: String,
    pub text: String,
}

impl Record {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }
}

/// Relevance judgments: query id → doc id → grade.
pub type Qrels = BTreeMap<String, BTreeMap<String, u32>>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalTask {
    pub documents: Vec<Record>,
    pub queries: Vec<Record>,
    pub qrels: Qrels,
}

impl RetrievalTask {
    pub fn new(documents: Vec<Record>, queries: Vec<Record>, qrels: Qrels) -> Result<Self> {
        let t = Self {
            documents,
            queries,
            qrels,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let docs = unique_ids(&self.documents, "document")?;
        let queries = unique_ids(&self.queries, "query")?;
        for (q, rels) in &self.qrels {
            if !queries.contains(q.as_str()) {
                return Err(Error::Data(format!("qrel references unknown query `{q}`")));
            }
            if let Some(d) = rels.keys().find(|d| !docs.contains(d.as_str())) {
                return Err(Error::Data(format!("qrel references unknown document `{d}`")));
            }
        }
        Ok(())
    }

    /// Loads `corpus.jsonl`, `queries.jsonl` and `qrels.tsv` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let documents = read_jsonl(&dir.join("corpus.jsonl"))?;
        let queries = read_jsonl(&dir.join("queries.jsonl"))?;
        let qrels = read_qrels(&dir.join("qrels.tsv"))?;
        Self::new(documents, queries, qrels)
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("corpus.jsonl"), &self.documents)?;
        write_jsonl(&dir.join("queries.jsonl"), &self.queries)?;
        write_qrels(&dir.join("qrels.tsv"), &self.qrels)
    }
}

fn unique_ids<'a>(records: &'a [Record], what: &str) -> Result<HashSet<&'a str>> {
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Data(format!("duplicate {what} id `{}`", r.id)));
        }
    }
    Ok(seen)
}

fn format_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Reads `{"_id", "text"}` objects, one per non-blank line.
pub fn read_jsonl(path: &Path) -> Result<Vec<Record>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line).map_err(|e| format_err(path, i + 1, e.to_string()))?;
        out.push(r);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Reads `query_id<TAB>doc_id<TAB>relevance` lines; a first line whose
/// relevance field is not an integer is taken as a header.
pub fn read_qrels(path: &Path) -> Result<Qrels> {
    let f = fs::File::open(path)?;
    let mut out = Qrels::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(format_err(path, i + 1, format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let rel = match fields[2].trim().parse::<u32>() {
            Ok(r) => r,
            Err(_) if i == 0 => continue,
            Err(e) => return Err(format_err(path, i + 1, format!("relevance `{}`: {e}", fields[2]))),
        };
        out.entry(fields[0].to_string())
            .or_default()
            .insert(fields[1].to_string(), rel);
    }
    Ok(out)
}

pub fn write_qrels(path: &Path, qrels: &Qrels) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "query-id\tcorpus-id\tscore")?;
    for (q, rels) in qrels {
        for (d, r) in rels {
            writeln!(f, "{q}\t{d}\t{r}")?;
        }
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> RetrievalTask {
        let mut qrels = Qrels::new();
        qrels.entry("q1".into()).or_default().insert("d1".into(), 1);
        RetrievalTask::new(
            vec![Record::new("d1", "alpha"), Record::new("d2", "beta")],
            vec![Record::new("q1", "alpha?")],
            qrels,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let t = toy();
        t.save_dir(dir.path()).unwrap();
        assert_eq!(RetrievalTask::load_dir(dir.path()).unwrap(), t);
    }

    #[test]
    fn validation_errors() {
        let mut t = toy();
        t.qrels.entry("q1".into()).or_default().insert("d9".into(), 1);
        assert!(matches!(t.validate(), Err(Error::Data(_))));
        let dup = RetrievalTask::new(
            vec![Record::new("d1", "a"), Record::new("d1", "b")],
            vec![],
            Qrels::new(),
        );
        assert!(dup.is_err());
    }

    #[test]
    fn bad_jsonl_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        fs::write(&p, "{\"_id\":\"a\",\"text\":\"x\"}\n\n{oops\n").unwrap();
        match read_jsonl(&p) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn qrels_header_optional() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.tsv");
        fs::write(&p, "q1\td1\t1\nq1\td2\t0\n").unwrap();
        assert_eq!(read_qrels(&p).unwrap()["q1"].len(), 2);
        fs::write(&p, "qid\tdid\trel\nq1\td1\t1\nq2\td1\tx\n").unwrap();
        assert!(matches!(read_qrels(&p), Err(Error::Format { line: 3, .. })));
    }
}
