//! Corpus entities and loaders for the BEIR directory layout:
//!
//! ```text
//! <dataset>/corpus.jsonl      {"_id": .., "title": .., "text": ..} per line
//! <dataset>/queries.jsonl     {"_id": .., "text": ..} per line
//! <dataset>/qrels/<split>.tsv query-id<TAB>corpus-id<TAB>score
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(rename = "_id")]
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            id: id.into(),
            title: title.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    #[serde(rename = "_id")]
    pub id: String,
    pub text: String,
}

/// Graded relevance judgments, `(query_id, doc_id) -> grade`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QrelSet {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl QrelSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a judgment. Negative grades and repeated pairs are rejected.
    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: i64) -> Result<()> {
        let grade = u32::try_from(grade).map_err(|_| {
            Error::Validation(format!(
                "grade {grade} for ({query_id}, {doc_id}) must be a non-negative integer"
            ))
        })?;
        let per_query = self.judgments.entry(query_id.to_string()).or_default();
        if per_query.insert(doc_id.to_string(), grade).is_some() {
            return Err(Error::Validation(format!(
                "duplicate judgment for ({query_id}, {doc_id})"
            )));
        }
        Ok(())
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> Option<u32> {
        self.judgments.get(query_id)?.get(doc_id).copied()
    }

    /// All judgments for one query, keyed by doc id.
    pub fn for_query(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.judgments
            .iter()
            .flat_map(|(q, docs)| docs.iter().map(move |(d, g)| (q.as_str(), d.as_str(), *g)))
    }

    pub fn len(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keeps only judgments whose document satisfies `keep`. Queries left
    /// without judgments are removed.
    pub fn retain_docs(&mut self, mut keep: impl FnMut(&str) -> bool) {
        for docs in self.judgments.values_mut() {
            docs.retain(|d, _| keep(d));
        }
        self.judgments.retain(|_, docs| !docs.is_empty());
    }
}

/// How the documents of a subset are chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetMode {
    /// Seeded Fisher-Yates shuffle, then take the first `⌈fraction·N⌉`.
    #[default]
    Shuffle,
    /// Take the first `⌈fraction·N⌉` documents in file order.
    Prefix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSubset {
    pub fraction: f64,
    pub seed: u64,
    pub mode: SubsetMode,
}

impl Default for CorpusSubset {
    fn default() -> Self {
        CorpusSubset {
            fraction: 1.0,
            seed: 0,
            mode: SubsetMode::Shuffle,
        }
    }
}

impl CorpusSubset {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Argument(format!(
                "subset fraction must be in (0, 1], got {}",
                self.fraction
            )));
        }
        Ok(())
    }

    /// `⌈fraction·n⌉`, tolerant of representation error in `fraction`
    /// (0.2 · 300 must give 60, not 61).
    pub fn target_size(&self, n: usize) -> usize {
        let exact = self.fraction * n as f64;
        let size = (exact - 1e-9).ceil().max(0.0) as usize;
        size.min(n)
    }
}

/// Reduces a corpus to a deterministic subset and drops every judgment that
/// references a document outside it. Surviving documents keep file order.
pub fn subset_corpus(
    docs: &[Document],
    qrels: &QrelSet,
    cfg: &CorpusSubset,
) -> Result<(Vec<Document>, QrelSet)> {
    cfg.validate()?;
    let take = cfg.target_size(docs.len());
    let mut order: Vec<usize> = (0..docs.len()).collect();
    if cfg.mode == SubsetMode::Shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        order.shuffle(&mut rng);
    }
    let mut chosen: Vec<usize> = order.into_iter().take(take).collect();
    chosen.sort_unstable();

    let kept: Vec<Document> = chosen.iter().map(|&i| docs[i].clone()).collect();
    let ids: HashSet<&str> = kept.iter().map(|d| d.id.as_str()).collect();
    let mut kept_qrels = qrels.clone();
    kept_qrels.retain_docs(|d| ids.contains(d));
    Ok((kept, kept_qrels))
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let raw = read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, record));
    }
    Ok(out)
}

/// Reads `corpus.jsonl`. Duplicate ids, empty ids and empty texts are
/// validation errors.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let mut seen = HashSet::new();
    let mut docs = Vec::new();
    for (line, doc) in parse_jsonl::<Document>(path)? {
        let ctx = |msg: String| Error::Validation(format!("{}:{line}: {msg}", path.display()));
        if doc.id.is_empty() {
            return Err(ctx("document id is empty".into()));
        }
        if doc.text.is_empty() {
            return Err(ctx(format!("document {} has empty text", doc.id)));
        }
        if !seen.insert(doc.id.clone()) {
            return Err(ctx(format!("duplicate document id {}", doc.id)));
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Query>> {
    let path = path.as_ref();
    let mut seen = HashSet::new();
    let mut queries = Vec::new();
    for (line, query) in parse_jsonl::<Query>(path)? {
        let ctx = |msg: String| Error::Validation(format!("{}:{line}: {msg}", path.display()));
        if query.id.is_empty() {
            return Err(ctx("query id is empty".into()));
        }
        if query.text.trim().is_empty() {
            return Err(ctx(format!("query {} has empty text", query.id)));
        }
        if !seen.insert(query.id.clone()) {
            return Err(ctx(format!("duplicate query id {}", query.id)));
        }
        queries.push(query);
    }
    Ok(queries)
}

/// Reads a TREC/BEIR qrels TSV. A leading `query-id  corpus-id  score`
/// header is skipped.
pub fn load_qrels(path: impl AsRef<Path>) -> Result<QrelSet> {
    let path = path.as_ref();
    let raw = read_to_string(path)?;
    let mut qrels = QrelSet::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if fields.len() != 3 {
            return Err(parse_err(format!(
                "expected 3 tab-separated fields, got {}",
                fields.len()
            )));
        }
        if i == 0 && fields[0] == "query-id" {
            continue;
        }
        let grade: i64 = fields[2]
            .parse()
            .map_err(|_| parse_err(format!("score {:?} is not an integer", fields[2])))?;
        qrels
            .insert(fields[0], fields[1], grade)
            .map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
    }
    Ok(qrels)
}

pub fn write_corpus(docs: &[Document], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for doc in docs {
        serde_json::to_writer(&mut buf, doc).expect("documents serialize");
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_qrels(qrels: &QrelSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    writeln!(buf, "query-id\tcorpus-id\tscore").unwrap();
    for (q, d, g) in qrels.iter() {
        writeln!(buf, "{q}\t{d}\t{g}").unwrap();
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// A corpus, its queries and one qrels split, loaded from a BEIR directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub documents: Vec<Document>,
    pub queries: Vec<Query>,
    pub qrels: QrelSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetPaths {
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub qrels: PathBuf,
}

impl Default for DatasetPaths {
    fn default() -> Self {
        DatasetPaths::beir(".", "test")
    }
}

impl DatasetPaths {
    pub fn beir(root: impl AsRef<Path>, split: &str) -> Self {
        let root = root.as_ref();
        DatasetPaths {
            corpus: root.join("corpus.jsonl"),
            queries: root.join("queries.jsonl"),
            qrels: root.join("qrels").join(format!("{split}.tsv")),
        }
    }

    /// Resolves relative paths against `base`.
    pub fn relative_to(&self, base: &Path) -> Self {
        let fix = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        DatasetPaths {
            corpus: fix(&self.corpus),
            queries: fix(&self.queries),
            qrels: fix(&self.qrels),
        }
    }
}

impl Dataset {
    pub fn load(paths: &DatasetPaths) -> Result<Self> {
        Ok(Dataset {
            documents: load_corpus(&paths.corpus)?,
            queries: load_queries(&paths.queries)?,
            qrels: load_qrels(&paths.qrels)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_single_document() {
        let f = write_tmp(r#"{"_id":"d1","title":"A","text":"cat sat"}"#);
        let docs = load_corpus(f.path()).unwrap();
        assert_eq!(docs, vec![Document::new("d1", "A", "cat sat")]);
    }

    #[test]
    fn empty_corpus_file_is_empty_list() {
        let f = write_tmp("");
        assert!(load_corpus(f.path()).unwrap().is_empty());
    }

    #[test]
    fn duplicate_document_id_rejected() {
        let f = write_tmp(
            "{\"_id\":\"d1\",\"title\":\"\",\"text\":\"x\"}\n{\"_id\":\"d1\",\"title\":\"\",\"text\":\"y\"}\n",
        );
        let err = load_corpus(f.path()).unwrap_err();
        assert!(
            matches!(err, Error::Validation(ref m) if m.contains("duplicate")),
            "{err}"
        );
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_tmp("{\"_id\":\"d1\",\"text\":\"x\"}\n{not json\n");
        match load_corpus(f.path()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn empty_text_rejected() {
        let f = write_tmp(r#"{"_id":"d1","title":"t","text":""}"#);
        assert!(matches!(load_corpus(f.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn qrels_row_and_header() {
        let f = write_tmp("query-id\tcorpus-id\tscore\nq1\td7\t2\n");
        let qrels = load_qrels(f.path()).unwrap();
        assert_eq!(qrels.grade("q1", "d7"), Some(2));
        assert_eq!(qrels.len(), 1);
    }

    #[test]
    fn qrels_negative_grade_rejected() {
        let f = write_tmp("q1\td7\t-1\n");
        assert!(matches!(load_qrels(f.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn qrels_non_integer_grade_is_parse_error() {
        let f = write_tmp("q1\td7\t1.5\n");
        assert!(matches!(
            load_qrels(f.path()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn qrels_duplicate_pair_rejected() {
        let f = write_tmp("q1\td7\t1\nq1\td7\t2\n");
        assert!(matches!(load_qrels(f.path()), Err(Error::Validation(_))));
    }

    fn numbered_corpus(n: usize) -> Vec<Document> {
        (0..n)
            .map(|i| Document::new(format!("d{i}"), "", format!("text {i}")))
            .collect()
    }

    #[test]
    fn full_fraction_is_identity() {
        let docs = numbered_corpus(10);
        let mut qrels = QrelSet::new();
        qrels.insert("q1", "d3", 1).unwrap();
        qrels.insert("q2", "d9", 2).unwrap();
        for seed in [0, 7, 12345] {
            let cfg = CorpusSubset {
                fraction: 1.0,
                seed,
                mode: SubsetMode::Shuffle,
            };
            let (d, q) = subset_corpus(&docs, &qrels, &cfg).unwrap();
            assert_eq!(d, docs);
            assert_eq!(q, qrels);
        }
    }

    #[test]
    fn twenty_percent_of_three_hundred() {
        let docs = numbered_corpus(300);
        let cfg = CorpusSubset {
            fraction: 0.2,
            seed: 42,
            mode: SubsetMode::Shuffle,
        };
        let (d, _) = subset_corpus(&docs, &QrelSet::new(), &cfg).unwrap();
        assert_eq!(d.len(), 60);
    }

    #[test]
    fn excluded_docs_lose_their_judgments() {
        let docs = numbered_corpus(10);
        let mut qrels = QrelSet::new();
        for i in 0..10 {
            qrels.insert("q1", &format!("d{i}"), 1).unwrap();
        }
        let cfg = CorpusSubset {
            fraction: 0.3,
            seed: 1,
            mode: SubsetMode::Shuffle,
        };
        let (d, q) = subset_corpus(&docs, &qrels, &cfg).unwrap();
        assert_eq!(d.len(), 3);
        let ids: HashSet<_> = d.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(q.len(), 3);
        assert!(q.iter().all(|(_, doc, _)| ids.contains(doc)));
    }

    #[test]
    fn prefix_mode_takes_file_order() {
        let docs = numbered_corpus(10);
        let cfg = CorpusSubset {
            fraction: 0.25,
            seed: 99,
            mode: SubsetMode::Prefix,
        };
        let (d, _) = subset_corpus(&docs, &QrelSet::new(), &cfg).unwrap();
        assert_eq!(d, docs[..3].to_vec());
    }

    #[test]
    fn fraction_out_of_range() {
        let docs = numbered_corpus(3);
        for fraction in [0.0, -0.5, 1.5, f64::NAN] {
            let cfg = CorpusSubset {
                fraction,
                ..Default::default()
            };
            assert!(matches!(
                subset_corpus(&docs, &QrelSet::new(), &cfg),
                Err(Error::Argument(_))
            ));
        }
    }
}
