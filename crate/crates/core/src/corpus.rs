//! Documents, JSONL corpus files, TF-IDF features and the planted-component
//! synthetic corpus used as a clustering fixture.
//!
//! Tokenization lowercases and splits on any non-alphanumeric character.
//! Term frequency is the raw count; inverse document frequency uses the
//! smoothed form `ln((1 + D) / (1 + df)) + 1`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SeededRng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
            task: None,
        }
    }

    pub fn with_task(mut self, task: impl Into<String>) -> Self {
        self.task = Some(task.into());
        self
    }
}

/// Documents with unique ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    docs: Vec<Document>,
}

impl Corpus {
    pub fn new(docs: Vec<Document>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for d in &docs {
            if !seen.insert(d.id.as_str()) {
                return Err(Error::usage(format!("duplicate document id {:?}", d.id)));
            }
        }
        Ok(Corpus { docs })
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Sorted distinct task tags.
    pub fn tasks(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.docs.iter().filter_map(|d| d.task.as_deref()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut docs = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: Document = serde_json::from_str(&line).map_err(|e| Error::Line {
                line: i + 1,
                message: e.to_string(),
            })?;
            docs.push(doc);
        }
        Corpus::new(docs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Corpus::from_jsonl(BufReader::new(fs::File::open(path)?))
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for d in &self.docs {
            let line = serde_json::to_string(d).expect("documents serialize");
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TfIdfModel {
    vocabulary: BTreeMap<String, usize>,
    idf: Vec<f64>,
    doc_count: usize,
}

impl TfIdfModel {
    pub fn fit(corpus: &Corpus) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::usage("cannot fit TF-IDF on an empty corpus"));
        }
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for doc in corpus.documents() {
            let terms: BTreeSet<String> = tokenize(&doc.text).into_iter().collect();
            for t in terms {
                *df.entry(t).or_default() += 1;
            }
        }
        let n = corpus.len() as f64;
        let idf = df
            .values()
            .map(|&f| ((1.0 + n) / (1.0 + f as f64)).ln() + 1.0)
            .collect();
        let vocabulary = df.into_keys().enumerate().map(|(i, t)| (t, i)).collect();
        Ok(TfIdfModel {
            vocabulary,
            idf,
            doc_count: corpus.len(),
        })
    }

    pub fn vocabulary(&self) -> &BTreeMap<String, usize> {
        &self.vocabulary
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.vocabulary.get(term).map(|&i| self.idf[i])
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn dim(&self) -> usize {
        self.idf.len()
    }

    /// L2-normalized tf·idf vector; the zero vector when no term is known.
    pub fn transform(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        for t in tokenize(text) {
            if let Some(&i) = self.vocabulary.get(&t) {
                v[i] += 1.0;
            }
        }
        for (x, idf) in v.iter_mut().zip(&self.idf) {
            *x *= idf;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }

    pub fn transform_corpus(&self, corpus: &Corpus) -> Vec<Vec<f64>> {
        corpus
            .documents()
            .iter()
            .map(|d| self.transform(&d.text))
            .collect()
    }
}

/// Parameters of the planted-component corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub clusters: usize,
    pub docs_per_cluster: usize,
    /// Probability that a token comes from the document's own component
    /// pool rather than the shared pool. `0` makes every component identical.
    pub disjointness: f64,
    pub seed: u64,
    pub doc_len: usize,
    pub pool_size: usize,
    pub common_pool_size: usize,
    /// Copy the planted component into each document's `task` tag.
    pub tag_tasks: bool,
}

impl SynthSpec {
    pub fn new(clusters: usize, docs_per_cluster: usize, disjointness: f64, seed: u64) -> Self {
        SynthSpec {
            clusters,
            docs_per_cluster,
            disjointness,
            seed,
            doc_len: 24,
            pool_size: 12,
            common_pool_size: 30,
            tag_tasks: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    /// Planted component of each document, aligned with `corpus.documents()`.
    pub labels: Vec<usize>,
}

pub fn synth_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    if spec.clusters == 0 || spec.docs_per_cluster == 0 || spec.doc_len == 0 {
        return Err(Error::usage(
            "cluster count, docs per cluster and doc length must be at least 1",
        ));
    }
    if spec.pool_size == 0 || spec.common_pool_size == 0 {
        return Err(Error::usage("term pools must be non-empty"));
    }
    if !(0.0..=1.0).contains(&spec.disjointness) {
        return Err(Error::usage(format!(
            "disjointness {} outside [0, 1]",
            spec.disjointness
        )));
    }
    let mut rng = SeededRng::new(spec.seed);
    let mut order: Vec<usize> = (0..spec.clusters * spec.docs_per_cluster)
        .map(|i| i / spec.docs_per_cluster)
        .collect();
    rng.shuffle(&mut order);

    let mut docs = Vec::with_capacity(order.len());
    for (i, &c) in order.iter().enumerate() {
        let words: Vec<String> = (0..spec.doc_len)
            .map(|_| {
                if rng.uniform() < spec.disjointness {
                    format!("c{c}w{}", rng.below(spec.pool_size))
                } else {
                    format!("common{}", rng.below(spec.common_pool_size))
                }
            })
            .collect();
        let mut doc = Document::new(format!("doc{i:05}"), words.join(" "));
        if spec.tag_tasks {
            doc.task = Some(format!("component{c}"));
        }
        docs.push(doc);
    }
    Ok(SynthCorpus {
        corpus: Corpus::new(docs)?,
        labels: order,
    })
}
