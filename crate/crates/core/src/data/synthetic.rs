//! Synthetic multilingual corpora.
//!
//! All languages share one concept-level grammar: a sparse Markov chain over
//! `concepts` states. A language renders each concept either as the shared
//! surface form (with probability `mixing_ratio`) or as its own
//! language-specific form. Two languages rendering the same concept walk
//! produce a translation pair.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

/// Shared transition structure over concepts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptGrammar {
    successors: Vec<Vec<usize>>,
}

impl ConceptGrammar {
    /// Gives every concept `branching` distinct successors drawn uniformly.
    pub fn random<R: Rng + ?Sized>(concepts: usize, branching: usize, rng: &mut R) -> Result<Self> {
        if concepts == 0 || branching == 0 || branching > concepts {
            return Err(Error::InvalidArgument(format!(
                "grammar needs 1 <= branching ({branching}) <= concepts ({concepts})"
            )));
        }
        let successors = (0..concepts).map(|_| sample(rng, concepts, branching).into_vec()).collect();
        Ok(ConceptGrammar { successors })
    }

    pub fn concepts(&self) -> usize {
        self.successors.len()
    }

    /// A random walk of `len` concepts.
    pub fn walk<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut c = rng.random_range(0..self.concepts());
        for _ in 0..len {
            out.push(c);
            let next = &self.successors[c];
            c = next[rng.random_range(0..next.len())];
        }
        out
    }
}

/// One synthetic language: its inventories, length range and mixing ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLanguageSpec {
    pub id: String,
    /// Surface form of each concept common to all languages.
    pub shared_pool: Vec<String>,
    /// Surface form of each concept unique to this language.
    pub specific_pool: Vec<String>,
    pub min_len: usize,
    pub max_len: usize,
    pub mixing_ratio: f64,
    pub grammar: ConceptGrammar,
}

impl SyntheticLanguageSpec {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mixing_ratio) {
            return Err(Error::InvalidArgument(format!(
                "language {}: mixing ratio {} outside [0, 1]",
                self.id, self.mixing_ratio
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::InvalidArgument(format!(
                "language {}: sentence lengths must satisfy 1 <= min <= max",
                self.id
            )));
        }
        let n = self.grammar.concepts();
        if self.shared_pool.len() != n || self.specific_pool.len() != n {
            return Err(Error::InvalidArgument(format!(
                "language {}: inventories must cover all {n} concepts",
                self.id
            )));
        }
        Ok(())
    }

    /// Renders a concept sequence as tokens.
    pub fn render<R: Rng + ?Sized>(&self, concepts: &[usize], rng: &mut R) -> Vec<&str> {
        concepts
            .iter()
            .map(|&c| {
                if rng.random::<f64>() < self.mixing_ratio {
                    self.shared_pool[c].as_str()
                } else {
                    self.specific_pool[c].as_str()
                }
            })
            .collect()
    }

    pub fn sample_concepts<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let len = rng.random_range(self.min_len..=self.max_len);
        self.grammar.walk(len, rng)
    }

    pub fn sentence<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        let c = self.sample_concepts(rng);
        self.render(&c, rng).join(" ")
    }
}

/// Per-language settings in a corpus description file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageConfig {
    pub id: String,
    #[serde(default = "default_mixing")]
    pub mixing_ratio: f64,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_mixing() -> f64 {
    0.5
}
fn default_min_len() -> usize {
    6
}
fn default_max_len() -> usize {
    12
}
fn default_concepts() -> usize {
    48
}
fn default_branching() -> usize {
    3
}
fn default_sentences() -> usize {
    1000
}
fn default_pairs() -> usize {
    200
}

/// Corpus description read by `gen-corpus`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(default = "default_concepts")]
    pub concepts: usize,
    #[serde(default = "default_branching")]
    pub branching: usize,
    #[serde(default = "default_sentences")]
    pub sentences_per_language: usize,
    /// Held-out translation pairs between the first language and each other.
    #[serde(default = "default_pairs")]
    pub parallel_pairs: usize,
    pub languages: Vec<LanguageConfig>,
}

/// Token used for concept `c` in the shared pool.
pub fn shared_token(c: usize) -> String {
    format!("s.{c}")
}

/// Token used for concept `c` in language `id`'s specific pool.
pub fn specific_token(id: &str, c: usize) -> String {
    format!("{id}.{c}")
}

impl CorpusConfig {
    /// Simple uniform description: `n` languages named `l0..`.
    pub fn uniform(n: usize, mixing_ratio: f64) -> Self {
        CorpusConfig {
            concepts: default_concepts(),
            branching: default_branching(),
            sentences_per_language: default_sentences(),
            parallel_pairs: default_pairs(),
            languages: (0..n)
                .map(|i| LanguageConfig {
                    id: format!("l{i}"),
                    mixing_ratio,
                    min_len: default_min_len(),
                    max_len: default_max_len(),
                })
                .collect(),
        }
    }

    /// Resolves the description into language specs; the grammar is drawn
    /// from `seed`.
    pub fn build(&self, seed: u64) -> Result<Vec<SyntheticLanguageSpec>> {
        let grammar = ConceptGrammar::random(self.concepts, self.branching, &mut substream(seed, "grammar", 0))?;
        let mut ids = HashSet::new();
        for l in &self.languages {
            let ok = !l.id.is_empty() && l.id != "s" && l.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "language id `{}` must be ASCII alphanumeric and not `s`",
                    l.id
                )));
            }
            if !ids.insert(l.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate language id `{}`", l.id)));
            }
        }
        let specs: Vec<SyntheticLanguageSpec> = self
            .languages
            .iter()
            .map(|l| SyntheticLanguageSpec {
                id: l.id.clone(),
                shared_pool: (0..self.concepts).map(shared_token).collect(),
                specific_pool: (0..self.concepts).map(|c| specific_token(&l.id, c)).collect(),
                min_len: l.min_len,
                max_len: l.max_len,
                mixing_ratio: l.mixing_ratio,
                grammar: grammar.clone(),
            })
            .collect();
        for s in &specs {
            s.validate()?;
        }
        Ok(specs)
    }
}

/// Monolingual sentences of one language.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageText {
    pub id: String,
    pub sentences: Vec<String>,
}

fn check_specs(specs: &[SyntheticLanguageSpec]) -> Result<()> {
    if specs.len() < 2 {
        return Err(Error::InvalidArgument("at least two languages are required".into()));
    }
    let mut seen: HashSet<&str> = HashSet::new();
    for s in specs {
        s.validate()?;
        for t in &s.specific_pool {
            if !seen.insert(t) {
                return Err(Error::InvalidArgument(format!(
                    "token `{t}` appears in more than one language-specific pool"
                )));
            }
        }
    }
    Ok(())
}

/// Draws `sentences_per_language` sentences for every language.
///
/// Each language uses its own stream derived from `seed`, so adding a
/// language never changes the text of the others.
pub fn generate_synthetic_corpus(
    specs: &[SyntheticLanguageSpec],
    sentences_per_language: usize,
    seed: u64,
) -> Result<Vec<LanguageText>> {
    check_specs(specs)?;
    Ok(specs
        .iter()
        .map(|s| {
            let mut rng = substream(seed, &format!("corpus/{}", s.id), 0);
            LanguageText { id: s.id.clone(), sentences: (0..sentences_per_language).map(|_| s.sentence(&mut rng)).collect() }
        })
        .collect())
}

/// Renders `n` fresh concept walks in both languages.
pub fn generate_parallel(
    src: &SyntheticLanguageSpec,
    tgt: &SyntheticLanguageSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<(String, String)>> {
    check_specs(&[src.clone(), tgt.clone()])?;
    let mut rng = substream(seed, &format!("parallel/{}-{}", src.id, tgt.id), 0);
    Ok((0..n)
        .map(|_| {
            let concepts = src.sample_concepts(&mut rng);
            let a = src.render(&concepts, &mut rng).join(" ");
            let b = tgt.render(&concepts, &mut rng).join(" ");
            (a, b)
        })
        .collect())
}

/// Writes `<id>.txt`, one sentence per line, for each language.
pub fn write_corpus(dir: &Path, corpus: &[LanguageText]) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut written = Vec::new();
    for lang in corpus {
        let path = dir.join(format!("{}.txt", lang.id));
        let mut text = lang.sentences.join("\n");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        written.push(path);
    }
    Ok(written)
}

/// Reads every `<id>.txt` in `dir`, ordered by language id.
pub fn read_corpus_dir(dir: &Path) -> Result<Vec<LanguageText>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let sentences = text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect();
            Ok(LanguageText { id, sentences })
        })
        .collect()
}
