//! Planted-cluster corpus generator.
//!
//! Every cluster owns a private vocabulary and a few charges. Candidates
//! mix cluster words with shared filler words; each query cites a sample
//! of candidates from its cluster by quoting one sentence of each, and
//! those candidates form its relevance labels.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    format_charges, io_err, write_dataset, CaseDocument, CaseRole, ChargeEntry, CorpusError,
    DatasetSplit, RelevanceLabels,
};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

const VERBS: &[&str] = &[
    "held", "dismissed", "granted", "found", "ordered", "allowed", "rejected", "considered",
    "reviewed", "affirmed",
];

const PLACEHOLDERS: &[&str] = &[
    "FRAGMENT_SUPPRESSED",
    "REFERENCE_SUPPRESSED",
    "CITATION_SUPPRESSED",
    "DATE_SUPPRESSED",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub clusters: usize,
    pub docs_per_cluster: usize,
    pub queries_per_cluster: usize,
    pub relevant_per_query: usize,
    pub cluster_vocab_size: usize,
    pub shared_vocab_size: usize,
    pub charges_per_cluster: usize,
    pub charge_injection_rate: f64,
    pub placeholder_rate: f64,
    pub sentences_per_doc: usize,
    pub cluster_word_rate: f64,
    pub year_min: i32,
    pub year_max: i32,
    pub splits: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            clusters: 6,
            docs_per_cluster: 20,
            queries_per_cluster: 5,
            relevant_per_query: 5,
            cluster_vocab_size: 60,
            shared_vocab_size: 600,
            charges_per_cluster: 2,
            charge_injection_rate: 0.7,
            placeholder_rate: 0.15,
            sentences_per_doc: 14,
            cluster_word_rate: 0.4,
            year_min: 2010,
            year_max: 2022,
            splits: vec!["train".into(), "test".into()],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |m: String| Err(CorpusError::Config(m));
        if self.clusters == 0 || self.docs_per_cluster == 0 {
            return fail("clusters and docs_per_cluster must be positive".into());
        }
        if self.relevant_per_query == 0 {
            return fail("relevant_per_query must be positive".into());
        }
        if self.relevant_per_query >= self.docs_per_cluster {
            return fail(format!(
                "relevant_per_query ({}) must be smaller than the cluster size ({})",
                self.relevant_per_query, self.docs_per_cluster
            ));
        }
        if self.cluster_vocab_size == 0 || self.shared_vocab_size == 0 {
            return fail("vocabulary sizes must be positive".into());
        }
        for (name, v) in [
            ("charge_injection_rate", self.charge_injection_rate),
            ("placeholder_rate", self.placeholder_rate),
            ("cluster_word_rate", self.cluster_word_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.charge_injection_rate > 0.0 && self.charges_per_cluster == 0 {
            return fail("charge injection needs charges_per_cluster > 0".into());
        }
        if self.sentences_per_doc <= self.relevant_per_query {
            return fail("sentences_per_doc must exceed relevant_per_query".into());
        }
        if self.year_min > self.year_max {
            return fail("year_min must not exceed year_max".into());
        }
        let uniq: BTreeSet<&String> = self.splits.iter().collect();
        if self.splits.is_empty() || uniq.len() != self.splits.len() {
            return fail("splits must be a non-empty list of distinct names".into());
        }
        Ok(())
    }

    pub fn num_candidates(&self) -> usize {
        self.clusters * self.docs_per_cluster
    }

    pub fn num_queries(&self) -> usize {
        self.clusters * self.queries_per_cluster
    }
}

/// Ground truth the generator knows about what it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub splits: Vec<String>,
    pub num_candidates: usize,
    pub num_queries: usize,
    pub num_charges: usize,
    /// Case id to planted cluster, over every split.
    pub cluster_of: std::collections::BTreeMap<String, usize>,
}

struct Vocabulary {
    shared: Vec<String>,
    clusters: Vec<Vec<String>>,
    charges: Vec<Vec<ChargeEntry>>,
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let mut w = String::with_capacity(6);
    for _ in 0..3 {
        w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
        w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
    }
    w
}

fn build_vocabulary(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vocabulary {
    let mut used = BTreeSet::new();
    let mut fresh = |rng: &mut ChaCha8Rng| loop {
        let w = pseudo_word(rng);
        if used.insert(w.clone()) {
            return w;
        }
    };
    let shared = (0..cfg.shared_vocab_size).map(|_| fresh(rng)).collect();
    let clusters: Vec<Vec<String>> = (0..cfg.clusters)
        .map(|_| (0..cfg.cluster_vocab_size).map(|_| fresh(rng)).collect())
        .collect();
    let charges = clusters
        .iter()
        .map(|vocab| {
            let topic: Vec<&String> = vocab.iter().take(20).collect();
            (0..cfg.charges_per_cluster)
                .map(|_| {
                    let name = format!("{} act", fresh(rng));
                    let body: Vec<&str> = topic.iter().map(|s| s.as_str()).collect();
                    ChargeEntry {
                        description: format!("{name} governing {}", body.join(" ")),
                        name,
                    }
                })
                .collect()
        })
        .collect();
    Vocabulary {
        shared,
        clusters,
        charges,
    }
}

fn content_word<'a>(cfg: &SynthConfig, vocab: &'a Vocabulary, cluster: usize, rng: &mut ChaCha8Rng) -> &'a str {
    if rng.gen_bool(cfg.cluster_word_rate) {
        vocab.clusters[cluster].choose(rng).unwrap()
    } else {
        vocab.shared.choose(rng).unwrap()
    }
}

fn noun_phrase(cfg: &SynthConfig, vocab: &Vocabulary, cluster: usize, rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..=2);
    (0..n)
        .map(|_| content_word(cfg, vocab, cluster, rng))
        .collect::<Vec<_>>()
        .join(" ")
}

fn sentence(cfg: &SynthConfig, vocab: &Vocabulary, cluster: usize, rng: &mut ChaCha8Rng) -> String {
    let mut s = format!(
        "The {} {} the {}",
        noun_phrase(cfg, vocab, cluster, rng),
        VERBS.choose(rng).unwrap(),
        noun_phrase(cfg, vocab, cluster, rng)
    );
    if rng.gen_bool(0.5) {
        s.push_str(&format!(" of {}", noun_phrase(cfg, vocab, cluster, rng)));
    }
    if rng.gen_bool(cfg.placeholder_rate) {
        s.push_str(&format!(" as stated in {}", PLACEHOLDERS.choose(rng).unwrap()));
    }
    s.push('.');
    s
}

fn charge_sentence(cfg: &SynthConfig, vocab: &Vocabulary, cluster: usize, rng: &mut ChaCha8Rng) -> String {
    let home = &vocab.charges[cluster];
    let charge = if rng.gen_bool(0.8) {
        home.choose(rng).unwrap()
    } else {
        vocab.charges.choose(rng).unwrap().choose(rng).unwrap()
    };
    format!(
        "The {} {} under the {}.",
        noun_phrase(cfg, vocab, cluster, rng),
        VERBS.choose(rng).unwrap(),
        charge.name
    )
}

fn document(cfg: &SynthConfig, vocab: &Vocabulary, cluster: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut sentences: Vec<String> = (0..n).map(|_| sentence(cfg, vocab, cluster, rng)).collect();
    if cfg.charges_per_cluster > 0 && rng.gen_bool(cfg.charge_injection_rate) {
        let at = rng.gen_range(0..=sentences.len());
        sentences.insert(at, charge_sentence(cfg, vocab, cluster, rng));
    }
    sentences
}

fn year(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> i32 {
    rng.gen_range(cfg.year_min..=cfg.year_max)
}

fn generate_split(
    cfg: &SynthConfig,
    vocab: &Vocabulary,
    name: &str,
    rng: &mut ChaCha8Rng,
    cluster_of: &mut std::collections::BTreeMap<String, usize>,
) -> DatasetSplit {
    let mut candidates = Vec::new();
    let mut sentences_of = Vec::new();
    for c in 0..cfg.clusters {
        for _ in 0..cfg.docs_per_cluster {
            let id = format!("{name}_c{:04}", candidates.len() + 1);
            let sents = document(cfg, vocab, c, cfg.sentences_per_doc, rng);
            cluster_of.insert(id.clone(), c);
            candidates.push(CaseDocument {
                id,
                text: sents.join(" "),
                year: Some(year(cfg, rng)),
                role: CaseRole::Candidate,
            });
            sentences_of.push(sents);
        }
    }

    let mut queries = Vec::new();
    let mut labels = RelevanceLabels::new();
    for c in 0..cfg.clusters {
        let members: Vec<usize> = (c * cfg.docs_per_cluster..(c + 1) * cfg.docs_per_cluster).collect();
        for _ in 0..cfg.queries_per_cluster {
            let id = format!("{name}_q{:04}", queries.len() + 1);
            let own = cfg.sentences_per_doc - cfg.relevant_per_query;
            let mut sents = document(cfg, vocab, c, own, rng);
            let mut cited: Vec<usize> = members
                .choose_multiple(rng, cfg.relevant_per_query)
                .copied()
                .collect();
            cited.sort_unstable();
            for &doc in &cited {
                let quoted = sentences_of[doc].choose(rng).unwrap().clone();
                let at = rng.gen_range(0..=sents.len());
                sents.insert(at, quoted);
                labels.insert(id.clone(), candidates[doc].id.clone());
            }
            cluster_of.insert(id.clone(), c);
            queries.push(CaseDocument {
                id,
                text: sents.join(" "),
                year: Some(cfg.year_max + 1),
                role: CaseRole::Query,
            });
        }
    }

    DatasetSplit {
        name: name.to_string(),
        queries,
        candidates,
        labels,
    }
}

/// Writes every configured split plus `charges.tsv` under `root`.
/// Output is a pure function of `(config, seed)`.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64, root: &Path) -> Result<SynthSummary, CorpusError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = build_vocabulary(cfg, &mut rng);
    let mut cluster_of = std::collections::BTreeMap::new();

    fs::create_dir_all(root).map_err(io_err(root))?;
    for name in &cfg.splits {
        let split = generate_split(cfg, &vocab, name, &mut rng, &mut cluster_of);
        split.validate()?;
        write_dataset(root, &split)?;
    }
    let charges: Vec<ChargeEntry> = vocab.charges.iter().flatten().cloned().collect();
    let charges_path = root.join("charges.tsv");
    fs::write(&charges_path, format_charges(&charges)).map_err(io_err(&charges_path))?;

    Ok(SynthSummary {
        splits: cfg.splits.clone(),
        num_candidates: cfg.num_candidates(),
        num_queries: cfg.num_queries(),
        num_charges: charges.len(),
        cluster_of,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_charges, load_dataset};

    #[test]
    fn infeasible_relevance_is_rejected() {
        let cfg = SynthConfig {
            docs_per_cluster: 5,
            relevant_per_query: 5,
            ..SynthConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(CorpusError::Config(_))));
    }

    #[test]
    fn full_injection_puts_a_charge_in_every_case() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            charge_injection_rate: 1.0,
            ..SynthConfig::default()
        };
        generate_synthetic(&cfg, 3, dir.path()).unwrap();
        let charges = load_charges(&dir.path().join("charges.tsv")).unwrap();
        let split = load_dataset(dir.path(), "train").unwrap();
        for d in split.queries.iter().chain(&split.candidates) {
            let text = d.text.to_lowercase();
            assert!(charges.iter().any(|c| text.contains(&c.name.to_lowercase())), "{}", d.id);
        }
    }

    #[test]
    fn default_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_synthetic(&SynthConfig::default(), 7, dir.path()).unwrap();
        assert_eq!(s.num_candidates, 120);
        assert_eq!(s.num_queries, 30);
        let split = load_dataset(dir.path(), "test").unwrap();
        assert_eq!(split.candidates.len(), 120);
        assert_eq!(split.queries.len(), 30);
    }
}
