//! Graph-based legal case retrieval.
//!
//! The pipeline runs bottom-up through these modules:
//!
//! * [`corpus`] — dataset folders, relevance labels, charge lists and a
//!   planted-cluster synthetic generator;
//! * [`lexical`] — BM25 scoring, top-k case pairs, hard-negative mining;
//! * [`encoders`] — text embeddings (toy hash or precomputed file) and a
//!   cached summarizer backend;
//! * [`promptcase`] — fact / issue / full views of each case;
//! * [`casegnn`] — text graphs with a virtual node and the attention
//!   encoder that produces initial case features;
//! * [`graph`] — the case-charge graph in homogeneous and heterogeneous form;
//! * [`neural`] — reverse-mode tape, attention layers, checkpoints and a
//!   gradient checker;
//! * [`training`] — contrastive objective, degree regularizer, training
//!   loop and cosine retrieval;
//! * [`evalkit`] — retrieval metrics, random baseline and paired t-tests.

pub mod casegnn;
pub mod corpus;
pub mod encoders;
pub mod evalkit;
pub mod graph;
pub mod lexical;
pub mod neural;
pub mod promptcase;
pub mod training;

pub use corpus::{CaseDocument, CaseRole, ChargeEntry, CorpusError, DatasetSplit, RelevanceLabels};
pub use encoders::{EmbeddingStore, Encoder, EncoderError};
pub use evalkit::{EvalError, MetricReport, RetrievalRun, TestReport};
pub use graph::{CaseLinkGraph, EdgeType, GraphError, GraphMode, NodeKind};
pub use lexical::{Bm25Index, LexicalError};
pub use neural::{ModelParams, NeuralError, Tensor};
pub use training::{TrainConfig, TrainError};
