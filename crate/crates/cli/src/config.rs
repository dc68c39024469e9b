//! Flat `section.key = value` configuration, layered as built-in defaults,
//! then a config file, then `CASELINK__SECTION__KEY` environment variables,
//! then `--set section.key=value` overrides.
//!
//! File format: one `key = value` per line; blank lines and lines starting
//! with `#` are ignored; a value may be wrapped in double quotes, and `\n`
//! and `\\` inside it stand for a newline and a backslash. Lists are
//! comma-separated. An empty value means "unset" for optional keys.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use caselink_core::corpus::SynthConfig;
use caselink_core::encoders::{LlmBackendConfig, LlmMode, DEFAULT_PROMPT_TEMPLATE};
use caselink_core::promptcase::{ViewOptions, DEFAULT_PLACEHOLDERS};
use caselink_core::{Encoder, GraphMode, TrainConfig};

use crate::CliError;

pub const ENV_PREFIX: &str = "CASELINK__";

/// Every accepted key with its default value.
pub fn defaults() -> BTreeMap<String, String> {
    let synth = SynthConfig::default();
    let llm = LlmBackendConfig::default();
    let train = TrainConfig::default();
    let gnn = TrainConfig::casegnn_defaults();
    let mut d: Vec<(String, String)> = [
        ("run.seed", "7".into()),
        ("data.root", String::new()),
        ("data.train_split", "train".into()),
        ("data.test_split", "test".into()),
        ("data.charges", String::new()),
        ("data.max_year", String::new()),
        ("synth.clusters", synth.clusters.to_string()),
        ("synth.docs_per_cluster", synth.docs_per_cluster.to_string()),
        ("synth.queries_per_cluster", synth.queries_per_cluster.to_string()),
        ("synth.relevant_per_query", synth.relevant_per_query.to_string()),
        ("synth.cluster_vocab_size", synth.cluster_vocab_size.to_string()),
        ("synth.shared_vocab_size", synth.shared_vocab_size.to_string()),
        ("synth.charges_per_cluster", synth.charges_per_cluster.to_string()),
        ("synth.charge_injection_rate", synth.charge_injection_rate.to_string()),
        ("synth.placeholder_rate", synth.placeholder_rate.to_string()),
        ("synth.sentences_per_doc", synth.sentences_per_doc.to_string()),
        ("synth.cluster_word_rate", synth.cluster_word_rate.to_string()),
        ("synth.year_min", synth.year_min.to_string()),
        ("synth.year_max", synth.year_max.to_string()),
        ("encoder.id", "toy-hash".into()),
        ("encoder.dim", "64".into()),
        ("encoder.path", String::new()),
        ("llm.mode", "mock".into()),
        ("llm.endpoint", llm.endpoint.clone()),
        ("llm.model_name", llm.model_name.clone()),
        ("llm.max_retries", llm.max_retries.to_string()),
        ("llm.timeout_secs", llm.timeout_secs.to_string()),
        ("llm.request_parallelism", llm.request_parallelism.to_string()),
        ("llm.api_key_env", llm.api_key_env.clone()),
        ("llm.prompt_template", DEFAULT_PROMPT_TEMPLATE.into()),
        ("llm.word_limit", ViewOptions::default().word_limit.to_string()),
        ("views.placeholders", DEFAULT_PLACEHOLDERS.join(",")),
        ("views.fact_section", String::new()),
        ("views.max_full_tokens", ViewOptions::default().max_full_tokens.to_string()),
        ("graph.k", train.k_pairs.to_string()),
        ("graph.delta", train.delta.to_string()),
        ("graph.mode", "homogeneous".into()),
        ("eval.k", "5".into()),
        ("eval.map_at_k", "false".into()),
        ("eval.subsets", "5".into()),
        ("eval.alpha", "0.05".into()),
        ("eval.comparisons", "7".into()),
        ("eval.baseline_trials", "1000".into()),
    ]
    .into_iter()
    .map(|(k, v): (&str, String)| (k.to_string(), v))
    .collect();
    for (section, t) in [("training", &train), ("casegnn", &gnn)] {
        for (key, value) in [
            ("lr", t.lr.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("tau", t.tau.to_string()),
            ("n_easy", t.n_easy.to_string()),
            ("n_hard", t.n_hard.to_string()),
            ("patience", t.patience.to_string()),
            ("validation_fraction", t.validation_fraction.to_string()),
            ("hidden_dim", t.hidden_dim.to_string()),
            ("num_layers", t.num_layers.to_string()),
        ] {
            d.push((format!("{section}.{key}"), value));
        }
    }
    d.push(("training.lambda".into(), train.lambda.to_string()));
    d.into_iter().collect()
}

/// Parses the flat file format. Errors name the offending line.
pub fn parse_flat(raw: &str) -> Result<BTreeMap<String, String>, Vec<String>> {
    let mut out = BTreeMap::new();
    let mut bad = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => {
                out.insert(k.trim().to_string(), unescape(unquote(v.trim())));
            }
            None => bad.push(format!("line {}: expected `key = value`, got `{line}`", i + 1)),
        }
    }
    if bad.is_empty() {
        Ok(out)
    } else {
        Err(bad)
    }
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

fn unescape(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    let mut chars = v.chars();
    while let Some(c) = chars.next() {
        match (c, chars.clone().next()) {
            ('\\', Some('n')) => {
                out.push('\n');
                chars.next();
            }
            ('\\', Some('\\')) => {
                out.push('\\');
                chars.next();
            }
            _ => out.push(c),
        }
    }
    out
}

fn escape(v: &str) -> String {
    v.replace('\\', "\\\\").replace('\n', "\\n")
}

/// `CASELINK__TRAINING__LR=1e-4` becomes `training.lr`.
pub fn env_key(var: &str) -> Option<String> {
    let rest = var.strip_prefix(ENV_PREFIX)?;
    Some(rest.split("__").map(str::to_ascii_lowercase).collect::<Vec<_>>().join("."))
}

/// Merges the layers and rejects unknown keys. Returns the flat map with
/// every key present.
pub fn resolve(
    file: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    overrides: &[String],
) -> Result<BTreeMap<String, String>, CliError> {
    let mut values = defaults();
    let mut bad = Vec::new();
    let mut layer = |source: &str, k: String, v: String, bad: &mut Vec<String>| {
        if values.contains_key(&k) {
            values.insert(k, v);
        } else {
            bad.push(format!("{k}: unknown key ({source})"));
        }
    };
    if let Some(path) = file {
        let raw = fs::read_to_string(path).map_err(|e| CliError::Config(vec![format!("{}: {e}", path.display())]))?;
        match parse_flat(&raw) {
            Ok(map) => map.into_iter().for_each(|(k, v)| layer("config file", k, v, &mut bad)),
            Err(errs) => bad.extend(errs.into_iter().map(|e| format!("{}: {e}", path.display()))),
        }
    }
    for (var, v) in env {
        if let Some(k) = env_key(&var) {
            layer("environment", k, v, &mut bad);
        }
    }
    for o in overrides {
        match o.split_once('=') {
            Some((k, v)) => layer("--set", k.trim().to_string(), unescape(unquote(v.trim())), &mut bad),
            None => bad.push(format!("{o}: --set expects key=value")),
        }
    }
    if let Err(CliError::Config(invalid)) = PipelineConfig::from_flat(&values) {
        bad.extend(invalid);
    }
    if bad.is_empty() {
        Ok(values)
    } else {
        Err(CliError::Config(bad))
    }
}

pub fn to_flat_text(values: &BTreeMap<String, String>) -> String {
    values
        .iter()
        .map(|(k, v)| {
            let v = escape(v);
            if v.starts_with(' ') || v.ends_with(' ') || v.starts_with('"') {
                format!("{k} = \"{v}\"\n")
            } else {
                format!("{k} = {v}\n")
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub train_split: String,
    pub test_split: String,
    pub charges: Option<PathBuf>,
    pub max_year: Option<i32>,
}

#[derive(Debug, Clone)]
pub struct GraphConfig {
    pub k: usize,
    pub delta: f64,
    pub mode: GraphMode,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub k: usize,
    pub map_at_k: bool,
    pub subsets: usize,
    pub alpha: f64,
    pub comparisons: usize,
    pub baseline_trials: usize,
}

/// Typed view of the flat map.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub encoder: Encoder,
    pub llm: LlmBackendConfig,
    pub views: ViewOptions,
    pub casegnn: TrainConfig,
    pub graph: GraphConfig,
    pub training: TrainConfig,
    pub eval: EvalConfig,
}

struct Reader<'a> {
    values: &'a BTreeMap<String, String>,
    bad: Vec<String>,
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Option<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key).parse::<T>() {
            Ok(v) => Some(v),
            Err(e) => {
                self.bad.push(format!("{key}: cannot parse `{}` ({e})", self.raw(key)));
                None
            }
        }
    }

    fn opt<T: std::str::FromStr>(&mut self, key: &str) -> Option<T>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(key).is_empty() {
            None
        } else {
            self.parse(key)
        }
    }

    fn string(&self, key: &str) -> String {
        self.raw(key).to_string()
    }

    fn train(&mut self, section: &str, base: TrainConfig, seed: u64) -> TrainConfig {
        let mut t = base;
        let key = |k: &str| format!("{section}.{k}");
        macro_rules! field {
            ($f:ident) => {
                if let Some(v) = self.parse(&key(stringify!($f))) {
                    t.$f = v;
                }
            };
        }
        field!(lr);
        field!(weight_decay);
        field!(epochs);
        field!(batch_size);
        field!(tau);
        field!(n_easy);
        field!(n_hard);
        field!(patience);
        field!(validation_fraction);
        field!(hidden_dim);
        field!(num_layers);
        if self.values.contains_key(&key("lambda")) {
            field!(lambda);
        }
        t.seed = seed;
        t
    }
}

impl PipelineConfig {
    pub fn from_flat(values: &BTreeMap<String, String>) -> Result<Self, CliError> {
        let mut r = Reader { values, bad: Vec::new() };
        let seed: u64 = r.parse("run.seed").unwrap_or(0);

        let data = DataConfig {
            root: r.opt::<PathBuf>("data.root"),
            train_split: r.string("data.train_split"),
            test_split: r.string("data.test_split"),
            charges: r.opt::<PathBuf>("data.charges"),
            max_year: r.opt("data.max_year"),
        };
        if data.train_split.is_empty() || data.test_split.is_empty() || data.train_split == data.test_split {
            r.bad.push("data.train_split/data.test_split: must be two distinct non-empty names".into());
        }

        let mut synth = SynthConfig {
            splits: vec![data.train_split.clone(), data.test_split.clone()],
            ..SynthConfig::default()
        };
        macro_rules! synth_field {
            ($($f:ident),*) => {$(
                if let Some(v) = r.parse(concat!("synth.", stringify!($f))) {
                    synth.$f = v;
                }
            )*};
        }
        synth_field!(
            clusters,
            docs_per_cluster,
            queries_per_cluster,
            relevant_per_query,
            cluster_vocab_size,
            shared_vocab_size,
            charges_per_cluster,
            charge_injection_rate,
            placeholder_rate,
            sentences_per_doc,
            cluster_word_rate,
            year_min,
            year_max
        );
        if let Err(e) = synth.validate() {
            r.bad.push(format!("synth.*: {e}"));
        }

        let dim: usize = r.parse("encoder.dim").unwrap_or(0);
        if dim == 0 {
            r.bad.push("encoder.dim: must be >= 1".into());
        }
        let encoder = match Encoder::from_id(&r.string("encoder.id"), dim, r.opt("encoder.path")) {
            Ok(e) => Some(e),
            Err(e) => {
                r.bad.push(format!("encoder.id: {e}"));
                None
            }
        };

        let mode = match r.raw("llm.mode") {
            "mock" => LlmMode::Mock,
            "remote" => LlmMode::Remote,
            other => {
                r.bad.push(format!("llm.mode: expected mock or remote, got `{other}`"));
                LlmMode::Mock
            }
        };
        let llm = LlmBackendConfig {
            mode,
            endpoint: r.string("llm.endpoint"),
            model_name: r.string("llm.model_name"),
            max_retries: r.parse("llm.max_retries").unwrap_or(0),
            timeout_secs: r.parse("llm.timeout_secs").unwrap_or(0.0),
            request_parallelism: r.parse("llm.request_parallelism").unwrap_or(1),
            api_key_env: r.string("llm.api_key_env"),
            prompt_template: r.string("llm.prompt_template"),
        };
        if llm.mode == LlmMode::Remote && llm.endpoint.is_empty() {
            r.bad.push("llm.endpoint: required when llm.mode = remote".into());
        }

        let mut views = ViewOptions {
            placeholders: r
                .raw("views.placeholders")
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect(),
            word_limit: r.parse("llm.word_limit").unwrap_or(1),
            fact_section: None,
            max_full_tokens: r.parse("views.max_full_tokens").unwrap_or(1),
        };
        let pattern = r.string("views.fact_section");
        if !pattern.is_empty() {
            match views.clone().with_fact_section(&pattern) {
                Ok(v) => views = v,
                Err(e) => r.bad.push(format!("views.fact_section: {e}")),
            }
        }

        let graph_mode = match r.raw("graph.mode").parse::<GraphMode>() {
            Ok(m) => m,
            Err(e) => {
                r.bad.push(format!("graph.mode: {e}"));
                GraphMode::Homogeneous
            }
        };
        let graph = GraphConfig {
            k: r.parse("graph.k").unwrap_or(0),
            delta: r.parse("graph.delta").unwrap_or(0.9),
            mode: graph_mode,
        };
        if !(graph.delta > 0.0 && graph.delta <= 1.0) {
            r.bad.push(format!("graph.delta: must lie in (0, 1], got {}", graph.delta));
        }

        let mut training = r.train("training", TrainConfig::default(), seed);
        training.k_pairs = graph.k;
        training.delta = graph.delta;
        let casegnn = r.train("casegnn", TrainConfig::casegnn_defaults(), seed);
        for (section, t) in [("training", &training), ("casegnn", &casegnn)] {
            if let Err(caselink_core::TrainError::Config(errs)) = t.validate() {
                r.bad.extend(errs.into_iter().map(|e| format!("{section}.{e}")));
            }
        }

        let eval = EvalConfig {
            k: r.parse("eval.k").unwrap_or(5),
            map_at_k: r.parse("eval.map_at_k").unwrap_or(false),
            subsets: r.parse("eval.subsets").unwrap_or(5),
            alpha: r.parse("eval.alpha").unwrap_or(0.05),
            comparisons: r.parse("eval.comparisons").unwrap_or(1),
            baseline_trials: r.parse("eval.baseline_trials").unwrap_or(1),
        };
        if eval.k == 0 {
            r.bad.push("eval.k: must be >= 1".into());
        }
        if eval.subsets < 2 {
            r.bad.push("eval.subsets: must be >= 2".into());
        }
        if !(eval.alpha > 0.0 && eval.alpha < 1.0) {
            r.bad.push(format!("eval.alpha: must lie in (0, 1), got {}", eval.alpha));
        }
        if eval.comparisons == 0 {
            r.bad.push("eval.comparisons: must be >= 1".into());
        }
        if eval.baseline_trials == 0 {
            r.bad.push("eval.baseline_trials: must be >= 1".into());
        }

        if !r.bad.is_empty() {
            return Err(CliError::Config(r.bad));
        }
        Ok(PipelineConfig {
            seed,
            data,
            synth,
            encoder: encoder.expect("checked above"),
            llm,
            views,
            casegnn,
            graph,
            training,
            eval,
        })
    }
}
