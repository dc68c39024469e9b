//! The run manifest: a config snapshot plus one record per completed stage.
//!
//! Each record carries the sha256 of every file the stage wrote, a hash of
//! the config keys the stage reads, and a chain hash folding both together
//! with the chain hashes of its upstream stages. Before a stage runs, every
//! transitive upstream record is re-verified against the files on disk, so
//! an edited artifact anywhere upstream stops the pipeline instead of
//! silently feeding stale data forward.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ARTIFACT_VERSION: &str = concat!("caselink-", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synth,
    Ingest,
    Summarize,
    Views,
    Casegnn,
    Graph,
    Train,
    Retrieve,
    Evaluate,
    Stats,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::Summarize,
        Stage::Views,
        Stage::Casegnn,
        Stage::Graph,
        Stage::Train,
        Stage::Retrieve,
        Stage::Evaluate,
        Stage::Stats,
    ];

    /// Stages `all` runs, in order (synth only when there is no data root).
    pub const PIPELINE: [Stage; 9] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::Summarize,
        Stage::Views,
        Stage::Casegnn,
        Stage::Graph,
        Stage::Train,
        Stage::Retrieve,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Summarize => "summarize",
            Stage::Views => "views",
            Stage::Casegnn => "casegnn",
            Stage::Graph => "graph",
            Stage::Train => "train",
            Stage::Retrieve => "retrieve",
            Stage::Evaluate => "evaluate",
            Stage::Stats => "stats",
        }
    }

    /// Direct upstream stages. `ingest` depends on `synth` only when the
    /// corpus is generated rather than read from `data.root`.
    pub fn upstream(self, synthetic: bool) -> Vec<Stage> {
        use Stage::*;
        match self {
            Synth => vec![],
            Ingest if synthetic => vec![Synth],
            Ingest => vec![],
            Summarize => vec![Ingest],
            Views => vec![Summarize],
            Casegnn => vec![Views, Ingest],
            Graph => vec![Casegnn, Ingest],
            Train => vec![Graph, Ingest],
            Retrieve => vec![Train, Graph, Ingest],
            Evaluate => vec![Retrieve, Ingest],
            Stats => vec![Ingest],
        }
    }

    /// Config key prefixes whose values feed this stage.
    pub fn config_prefixes(self) -> &'static [&'static str] {
        use Stage::*;
        match self {
            Synth => &["run.seed", "synth.", "data.train_split", "data.test_split"],
            Ingest => &["data."],
            Summarize => &["llm.", "views.fact_section"],
            Views => &["encoder.", "views."],
            Casegnn => &["casegnn.", "encoder.", "run.seed"],
            Graph => &["graph."],
            Train => &["training.", "graph.", "run.seed"],
            Retrieve => &[],
            Evaluate => &["eval.", "run.seed"],
            Stats => &[],
        }
    }

    /// sha256 over the `key=value` lines this stage reads.
    pub fn config_hash(self, config: &BTreeMap<String, String>) -> String {
        let mut h = Sha256::new();
        for (k, v) in config {
            if self.config_prefixes().iter().any(|p| k.starts_with(p)) {
                h.update(k.as_bytes());
                h.update([0]);
                h.update(v.as_bytes());
                h.update([b'\n']);
            }
        }
        hex::encode(h.finalize())
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub upstream: Vec<Stage>,
    pub config_hash: String,
    /// Files read from outside the run directory, path to sha256.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    /// Files written, path relative to the run directory, to sha256.
    pub outputs: BTreeMap<String, String>,
    pub chain: String,
    pub wall_clock_secs: f64,
}

impl StageRecord {
    pub fn compute_chain(
        stage: Stage,
        config_hash: &str,
        inputs: &BTreeMap<String, String>,
        outputs: &BTreeMap<String, String>,
        upstream_chains: &[(Stage, String)],
    ) -> String {
        let mut h = Sha256::new();
        h.update(stage.name().as_bytes());
        h.update([0]);
        h.update(config_hash.as_bytes());
        for (tag, map) in [("in", inputs), ("out", outputs)] {
            for (p, d) in map {
                h.update(tag.as_bytes());
                h.update(p.as_bytes());
                h.update([0]);
                h.update(d.as_bytes());
            }
        }
        for (s, c) in upstream_chains {
            h.update(b"up");
            h.update(s.name().as_bytes());
            h.update([0]);
            h.update(c.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub run_id: String,
    pub seed: u64,
    /// Resolved flat config of the most recent invocation.
    pub config: BTreeMap<String, String>,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl RunManifest {
    pub fn new(run_id: &str, seed: u64, config: BTreeMap<String, String>) -> Self {
        Self {
            artifact_version: ARTIFACT_VERSION.to_string(),
            run_id: run_id.to_string(),
            seed,
            config,
            stages: BTreeMap::new(),
        }
    }

    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(MANIFEST_FILE)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let raw = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
    }

    /// Loads the run directory's manifest, or starts a fresh one.
    pub fn load_or_new(run_dir: &Path, run_id: &str, seed: u64, config: &BTreeMap<String, String>) -> Result<Self, CliError> {
        let path = Self::path(run_dir);
        if path.is_file() {
            Self::load(&path)
        } else {
            Ok(Self::new(run_id, seed, config.clone()))
        }
    }

    pub fn save(&self, run_dir: &Path) -> Result<(), CliError> {
        let path = Self::path(run_dir);
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        fs::write(&tmp, body).map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))
    }

    /// Checks that every stage `stage` transitively depends on is recorded,
    /// was produced under the current config, still matches its files on
    /// disk, and has an intact chain. The first failure, nearest stage
    /// first, names the stage to (re)run.
    pub fn verify_upstream(
        &self,
        stage: Stage,
        synthetic: bool,
        config: &BTreeMap<String, String>,
        run_dir: &Path,
    ) -> Result<(), CliError> {
        let mut queue: VecDeque<Stage> = stage.upstream(synthetic).into();
        let mut seen = BTreeSet::new();
        while let Some(s) = queue.pop_front() {
            if !seen.insert(s) {
                continue;
            }
            self.verify_stage(s, synthetic, config, run_dir)?;
            queue.extend(s.upstream(synthetic));
        }
        Ok(())
    }

    pub fn verify_stage(
        &self,
        s: Stage,
        synthetic: bool,
        config: &BTreeMap<String, String>,
        run_dir: &Path,
    ) -> Result<(), CliError> {
        let missing = |reason: String| CliError::Upstream { stage: s, reason };
        let rec = self
            .stages
            .get(&s)
            .ok_or_else(|| missing("no completed run recorded".into()))?;
        if rec.config_hash != s.config_hash(config) {
            return Err(missing("its configuration changed since it ran".into()));
        }
        if rec.upstream != s.upstream(synthetic) {
            return Err(missing("it ran with a different set of upstream stages".into()));
        }
        for (rel, digest) in &rec.outputs {
            let p = run_dir.join(rel);
            match sha256_file(&p) {
                Ok(d) if &d == digest => {}
                Ok(_) => return Err(missing(format!("artifact {rel} was modified"))),
                Err(_) => return Err(missing(format!("artifact {rel} is missing"))),
            }
        }
        for (path, digest) in &rec.inputs {
            match sha256_file(Path::new(path)) {
                Ok(d) if &d == digest => {}
                _ => return Err(missing(format!("input {path} changed or disappeared"))),
            }
        }
        let mut ups = Vec::new();
        for u in &rec.upstream {
            let chain = self
                .stages
                .get(u)
                .map(|r| r.chain.clone())
                .ok_or_else(|| CliError::Upstream {
                    stage: *u,
                    reason: "no completed run recorded".into(),
                })?;
            ups.push((*u, chain));
        }
        if StageRecord::compute_chain(s, &rec.config_hash, &rec.inputs, &rec.outputs, &ups) != rec.chain {
            return Err(missing("its chain hash no longer matches upstream; rerun it".into()));
        }
        Ok(())
    }

    /// Current chain hashes of the direct upstream stages.
    pub fn upstream_chains(&self, stage: Stage, synthetic: bool) -> Vec<(Stage, String)> {
        stage
            .upstream(synthetic)
            .into_iter()
            .filter_map(|u| self.stages.get(&u).map(|r| (u, r.chain.clone())))
            .collect()
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Every regular file below `dir`, sorted, as paths relative to `base`.
pub fn list_files(dir: &Path, base: &Path) -> std::io::Result<Vec<String>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(base).unwrap_or(&p);
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(m: &mut RunManifest, dir: &Path, s: Stage, file: &str, body: &str) {
        fs::write(dir.join(file), body).unwrap();
        let outputs: BTreeMap<String, String> = [(file.to_string(), sha256_file(&dir.join(file)).unwrap())].into();
        let ch = s.config_hash(&m.config);
        let ups = m.upstream_chains(s, true);
        let chain = StageRecord::compute_chain(s, &ch, &BTreeMap::new(), &outputs, &ups);
        m.stages.insert(
            s,
            StageRecord {
                upstream: s.upstream(true),
                config_hash: ch,
                inputs: BTreeMap::new(),
                outputs,
                chain,
                wall_clock_secs: 0.0,
            },
        );
    }

    #[test]
    fn missing_nearest_upstream_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = crate::config::defaults();
        let m = RunManifest::new("r", 7, cfg.clone());
        let err = m.verify_upstream(Stage::Train, true, &cfg, dir.path()).unwrap_err();
        assert!(matches!(err, CliError::Upstream { stage: Stage::Graph, .. }));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn tampering_propagates_downstream() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = crate::config::defaults();
        let mut m = RunManifest::new("r", 7, cfg.clone());
        record(&mut m, dir.path(), Stage::Synth, "a", "1");
        record(&mut m, dir.path(), Stage::Ingest, "b", "2");
        record(&mut m, dir.path(), Stage::Summarize, "c", "3");
        m.verify_upstream(Stage::Views, true, &cfg, dir.path()).unwrap();
        fs::write(dir.path().join("a"), "tampered").unwrap();
        let err = m.verify_upstream(Stage::Views, true, &cfg, dir.path()).unwrap_err();
        assert!(matches!(err, CliError::Upstream { stage: Stage::Synth, .. }), "{err}");
    }

    #[test]
    fn rerun_upstream_breaks_chain() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = crate::config::defaults();
        let mut m = RunManifest::new("r", 7, cfg.clone());
        record(&mut m, dir.path(), Stage::Synth, "a", "1");
        record(&mut m, dir.path(), Stage::Ingest, "b", "2");
        // synth re-run with different output; ingest's record still points
        // at the old chain.
        record(&mut m, dir.path(), Stage::Synth, "a", "other");
        let err = m.verify_upstream(Stage::Summarize, true, &cfg, dir.path()).unwrap_err();
        assert!(matches!(err, CliError::Upstream { stage: Stage::Ingest, .. }), "{err}");
    }

    #[test]
    fn config_change_only_stales_readers() {
        let cfg = crate::config::defaults();
        let mut other = cfg.clone();
        other.insert("training.lambda".into(), "0".into());
        assert_eq!(Stage::Graph.config_hash(&cfg), Stage::Graph.config_hash(&other));
        assert_ne!(Stage::Train.config_hash(&cfg), Stage::Train.config_hash(&other));
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
    }
}
