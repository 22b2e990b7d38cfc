//! End-to-end commands over a run directory: ingest, train, tokenize,
//! reconstruct, evaluate, analyze, inverse-folding training, design, sweep.
//!
//! Layout of the output directory:
//!
//! | file | written by |
//! |---|---|
//! | `config.toml` | every command (effective config) |
//! | `corpus.jsonl`, `split.tsv` | ingest |
//! | `checkpoint.ckpt`, `model.ckpt`, `train_log.tsv`, `checkpoints/` | train |
//! | `tokens.tsv` | tokenize |
//! | `reconstructed.jsonl`, `reconstructed.pdb` | reconstruct |
//! | `metrics.tsv`, `metrics.json` | evaluate |
//! | `ngrams.tsv`, `motifs.tsv`, `motif_js.tsv`, `ngram_instances.pdb` | analyze |
//! | `invfold.ckpt`, `invfold_log.tsv` | invfold-train |
//! | `designs.fasta` | invfold-sample |
//! | `sweep.tsv` | sweep |
//! | `manifest_<command>.json` | every command |

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ribosphere_tensor::rng::stream;
use ribosphere_tensor::Checkpoint;

use crate::analysis::{self, MotifClass};
use crate::error::{Error, Result};
use crate::flow::SamplerConfig;
use crate::fsq::{self, TokenRecord, TokenSequence};
use crate::invfold::{self, InvfoldConfig, InvfoldExample, InvfoldModel, InvfoldTrainConfig, InvfoldTrainer};
use crate::metrics;
use crate::model::{corpus_scale, ModelConfig, RiboModel};
use crate::pdb;
use crate::report::{MetricsReport, MetricsRow};
use crate::split::split_dataset;
use crate::structure::{AtomSet, RnaStructure};
use crate::synth;
use crate::train::{LogRow, TrainConfig, Trainer};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

const TAG_SYNTH: u64 = 0x5717;
const TAG_RECON: u64 = 0x2EC0;
const TAG_DESIGN: u64 = 0xDE51;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 32,
            min_len: 20,
            max_len: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// PDB files, directories of PDB files, or `.jsonl` corpora.
    pub inputs: Vec<PathBuf>,
    pub synthetic: Option<SynthConfig>,
    /// Atom set structures are stored with; must contain the model's set.
    pub atom_set: AtomSet,
    pub split: [f64; 3],
    /// Replace `model.coord_scale` by the RMS radius of the training split.
    pub auto_scale: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            synthetic: None,
            atom_set: AtomSet::A11,
            split: [0.8, 0.1, 0.1],
            auto_scale: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub n: usize,
    pub top_k: usize,
    pub dot_bracket: Option<PathBuf>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            n: 5,
            top_k: analysis::DEFAULT_TOP_K,
            dot_bracket: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
    pub temperature: f64,
    pub samples: usize,
    pub sweep_temperatures: Vec<f64>,
    pub sweep_samples: usize,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            samples: invfold::SWEEP_SAMPLES,
            sweep_temperatures: invfold::SWEEP_TEMPERATURES.to_vec(),
            sweep_samples: invfold::SWEEP_SAMPLES,
        }
    }
}

/// Everything a run needs; read from TOML, every section optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub analysis: AnalysisConfig,
    pub invfold: InvfoldConfig,
    pub invfold_train: InvfoldTrainConfig,
    pub design: DesignConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            analysis: AnalysisConfig::default(),
            invfold: InvfoldConfig::default(),
            invfold_train: InvfoldTrainConfig::default(),
            design: DesignConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        self.invfold.validate()?;
        self.invfold_train.validate()?;
        let d = &self.data;
        if d.split.iter().any(|f| *f < 0.0) || (d.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("data.split {:?} must be non-negative and sum to 1", d.split)));
        }
        if !atom_set_contains(d.atom_set, self.model.atom_set) {
            return Err(Error::Config(format!(
                "data.atom_set {} does not contain model.atom_set {}",
                d.atom_set, self.model.atom_set
            )));
        }
        if let Some(s) = &d.synthetic {
            if s.min_len < 4 || s.min_len > s.max_len {
                return Err(Error::Config("synthetic lengths need 4 <= min_len <= max_len".into()));
            }
        }
        if self.analysis.n == 0 || self.analysis.top_k == 0 {
            return Err(Error::Config("analysis.n and analysis.top_k must be positive".into()));
        }
        let t = &self.design;
        if !(t.temperature >= 0.0) || t.sweep_temperatures.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::Config("design temperatures must be >= 0".into()));
        }
        if t.samples == 0 || t.sweep_samples < 2 || t.sweep_temperatures.is_empty() {
            return Err(Error::Config("design needs samples >= 1, sweep_samples >= 2 and a temperature".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

fn atom_set_contains(outer: AtomSet, inner: AtomSet) -> bool {
    crate::Base::ALL
        .iter()
        .all(|&b| inner.names(b).iter().all(|n| outer.names(b).contains(n)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

/// Which part of the split a command operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSel {
    Train,
    Val,
    Test,
    All,
}

impl SplitSel {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
            Self::All => "all",
        }
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_sha256: String,
    args: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

/// A validated config bound to an output directory.
pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let out = out.into();
        fs::create_dir_all(&out)?;
        Ok(Self { cfg, out })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn finish(&self, command: &str, args: &[(&str, String)], outputs: &[&str]) -> Result<()> {
        fs::write(self.path("config.toml"), self.cfg.to_toml()?)?;
        let mut hashes = BTreeMap::new();
        for o in outputs {
            hashes.insert(o.to_string(), file_hash(&self.path(o))?);
        }
        let m = Manifest {
            command,
            version: VERSION,
            seed: self.cfg.seed,
            config_sha256: self.cfg.hash()?,
            args: args.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            outputs: hashes,
        };
        fs::write(self.path(&format!("manifest_{command}.json")), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }

    fn require(&self, name: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Config(format!("missing {} (run `{producer}` first)", p.display())))
        }
    }

    pub fn load_model(&self) -> Result<RiboModel> {
        RiboModel::load(self.require("model.ckpt", "train")?)
    }

    /// Structures of the selected split, in corpus order.
    pub fn structures(&self, sel: SplitSel) -> Result<Vec<RnaStructure>> {
        let corpus = read_corpus(&fs::read_to_string(self.require("corpus.jsonl", "ingest")?)?)?;
        if sel == SplitSel::All {
            return Ok(corpus);
        }
        let split = read_split(&fs::read_to_string(self.require("split.tsv", "ingest")?)?)?;
        Ok(corpus
            .into_iter()
            .filter(|s| split.get(&s.id).map(String::as_str) == Some(sel.name()))
            .collect())
    }
}

pub fn write_corpus(structures: &[RnaStructure]) -> Result<String> {
    let mut out = String::new();
    for s in structures {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_corpus(text: &str) -> Result<Vec<RnaStructure>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let s: RnaStructure = serde_json::from_str(l)?;
            RnaStructure::new(s.id, s.chain_id, s.sequence, s.atom_set, s.coords, s.mask)
        })
        .collect()
}

fn read_split(text: &str) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    for line in text.lines().skip(1) {
        let (id, part) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("split.tsv: malformed line `{line}`")))?;
        out.insert(id.to_string(), part.to_string());
    }
    Ok(out)
}

/// Reads PDB files, directories of `.pdb`/`.ent` files (sorted by name) and
/// `.jsonl` corpora.
pub fn load_structures(inputs: &[PathBuf], atom_set: AtomSet) -> Result<Vec<RnaStructure>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.retain(|f| matches!(f.extension().and_then(|e| e.to_str()), Some("pdb" | "ent")));
            files.sort();
            for f in files {
                out.extend(pdb::read_pdb_file(&f, atom_set)?);
            }
        } else if p.extension().and_then(|e| e.to_str()) == Some("jsonl") {
            for s in read_corpus(&fs::read_to_string(p)?)? {
                out.push(s.to_atom_set(atom_set)?);
            }
        } else {
            out.extend(pdb::read_pdb_file(p, atom_set)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestSummary {
    pub structures: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub fn cmd_ingest(ctx: &Context, extra_inputs: &[PathBuf]) -> Result<IngestSummary> {
    let d = &ctx.cfg.data;
    let inputs: Vec<PathBuf> = d.inputs.iter().chain(extra_inputs).cloned().collect();
    let mut corpus = load_structures(&inputs, d.atom_set)?;
    if let Some(s) = &d.synthetic {
        let mut rng = stream(ctx.cfg.seed, &[TAG_SYNTH]);
        corpus.extend(synth::helix_corpus(s.count, s.min_len, s.max_len, d.atom_set, &mut rng)?);
    }
    if corpus.is_empty() {
        return Err(Error::Invalid("no structures to ingest".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for s in &corpus {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::Invalid(format!("duplicate structure id `{}`", s.id)));
        }
    }
    let split = split_dataset(&corpus, d.split, ctx.cfg.seed)?;
    let mut tsv = String::from("id\tsplit\n");
    let mut part = HashMap::new();
    for (name, set) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for s in set {
            part.insert(s.id.clone(), name);
        }
    }
    for s in &corpus {
        tsv.push_str(&format!("{}\t{}\n", s.id, part[&s.id]));
    }
    fs::write(ctx.path("corpus.jsonl"), write_corpus(&corpus)?)?;
    fs::write(ctx.path("split.tsv"), tsv)?;
    let args = [("inputs", format!("{inputs:?}"))];
    ctx.finish("ingest", &args, &["corpus.jsonl", "split.tsv"])?;
    Ok(IngestSummary {
        structures: corpus.len(),
        train: split.train.len(),
        val: split.val.len(),
        test: split.test.len(),
    })
}

fn checkpoint_meta_model(ck: &Checkpoint) -> Result<ModelConfig> {
    let meta: serde_json::Value = serde_json::from_str(&ck.metadata)?;
    let m = meta
        .get("model")
        .ok_or_else(|| Error::Format("checkpoint metadata lacks the model config".into()))?;
    Ok(serde_json::from_value(m.clone())?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub rows: Vec<LogRow>,
}

/// Trains to `train.max_steps` (or the epoch budget). With `resume`, picks
/// up `checkpoint.ckpt` and produces the same weights as a straight run.
pub fn cmd_train(ctx: &Context, resume: bool) -> Result<TrainSummary> {
    let corpus = ctx.structures(SplitSel::Train)?;
    if corpus.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let mut model_cfg = ctx.cfg.model.clone();
    if ctx.cfg.data.auto_scale {
        let prepared = corpus.iter().map(|s| s.to_atom_set(model_cfg.atom_set)).collect::<Result<Vec<_>>>()?;
        model_cfg.coord_scale = corpus_scale(&prepared)?;
    }
    let latest = ctx.path("checkpoint.ckpt");
    let mut log_lines = vec![LogRow::HEADER.to_string()];
    let mut trainer = if resume && latest.exists() {
        let ck = Checkpoint::load(&latest)?;
        let stored = checkpoint_meta_model(&ck)?;
        if stored != model_cfg {
            return Err(Error::Config("checkpoint model config differs from the run config".into()));
        }
        let t = Trainer::from_checkpoint(&ck, Some(ctx.cfg.train.clone()))?;
        if let Ok(text) = fs::read_to_string(ctx.path("train_log.tsv")) {
            log_lines.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| l.split('\t').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|k| k <= t.step()))
                    .map(String::from),
            );
        }
        t
    } else {
        Trainer::new(RiboModel::new(model_cfg, ctx.cfg.seed)?, ctx.cfg.train.clone(), ctx.cfg.seed)?
    };
    let total = ctx.cfg.train.total_steps(corpus.len()) as u64;
    let every = ctx.cfg.train.log_every.max(1) as u64;
    let ck_every = ctx.cfg.train.checkpoint_every.map(|c| c as u64);
    fs::create_dir_all(ctx.path("checkpoints"))?;
    let write_log = |lines: &[String]| fs::write(ctx.path("train_log.tsv"), lines.join("\n") + "\n");
    let rows = trainer.run(&corpus, total, |t, row| {
        if row.step == 1 || row.step % every == 0 || row.step == total {
            log::info!("step {} loss {:.4} grad_norm {:.3}", row.step, row.loss, row.grad_norm);
            log_lines.push(row.to_tsv());
        }
        if ck_every.is_some_and(|c| c > 0 && row.step % c == 0) {
            let ck = t.to_checkpoint()?;
            ck.save(ctx.path(&format!("checkpoints/step_{:06}.ckpt", row.step)))?;
            ck.save(&latest)?;
            write_log(&log_lines)?;
        }
        Ok(())
    })?;
    trainer.to_checkpoint()?.save(&latest)?;
    trainer.model.save(ctx.path("model.ckpt"))?;
    write_log(&log_lines)?;
    let args = [("resume", resume.to_string())];
    ctx.finish("train", &args, &["checkpoint.ckpt", "model.ckpt", "train_log.tsv"])?;
    Ok(TrainSummary {
        steps: trainer.step(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizeSummary {
    pub structures: usize,
    pub utilization: f64,
}

pub fn cmd_tokenize(ctx: &Context, sel: SplitSel) -> Result<TokenizeSummary> {
    let model = ctx.load_model()?;
    let structures = ctx.structures(sel)?;
    let tokens: Vec<TokenSequence> = structures.par_iter().map(|s| model.tokenize(s)).collect::<Result<_>>()?;
    let records: Vec<TokenRecord> = structures
        .iter()
        .zip(&tokens)
        .map(|(s, t)| TokenRecord {
            id: s.id.clone(),
            indices: t.indices.clone(),
        })
        .collect();
    let fsq = model.fsq();
    fs::write(ctx.path("tokens.tsv"), fsq::write_token_file(&records, &fsq))?;
    let utilization = if tokens.is_empty() { 0.0 } else { fsq::utilization(&tokens, &fsq)? };
    log::info!("codebook utilization {}%", fsq::format_utilization(utilization));
    ctx.finish("tokenize", &[("split", sel.name().into())], &["tokens.tsv"])?;
    Ok(TokenizeSummary {
        structures: records.len(),
        utilization,
    })
}

fn read_tokens(ctx: &Context) -> Result<HashMap<String, Vec<usize>>> {
    let (records, _) = fsq::read_token_file(&fs::read_to_string(ctx.require("tokens.tsv", "tokenize")?)?)?;
    Ok(records.into_iter().map(|r| (r.id, r.indices)).collect())
}

/// Decodes `tokens.tsv` back to coordinates with the configured sampler.
pub fn cmd_reconstruct(ctx: &Context, sel: SplitSel, stochastic: bool) -> Result<Vec<RnaStructure>> {
    let model = ctx.load_model()?;
    let tokens = read_tokens(ctx)?;
    let fsq = model.fsq();
    let structures = ctx.structures(sel)?;
    let out: Vec<RnaStructure> = structures
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let idx = tokens
                .get(&s.id)
                .ok_or_else(|| Error::Invalid(format!("no tokens for `{}`", s.id)))?;
            let seq = TokenSequence::from_indices(idx.clone(), &fsq)?;
            let template = model.prepare(s)?;
            let mut rng = stream(ctx.cfg.seed, &[TAG_RECON, i as u64]);
            model.decode(&seq, &template, &ctx.cfg.sampler, stochastic, &mut rng, &mut ())
        })
        .collect::<Result<_>>()?;
    fs::write(ctx.path("reconstructed.jsonl"), write_corpus(&out)?)?;
    fs::write(ctx.path("reconstructed.pdb"), pdb::write_pdb(&out, None))?;
    let args = [("split", sel.name().into()), ("stochastic", stochastic.to_string())];
    ctx.finish("reconstruct", &args, &["reconstructed.jsonl", "reconstructed.pdb"])?;
    Ok(out)
}

/// Pairs predictions with references by id and scores them.
pub fn evaluate_pairs(preds: &[RnaStructure], refs: &[RnaStructure]) -> Result<MetricsReport> {
    let by_id: HashMap<&str, &RnaStructure> = refs.iter().map(|s| (s.id.as_str(), s)).collect();
    let rows = preds
        .par_iter()
        .map(|p| {
            let r = by_id
                .get(p.id.as_str())
                .ok_or_else(|| Error::Invalid(format!("no reference for `{}`", p.id)))?;
            MetricsRow::compute(p, &r.to_atom_set(p.atom_set)?)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::new(rows)
}

/// Scores `reconstructed.jsonl` against the corpus, or `pred` against `refs`
/// (matched by position) when both are given.
pub fn cmd_evaluate(ctx: &Context, sel: SplitSel, external: Option<(&[PathBuf], &[PathBuf])>) -> Result<MetricsReport> {
    let report = match external {
        Some((pred, refs)) => {
            let atom_set = ctx.cfg.model.atom_set;
            let mut p = load_structures(pred, atom_set)?;
            let r = load_structures(refs, atom_set)?;
            if p.len() != r.len() {
                return Err(Error::LengthMismatch(p.len(), r.len()));
            }
            for (a, b) in p.iter_mut().zip(&r) {
                a.id = b.id.clone();
            }
            evaluate_pairs(&p, &r)?
        }
        None => {
            let preds = read_corpus(&fs::read_to_string(ctx.require("reconstructed.jsonl", "reconstruct")?)?)?;
            evaluate_pairs(&preds, &ctx.structures(sel)?)?
        }
    };
    fs::write(ctx.path("metrics.tsv"), report.to_tsv())?;
    fs::write(ctx.path("metrics.json"), report.to_json()?)?;
    ctx.finish("evaluate", &[("split", sel.name().into())], &["metrics.tsv", "metrics.json"])?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeSummary {
    pub ngrams: Vec<analysis::NgramCount>,
    pub consistency: Vec<Option<f64>>,
    pub motif_kl: BTreeMap<MotifClass, f64>,
}

/// N-gram ranking with geometric consistency, motif token divergences and
/// the superposed instances of the top n-gram.
pub fn cmd_analyze(ctx: &Context, sel: SplitSel) -> Result<AnalyzeSummary> {
    let a = &ctx.cfg.analysis;
    let tokens = read_tokens(ctx)?;
    let structures: Vec<RnaStructure> = ctx.structures(sel)?.into_iter().filter(|s| tokens.contains_key(&s.id)).collect();
    if structures.is_empty() {
        return Err(Error::Invalid("no tokenized structures to analyze".into()));
    }
    let seqs: Vec<Vec<usize>> = structures.iter().map(|s| tokens[&s.id].clone()).collect();
    let mut ngrams = analysis::mine_ngrams(&seqs, a.n)?;
    ngrams.truncate(a.top_k);

    let mut consistency = Vec::new();
    let mut table = String::from("rank\tngram\tcount\tmean_rmsd_c4\n");
    for (rank, g) in ngrams.iter().enumerate() {
        let inst = analysis::ngram_instances(g, &seqs, &structures)?;
        let c = if inst.len() >= 2 { analysis::ngram_consistency(&inst).ok().map(|c| c.mean_rmsd) } else { None };
        consistency.push(c);
        let names: Vec<String> = g.ngram.iter().map(|t| t.to_string()).collect();
        let c = c.map_or("NA".to_string(), |v| format!("{v:.4}"));
        table.push_str(&format!("{}\t{}\t{}\t{}\n", rank + 1, names.join("-"), g.count, c));
    }
    fs::write(ctx.path("ngrams.tsv"), table)?;

    let top = analysis::ngram_instances(&ngrams[0], &seqs, &structures)?;
    let reference = top[0].window.c4_trace().0;
    let mut models = Vec::new();
    for i in &top {
        let mut w = i.window.clone();
        if let Ok(al) = metrics::kabsch_align(&w.c4_trace().0, &reference) {
            w.coords = al.apply_all(&w.coords);
            w.coords.iter_mut().zip(&w.mask).filter(|(_, m)| !**m).for_each(|(p, _)| *p = [0.0; 3]);
        }
        models.push(w);
    }
    fs::write(ctx.path("ngram_instances.pdb"), pdb::write_pdb(&models, None))?;

    let dots = match &a.dot_bracket {
        Some(p) => analysis::read_dot_bracket_file(&fs::read_to_string(p)?)?,
        None => BTreeMap::new(),
    };
    let codebook = ctx.load_model()?.fsq().codebook_size();
    let mut by_class: BTreeMap<MotifClass, Vec<usize>> = MotifClass::ALL.iter().map(|c| (*c, Vec::new())).collect();
    for (s, toks) in structures.iter().zip(&seqs) {
        let pairs = match dots.get(&s.id) {
            Some(db) => {
                if db.chars().count() != s.len() {
                    return Err(Error::LengthMismatch(db.chars().count(), s.len()));
                }
                analysis::parse_dot_bracket(db)?
            }
            None => match analysis::heuristic_pairs(s) {
                Ok(p) => p,
                Err(e) => {
                    log::warn!("{}: no base pairs ({e}); all residues background", s.id);
                    Vec::new()
                }
            },
        };
        let ann = analysis::annotate_motifs(s, &pairs)?;
        for (r, c) in analysis::residue_classes(s.len(), &ann).into_iter().enumerate() {
            by_class.get_mut(&c).unwrap().push(toks[r]);
        }
    }
    let source = if a.dot_bracket.is_some() { "dot-bracket" } else { "heuristic C1' pairing" };
    let bg = &by_class[&MotifClass::Background];
    let mut motif_kl = BTreeMap::new();
    let mut motifs = format!("# pairs from {source}\nclass\ttokens\tkl_nats\tjs_nats\n");
    let dists: BTreeMap<MotifClass, Vec<f64>> = by_class
        .iter()
        .map(|(c, t)| Ok((*c, analysis::token_distribution(t, codebook, analysis::LAPLACE_ALPHA)?)))
        .collect::<Result<_>>()?;
    for c in [MotifClass::HL, MotifClass::IL, MotifClass::J3] {
        let toks = &by_class[&c];
        if toks.is_empty() {
            motifs.push_str(&format!("{c}\t0\tNA\tNA\n"));
            continue;
        }
        let kl = analysis::motif_kl(toks, bg, codebook)?;
        let js = analysis::js_divergence(&dists[&c], &dists[&MotifClass::Background])?;
        motif_kl.insert(c, kl);
        motifs.push_str(&format!("{c}\t{}\t{kl:.6}\t{js:.6}\n", toks.len()));
    }
    fs::write(ctx.path("motifs.tsv"), motifs)?;
    let mut js = String::from("class");
    for c in MotifClass::ALL {
        js.push_str(&format!("\t{c}"));
    }
    js.push('\n');
    for a in MotifClass::ALL {
        js.push_str(&a.to_string());
        for b in MotifClass::ALL {
            js.push_str(&format!("\t{:.6}", analysis::js_distance(&dists[&a], &dists[&b])?));
        }
        js.push('\n');
    }
    fs::write(ctx.path("motif_js.tsv"), js)?;
    ctx.finish(
        "analyze",
        &[("split", sel.name().into())],
        &["ngrams.tsv", "motifs.tsv", "motif_js.tsv", "ngram_instances.pdb"],
    )?;
    Ok(AnalyzeSummary {
        ngrams,
        consistency,
        motif_kl,
    })
}

fn invfold_examples(model: &RiboModel, structures: &[RnaStructure]) -> Result<Vec<InvfoldExample>> {
    structures.par_iter().map(|s| InvfoldExample::from_structure(model, s)).collect()
}

/// SHA-256 over the tokenizer parameters, to verify they stay frozen.
pub fn tokenizer_fingerprint(model: &RiboModel) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.tokenizer_params().iter() {
        h.update(name.as_bytes());
        for x in t.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvfoldTrainSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub recovery: Vec<f64>,
}

pub fn cmd_invfold_train(ctx: &Context) -> Result<InvfoldTrainSummary> {
    let tokenizer = ctx.load_model()?;
    let before = tokenizer_fingerprint(&tokenizer);
    let corpus = ctx.structures(SplitSel::Train)?;
    if corpus.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let examples = invfold_examples(&tokenizer, &corpus)?;
    let model = InvfoldModel::new(ctx.cfg.invfold.clone(), tokenizer.fsq().dim(), ctx.cfg.seed)?;
    let mut trainer = InvfoldTrainer::new(model, ctx.cfg.invfold_train.clone(), ctx.cfg.seed)?;
    let every = ctx.cfg.invfold_train.log_every.max(1);
    let total = ctx.cfg.invfold_train.steps;
    let mut log = vec![invfold::InvfoldLogRow::HEADER.to_string()];
    let rows = trainer.run(&examples, total, |_, r| {
        if r.step == 1 || r.step % every == 0 || r.step == total {
            log.push(r.to_tsv());
        }
        Ok(())
    })?;
    if tokenizer_fingerprint(&tokenizer) != before {
        return Err(Error::Invalid("tokenizer parameters changed during inverse folding training".into()));
    }
    trainer.model.save(ctx.path("invfold.ckpt"))?;
    fs::write(ctx.path("invfold_log.tsv"), log.join("\n") + "\n")?;
    let recovery = examples
        .iter()
        .map(|e| trainer.model.teacher_forced_recovery(e))
        .collect::<Result<_>>()?;
    ctx.finish("invfold-train", &[], &["invfold.ckpt", "invfold_log.tsv"])?;
    Ok(InvfoldTrainSummary {
        steps: trainer.step(),
        final_loss: rows.last().map_or(f64::NAN, |r| r.loss),
        recovery,
    })
}

fn load_invfold(ctx: &Context) -> Result<(RiboModel, InvfoldModel)> {
    let tokenizer = ctx.load_model()?;
    let model = InvfoldModel::load(ctx.require("invfold.ckpt", "invfold-train")?)?;
    if model.code_dim != tokenizer.fsq().dim() {
        return Err(Error::Config("inverse folding checkpoint does not match the tokenizer code dimension".into()));
    }
    Ok((tokenizer, model))
}

pub fn cmd_invfold_sample(ctx: &Context, sel: SplitSel) -> Result<Vec<invfold::Design>> {
    let (tokenizer, model) = load_invfold(ctx)?;
    let examples = invfold_examples(&tokenizer, &ctx.structures(sel)?)?;
    let d = &ctx.cfg.design;
    let designs = invfold::design(&model, &examples, d.temperature, d.samples, ctx.cfg.seed ^ TAG_DESIGN)?;
    fs::write(ctx.path("designs.fasta"), invfold::write_fasta(&designs))?;
    ctx.finish("invfold-sample", &[("split", sel.name().into())], &["designs.fasta"])?;
    Ok(designs)
}

pub fn cmd_sweep(ctx: &Context, sel: SplitSel) -> Result<Vec<invfold::SweepRow>> {
    let (tokenizer, model) = load_invfold(ctx)?;
    let examples = invfold_examples(&tokenizer, &ctx.structures(sel)?)?;
    let d = &ctx.cfg.design;
    let rows = invfold::tradeoff_sweep(&model, &examples, &d.sweep_temperatures, d.sweep_samples, ctx.cfg.seed)?;
    fs::write(ctx.path("sweep.tsv"), invfold::format_sweep(&rows))?;
    ctx.finish("sweep", &[("split", sel.name().into())], &["sweep.tsv"])?;
    Ok(rows)
}
