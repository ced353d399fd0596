//! The `pretrain → gen-data → train → eval` pipeline and sweeps.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decode::{annotate_provenance, PROVENANCE_THRESHOLD};
use crate::error::{Error, Result};
use crate::metrics::{
    corpus_bleu, delex_bleu, rouge, slot_error_rate, tokenize, RewardKind, RougeVariant,
};
use crate::nets::ParamStore;
use crate::policy::PolicyKind;
use crate::rl::{
    evaluate, init_state, pretrain, run_until, CurveRecord, Method, Rewarder, TrainData, TrainState,
};
use crate::tasks::{
    gen_base_corpus, gen_fewshot_task, read_dataset, slot_inventory, write_dataset, Splits,
    TaskKind,
};

use super::checkpoint::{file_hash, Checkpoint};
use super::config::ExperimentConfig;
use super::report::{
    aggregate, summary_table, write_file, RunReport, SeedReport, REPORT_FORMAT, REPORT_VERSION,
};

pub const CURVE_FORMAT: &str = "stg-curve";
pub const GENERATIONS_FORMAT: &str = "stg-generations";
pub const ARTIFACT_VERSION: u32 = 1;

/// First line of every JSON-lines artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
}

fn missing(what: &str, path: &Path, hint: &str) -> Error {
    Error::Config(format!("missing {what} {}; {hint}", path.display()))
}

/// Pretrains the base LM and writes the base checkpoint.
pub fn pretrain_base(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let corpus = gen_base_corpus(&cfg.task, cfg.pretrain.seed)?;
    let store = pretrain(&cfg.pretrain, &corpus)?;
    let path = cfg.base_checkpoint();
    Checkpoint::base(cfg.base_hash(), store).save(&path)?;
    cfg.persist(&cfg.output_dir.join("base.config.toml"))?;
    Ok(path)
}

/// Pretrains only if no base checkpoint exists; an existing one must match.
pub fn ensure_base(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let path = cfg.base_checkpoint();
    if path.exists() {
        load_base(cfg)?;
        Ok(path)
    } else {
        pretrain_base(cfg)
    }
}

/// Loads the frozen base LM and the hash of its file.
pub fn load_base(cfg: &ExperimentConfig) -> Result<(ParamStore, String)> {
    let path = cfg.base_checkpoint();
    if !path.exists() {
        return Err(missing(
            "base checkpoint",
            &path,
            "run `stg pretrain` first",
        ));
    }
    let ck = Checkpoint::load(&path)?;
    ck.verify(cfg.pretrain.dims, &cfg.base_hash())?;
    Ok((ck.store, file_hash(&path)?))
}

/// Writes the train, valid and test files of every seed.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    cfg.seeds.iter().map(|&s| write_splits(cfg, s)).collect()
}

fn write_splits(cfg: &ExperimentConfig, seed: u64) -> Result<PathBuf> {
    let dir = cfg.data_dir(seed);
    std::fs::create_dir_all(&dir)?;
    let splits = gen_fewshot_task(&cfg.task, seed)?;
    let vocab = cfg.task.vocab()?;
    write_dataset(&dir.join("train.jsonl"), &vocab, &splits.train)?;
    write_dataset(&dir.join("valid.jsonl"), &vocab, &splits.valid)?;
    write_dataset(&dir.join("test.jsonl"), &vocab, &splits.test)?;
    Ok(dir)
}

/// Reads a seed's splits, materializing them first when absent.
pub fn load_splits(cfg: &ExperimentConfig, seed: u64) -> Result<Splits> {
    let dir = cfg.data_dir(seed);
    if !dir.join("test.jsonl").exists() {
        write_splits(cfg, seed)?;
    }
    let vocab = cfg.task.vocab()?;
    Ok(Splits {
        train: read_dataset(&dir.join("train.jsonl"), &vocab)?,
        valid: read_dataset(&dir.join("valid.jsonl"), &vocab)?,
        test: read_dataset(&dir.join("test.jsonl"), &vocab)?,
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    /// Continue from an existing run checkpoint.
    pub resume: bool,
    /// Stop after this many updates (the checkpoint can be resumed).
    pub stop_after: Option<usize>,
}

/// Trains one seed and writes its checkpoint, curve and resolved config.
pub fn train_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    base: &ParamStore,
    opts: TrainOptions,
) -> Result<TrainState> {
    let tc = cfg.seed_train(seed);
    let hash = cfg.run_hash(seed);
    let dir = cfg.run_dir(seed);
    let ckpt = dir.join("model.ckpt");
    let mut state = if opts.resume && ckpt.exists() {
        let ck = Checkpoint::load(&ckpt)?;
        ck.verify(cfg.pretrain.dims, &hash)?;
        ck.into_state()?
    } else {
        init_state(&tc, base)?
    };
    let splits = load_splits(cfg, seed)?;
    let vocab = cfg.task.vocab()?;
    let data = TrainData {
        train: &splits.train,
        valid: &splits.valid,
        vocab: &vocab,
    };
    run_until(&mut state, &tc, data, opts.stop_after.unwrap_or(usize::MAX))?;
    Checkpoint::from_state(hash.clone(), &state).save(&ckpt)?;
    write_curve(&dir.join("curve.jsonl"), &hash, &state.curve)?;
    cfg.persist(&dir.join("config.toml"))?;
    Ok(state)
}

/// Trains every configured seed.
pub fn train_all(cfg: &ExperimentConfig, opts: TrainOptions) -> Result<Vec<TrainState>> {
    cfg.validate()?;
    let (base, _) = load_base(cfg)?;
    cfg.seeds
        .iter()
        .map(|&s| train_seed(cfg, s, &base, opts))
        .collect()
}

pub fn write_curve(path: &Path, config_hash: &str, curve: &[CurveRecord]) -> Result<()> {
    write_jsonl(path, CURVE_FORMAT, config_hash, curve)
}

pub fn read_curve(path: &Path) -> Result<(ArtifactHeader, Vec<CurveRecord>)> {
    read_jsonl(path, CURVE_FORMAT)
}

fn write_jsonl<T: Serialize>(
    path: &Path,
    format: &str,
    config_hash: &str,
    rows: &[T],
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = File::create(path).map_err(|source| Error::File {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    let header = ArtifactHeader {
        format: format.to_string(),
        version: ARTIFACT_VERSION,
        config_hash: config_hash.to_string(),
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for r in rows {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(
    path: &Path,
    format: &str,
) -> Result<(ArtifactHeader, Vec<T>)> {
    let file = File::open(path).map_err(|source| Error::File {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = BufReader::new(file).lines();
    let header: ArtifactHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l?)?,
        None => return Err(Error::Config(format!("{}: empty file", path.display()))),
    };
    if header.format != format || header.version != ARTIFACT_VERSION {
        return Err(Error::Config(format!(
            "{}: expected {format} v{ARTIFACT_VERSION}, found {} v{}",
            path.display(),
            header.format,
            header.version
        )));
    }
    let mut rows = vec![];
    for l in lines {
        let l = l?;
        if !l.trim().is_empty() {
            rows.push(serde_json::from_str(&l)?);
        }
    }
    Ok((header, rows))
}

/// One decoded test example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub context: String,
    pub reference: String,
    pub output: String,
    /// Output with adapter-sourced tokens in brackets.
    pub annotated: String,
    pub score: f64,
    pub select_probs: Vec<f64>,
}

fn eval_seed_value(seed: u64) -> u64 {
    seed ^ 0x7e57_0000
}

/// Store used to evaluate `cfg` for `seed`: the finished run checkpoint, or
/// the base LM for `plm` when no run exists.
pub fn eval_store(cfg: &ExperimentConfig, seed: u64, base: &ParamStore) -> Result<ParamStore> {
    let tc = cfg.seed_train(seed);
    let ckpt = cfg.run_dir(seed).join("model.ckpt");
    if !ckpt.exists() {
        if cfg.train.method == Method::Plm {
            return Ok(init_state(&tc, base)?.store);
        }
        return Err(missing(
            "run checkpoint",
            &ckpt,
            "run `stg train` with the same config first",
        ));
    }
    let ck = Checkpoint::load(&ckpt)?;
    ck.verify(cfg.pretrain.dims, &cfg.run_hash(seed))?;
    let done = ck.progress.as_ref().map_or(0, |p| p.update);
    if done < tc.total_updates() {
        return Err(Error::Config(format!(
            "{}: run stopped at update {done} of {}; rerun `stg train --resume` to finish it",
            ckpt.display(),
            tc.total_updates()
        )));
    }
    Ok(ck.store)
}

/// Evaluates one seed on its test split and writes the generation dump.
pub fn eval_seed(cfg: &ExperimentConfig, seed: u64, base: &ParamStore) -> Result<SeedReport> {
    let store = eval_store(cfg, seed, base)?;
    let kind = cfg.train.method.eval_kind(cfg.train.c)?;
    let splits = load_splits(cfg, seed)?;
    let vocab = cfg.task.vocab()?;
    let rewarder = Rewarder {
        vocab: &vocab,
        kind: cfg.train.reward,
    };
    let test = &splits.test;
    let es = eval_seed_value(seed);
    let s = evaluate(
        &store,
        kind,
        test,
        cfg.eval.decode,
        cfg.eval.max_len,
        rewarder,
        es,
    )?;
    let plm = evaluate(
        &store,
        PolicyKind::Plm,
        test,
        cfg.eval.decode,
        cfg.eval.max_len,
        rewarder,
        es,
    )?;

    let mut pairs = Vec::with_capacity(test.len());
    let mut rouge_sum = 0.0;
    let (mut delex_sum, mut err_sum) = (0.0, 0.0);
    let inventory: Vec<Vec<String>> = ["name", "price"]
        .iter()
        .flat_map(|s| slot_inventory(s).iter().map(|v| tokenize(v)))
        .collect();
    let mut gens = Vec::with_capacity(test.len());
    for ((ex, out), &score) in test.iter().zip(&s.outputs).zip(&s.scores) {
        let hyp = vocab.tokens(out.output())?;
        let reference = vocab.tokens(&ex.target)?;
        rouge_sum += rouge(&hyp, &reference, RougeVariant::L);
        if cfg.task.kind == TaskKind::D2t {
            let slots = rewarder.slot_values(ex)?;
            delex_sum += delex_bleu(&hyp, &reference, &slots)?;
            let required: Vec<Vec<String>> = slots.into_iter().map(|(_, v)| v).collect();
            err_sum += slot_error_rate(&hyp, &required, &inventory);
        }
        gens.push(Generation {
            context: vocab.decode(&ex.context)?,
            reference: reference.join(" "),
            output: hyp.join(" "),
            annotated: annotate_provenance(out, &vocab, PROVENANCE_THRESHOLD)?.rendered,
            score,
            select_probs: out.select_probs.clone(),
        });
        pairs.push((hyp, vec![reference]));
    }
    let n = test.len().max(1) as f64;
    let mut metrics = BTreeMap::from([
        ("score".to_string(), s.score),
        ("bleu".to_string(), corpus_bleu(&pairs, 4)?),
        ("rouge_l".to_string(), rouge_sum / n),
        ("ppl".to_string(), s.ppl),
        ("mean_select".to_string(), s.mean_select),
        ("t_plm".to_string(), s.t_plm),
    ]);
    if cfg.task.kind == TaskKind::D2t {
        metrics.insert("delex_bleu".into(), delex_sum / n);
        metrics.insert("err".into(), err_sum / n);
    }
    let rel = cfg.run_rel(seed);
    write_jsonl(
        &cfg.output_dir.join(&rel).join("generations.jsonl"),
        GENERATIONS_FORMAT,
        &cfg.run_hash(seed),
        &gens,
    )?;
    let curve = rel.join("curve.jsonl");
    Ok(SeedReport {
        seed,
        metrics,
        plm_score: plm.score,
        selector_precision: s.selector.precision,
        selector_recall: s.selector.recall,
        curve: cfg
            .output_dir
            .join(&curve)
            .exists()
            .then(|| portable(&curve)),
        generations: portable(&rel.join("generations.jsonl")),
    })
}

fn portable(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Evaluates every seed and writes the report as JSON and as a table.
pub fn eval_all(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let (base, base_hash) = load_base(cfg)?;
    let seeds = cfg
        .seeds
        .iter()
        .map(|&s| eval_seed(cfg, s, &base))
        .collect::<Result<Vec<_>>>()?;
    let (mean, std) = aggregate(&seeds);
    let plm_mean = seeds.iter().map(|s| s.plm_score).sum::<f64>() / seeds.len() as f64;
    let report = RunReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        label: cfg.label(),
        method: cfg.train.method,
        c: cfg.train.c,
        n_train: cfg.task.n_train,
        decode: cfg.eval.decode.to_string(),
        config_hash: cfg.config_hash(),
        base_checkpoint: base_hash,
        gain_vs_plm: mean.get("score").copied().unwrap_or(0.0) - plm_mean,
        seeds,
        mean,
        std,
        plm_mean,
    };
    let stem = cfg.output_dir.join(cfg.report_rel());
    report.write(&stem)?;
    cfg.persist(&stem.with_extension("config.toml"))?;
    Ok(report)
}

/// `pretrain` (if needed) → `gen-data` → `train` → `eval`.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    ensure_base(cfg)?;
    gen_data(cfg)?;
    train_all(cfg, TrainOptions::default())?;
    eval_all(cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    /// Every `c` of the grid as `fixed-c`, plus dynamic STG.
    FixedC,
    /// The configured method at every few-shot size.
    FewShot,
}

/// Runs a sweep and writes a summary next to the per-run reports.
pub fn sweep(cfg: &ExperimentConfig, kind: SweepKind) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    ensure_base(cfg)?;
    let variants: Vec<ExperimentConfig> = match kind {
        SweepKind::FixedC => {
            let mut v: Vec<_> = cfg
                .sweep
                .c_grid
                .iter()
                .map(|&c| {
                    let mut k = cfg.clone();
                    k.train.method = Method::FixedC;
                    k.train.c = Some(c);
                    k
                })
                .collect();
            let mut dynamic = cfg.clone();
            dynamic.train.method = Method::Stg;
            dynamic.train.c = None;
            v.push(dynamic);
            v
        }
        SweepKind::FewShot => cfg
            .sweep
            .n_train
            .iter()
            .map(|&n| {
                let mut k = cfg.clone();
                k.task.n_train = n;
                k
            })
            .collect(),
    };
    let mut reports = vec![];
    for k in &variants {
        train_all(k, TrainOptions::default())?;
        reports.push(eval_all(k)?);
    }
    let name = match kind {
        SweepKind::FixedC => format!("sweep-c-n{}", cfg.task.n_train),
        SweepKind::FewShot => format!("sweep-n-{}", cfg.label()),
    };
    let stem = cfg.output_dir.join("reports").join(name);
    write_file(&stem.with_extension("txt"), &summary_table(&reports))?;
    write_file(
        &stem.with_extension("json"),
        &(serde_json::to_string_pretty(&reports)? + "\n"),
    )?;
    Ok(reports)
}

/// Renders the curves of every seed into one tab-separated file.
pub fn render_curves(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let mut out = format!(
        "# {CURVE_FORMAT} v{ARTIFACT_VERSION} config {}\n",
        cfg.config_hash()
    );
    out.push_str("seed\tstep\tphase\ttrain_ppl\tvalid_score\tmean_select\tt_plm\ttrain_reward\n");
    for &seed in &cfg.seeds {
        let path = cfg.run_dir(seed).join("curve.jsonl");
        if !path.exists() {
            return Err(missing("curve file", &path, "run `stg train` first"));
        }
        let (header, rows) = read_curve(&path)?;
        if header.config_hash != cfg.run_hash(seed) {
            return Err(Error::Config(format!(
                "{}: written by a different config",
                path.display()
            )));
        }
        for r in rows {
            out.push_str(&format!(
                "{seed}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.step,
                r.phase,
                r.train_ppl,
                r.valid_score,
                r.mean_select,
                r.t_plm,
                r.train_reward.map_or_else(String::new, |v| v.to_string())
            ));
        }
    }
    let path =
        cfg.output_dir
            .join("curves")
            .join(format!("n{}-{}.tsv", cfg.task.n_train, cfg.label()));
    std::fs::create_dir_all(path.parent().expect("has parent"))?;
    write_file(&path, &out)?;
    Ok(path)
}

/// Scores hypothesis lines against reference lines (whitespace tokens).
pub fn score_lines(hyps: &[String], refs: &[String]) -> Result<BTreeMap<String, f64>> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::InvalidArgument("nothing to score".into()));
    }
    let n = hyps.len() as f64;
    let mut pairs = vec![];
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (tokenize(h), tokenize(r));
        for (name, v) in [
            ("rouge_1", rouge(&h, &r, RougeVariant::One)),
            ("rouge_2", rouge(&h, &r, RougeVariant::Two)),
            ("rouge_l", rouge(&h, &r, RougeVariant::L)),
            (
                "qa",
                crate::metrics::task_reward(RewardKind::Qa, &h, &r, &[])?,
            ),
        ] {
            *sums.entry(name.to_string()).or_default() += v / n;
        }
        pairs.push((h, vec![r]));
    }
    sums.insert("bleu".into(), corpus_bleu(&pairs, 4)?);
    Ok(sums)
}
