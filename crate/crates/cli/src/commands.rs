use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use xlmp::data::{
    encode_corpus, generate_parallel, generate_synthetic_corpus, load_parallel_tsv, read_corpus_dir, write_corpus,
    write_parallel_tsv, CorpusConfig, EncodedLanguage, Vocabulary,
};
use xlmp::encoder::{EncoderConfig, EncoderModel};
use xlmp::evaluation::{
    best_accuracy, export_prompt_representations, histogram_csv, language_separation_score, layer_sweep,
    permutation_null, retrieval_accuracy, retrieval_weights, sweep_csv, write_text, LabelledSentences,
    PromptSelectionHistogram, RepresentationOptions,
};
use xlmp::finetune::{
    accuracy, encode_sentence_rows, encode_sentence_task, encode_token_rows, encode_token_task, read_conll,
    read_sentence_tsv, FinetuneConfig, FinetuneMode, FinetuneTrainer, TaskData, TaskHead, TaskKind,
};
use xlmp::numerics::GradCheckOptions;
use xlmp::training::{load_checkpoint, run_training, save_checkpoint, Checkpoint, Stage, TrainState, Trainer};

use crate::config::RunConfig;
use crate::{CliError, Command, ModeArg, TaskArg};

type CliResult<T> = Result<T, CliError>;

/// Record of one command's inputs and outputs, written as `manifest.json`.
#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    config_hash: String,
    artifacts: Vec<String>,
}

fn hash_json(v: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

fn write_manifest(out: &Path, command: &str, seed: u64, config: &serde_json::Value, mut artifacts: Vec<String>) -> CliResult<()> {
    artifacts.sort();
    artifacts.dedup();
    let m = Manifest { command, seed, config_hash: hash_json(config), artifacts };
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    write_text(&out.join("manifest.json"), &(text + "\n"))?;
    Ok(())
}

/// Files in `dir`, relative names, manifest excluded.
fn list_artifacts(dir: &Path) -> CliResult<Vec<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| CliError::Runtime(format!("reading {}: {e}", dir.display())))?;
    Ok(rd
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != "manifest.json")
        .collect())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("creating {}: {e}", dir.display())))
}

fn read_to_string(path: &Path, what: &str) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {what} {}: {e}", path.display())))
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn load_ckpt(path: &Path) -> CliResult<Checkpoint> {
    require_file(path, "checkpoint")?;
    Ok(load_checkpoint(path)?)
}

fn ckpt_vocab(ckpt: &Checkpoint, path: &Path) -> CliResult<Vocabulary> {
    ckpt.vocab
        .clone()
        .ok_or_else(|| CliError::Runtime(format!("checkpoint {} carries no vocabulary", path.display())))
}

/// Longest input the model accepts, CLS included.
fn capacity(cfg: &EncoderConfig, prompts: bool) -> usize {
    let lp = if prompts && cfg.has_pool() { cfg.prompt_len } else { 0 };
    cfg.max_seq_len - lp
}

pub fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenCorpus { spec, out, seed } => gen_corpus(&spec, &out, seed),
        Command::Pretrain { config, out, from } => train(&config, &out, from.as_deref(), false),
        Command::Posttrain { config, from, out } => train(&config, &out, Some(&from), true),
        Command::Finetune { task, mode, ckpt, train, test, config, freeze_pool, out } => {
            finetune(task, mode, &ckpt, &train, test.as_deref(), config.as_deref(), freeze_pool, &out)
        }
        Command::EvalRetrieval { ckpt, src, tgt, pairs, layer, sweep, no_prompts, include_prompt_positions, out } => {
            let input = match (src, tgt, pairs) {
                (Some(s), Some(t), None) => PairInput::Files(s, t),
                (None, None, Some(p)) => PairInput::Tsv(p),
                _ => return Err(CliError::Config("give either --src and --tgt, or --pairs".into())),
            };
            eval_retrieval(&ckpt, input, layer, sweep, !no_prompts, include_prompt_positions, &out)
        }
        Command::AnalyzePrompts { ckpt, data, out, per_language, permutations, seed } => {
            analyze_prompts(&ckpt, &data, &out, per_language, permutations, seed)
        }
        Command::GradCheck { preset, fraction, seed, threshold, epsilon, floor } => {
            let d = xlmp::diagnostics::MODEL_GRAD_CHECK;
            let opts = GradCheckOptions {
                fraction,
                seed,
                epsilon: epsilon.unwrap_or(d.epsilon),
                floor: floor.unwrap_or(d.floor),
                ..d
            };
            grad_check(&preset, opts, threshold)
        }
    }
}

fn gen_corpus(spec: &Path, out: &Path, seed: u64) -> CliResult<()> {
    let text = read_to_string(spec, "corpus spec")?;
    let cc: CorpusConfig =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", spec.display())))?;
    let specs = cc.build(seed).map_err(|e| CliError::Config(format!("{}: {e}", spec.display())))?;
    let corpus = generate_synthetic_corpus(&specs, cc.sentences_per_language, seed)?;
    create_dir(out)?;
    let mut artifacts: Vec<String> = Vec::new();
    for p in write_corpus(out, &corpus)? {
        artifacts.push(p.file_name().unwrap_or_default().to_string_lossy().into_owned());
    }
    if cc.parallel_pairs > 0 {
        for tgt in &specs[1..] {
            let pairs = generate_parallel(&specs[0], tgt, cc.parallel_pairs, seed)?;
            let name = format!("{}-{}.tsv", specs[0].id, tgt.id);
            write_parallel_tsv(&out.join(&name), &pairs)?;
            artifacts.push(name);
        }
    }
    log::info!("wrote {} languages to {}", corpus.len(), out.display());
    let echo = serde_json::to_value(&cc).expect("spec serializes");
    write_manifest(out, "gen-corpus", seed, &echo, artifacts)
}

fn train(config: &Path, out: &Path, from: Option<&Path>, post: bool) -> CliResult<()> {
    let mut cfg = RunConfig::load(config)?;
    cfg.validate()?;
    let corpus_dir = cfg
        .data
        .corpus_dir
        .clone()
        .ok_or_else(|| CliError::Config(format!("{}: data.corpus_dir is required", config.display())))?;
    if !corpus_dir.is_dir() {
        return Err(CliError::Config(format!("corpus directory {} does not exist", corpus_dir.display())));
    }
    let text = read_corpus_dir(&corpus_dir)?;

    let ckpt = from.map(load_ckpt).transpose()?;
    let vocab = match &ckpt {
        Some(c) => ckpt_vocab(c, from.unwrap())?,
        None => Vocabulary::from_lines(text.iter().flat_map(|l| l.sentences.iter().map(String::as_str)), cfg.data.min_freq)?,
    };

    let resume_stage = if post { Stage::Posttrain } else { Stage::Pretrain };
    let state = match ckpt {
        None => {
            if cfg.model.vocab_size == 0 {
                cfg.model.vocab_size = vocab.len();
            } else if cfg.model.vocab_size != vocab.len() {
                return Err(CliError::Config(format!(
                    "model.vocab_size is {} but the corpus vocabulary has {} entries",
                    cfg.model.vocab_size,
                    vocab.len()
                )));
            }
            cfg.validate()?;
            TrainState::fresh(EncoderModel::new(cfg.model.clone(), cfg.seed)?)
        }
        Some(c) => {
            let mut effective = cfg.model.clone();
            effective.vocab_size = c.config.vocab_size;
            if effective != c.config {
                log::warn!("model section ignored; using the architecture stored in the checkpoint");
            }
            cfg.model = c.config.clone();
            let model = c.model()?;
            match (c.stage == resume_stage, c.adam) {
                (true, Some(adam)) => {
                    if c.train.as_ref() != Some(&cfg.train) {
                        log::warn!("train settings differ from the checkpoint; the resumed run will not match the original");
                    }
                    log::info!("resuming at step {}", c.step);
                    TrainState { model, adam, step: c.step }
                }
                (true, None) => return Err(CliError::Runtime("checkpoint has no optimizer state to resume from".into())),
                (false, _) if post => TrainState::fresh(model),
                (false, _) => {
                    return Err(CliError::Config(format!(
                        "pretrain --from expects a pre-training checkpoint, got stage {:?}",
                        c.stage
                    )))
                }
            }
        }
    };

    let encoded: Vec<EncodedLanguage> = encode_corpus(&text, &vocab, cfg.max_len().min(capacity(&cfg.model, true)));
    create_dir(out)?;
    write_text(&out.join("config.json"), &(cfg.to_json() + "\n"))?;
    write_text(&out.join("vocab.txt"), &(vocab.tokens().join("\n") + "\n"))?;

    let infonce = post.then_some(cfg.infonce);
    let mut trainer = Trainer::new(state, cfg.train.clone(), infonce, &encoded)?;
    log::info!(
        "{} for {} steps on {} languages, vocabulary {}",
        if post { "post-training" } else { "pre-training" },
        cfg.train.total_steps,
        encoded.len(),
        vocab.len()
    );
    let result = run_training(&mut trainer, out, Some(&vocab));
    let echo = serde_json::to_value(&cfg).expect("config serializes");
    write_manifest(out, if post { "posttrain" } else { "pretrain" }, cfg.seed, &echo, list_artifacts(out)?)?;
    let metrics = result?;
    if let Some(last) = metrics.last() {
        log::info!("finished at step {}: loss {:.4}, masked accuracy {:.3}", last.step, last.loss, last.masked_acc);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn finetune(
    task: TaskArg,
    mode: ModeArg,
    ckpt_path: &Path,
    train_path: &Path,
    test_path: Option<&Path>,
    config: Option<&Path>,
    freeze_pool: bool,
    out: &Path,
) -> CliResult<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let problems = cfg.train.problems();
    if !problems.is_empty() {
        return Err(CliError::Config(format!("invalid configuration:\n  - {}", problems.join("\n  - "))));
    }
    require_file(train_path, "training data")?;
    if let Some(t) = test_path {
        require_file(t, "test data")?;
    }
    let ckpt = load_ckpt(ckpt_path)?;
    let vocab = ckpt_vocab(&ckpt, ckpt_path)?;
    let model = ckpt.model()?;
    let mode = match mode {
        ModeArg::Standard => FinetuneMode::Standard,
        ModeArg::Prompt => FinetuneMode::PromptBased,
    };
    if freeze_pool && !mode.uses_prompts() {
        log::warn!("--freeze-pool has no effect in standard mode");
    }
    let max_len = if cfg.data.max_len > 0 { cfg.data.max_len } else { capacity(&model.config, mode.uses_prompts()) };
    let fcfg = FinetuneConfig { mode, freeze_pool, train: cfg.train.clone() };
    let width = model.config.hidden;

    create_dir(out)?;
    let (ckpt_out, losses, train_acc, test_acc, labels) = match task {
        TaskArg::Token => {
            let (train, labels) = encode_token_task(&read_conll(train_path)?, &vocab, max_len)?;
            let test = test_path.map(|p| encode_token_rows(&read_conll(p)?, &vocab, max_len, &labels)).transpose()?;
            let head = TaskHead::new(TaskKind::Token, labels.len(), width, cfg.seed)?;
            let mut t = FinetuneTrainer::new(model, head, fcfg, TaskData::Token(&train))?;
            let losses = t.run()?;
            let tr = accuracy(&t.model, &t.head, TaskData::Token(&train), mode)?;
            let te = test.as_ref().map(|d| accuracy(&t.model, &t.head, TaskData::Token(d), mode)).transpose()?;
            (t.checkpoint(Some(&vocab), labels.clone()), losses, tr, te, labels)
        }
        TaskArg::Sentence => {
            let (train, labels) = encode_sentence_task(&read_sentence_tsv(train_path)?, &vocab, max_len)?;
            let test =
                test_path.map(|p| encode_sentence_rows(&read_sentence_tsv(p)?, &vocab, max_len, &labels)).transpose()?;
            let head = TaskHead::new(TaskKind::Sentence, labels.len(), width, cfg.seed)?;
            let mut t = FinetuneTrainer::new(model, head, fcfg, TaskData::Sentence(&train))?;
            let losses = t.run()?;
            let tr = accuracy(&t.model, &t.head, TaskData::Sentence(&train), mode)?;
            let te = test.as_ref().map(|d| accuracy(&t.model, &t.head, TaskData::Sentence(d), mode)).transpose()?;
            (t.checkpoint(Some(&vocab), labels.clone()), losses, tr, te, labels)
        }
    };
    save_checkpoint(&ckpt_out, &out.join("finetuned.xlmp"))?;
    let report = json!({
        "task": format!("{task:?}").to_lowercase(),
        "mode": mode,
        "freeze_pool": freeze_pool,
        "labels": labels,
        "steps": losses.len(),
        "final_loss": losses.last(),
        "train_accuracy": train_acc,
        "test_accuracy": test_acc,
        "losses": losses,
    });
    write_text(&out.join("report.json"), &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    println!("train accuracy {train_acc:.4}");
    if let Some(a) = test_acc {
        println!("test accuracy {a:.4}");
    }
    let echo = json!({
        "run": cfg,
        "task": report["task"],
        "mode": mode,
        "freeze_pool": freeze_pool,
        "ckpt": ckpt_path,
        "train": train_path,
        "test": test_path,
    });
    write_manifest(out, "finetune", cfg.seed, &echo, list_artifacts(out)?)
}

enum PairInput {
    Files(PathBuf, PathBuf),
    Tsv(PathBuf),
}

fn read_lines(path: &Path) -> CliResult<Vec<String>> {
    require_file(path, "input")?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("reading {}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn eval_retrieval(
    ckpt_path: &Path,
    input: PairInput,
    layer: Option<usize>,
    sweep: bool,
    prompts: bool,
    include_prompt_positions: bool,
    out: &Path,
) -> CliResult<()> {
    let (src, tgt) = match &input {
        PairInput::Files(s, t) => {
            let (a, b) = (read_lines(s)?, read_lines(t)?);
            if a.len() != b.len() {
                return Err(CliError::Config(format!(
                    "{} has {} lines but {} has {}",
                    s.display(),
                    a.len(),
                    t.display(),
                    b.len()
                )));
            }
            (a, b)
        }
        PairInput::Tsv(p) => {
            require_file(p, "pairs file")?;
            load_parallel_tsv(p)?.into_iter().map(|pp| (pp.src, pp.tgt)).unzip()
        }
    };
    let ckpt = load_ckpt(ckpt_path)?;
    let vocab = ckpt_vocab(&ckpt, ckpt_path)?;
    let model = ckpt.model()?;
    let layers = model.config.num_layers;
    if let Some(l) = layer {
        if l > layers {
            return Err(CliError::Config(format!("--layer {l} exceeds the model's {layers} layers")));
        }
    }
    if prompts && !model.config.has_pool() {
        log::info!("model has no prompt pool; encoding without prompts");
    }
    let prompts = prompts && model.config.has_pool();
    let max_len = capacity(&model.config, prompts);
    let enc = |v: &[String]| v.iter().map(|s| vocab.encode(s, max_len)).collect::<Vec<_>>();
    let (s, t) = (enc(&src), enc(&tgt));

    create_dir(out)?;
    let reports = if sweep {
        let r = layer_sweep(&s, &t, &model, prompts, include_prompt_positions)?;
        write_text(&out.join("sweep.csv"), &sweep_csv(&r))?;
        println!("best accuracy {:.4}", best_accuracy(&r));
        r
    } else {
        let opts = RepresentationOptions { layer: layer.unwrap_or(layers), prompts, include_prompt_positions };
        retrieval_accuracy(&s, &t, &model, &opts)?.to_vec()
    };
    for r in &reports {
        println!("layer {} {} accuracy {:.4}", r.layer, r.direction.as_str(), r.accuracy);
    }
    let text = serde_json::to_string_pretty(&reports).expect("reports serialize");
    write_text(&out.join("retrieval.json"), &(text + "\n"))?;
    let echo = json!({
        "ckpt": ckpt_path,
        "input": match &input { PairInput::Files(a, b) => json!([a, b]), PairInput::Tsv(p) => json!(p) },
        "layer": layer,
        "sweep": sweep,
        "prompts": prompts,
        "include_prompt_positions": include_prompt_positions,
    });
    write_manifest(out, "eval-retrieval", 0, &echo, list_artifacts(out)?)
}

fn analyze_prompts(ckpt_path: &Path, data: &Path, out: &Path, per_language: usize, permutations: usize, seed: u64) -> CliResult<()> {
    if !data.is_dir() {
        return Err(CliError::Config(format!("data directory {} does not exist", data.display())));
    }
    let ckpt = load_ckpt(ckpt_path)?;
    let vocab = ckpt_vocab(&ckpt, ckpt_path)?;
    let model = ckpt.model()?;
    if !model.config.has_pool() {
        return Err(CliError::Runtime("model has no prompt pool to analyze".into()));
    }
    let text = read_corpus_dir(data)?;
    let encoded = encode_corpus(&text, &vocab, capacity(&model.config, true));

    create_dir(out)?;
    let mut hists = Vec::new();
    let mut groups = Vec::new();
    let mut export = Vec::new();
    for lang in &encoded {
        let alphas = retrieval_weights(&model, &lang.sentences)?;
        hists.push((lang.id.clone(), PromptSelectionHistogram::from_weights(&alphas, model.config.pool_size)));
        groups.push(alphas);
        let n = per_language.min(lang.sentences.len());
        export.push(LabelledSentences { lang: lang.id.clone(), ids: (0..n).collect(), sentences: lang.sentences[..n].to_vec() });
    }
    write_text(&out.join("histogram.csv"), &histogram_csv(&hists))?;
    let rows = export_prompt_representations(&model, &export, &out.join("prompts.csv"))?;
    let score = language_separation_score(&groups)?;
    let null = permutation_null(&groups, permutations, seed)?;
    println!("separation ratio {:.4} (null {:.4}); exported {rows} prompt rows", score.ratio, null.ratio);
    let summary = json!({
        "languages": hists.iter().map(|(l, h)| json!({"lang": l, "instances": h.instances(), "counts": h.counts, "mean_alpha": h.mean_alpha})).collect::<Vec<_>>(),
        "separation": score,
        "null": null,
        "permutations": permutations,
    });
    write_text(&out.join("separation.json"), &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"))?;
    let echo = json!({ "ckpt": ckpt_path, "data": data, "per_language": per_language, "permutations": permutations });
    write_manifest(out, "analyze-prompts", seed, &echo, list_artifacts(out)?)
}

/// Vocabulary size of the model built for gradient checks.
const GRAD_CHECK_VOCAB: usize = 40;

fn grad_check(preset: &str, opts: GradCheckOptions, threshold: f64) -> CliResult<()> {
    if !(opts.fraction > 0.0 && opts.fraction <= 1.0) {
        return Err(CliError::Config(format!("--fraction must lie in (0, 1], got {}", opts.fraction)));
    }
    if !(opts.epsilon > 0.0 && opts.floor > 0.0) {
        return Err(CliError::Config("--epsilon and --floor must be positive".into()));
    }
    let config = EncoderConfig::preset(preset, GRAD_CHECK_VOCAB)?;
    let start = std::time::Instant::now();
    let report = xlmp::diagnostics::model_grad_check(&config, &opts)?;
    let (name, idx) = report.worst.clone().unwrap_or_default();
    println!(
        "max relative error {:.3e} at {name}[{idx}] (analytic {:.6e}, numeric {:.6e}); {} probes in {:.1}s",
        report.max_relative_error,
        report.worst_analytic,
        report.worst_numeric,
        report.checked,
        start.elapsed().as_secs_f64()
    );
    if report.max_relative_error < threshold {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: {:.3e} is not below {threshold:.0e}",
            report.max_relative_error
        )))
    }
}
