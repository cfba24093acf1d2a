use std::collections::HashSet;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use nucdistill::dataset::{CorpusSpec, TokenDataset};
use nucdistill::genbank::{self, Category, CategoryTargets, GenBankRecord, IngestStats};
use nucdistill::metrics::{entropy_profile, pca_components, shifted_mean, Matrix, PCA_THRESHOLDS};
use nucdistill::par::Execution;
use nucdistill::rng::derive_seed;
use nucdistill::student::{load_checkpoint, num_params, save_checkpoint, StudentConfig, StudentParams};
use nucdistill::teacher::{self, FileTeacher, LogitSpec, Teacher, TeacherDump, TeacherKind, TeacherSpec, LOGIT_CLASSES};
use nucdistill::tensor::Activation;
use nucdistill::tokenizer::{encode, pad_or_truncate};
use nucdistill::trainer::{self, TrainConfig, TrainMode};
use nucdistill::{report, Error};

#[derive(Parser, Debug)]
#[command(
    name = "nucdistill",
    version,
    about = "Teacher/student embedding distillation for nucleotide sequences"
)]
struct Cli {
    /// Base seed; overrides the seed in --config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for outputs and the run manifest.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Run batch work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse GenBank flat files, subsample by category and write a shard.
    Ingest {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Percentages: other vertebrates, mammals, invertebrates, viruses[, other].
        #[arg(long, value_delimiter = ',', default_value = "43.6,28.3,26.4,1.6")]
        targets: Vec<f64>,
        #[arg(long, default_value_t = 1000)]
        total: u64,
        /// Treat inputs as gzip even without a .gz suffix.
        #[arg(long)]
        gzip: bool,
        /// Label all records with this category (RefSeq directory name or category).
        #[arg(long)]
        category: Option<String>,
        /// Output directory (defaults to --out-dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tokenize shards, or generate a synthetic corpus, into a token file.
    Tokenize {
        #[arg(long, num_args = 1.., conflicts_with = "synthetic")]
        shards: Vec<PathBuf>,
        /// Number of synthetic sequences to generate instead of reading shards.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long)]
        context_len: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic teacher targets for a token file as an embedding dump.
    Teacher {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long, value_enum)]
        logits: Option<LogitPreset>,
        #[arg(long, value_delimiter = ',')]
        layer_dims: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student against a synthetic or file-backed teacher.
    Train {
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        teacher_dump: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Evaluate a checkpoint on a token file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        teacher_dump: Option<PathBuf>,
    },
    /// Components needed per explained-variance threshold for one dump layer.
    Pca {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
    },
    /// Per-position entropy of the logits stored in a dump.
    Entropy {
        #[arg(long)]
        dump: PathBuf,
        /// Token file supplying masks; without it every position counts.
        #[arg(long)]
        tokens: Option<PathBuf>,
        /// Sequences summarised.
        #[arg(long, default_value_t = trainer::ENTROPY_SEQUENCES)]
        sequences: usize,
    },
    /// Write figure CSVs from a run directory's metrics log.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Desk,
    NormLike,
    RankOne,
    Block12Like,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LogitPreset {
    Uniform,
    Mild,
    HighNoise,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Embedding,
    Logit,
}

/// Student backbone settings; projection dims come from the teacher.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct StudentArch {
    d_model: usize,
    n_blocks: usize,
    taps: Vec<usize>,
    activation: Activation,
}

impl Default for StudentArch {
    fn default() -> Self {
        let d = StudentConfig::desk(vec![64, 64]);
        Self {
            d_model: d.d_model,
            n_blocks: d.n_blocks,
            taps: d.taps,
            activation: d.activation,
        }
    }
}

/// Everything a run needs; written back out as the manifest's `config`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    seed: u64,
    train: TrainConfig,
    student: StudentArch,
    teacher: TeacherSpec,
    corpus: CorpusSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: TrainConfig::desk(),
            student: StudentArch::default(),
            teacher: TeacherSpec::desk(),
            corpus: CorpusSpec {
                count: 4096,
                ..CorpusSpec::default()
            },
        }
    }
}

impl RunConfig {
    fn student_config(&self) -> StudentConfig {
        StudentConfig {
            d_model: self.student.d_model,
            n_blocks: self.student.n_blocks,
            taps: self.student.taps.clone(),
            activation: self.student.activation,
            dropout: self.train.dropout,
            proj_dims: self.teacher.layer_dims.clone(),
            logit_classes: (self.train.mode == TrainMode::Logit).then_some(LOGIT_CLASSES),
            ..StudentConfig::desk(Vec::new())
        }
    }
}

struct Ctx {
    config: RunConfig,
    out_dir: PathBuf,
    exec: Execution,
    argv: Vec<String>,
}

impl Ctx {
    fn manifest(&self, dir: &Path, subcommand: &str, extra: Value) -> anyhow::Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let m = json!({
            "tool": "nucdistill",
            "version": env!("CARGO_PKG_VERSION"),
            "subcommand": subcommand,
            "argv": self.argv,
            "seed": self.config.seed,
            "parallel": self.exec.is_parallel(),
            "config": self.config,
            "outputs": extra,
        });
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&m)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::IoAt {
                path: p.to_path_buf(),
                source: e,
            })?;
            let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            Ok(cfg)
        }
    }
}

fn is_gzip(path: &Path, force: bool) -> bool {
    force || path.extension().is_some_and(|e| e == "gz")
}

fn parse_file(path: &Path, gzip: bool, category: Option<Category>) -> nucdistill::Result<(Vec<GenBankRecord>, IngestStats)> {
    let file = File::open(path).map_err(|e| Error::IoAt {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut reader = genbank::parse_gbff(BufReader::new(file), gzip).with_category(category);
    let mut records = Vec::new();
    for r in reader.by_ref() {
        records.push(r?);
    }
    Ok((records, reader.stats().clone()))
}

fn stats_json(s: &IngestStats) -> Value {
    let per: serde_json::Map<String, Value> = Category::ALL
        .iter()
        .map(|c| (c.name().to_string(), json!(s.per_category.get(c).copied().unwrap_or(0))))
        .collect();
    json!({
        "records_seen": s.records_seen,
        "records_kept": s.records_kept,
        "parse_errors": s.parse_errors,
        "per_category": per,
    })
}

fn cmd_ingest(
    ctx: &Ctx,
    inputs: &[PathBuf],
    targets: &[f64],
    total: u64,
    gzip: bool,
    category: Option<&str>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let targets = CategoryTargets::from_percentages(targets)?;
    let category = match category {
        Some(c) => Some(Category::parse(c).ok_or_else(|| Error::Config(format!("unknown category {c}")))?),
        None => None,
    };
    let out = out.unwrap_or(&ctx.out_dir);
    let parsed = nucdistill::par::map_slice(ctx.exec, inputs, |p| parse_file(p, is_gzip(p, gzip), category));
    let mut parse_stats = IngestStats::default();
    let mut all = Vec::new();
    for r in parsed {
        let (recs, s) = r?;
        parse_stats.merge(&s);
        all.extend(recs);
    }
    let (selected, mut stats) = genbank::subsample(all, &targets, total, ctx.config.seed)?;
    let mut seen = HashSet::new();
    let before = selected.len();
    let shard: Vec<_> = selected
        .iter()
        .filter(|r| seen.insert(r.accession.clone()))
        .map(GenBankRecord::to_shard_record)
        .collect();
    let duplicates = before - shard.len();
    if duplicates > 0 {
        stats = IngestStats {
            records_seen: stats.records_seen,
            parse_errors: 0,
            ..IngestStats::default()
        };
        for r in &shard {
            *stats.per_category.entry(r.category).or_default() += 1;
            stats.records_kept += 1;
        }
    }
    stats.parse_errors = parse_stats.parse_errors;
    stats.records_seen = parse_stats.records_seen;
    if shard.is_empty() {
        bail!(Error::Domain("no records to write".into()));
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let shard_path = out.join("shard_000.mrnashrd");
    genbank::write_shard(&shard, &shard_path)?;
    let mut report = stats_json(&stats);
    report["duplicates_dropped"] = json!(duplicates);
    report["shard"] = json!(shard_path);
    println!("{}", serde_json::to_string(&report)?);
    ctx.manifest(out, "ingest", report)?;
    Ok(())
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn cmd_tokenize(ctx: &Ctx, shards: &[PathBuf], synthetic: Option<usize>, context_len: Option<usize>, out: &Path) -> anyhow::Result<()> {
    let l = context_len.unwrap_or(ctx.config.train.context_len);
    let ds = match synthetic {
        Some(n) => {
            let spec = CorpusSpec {
                count: n,
                ..ctx.config.corpus
            };
            spec.dataset(derive_seed(ctx.config.seed, &[1]), l)?
        }
        None => {
            if shards.is_empty() {
                bail!(Error::Usage("tokenize needs --shards or --synthetic".into()));
            }
            let mut seqs = Vec::new();
            for s in shards {
                for r in genbank::read_shard(s)? {
                    seqs.push(pad_or_truncate(&encode(&r.sequence)?, l));
                }
            }
            TokenDataset::new(l, seqs)?
        }
    };
    ensure_parent(out)?;
    ds.save(out)?;
    let info = json!({"tokens": out, "sequences": ds.len(), "context_len": l});
    println!("{}", serde_json::to_string(&info)?);
    ctx.manifest(&ctx.out_dir, "tokenize", info)?;
    Ok(())
}

fn teacher_spec(ctx: &Ctx, preset: Option<Preset>, logits: Option<LogitPreset>, dims: Option<Vec<usize>>) -> TeacherSpec {
    let base = &ctx.config.teacher;
    let dims = dims.unwrap_or_else(|| base.layer_dims.clone());
    let mut spec = match preset {
        None => TeacherSpec {
            layer_dims: dims.clone(),
            ..base.clone()
        },
        Some(Preset::Desk) | Some(Preset::NormLike) => TeacherSpec::norm_like(dims.clone()),
        Some(Preset::RankOne) => TeacherSpec::rank_one(dims.clone()),
        Some(Preset::Block12Like) => TeacherSpec::block12_like(dims.clone()),
    };
    if preset.is_some() {
        spec.synthetic.seed = base.synthetic.seed;
    }
    let n = spec.layer_dims.len();
    spec.synthetic
        .effective_rank
        .resize(n, *spec.synthetic.effective_rank.last().unwrap_or(&1));
    match logits {
        Some(LogitPreset::Uniform) => spec.with_logits(LogitSpec::uniform()),
        Some(LogitPreset::Mild) => spec.with_logits(LogitSpec::mild()),
        Some(LogitPreset::HighNoise) => spec.with_logits(LogitSpec::high_noise()),
        None => spec,
    }
}

fn cmd_teacher(ctx: &Ctx, tokens: &Path, spec: TeacherSpec, out: &Path) -> anyhow::Result<()> {
    let ds = TokenDataset::load(tokens)?;
    let t = teacher::SyntheticTeacher::new(&spec)?;
    let outputs = teacher::precompute(&t, ds.sequences(), ctx.exec)?;
    let dump = TeacherDump {
        layer_dims: spec.layer_dims.clone(),
        logit_shape: t.logit_classes().map(|c| (ds.context_len(), c)),
        outputs,
    };
    ensure_parent(out)?;
    teacher::write_dump(out, &dump)?;
    let info = json!({"dump": out, "sequences": ds.len(), "layer_dims": spec.layer_dims, "teacher": spec});
    println!("{}", serde_json::to_string(&json!({"dump": out, "sequences": ds.len()}))?);
    ctx.manifest(&ctx.out_dir, "teacher", info)?;
    Ok(())
}

fn dataset_for(ctx: &Ctx, tokens: Option<&Path>) -> anyhow::Result<TokenDataset> {
    let ds = match tokens {
        Some(p) => TokenDataset::load(p)?,
        None => ctx
            .config
            .corpus
            .dataset(derive_seed(ctx.config.seed, &[1]), ctx.config.train.context_len)?,
    };
    let (ds, _) = ds.without_empty();
    Ok(ds)
}

fn cmd_train(
    ctx: &mut Ctx,
    tokens: Option<&Path>,
    dump: Option<&Path>,
    max_steps: Option<u64>,
    mode: Option<ModeArg>,
) -> anyhow::Result<()> {
    if let Some(n) = max_steps {
        ctx.config.train.max_steps = n;
    }
    if let Some(m) = mode {
        ctx.config.train.mode = match m {
            ModeArg::Embedding => TrainMode::Embedding,
            ModeArg::Logit => TrainMode::Logit,
        };
        if ctx.config.train.mode == TrainMode::Logit && !ctx.config.teacher.synthetic.emit_logits && dump.is_none() {
            ctx.config.teacher = ctx.config.teacher.clone().with_logits(LogitSpec::high_noise());
        }
    }
    if let Some(d) = dump {
        ctx.config.teacher.kind = TeacherKind::FileBacked;
        ctx.config.teacher.file = Some(d.to_path_buf());
    }
    ctx.config.train.seed = ctx.config.seed;
    ctx.config.train.execution = ctx.exec;
    for w in ctx.config.train.validate()? {
        eprintln!("warning: {w}");
    }
    let ds = dataset_for(ctx, tokens)?;
    if ds.context_len() != ctx.config.train.context_len {
        ctx.config.train.context_len = ds.context_len();
    }
    let teacher = teacher::build_teacher(&ctx.config.teacher)?;
    let sc = ctx.config.student_config();
    let mut student = StudentParams::<f32>::init(&sc, derive_seed(ctx.config.seed, &[3]))?;
    let out = ctx.out_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    ctx.manifest(&out, "train", json!({"status": "running"}))?;
    let summary = trainer::train(&ctx.config.train, &mut student, &ds, teacher.as_ref(), Some(&out))?;
    save_checkpoint(&out.join("final.hnanockp"), &student)?;
    let fin = summary.final_val().map(|r| r.to_json()).unwrap_or(Value::Null);
    let info = json!({
        "metrics": out.join(report::METRICS_FILE),
        "checkpoint": out.join("final.hnanockp"),
        "steps": summary.steps,
        "num_params": num_params(&sc),
        "final_val": fin,
    });
    println!(
        "{}",
        serde_json::to_string(&json!({"steps": summary.steps, "final_val_loss": summary.final_val().map(|r| r.loss_total)}))?
    );
    ctx.manifest(&out, "train", info)?;
    Ok(())
}

fn cmd_eval(ctx: &Ctx, checkpoint: &Path, tokens: &Path, dump: Option<&Path>) -> anyhow::Result<()> {
    let student = load_checkpoint(checkpoint)?;
    let ds = TokenDataset::load(tokens)?;
    let (ds, _) = ds.without_empty();
    let teacher: Box<dyn Teacher> = match dump {
        Some(d) => Box::new(FileTeacher::new(teacher::load_dump(d)?, &student.config().proj_dims)?),
        None => teacher::build_teacher(&ctx.config.teacher)?,
    };
    let targets = teacher::precompute(teacher.as_ref(), ds.sequences(), ctx.exec)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let classes = student.config().logit_classes.and(teacher.logit_classes());
    let e = trainer::evaluate(&student, &ds, &targets, &idx, &ctx.config.train.loss, classes, ctx.exec)?;
    let v = json!({
        "sequences": ds.len(),
        "loss_total": e.loss_total,
        "loss_cos": e.loss_cos,
        "loss_mse": e.loss_mse,
        "kl": e.kl,
        "emb_var": e.emb_var,
        "emb_norm": e.emb_norm,
        "proj_var": e.proj_var,
        "proj_norm": e.proj_norm,
        "cka_pre": e.cka_pre,
        "cka_post": e.cka_post,
        "cka_raw_pre": e.cka_raw_pre,
        "cka_raw_post": e.cka_raw_post,
    });
    fs::create_dir_all(&ctx.out_dir)?;
    fs::write(ctx.out_dir.join("eval.json"), serde_json::to_vec_pretty(&v)?)?;
    println!("{}", serde_json::to_string(&v)?);
    ctx.manifest(&ctx.out_dir, "eval", json!({"eval": ctx.out_dir.join("eval.json")}))?;
    Ok(())
}

fn cmd_pca(ctx: &Ctx, dump: &Path, layer: usize) -> anyhow::Result<()> {
    let d = teacher::load_dump(dump)?;
    if layer >= d.layer_dims.len() {
        bail!(Error::Usage(format!(
            "layer {layer} out of range; dump has {} layers",
            d.layer_dims.len()
        )));
    }
    let rows: Vec<Vec<f32>> = d.outputs.iter().map(|o| o.embeddings[layer].clone()).collect();
    let p = pca_components(&Matrix::from_f32_rows(&rows)?, &PCA_THRESHOLDS)?;
    println!("threshold,components");
    let mut csv = String::from("threshold,components\n");
    for &(t, k) in &p.components_at {
        println!("{t},{k}");
        csv.push_str(&format!("{t},{k}\n"));
    }
    fs::create_dir_all(&ctx.out_dir)?;
    fs::write(ctx.out_dir.join("pca.csv"), csv)?;
    fs::write(ctx.out_dir.join("pca.json"), serde_json::to_vec_pretty(&p)?)?;
    ctx.manifest(&ctx.out_dir, "pca", json!({"pca": ctx.out_dir.join("pca.csv"), "layer": layer}))?;
    Ok(())
}

fn cmd_entropy(ctx: &Ctx, dump: &Path, tokens: Option<&Path>, sequences: usize) -> anyhow::Result<()> {
    let d = teacher::load_dump(dump)?;
    let Some((l, c)) = d.logit_shape else {
        bail!(Error::Usage("dump has no logits section".into()));
    };
    let ds = tokens.map(TokenDataset::load).transpose()?;
    if let Some(ds) = &ds {
        if ds.len() != d.outputs.len() || ds.context_len() != l {
            bail!(Error::Shape("token file does not line up with the dump".into()));
        }
    }
    let full = vec![true; l];
    let mut csv = String::from("sequence,position,entropy,uniform_entropy\n");
    let mut means = Vec::new();
    let mut max: f64 = 0.0;
    for (i, o) in d.outputs.iter().enumerate().take(sequences) {
        let mask = ds.as_ref().map_or(full.as_slice(), |ds| ds.get(i).mask());
        let logits: Vec<f64> = o.logits.as_deref().unwrap_or_default().iter().map(|&v| f64::from(v)).collect();
        let p = entropy_profile(&logits, c, mask)?;
        for (pos, h) in p.per_position.iter().enumerate() {
            csv.push_str(&format!("{i},{pos},{h},{}\n", p.uniform_entropy));
        }
        means.push(p.mean);
        max = max.max(p.max);
    }
    if means.is_empty() {
        bail!(Error::Domain("no sequences to summarise".into()));
    }
    let mean = shifted_mean(&means);
    let summary = json!({
        "sequences": means.len(),
        "entropy_mean": mean,
        "entropy_max": max,
        "mean_token_prob": (-mean).exp(),
        "uniform_entropy": (c as f64).ln(),
        "uniform_prob": 1.0 / c as f64,
    });
    fs::create_dir_all(&ctx.out_dir)?;
    fs::write(ctx.out_dir.join("entropy_profile.csv"), csv)?;
    println!("{}", serde_json::to_string(&summary)?);
    ctx.manifest(&ctx.out_dir, "entropy", summary)?;
    Ok(())
}

fn cmd_report(ctx: &Ctx, run_dir: &Path, explicit_out: bool) -> anyhow::Result<()> {
    let out = if explicit_out {
        ctx.out_dir.clone()
    } else {
        run_dir.join("report")
    };
    let written = report::report(run_dir, &out)?;
    for p in &written {
        println!("{}", p.display());
    }
    ctx.manifest(&out, "report", json!(written))?;
    Ok(())
}

fn run(cli: Cli, argv: Vec<String>) -> anyhow::Result<()> {
    let mut config = load_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    let explicit_out = cli.out_dir.is_some();
    let mut ctx = Ctx {
        config,
        out_dir: cli.out_dir.unwrap_or_else(|| PathBuf::from("out")),
        exec: if cli.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        },
        argv,
    };
    match cli.command {
        Command::Ingest {
            inputs,
            targets,
            total,
            gzip,
            category,
            out,
        } => cmd_ingest(&ctx, &inputs, &targets, total, gzip, category.as_deref(), out.as_deref()),
        Command::Tokenize {
            shards,
            synthetic,
            context_len,
            out,
        } => cmd_tokenize(&ctx, &shards, synthetic, context_len, &out),
        Command::Teacher {
            tokens,
            preset,
            logits,
            layer_dims,
            out,
        } => {
            let spec = teacher_spec(&ctx, preset, logits, layer_dims);
            cmd_teacher(&ctx, &tokens, spec, &out)
        }
        Command::Train {
            tokens,
            teacher_dump,
            max_steps,
            mode,
        } => cmd_train(&mut ctx, tokens.as_deref(), teacher_dump.as_deref(), max_steps, mode),
        Command::Eval {
            checkpoint,
            tokens,
            teacher_dump,
        } => cmd_eval(&ctx, &checkpoint, &tokens, teacher_dump.as_deref()),
        Command::Pca { dump, layer } => cmd_pca(&ctx, &dump, layer),
        Command::Entropy { dump, tokens, sequences } => cmd_entropy(&ctx, &dump, tokens.as_deref(), sequences),
        Command::Report { run_dir } => cmd_report(&ctx, &run_dir, explicit_out),
    }
}

/// One JSON line on stderr: `{"error": kind, "message": text}`.
fn report_error(e: &anyhow::Error) -> ExitCode {
    let core = e.chain().find_map(|c| c.downcast_ref::<Error>());
    let kind = core.map_or("io", Error::kind);
    // Core errors already render their source; anyhow's alternate form would repeat it.
    let message = if e.downcast_ref::<Error>().is_some() {
        e.to_string()
    } else {
        format!("{e:#}")
    };
    let line = json!({"error": kind, "message": message});
    eprintln!("{line}");
    if matches!(core, Some(Error::Usage(_))) {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e),
    }
}
