//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use horse_core::edit_math::Predecessor;
use horse_core::eval::{drift_probe, evaluate, DriftStats, FactCorpus, InstanceOutcome};
use horse_core::hypernet::{grad_check, GradCheckReport, HyperNet, PreparedPool};
use horse_core::pipeline::{edit_massive, BatchDiagnostics, EditReport, EditRequest, MetricSummary, Variant};
use horse_core::{EditError, Model, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::experiment::{self, AblationTable};
use crate::output::{csv_metric, dump_residuals, ensure_dir, require, write_file, write_json};

#[derive(Debug, Parser)]
#[command(name = "horse-edit", version, about = "Toy-scale knowledge editing experiments")]
pub struct Cli {
    #[command(flatten)]
    pub shared: Shared,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags accepted by every subcommand. Flags that do not apply to the chosen
/// subcommand are rejected.
#[derive(Debug, Clone, Args)]
pub struct Shared {
    /// JSON run config; keys not given keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed, copied into every component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker thread cap (0 = library default).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory for outputs and default inputs.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Write every batch's raw and spread residuals as CSV into this directory.
    #[arg(long, global = true)]
    pub dump_residuals: Option<PathBuf>,
    /// Write a checkpoint and running metrics after every k batches.
    #[arg(long, global = true)]
    pub snapshot_every: Option<usize>,
    /// Verify hypernetwork gradients by finite differences.
    #[arg(long, global = true)]
    pub grad_check: bool,
    /// Editing variant.
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// Comma-separated edit counts.
    #[arg(long, global = true, value_delimiter = ',')]
    pub sweep: Option<Vec<usize>>,
    /// Orthogonalize against the raw predecessor residual.
    #[arg(long, global = true)]
    pub raw_predecessor: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic fact corpus as JSONL.
    GenCorpus(GenCorpusArgs),
    /// Train the base model on the corpus facts.
    TrainBase(TrainBaseArgs),
    /// Train the hypernetwork on the corpus training edits.
    TrainHyper(TrainHyperArgs),
    /// Apply the corpus edits in sequential batches.
    Edit(EditArgs),
    /// Compare a pre- and post-edit checkpoint on the corpus edits.
    Eval(EvalArgs),
    /// Run the ablation variants side by side.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenCorpusArgs {
    /// Base facts in the corpus.
    #[arg(long)]
    pub facts: Option<usize>,
    /// Vocabulary size.
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Equivalent prompts per fact.
    #[arg(long)]
    pub paraphrases: Option<usize>,
    /// Unrelated probes per edit.
    #[arg(long)]
    pub unrelated: Option<usize>,
    /// Facts rewritten by evaluation edits.
    #[arg(long)]
    pub edits: Option<usize>,
    /// Defaults to `<out-dir>/corpus.jsonl`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainBaseArgs {
    /// Corpus; defaults to `<out-dir>/corpus.jsonl`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Training steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Defaults to `<out-dir>/base.hedt`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainHyperArgs {
    /// Base checkpoint; defaults to `<out-dir>/base.hedt`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Corpus; defaults to `<out-dir>/corpus.jsonl`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Training steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Defaults to `<out-dir>/hyper.hhyp`, or `hyper_<variant>.hhyp` for a
    /// variant that trains its own network.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EditArgs {
    /// Base checkpoint; defaults to `<out-dir>/base.hedt`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Hypernetwork checkpoint; defaults to the one train-hyper writes for the variant.
    #[arg(long)]
    pub hyper: Option<PathBuf>,
    /// Corpus; defaults to `<out-dir>/corpus.jsonl`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Apply only the first N corpus edits.
    #[arg(long)]
    pub num_edits: Option<usize>,
    /// Edits per sequential batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Checkpoint before editing.
    #[arg(long)]
    pub pre: PathBuf,
    /// Checkpoint after editing.
    #[arg(long)]
    pub post: PathBuf,
    /// Corpus; defaults to `<out-dir>/corpus.jsonl`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Evaluate only the first N corpus edits.
    #[arg(long)]
    pub num_edits: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    /// Base checkpoint; without it every seed is built from scratch.
    #[arg(long, requires = "hyper")]
    pub model: Option<PathBuf>,
    /// Network for the variants that share the full network.
    #[arg(long, requires = "model")]
    pub hyper: Option<PathBuf>,
    /// Corpus; defaults to `<out-dir>/corpus.jsonl`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Comma-separated seeds for a from-scratch ablation.
    #[arg(long, value_delimiter = ',', conflicts_with = "model")]
    pub seeds: Option<Vec<u64>>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus(_) => "gen-corpus",
            Command::TrainBase(_) => "train-base",
            Command::TrainHyper(_) => "train-hyper",
            Command::Edit(_) => "edit",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
        }
    }

    fn allowed(&self) -> &'static [&'static str] {
        match self {
            Command::GenCorpus(_) | Command::TrainBase(_) | Command::Eval(_) => &[],
            Command::TrainHyper(_) => &["--grad-check", "--variant", "--raw-predecessor"],
            Command::Edit(_) => &["--dump-residuals", "--snapshot-every", "--variant", "--sweep", "--raw-predecessor"],
            Command::Ablate(_) => &["--raw-predecessor"],
        }
    }
}

impl Shared {
    fn used(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.dump_residuals.is_some() {
            v.push("--dump-residuals");
        }
        if self.snapshot_every.is_some() {
            v.push("--snapshot-every");
        }
        if self.grad_check {
            v.push("--grad-check");
        }
        if self.variant.is_some() {
            v.push("--variant");
        }
        if self.sweep.is_some() {
            v.push("--sweep");
        }
        if self.raw_predecessor {
            v.push("--raw-predecessor");
        }
        v
    }

    /// Config file, then flags.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(v) = &self.variant {
            cfg.edit.variant = Variant::parse(v)?;
        }
        if self.raw_predecessor {
            cfg.edit.predecessor = Predecessor::Raw;
        }
        if let Some(s) = &self.sweep {
            cfg.edit.sweep = s.clone();
        }
        Ok(cfg)
    }

    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out_dir.join(default))
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cmd = &cli.command;
    if let Some(flag) = cli.shared.used().into_iter().find(|f| !cmd.allowed().contains(f)) {
        return Err(EditError::Config(format!("{flag} does not apply to {}", cmd.name())));
    }
    if cli.shared.snapshot_every == Some(0) {
        return Err(EditError::Config("--snapshot-every must be at least 1".into()));
    }
    let cfg = cli.shared.run_config()?;
    let threads = cli.shared.threads.unwrap_or(0);
    horse_core::par::with_threads(threads, || match cmd {
        Command::GenCorpus(a) => gen_corpus(&cli.shared, cfg, a),
        Command::TrainBase(a) => train_base(&cli.shared, cfg, a),
        Command::TrainHyper(a) => train_hyper(&cli.shared, cfg, a),
        Command::Edit(a) => edit(&cli.shared, cfg, a),
        Command::Eval(a) => eval(&cli.shared, cfg, a),
        Command::Ablate(a) => ablate(&cli.shared, cfg, a),
    })
}

fn load_corpus(path: &Path) -> Result<FactCorpus> {
    let file = std::fs::File::open(require(path, "corpus")?)?;
    let corpus = FactCorpus::read_jsonl(std::io::BufReader::new(file))?;
    corpus.check_hygiene()?;
    Ok(corpus)
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(&require(path, "model checkpoint")?)
}

fn load_net(path: &Path) -> Result<HyperNet> {
    HyperNet::load(&require(path, "hypernetwork checkpoint")?)
}

fn gen_corpus(sh: &Shared, mut cfg: RunConfig, a: &GenCorpusArgs) -> Result<()> {
    let c = &mut cfg.corpus;
    for (slot, v) in [
        (&mut c.n_facts, a.facts),
        (&mut c.vocab_size, a.vocab),
        (&mut c.n_paraphrases, a.paraphrases),
        (&mut c.n_unrelated, a.unrelated),
        (&mut c.n_edits, a.edits),
    ] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    let corpus = experiment::build_corpus(&cfg)?;
    let mut buf = Vec::new();
    corpus.write_jsonl(&mut buf)?;
    let path = sh.path(&a.output, "corpus.jsonl");
    write_file(&path, buf)?;
    println!("wrote {} records to {}", corpus.records.len(), path.display());
    Ok(())
}

fn train_base(sh: &Shared, mut cfg: RunConfig, a: &TrainBaseArgs) -> Result<()> {
    if let Some(s) = a.steps {
        cfg.base_train.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.base_train.lr = lr;
    }
    let corpus = load_corpus(&sh.path(&a.corpus, "corpus.jsonl"))?;
    let (model, report) = experiment::train_base(&cfg, &corpus)?;
    let path = sh.path(&a.output, "base.hedt");
    ensure_dir(path.parent().unwrap_or(Path::new(".")))?;
    model.save(&path)?;
    write_json(&sh.out_dir.join("base_report.json"), &report)?;
    if !report.reached_target {
        log::warn!("accuracy {:.4} is below the target {:.4}", report.accuracy, cfg.base_train.target_accuracy);
    }
    println!("base accuracy: {:.4}", report.accuracy);
    Ok(())
}

/// Gradient checks before and after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckFile {
    pub tolerance: f64,
    pub initial: GradCheckReport,
    pub trained: GradCheckReport,
    pub passed: bool,
}

fn train_hyper(sh: &Shared, mut cfg: RunConfig, a: &TrainHyperArgs) -> Result<()> {
    if let Some(s) = a.steps {
        cfg.hyper.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.hyper.lr = lr;
    }
    let variant = cfg.edit.variant;
    if !variant.uses_network() || variant == Variant::NoTraining {
        return Err(EditError::Config(format!("variant {variant} does not use a trained network")));
    }
    let model = load_model(&sh.path(&a.model, "base.hedt"))?;
    let corpus = load_corpus(&sh.path(&a.corpus, "corpus.jsonl"))?;
    let loss = variant.training_loss(cfg.edit.predecessor);
    let stem = if variant.trains_own_network() { format!("hyper_{variant}") } else { "hyper".to_string() };

    let g = &cfg.grad_check;
    if sh.grad_check && !(g.step > 0.0 && g.tolerance > 0.0 && g.max_entries >= 1) {
        return Err(EditError::Config("grad_check needs step > 0, tolerance > 0 and max_entries >= 1".into()));
    }
    let mut initial = None;
    if sh.grad_check {
        let fresh = HyperNet::new(&cfg.hyper, model.editable_layers(), model.config().d_ff, model.config().d_model)?;
        initial = Some(check_net(&model, &fresh, &corpus, &cfg, &loss)?);
    }
    let (net, log) = experiment::train_net(&cfg, &model, &corpus, variant)?;
    let path = sh.path(&a.output, &format!("{stem}.hhyp"));
    ensure_dir(path.parent().unwrap_or(Path::new(".")))?;
    net.save(&path)?;
    write_file(&sh.out_dir.join(format!("{stem}_log.csv")), log.to_csv())?;
    if let (Some(first), Some(last)) = (log.rows.first(), log.rows.last()) {
        println!("ce_term: initial {:.6}, final {:.6}", first.ce_term, last.ce_term);
    }
    if let Some(initial) = initial {
        let trained = check_net(&model, &net, &corpus, &cfg, &loss)?;
        let worst = initial.max_rel_error().max(trained.max_rel_error());
        let tolerance = cfg.grad_check.tolerance;
        let passed = worst <= tolerance;
        write_json(
            &sh.out_dir.join("grad_check.json"),
            &GradCheckFile { tolerance, initial, trained, passed },
        )?;
        println!("grad check: max relative error {worst:.3e} ({})", if passed { "pass" } else { "FAIL" });
        if !passed {
            return Err(EditError::Numerical(format!(
                "gradient check failed: max relative error {worst:.3e} > {tolerance:e}"
            )));
        }
    }
    Ok(())
}

fn check_net(
    model: &Model,
    net: &HyperNet,
    corpus: &FactCorpus,
    cfg: &RunConfig,
    loss: &horse_core::hypernet::LossOptions,
) -> Result<GradCheckReport> {
    let pool = PreparedPool::new(model, &corpus.train_edits())?;
    let idx: Vec<usize> = (0..cfg.hyper.batch_size.min(pool.len())).collect();
    let g = &cfg.grad_check;
    grad_check(model, net, &pool.batch(&idx), loss, g.step, Some(g.max_entries))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub batches_ms: Vec<f64>,
    pub total_ms: f64,
}

/// Running metrics written next to a snapshot checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub batches_applied: usize,
    pub edits_applied: usize,
    pub metrics: MetricSummary,
}

/// Reports of an edit-count sweep, in the requested order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub reports: Vec<EditReport>,
}

fn edit(sh: &Shared, mut cfg: RunConfig, a: &EditArgs) -> Result<()> {
    if let Some(b) = a.batch_size {
        cfg.edit.batch_size = b;
    }
    if let Some(n) = a.num_edits {
        cfg.edit.num_edits = Some(n);
    }
    let variant = cfg.edit.variant;
    let model = load_model(&sh.path(&a.model, "base.hedt"))?;
    let corpus = load_corpus(&sh.path(&a.corpus, "corpus.jsonl"))?;
    let net = if variant.uses_network() {
        let default = if variant.trains_own_network() { format!("hyper_{variant}.hhyp") } else { "hyper.hhyp".into() };
        load_net(&sh.path(&a.hyper, &default))?
    } else {
        // The baseline never reads the network; an identity net fills the slot.
        let c = model.config();
        let id = horse_core::hypernet::HyperNetConfig { init_scale: 0.0, ..cfg.hyper.clone() };
        HyperNet::new(&id, model.editable_layers(), c.d_ff, c.d_model)?
    };
    ensure_dir(&sh.out_dir)?;

    if !cfg.edit.sweep.is_empty() {
        let mut reports = Vec::new();
        for &n in &cfg.edit.sweep {
            let (edited, report) = run_one(sh, &cfg, &model, &net, &corpus, Some(n), &format!("n{n}_"))?;
            edited.save(&sh.out_dir.join(format!("edited_n{n}.hedt")))?;
            print_metrics(&format!("{n} edits"), &report);
            reports.push(report);
        }
        let mut csv = format!("{}\n", EditReport::CSV_HEADER);
        for r in &reports {
            csv.push_str(r.to_csv().lines().nth(1).expect("aggregate row"));
            csv.push('\n');
        }
        write_json(&sh.out_dir.join("sweep_report.json"), &SweepReport { reports })?;
        write_file(&sh.out_dir.join("sweep_report.csv"), csv)?;
        return Ok(());
    }

    let (edited, report) = run_one(sh, &cfg, &model, &net, &corpus, cfg.edit.num_edits, "")?;
    edited.save(&sh.out_dir.join("edited.hedt"))?;
    write_json(&sh.out_dir.join("edit_report.json"), &report)?;
    write_file(&sh.out_dir.join("edit_report.csv"), report.to_csv())?;
    print_metrics(&format!("{} edits", report.n_edits), &report);
    Ok(())
}

fn print_metrics(label: &str, r: &EditReport) {
    if let Some(m) = &r.metrics {
        println!(
            "{label} ({}): efficacy {:.2}, generalization {}, specificity {}",
            r.variant,
            m.efficacy,
            csv_metric(m.generalization),
            csv_metric(m.specificity)
        );
    }
}

/// One massive-editing run with dumps, snapshots and timings. `prefix`
/// distinguishes the files of sweep entries.
fn run_one(
    sh: &Shared,
    cfg: &RunConfig,
    model: &Model,
    net: &HyperNet,
    corpus: &FactCorpus,
    n_edits: Option<usize>,
    prefix: &str,
) -> Result<(Model, EditReport)> {
    let instances = experiment::take_edits(corpus, n_edits)?;
    let request = EditRequest { instances, batch_size: cfg.edit.batch_size, variant: cfg.edit.variant, seed: cfg.seed };
    let opts = experiment::edit_options(cfg, cfg.edit.variant);
    let start = std::time::Instant::now();
    let mut on_batch = |k: usize, current: &Model, diag: &BatchDiagnostics| -> Result<()> {
        log::debug!("batch {k}: {} edits, delta norms {:?}", diag.n_instances, diag.delta_norms);
        if let Some(dir) = &sh.dump_residuals {
            dump_residuals(&dir.join(prefix.trim_end_matches('_')), k, &diag.raw, &diag.spread)?;
        }
        if let Some(every) = sh.snapshot_every {
            if (k + 1) % every == 0 {
                let done = ((k + 1) * request.batch_size).min(request.instances.len());
                let m = evaluate(model, current, &request.instances[..done])?;
                let dir = sh.out_dir.join("snapshots");
                ensure_dir(&dir)?;
                current.save(&dir.join(format!("{prefix}batch{:03}.hedt", k + 1)))?;
                let snap = Snapshot { batches_applied: k + 1, edits_applied: done, metrics: (&m).into() };
                write_json(&dir.join(format!("{prefix}batch{:03}.json", k + 1)), &snap)?;
            }
        }
        Ok(())
    };
    let (edited, report) = match edit_massive(model, net, &request, &opts, Some(&mut on_batch)) {
        Ok(v) => v,
        Err(e) => {
            write_json(&sh.out_dir.join(format!("{prefix}partial_report.json")), &e.partial)?;
            return Err(e.error);
        }
    };
    let timings = Timings { batches_ms: report.timings_ms.clone(), total_ms: start.elapsed().as_secs_f64() * 1e3 };
    write_json(&sh.out_dir.join(format!("{prefix}timings.json")), &timings)?;
    Ok((edited, report))
}

/// Output of `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_edits: usize,
    pub n_equivalents: usize,
    pub n_unrelated: usize,
    pub metrics: MetricSummary,
    pub drift: DriftStats,
    pub outcomes: Vec<InstanceOutcome>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "n_edits,efficacy,generalization,specificity,mean_kl,max_kl,agreement";

    pub fn to_csv(&self) -> String {
        format!(
            "{}\n{},{:.4},{},{},{:e},{:e},{:.4}\n",
            Self::CSV_HEADER,
            self.n_edits,
            self.metrics.efficacy,
            csv_metric(self.metrics.generalization),
            csv_metric(self.metrics.specificity),
            self.drift.mean_kl,
            self.drift.max_kl,
            self.drift.agreement
        )
    }
}

fn eval(sh: &Shared, cfg: RunConfig, a: &EvalArgs) -> Result<()> {
    let pre = load_model(&a.pre)?;
    let post = load_model(&a.post)?;
    let corpus = load_corpus(&sh.path(&a.corpus, "corpus.jsonl"))?;
    let instances = experiment::take_edits(&corpus, a.num_edits.or(cfg.edit.num_edits))?;
    let m = evaluate(&pre, &post, &instances)?;
    let probes: Vec<Vec<usize>> = corpus.holdout_prompts().into_iter().map(|i| i.prompt).collect();
    let drift = drift_probe(&pre, &post, &probes)?;
    let report = EvalReport {
        n_edits: m.n_edits,
        n_equivalents: m.n_equivalents,
        n_unrelated: m.n_unrelated,
        metrics: (&m).into(),
        drift,
        outcomes: m.outcomes,
    };
    write_json(&sh.out_dir.join("metrics.json"), &report)?;
    write_file(&sh.out_dir.join("metrics.csv"), report.to_csv())?;
    println!(
        "efficacy {:.2}, generalization {}, specificity {}, mean KL {:.3e}, agreement {:.2}",
        report.metrics.efficacy,
        csv_metric(report.metrics.generalization),
        csv_metric(report.metrics.specificity),
        report.drift.mean_kl,
        report.drift.agreement
    );
    Ok(())
}

fn ablate(sh: &Shared, cfg: RunConfig, a: &AblateArgs) -> Result<()> {
    let rows = match (&a.model, &a.hyper) {
        (Some(m), Some(h)) => {
            let base = load_model(m)?;
            let net = load_net(h)?;
            let corpus = load_corpus(&sh.path(&a.corpus, "corpus.jsonl"))?;
            experiment::ablate(&cfg, &base, &net, &corpus)?
        }
        _ => {
            let seeds = match &a.seeds {
                Some(s) => s.clone(),
                None if !cfg.ablate.seeds.is_empty() => cfg.ablate.seeds.clone(),
                None => vec![cfg.seed],
            };
            let mut rows = Vec::new();
            for s in seeds {
                let c = cfg.with_seed(s);
                let art = experiment::build(&c)?;
                rows.extend(experiment::ablate(&c, &art.base, &art.net, &art.corpus)?);
            }
            rows
        }
    };
    let table = AblationTable::new(rows);
    write_json(&sh.out_dir.join("ablation.json"), &table)?;
    write_file(&sh.out_dir.join("ablation.csv"), table.to_csv())?;
    print!("{}", table.to_csv());
    Ok(())
}
