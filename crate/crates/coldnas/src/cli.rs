//! Command-line interface: `prepare`, `search`, `eval`, `canon`, and
//! `report` subcommands.
//!
//! Exit codes: 0 on success, 2 for configuration or usage errors, 3 for
//! data problems, 4 for numerical failures. Set `COLDNAS_LOG` to control
//! log verbosity.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::algebra::{canonicalize, verify_equivalence};
use crate::config::{parse_op, DataSource, DatasetConfig, RunConfig};
use crate::data::{
    build_tasks, make_synthetic, parse_generic_csv, parse_movielens, split_tasks,
    split_tasks_longtail, DatasetSchema, DictEncoder, Task, TaskMode, TaskSplit,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_with, MetricsReport};
use crate::model::Model;
use crate::modulation::{space_size, ModulationAssignment, ModulationExpr};
use crate::numerics::BinaryOpKind;
use crate::search::{
    complexity_audit, random_search, retrain, search_and_retrain, RandomSearchReport,
    SearchSpace, TrainReport,
};

#[derive(Parser)]
#[command(
    name = "coldnas",
    version,
    about = "Structure search for feature modulation in cold-start recommendation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a dataset, build cold-start tasks, and write a prepared
    /// split directory.
    Prepare(PrepareArgs),
    /// Run structure search (or train a fixed structure) on a prepared
    /// split.
    Search(SearchArgs),
    /// Evaluate a saved model checkpoint on a prepared split.
    Eval(EvalArgs),
    /// Canonicalize a modulation expression and verify the rewrite
    /// numerically.
    Canon(CanonArgs),
    /// Summarize a finished search run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for the prepared split.
    #[arg(long)]
    out: PathBuf,
    /// Override the dataset seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SearchArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Prepared split directory from `prepare`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the run.
    #[arg(long)]
    out: PathBuf,
    /// Override the training seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// supernet (default), random-original, or random-transformed.
    #[arg(long, default_value = "supernet")]
    strategy: String,
    /// Override the random-search candidate budget.
    #[arg(long)]
    budget: Option<usize>,
    /// Use bilevel supernet training (blend weights step on validation
    /// batches).
    #[arg(long)]
    bilevel: bool,
    /// Skip search and train the fixed structure that scales and shifts
    /// every layer (⊙ then +).
    #[arg(long)]
    fixed_film: bool,
    /// Worker cap for parallel candidate evaluation.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Prepared split directory from `prepare`.
    #[arg(long)]
    data: PathBuf,
    /// Model checkpoint written by `search`.
    #[arg(long)]
    model: PathBuf,
    /// Which part of the split to evaluate: train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Comma-separated support-set fractions to sweep (e.g. 0.2,0.6,1.0).
    #[arg(long)]
    support_fraction: Option<String>,
    /// Worker cap for parallel prediction.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct CanonArgs {
    /// Expression over h and parameter slots, e.g.
    /// "min(max(h,p1)+p2-p3,p4)*p5". Ops: max(, min(, *, /, +, -.
    expression: String,
    /// Random trials for the numerical equivalence check.
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory written by `search`.
    #[arg(long)]
    run: PathBuf,
}

/// Map an error to the documented process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse(_) | Error::Precondition(_) => 2,
        Error::Data(_) | Error::SchemaMismatch(_) | Error::Io(_) | Error::Json(_)
        | Error::Csv(_) => 3,
        Error::Divergence(_)
        | Error::NonFinite(_)
        | Error::DivNearZero { .. }
        | Error::ShapeMismatch { .. }
        | Error::IndexOutOfBounds { .. } => 4,
    }
}

/// Entry point for the binary; returns the process exit code.
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::new().filter("COLDNAS_LOG")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(args) => cmd_prepare(&args),
        Command::Search(args) => cmd_search(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Canon(args) => cmd_canon(&args),
        Command::Report(args) => cmd_report(&args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Summary written next to a prepared split.
#[derive(Serialize, Deserialize)]
struct PrepareSummary {
    n_interactions: usize,
    skipped_rows: usize,
    duplicate_rows: usize,
    n_tasks: usize,
    skipped_users: usize,
    train_tasks: usize,
    val_tasks: usize,
    test_tasks: usize,
}

/// Load interactions per the configured source.
fn load_source(
    cfg: &DatasetConfig,
) -> Result<(
    DatasetSchema,
    Vec<crate::data::Interaction>,
    Option<DictEncoder>,
    usize,
    usize,
)> {
    match &cfg.source {
        DataSource::Movielens {
            ratings,
            users,
            movies,
        } => {
            let parsed = parse_movielens(ratings, users, movies)?;
            Ok((
                parsed.schema,
                parsed.interactions,
                Some(parsed.encoder),
                parsed.skipped_rows,
                parsed.duplicate_rows,
            ))
        }
        DataSource::Csv { path, schema } => {
            let parsed = parse_generic_csv(path, schema)?;
            Ok((
                parsed.schema,
                parsed.interactions,
                Some(parsed.encoder),
                parsed.skipped_rows,
                parsed.duplicate_rows,
            ))
        }
        DataSource::Synthetic {
            planted,
            n_users,
            n_items,
            noise_sd,
        } => {
            let ops: Vec<BinaryOpKind> =
                planted.iter().map(|t| parse_op(t)).collect::<Result<_>>()?;
            let ds = make_synthetic(
                &ModulationExpr::from_ops(&ops),
                *n_users,
                *n_items,
                *noise_sd,
                cfg.seed,
            )?;
            Ok((ds.schema, ds.interactions, None, 0, 0))
        }
    }
}

fn cmd_prepare(args: &PrepareArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.dataset.seed = seed;
    }
    let d = &cfg.dataset;
    let (schema, interactions, encoder, skipped_rows, duplicate_rows) = load_source(d)?;
    let mode = if d.support_size == 0 {
        TaskMode::HalfSplit
    } else {
        TaskMode::FixedSupport(d.support_size)
    };
    let (tasks, skipped_users) =
        build_tasks(&interactions, mode, d.min_history, d.max_history, d.seed)?;
    let split = match d.long_tail_head {
        Some([lo, hi]) => split_tasks_longtail(&tasks, lo, hi, d.split, d.seed)?,
        None => split_tasks(&tasks, d.split, d.seed)?,
    };
    split.validate()?;

    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("schema.json"),
        serde_json::to_vec_pretty(&schema)?,
    )?;
    fs::write(args.out.join("split.json"), serde_json::to_vec(&split)?)?;
    if let Some(enc) = encoder {
        enc.save(&args.out.join("dicts"))?;
    }
    let summary = PrepareSummary {
        n_interactions: interactions.len(),
        skipped_rows,
        duplicate_rows,
        n_tasks: tasks.len(),
        skipped_users,
        train_tasks: split.train.len(),
        val_tasks: split.val.len(),
        test_tasks: split.test.len(),
    };
    fs::write(
        args.out.join("prepare.json"),
        serde_json::to_vec_pretty(&summary)?,
    )?;
    println!(
        "prepared {} tasks ({} train / {} val / {} test) from {} interactions into {}",
        summary.n_tasks,
        summary.train_tasks,
        summary.val_tasks,
        summary.test_tasks,
        summary.n_interactions,
        args.out.display()
    );
    Ok(())
}

fn load_prepared(dir: &Path) -> Result<(DatasetSchema, TaskSplit)> {
    let schema: DatasetSchema = serde_json::from_slice(&fs::read(dir.join("schema.json"))?)?;
    let split: TaskSplit = serde_json::from_slice(&fs::read(dir.join("split.json"))?)?;
    Ok((schema, split))
}

/// Everything `report` needs about a finished run.
#[derive(Serialize, Deserialize)]
struct RunResult {
    strategy: String,
    assignment: ModulationAssignment,
    #[serde(skip_serializing_if = "Option::is_none")]
    alphas: Option<Vec<[f64; 4]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    supernet_report: Option<TrainReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    random_report: Option<RandomSearchReport>,
    retrain_report: TrainReport,
    test_metrics: MetricsReport,
    predicted_macs_per_task: u64,
    measured_macs_per_task: u64,
}

fn cmd_search(args: &SearchArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.rng_seed = seed;
    }
    if let Some(budget) = args.budget {
        cfg.search.budget = budget;
    }
    if args.bilevel {
        cfg.search.bilevel = true;
    }
    if args.threads == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    let (schema, split) = load_prepared(&args.data)?;
    fs::create_dir_all(&args.out)?;
    let mut epoch_log = fs::File::create(args.out.join("epochs.jsonl"))?;
    let num_layers = cfg.model.widths.len();

    let strategy = if args.fixed_film {
        "fixed-film"
    } else {
        args.strategy.as_str()
    };
    let (assignment, alphas, supernet_report, random_report, model, retrain_report) =
        match strategy {
            "fixed-film" => {
                let assignment = ModulationAssignment::film_everywhere(num_layers);
                let (model, report) = retrain(
                    &assignment,
                    &cfg.model,
                    &schema,
                    &split,
                    &cfg.train,
                    Some(&mut epoch_log),
                )?;
                (assignment, None, None, None, model, report)
            }
            "supernet" => {
                let outcome = search_and_retrain(
                    &cfg.model,
                    &schema,
                    &split,
                    &cfg.train,
                    &cfg.train,
                    cfg.search.top_k,
                    cfg.search.bilevel,
                    Some(&mut epoch_log),
                )?;
                (
                    outcome.assignment,
                    Some(outcome.alphas.per_layer),
                    Some(outcome.supernet_report),
                    None,
                    outcome.model,
                    outcome.retrain_report,
                )
            }
            "random-original" | "random-transformed" => {
                let space = if strategy == "random-original" {
                    SearchSpace::Original {
                        ops_per_layer: cfg.search.ops_per_layer,
                    }
                } else {
                    SearchSpace::Transformed
                };
                let mut candidate_cfg = cfg.train.clone();
                candidate_cfg.epochs = cfg.search.candidate_epochs;
                let report = random_search(
                    space,
                    &cfg.model,
                    &schema,
                    &split,
                    cfg.search.budget,
                    &candidate_cfg,
                    cfg.train.rng_seed,
                    args.threads,
                )?;
                let assignment = report.best().assignment.clone();
                let (model, retrain_report) = retrain(
                    &assignment,
                    &cfg.model,
                    &schema,
                    &split,
                    &cfg.train,
                    Some(&mut epoch_log),
                )?;
                (
                    assignment,
                    None,
                    None,
                    Some(report),
                    model,
                    retrain_report,
                )
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown strategy '{other}'; expected supernet, random-original, or random-transformed"
                )))
            }
        };

    let test_metrics = evaluate_model(&model, &split.test, args.threads)?;
    let audit = complexity_audit(&model, &split.test[0])?;

    model.save(&args.out.join("model.json"))?;
    fs::write(args.out.join("assignment.txt"), format!("{assignment}"))?;
    let result = RunResult {
        strategy: strategy.to_string(),
        assignment,
        alphas,
        supernet_report,
        random_report,
        retrain_report,
        test_metrics,
        predicted_macs_per_task: audit.predicted_macs,
        measured_macs_per_task: audit.measured_macs,
    };
    fs::write(
        args.out.join("result.json"),
        serde_json::to_vec_pretty(&result)?,
    )?;
    println!("selected structure:\n{}", result.assignment);
    println!("test: {}", result.test_metrics);
    Ok(())
}

/// Compute metrics over a task set using the model's predictions.
fn evaluate_model(model: &Model, tasks: &[Task], threads: usize) -> Result<MetricsReport> {
    let preds = crate::search::predict_tasks(model, tasks, threads)?;
    let mut it = preds.into_iter();
    evaluate_with(tasks, model.schema.rating_range, |_| {
        Ok(it.next().expect("one prediction vector per task"))
    })
}

#[derive(Serialize)]
struct SweepPoint {
    support_fraction: f64,
    support_size: usize,
    metrics: MetricsReport,
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    if args.threads == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    let (schema, split) = load_prepared(&args.data)?;
    let model = Model::load(&args.model, &schema)?;
    let tasks = match args.split.as_str() {
        "train" => &split.train,
        "val" => &split.val,
        "test" => &split.test,
        other => {
            return Err(Error::Config(format!(
                "unknown split '{other}'; expected train, val, or test"
            )))
        }
    };
    match &args.support_fraction {
        None => {
            let metrics = evaluate_model(&model, tasks, args.threads)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Some(list) => {
            let mut points = Vec::new();
            for tok in list.split(',') {
                let f: f64 = tok
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad fraction '{tok}'")))?;
                if !(0.0..=1.0).contains(&f) || f == 0.0 {
                    return Err(Error::Config(format!(
                        "support fraction must be in (0, 1], got {f}"
                    )));
                }
                let reduced: Vec<Task> = tasks
                    .iter()
                    .map(|t| {
                        let keep = ((t.support.len() as f64 * f).ceil() as usize).max(1);
                        Task {
                            user_id: t.user_id,
                            support: t.support[..keep].to_vec(),
                            query: t.query.clone(),
                        }
                    })
                    .collect();
                let metrics = evaluate_model(&model, &reduced, args.threads)?;
                points.push(SweepPoint {
                    support_fraction: f,
                    support_size: reduced[0].support.len(),
                    metrics,
                });
            }
            println!("{}", serde_json::to_string_pretty(&points)?);
        }
    }
    Ok(())
}

fn cmd_canon(args: &CanonArgs) -> Result<()> {
    let expr = parse_chain(&args.expression)?;
    let (cf, recipe) = canonicalize(&expr)?;
    println!("original:  {expr}");
    println!("canonical: {}", cf.as_expr());
    let recipe_text = format!("{recipe}");
    if recipe_text.is_empty() {
        println!("(identity: no ops present)");
    } else {
        print!("{recipe_text}");
    }
    if expr.is_empty() {
        return Ok(());
    }
    let deviation = verify_equivalence(&expr, &cf, &recipe, args.trials, args.seed)?;
    println!(
        "max deviation over {} random trials: {:.3e}",
        args.trials, deviation
    );
    if deviation > 1e-6 {
        return Err(Error::NonFinite(format!(
            "rewrite deviates by {deviation:.3e}, above 1e-6"
        )));
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let result: RunResult =
        serde_json::from_slice(&fs::read(args.run.join("result.json"))?)?;
    let mut out = String::new();
    writeln!(out, "strategy: {}", result.strategy).unwrap();
    writeln!(out, "selected structure:\n{}", result.assignment).unwrap();
    writeln!(
        out,
        "ops kept: {} of {} possible",
        result.assignment.total_ops(),
        4 * result.assignment.num_layers()
    )
    .unwrap();
    if let Some(alphas) = &result.alphas {
        writeln!(out, "blend weights:").unwrap();
        for (l, row) in alphas.iter().enumerate() {
            writeln!(
                out,
                "  layer {l}: max {:.3}  min {:.3}  mul {:.3}  add {:.3}",
                row[0], row[1], row[2], row[3]
            )
            .unwrap();
        }
    }
    if let Some(r) = &result.supernet_report {
        writeln!(
            out,
            "supernet: {} epochs, best val loss {:.5}",
            r.epochs_run, r.best_val_loss
        )
        .unwrap();
    }
    if let Some(r) = &result.random_report {
        writeln!(
            out,
            "random search: {} candidates, best val loss {:.5} (candidate {})",
            r.evaluated.len(),
            r.best().val_loss,
            r.best_index
        )
        .unwrap();
    }
    writeln!(
        out,
        "retrain: {} epochs, best val loss {:.5}",
        result.retrain_report.epochs_run, result.retrain_report.best_val_loss
    )
    .unwrap();
    writeln!(out, "test: {}", result.test_metrics).unwrap();
    writeln!(
        out,
        "cost audit: predicted {} MACs/task, measured {}",
        result.predicted_macs_per_task, result.measured_macs_per_task
    )
    .unwrap();
    let l = result.assignment.num_layers() as u32;
    writeln!(out, "search-space sizes at L = {l} layers:").unwrap();
    writeln!(out, "  C   original      reduced       ratio").unwrap();
    for c in 1..=6u32 {
        let (orig, red, ratio) = space_size(c, l);
        writeln!(out, "  {c}   {orig:<12}  {red:<12}  {ratio:.1e}").unwrap();
    }
    print!("{out}");
    Ok(())
}

/// Tokens of the small infix expression language used by `canon`.
#[derive(Debug, Clone, PartialEq)]
enum Token {
    H,
    Max,
    Min,
    /// Parameter slot, optionally numbered (`p2`, `phi2`, unnumbered `p`).
    Slot(Option<usize>),
    LParen,
    RParen,
    Comma,
    Op(BinaryOpKind),
}

fn tokenize(input: &str) -> Result<Vec<Token>> {
    let mut tokens = Vec::new();
    let chars: Vec<char> = input.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' | '\n' => i += 1,
            '(' => {
                tokens.push(Token::LParen);
                i += 1;
            }
            ')' => {
                tokens.push(Token::RParen);
                i += 1;
            }
            ',' => {
                tokens.push(Token::Comma);
                i += 1;
            }
            '*' | '⊙' => {
                tokens.push(Token::Op(BinaryOpKind::Mul));
                i += 1;
            }
            '/' => {
                tokens.push(Token::Op(BinaryOpKind::Div));
                i += 1;
            }
            '+' => {
                tokens.push(Token::Op(BinaryOpKind::Add));
                i += 1;
            }
            '-' | '−' => {
                tokens.push(Token::Op(BinaryOpKind::Sub));
                i += 1;
            }
            'φ' => {
                i += 1;
                tokens.push(Token::Slot(read_digits(&chars, &mut i)));
            }
            _ if c.is_ascii_alphabetic() => {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_alphabetic() {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                match word.to_lowercase().as_str() {
                    "h" => tokens.push(Token::H),
                    "max" => tokens.push(Token::Max),
                    "min" => tokens.push(Token::Min),
                    "p" | "phi" => tokens.push(Token::Slot(read_digits(&chars, &mut i))),
                    other => {
                        return Err(Error::Parse(format!("unexpected word '{other}'")));
                    }
                }
            }
            other => return Err(Error::Parse(format!("unexpected character '{other}'"))),
        }
    }
    Ok(tokens)
}

fn read_digits(chars: &[char], i: &mut usize) -> Option<usize> {
    let start = *i;
    while *i < chars.len() && chars[*i].is_ascii_digit() {
        *i += 1;
    }
    if *i > start {
        chars[start..*i].iter().collect::<String>().parse().ok()
    } else {
        None
    }
}

struct ChainParser {
    tokens: Vec<Token>,
    pos: usize,
}

impl ChainParser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Result<Token> {
        let t = self
            .tokens
            .get(self.pos)
            .cloned()
            .ok_or_else(|| Error::Parse("unexpected end of expression".into()))?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, want: Token) -> Result<()> {
        let got = self.next()?;
        if got == want {
            Ok(())
        } else {
            Err(Error::Parse(format!("expected {want:?}, found {got:?}")))
        }
    }

    fn slot(&mut self) -> Result<Option<usize>> {
        match self.next()? {
            Token::Slot(n) => Ok(n),
            other => Err(Error::Parse(format!(
                "expected a parameter slot, found {other:?}"
            ))),
        }
    }

    /// chain := primary (op slot)*
    fn chain(&mut self) -> Result<Vec<(BinaryOpKind, Option<usize>)>> {
        let mut steps = self.primary()?;
        while let Some(Token::Op(op)) = self.peek() {
            let op = *op;
            self.pos += 1;
            steps.push((op, self.slot()?));
        }
        Ok(steps)
    }

    /// primary := "h" | "(" chain ")" | ("max"|"min") "(" chain "," slot ")"
    fn primary(&mut self) -> Result<Vec<(BinaryOpKind, Option<usize>)>> {
        match self.next()? {
            Token::H => Ok(Vec::new()),
            Token::LParen => {
                let steps = self.chain()?;
                self.expect(Token::RParen)?;
                Ok(steps)
            }
            t @ (Token::Max | Token::Min) => {
                let op = if t == Token::Max {
                    BinaryOpKind::Max
                } else {
                    BinaryOpKind::Min
                };
                self.expect(Token::LParen)?;
                let mut steps = self.chain()?;
                self.expect(Token::Comma)?;
                let slot = self.slot()?;
                self.expect(Token::RParen)?;
                steps.push((op, slot));
                Ok(steps)
            }
            other => Err(Error::Parse(format!(
                "expected h, '(', max or min, found {other:?}"
            ))),
        }
    }
}

/// Parse an infix modulation chain. `h` must be the innermost-leftmost
/// operand; each op's right operand is a parameter slot. Slots may be
/// numbered (they must then match their position in the chain) or bare
/// and auto-numbered.
pub fn parse_chain(input: &str) -> Result<ModulationExpr> {
    let mut parser = ChainParser {
        tokens: tokenize(input)?,
        pos: 0,
    };
    let steps = parser.chain()?;
    if parser.pos != parser.tokens.len() {
        return Err(Error::Parse(format!(
            "trailing input after position {}",
            parser.pos
        )));
    }
    let numbered: Vec<(BinaryOpKind, usize)> = steps
        .into_iter()
        .enumerate()
        .map(|(i, (op, slot))| match slot {
            Some(n) if n != i + 1 => Err(Error::Parse(format!(
                "slot p{n} appears at chain position {}; slots bind in order",
                i + 1
            ))),
            Some(n) => Ok((op, n)),
            None => Ok((op, i + 1)),
        })
        .collect::<Result<_>>()?;
    ModulationExpr::new(numbered)
}
