use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use sinklab::harness::{self, EndpointConfig, HarnessError, RequestParams, Transcript};
use sinklab::kvcache::CachePolicy;
use sinklab::promptkit::{render_prompt, DesignSpec};
use sinklab::rtllint::{lint_sources, LintFinding};
use sinklab::score::{score_design, score_pair, DesignScore, ScoreReport};
use sinklab::transformer::{
    generate, sliding_recompute_perplexity, streaming_perplexity, train_with, ModelConfig, PolicySpec,
    TinyLmModel, TrainOptions,
};
use sinklab::vlex::tokenize;

#[derive(Parser)]
#[command(name = "sinklab", version, about = "KV-cache policy experiments and RTL scoring tools")]
struct Cli {
    /// Output format, where the command supports it.
    #[arg(long, global = true, value_enum, default_value_t = Emit::Text)]
    emit: Emit,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Emit {
    Json,
    Text,
    Csv,
}

#[derive(Subcommand)]
enum Cmd {
    /// Tokenize a Verilog file.
    Tokenize {
        file: PathBuf,
    },
    /// Token-level edit score of generated RTL against a reference.
    Score(ScoreArgs),
    /// Run the failure-mode detectors.
    Lint {
        /// Files or directories (directories contribute .v/.sv/.vh/.svh files).
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Prompt construction.
    #[command(subcommand)]
    Prompt(PromptCmd),
    /// Train the byte-level toy model.
    Train(TrainArgs),
    /// Greedy generation with the toy model.
    Gen(GenArgs),
    /// Streaming perplexity of the toy model under cache policies.
    Ppl(PplArgs),
    /// Remote chat-completions endpoint.
    #[command(subcommand)]
    Llm(LlmCmd),
    /// Print the completion stored in a transcript. No network.
    Replay {
        transcript: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score and lint transcripts into a bar-chart-ready table.
    Report(ReportArgs),
}

#[derive(Args)]
struct ScoreArgs {
    /// Reference files or directories.
    #[arg(long = "ref", required = true, num_args = 1..)]
    reference: Vec<PathBuf>,
    /// Generated files or directories.
    #[arg(long = "gen", required = true, num_args = 1..)]
    generated: Vec<PathBuf>,
    /// Compare the concatenated streams without pairing modules.
    #[arg(long)]
    flat: bool,
}

#[derive(Subcommand)]
enum PromptCmd {
    /// Render a JSON design spec into prompt text.
    Render {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModelShape {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 128)]
    d_ff: usize,
    /// Training context length.
    #[arg(long, default_value_t = 64)]
    ctx: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    shape: ModelShape,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Bytes at the end of the corpus kept out of training.
    #[arg(long, default_value_t = 4096)]
    holdout: usize,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, conflicts_with = "prompt_file")]
    prompt: Option<String>,
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    /// dense | window:W | sink:S,R | sink:prompt,R
    #[arg(long, default_value = "sink:4,60")]
    policy: String,
    #[arg(long, default_value_t = 200)]
    max_new: usize,
    /// Stop after emitting this byte value.
    #[arg(long)]
    stop: Option<u8>,
    /// Also store a transcript.
    #[arg(long)]
    transcript: Option<PathBuf>,
}

#[derive(Args)]
struct PplArgs {
    #[arg(long)]
    model: PathBuf,
    /// Text to evaluate; its last `--holdout` bytes are used.
    #[arg(long)]
    text: PathBuf,
    #[arg(long, default_value_t = 4096)]
    holdout: usize,
    /// Repeatable. Defaults to dense, window:64 and sink:4,60.
    #[arg(long)]
    policy: Vec<String>,
    /// Also report dense recompute over the last W tokens.
    #[arg(long)]
    recompute: Option<usize>,
}

#[derive(Subcommand)]
enum LlmCmd {
    /// Send one prompt and store the transcript.
    Run(LlmRunArgs),
}

#[derive(Args)]
struct LlmRunArgs {
    #[arg(long, conflicts_with = "spec")]
    prompt_file: Option<PathBuf>,
    /// Render this design spec as the prompt.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Request URL; falls back to SINKLAB_ENDPOINT.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value = "default")]
    model: String,
    /// Cache policy the endpoint is known to run, recorded in the transcript.
    #[arg(long, default_value = "unspecified")]
    policy: String,
    #[arg(long, default_value_t = 8192)]
    max_tokens: u32,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    /// Seconds before the first retry; later retries double it.
    #[arg(long, default_value_t = 1.0)]
    retry_base: f64,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "ref", required = true, num_args = 1..)]
    reference: Vec<PathBuf>,
    #[arg(long = "transcript", required = true, num_args = 1..)]
    transcripts: Vec<PathBuf>,
    /// One per transcript; defaults to the file stem.
    #[arg(long = "label")]
    labels: Vec<String>,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    out_json: Option<PathBuf>,
}

const SOURCE_EXTS: [&str; 4] = ["v", "sv", "vh", "svh"];

/// Files keep their given order; directories expand to sorted source files.
fn collect_sources(paths: &[PathBuf]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| SOURCE_EXTS.contains(&e))
                })
                .collect();
            files.sort();
            for f in files {
                out.push((f.display().to_string(), read(&f)?));
            }
        } else {
            out.push((p.display().to_string(), read(p)?));
        }
    }
    Ok(out)
}

fn read(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn write_out(p: &Path, text: &str) -> Result<()> {
    sinklab::fsutil::write_atomic(p, text.as_bytes()).with_context(|| format!("writing {}", p.display()))
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn csv_row(fields: &[String]) -> String {
    fields
        .iter()
        .map(|f| {
            if f.contains([',', '"', '\n']) {
                format!("\"{}\"", f.replace('"', "\"\""))
            } else {
                f.clone()
            }
        })
        .collect::<Vec<_>>()
        .join(",")
}

fn score_text(r: &ScoreReport) -> String {
    format!(
        "ref_tokens     {}\ngen_tokens     {}\nmatched        {}\nsubstitutions  {}\ninsertions     {}\ndeletions      {}\nfix_cost       {}\nsuccess_pct    {:.4}\ncorrect_pct    {:.4}\n",
        r.ref_tokens,
        r.gen_tokens,
        r.matched,
        r.substitutions,
        r.insertions,
        r.deletions,
        r.fix_cost,
        r.success_pct,
        r.correct_pct
    )
}

fn cmd_tokenize(emit: Emit, file: &Path) -> Result<()> {
    let stream = tokenize(&read(file)?);
    match emit {
        Emit::Json => print_json(&stream.tokens),
        Emit::Text | Emit::Csv => {
            print!("{}", stream.to_golden());
            Ok(())
        }
    }
}

fn cmd_score(emit: Emit, a: &ScoreArgs) -> Result<()> {
    let reference = collect_sources(&a.reference)?;
    let generated = collect_sources(&a.generated)?;
    let (total, design): (ScoreReport, Option<DesignScore>) = if a.flat {
        let cat = |v: &[(String, String)]| v.iter().map(|(_, s)| s.as_str()).collect::<Vec<_>>().join("\n");
        (score_pair(&cat(&reference), &cat(&generated))?, None)
    } else {
        let d = score_design(&reference, &generated)?;
        (d.total.clone(), Some(d))
    };
    match emit {
        Emit::Json => match design {
            Some(d) => print_json(&d),
            None => print_json(&total),
        },
        Emit::Csv => {
            println!("ref_tokens,fix_cost,success_pct,correct_pct");
            println!(
                "{},{},{:.4},{:.4}",
                total.ref_tokens, total.fix_cost, total.success_pct, total.correct_pct
            );
            Ok(())
        }
        Emit::Text => {
            if let Some(d) = &design {
                for m in &d.modules {
                    println!(
                        "{:<24} {:<8} fix={:<6} ref={}",
                        m.name,
                        format!("{:?}", m.status).to_lowercase(),
                        m.counts.fix_cost(),
                        m.counts.ref_len()
                    );
                }
                println!();
            }
            print!("{}", score_text(&total));
            Ok(())
        }
    }
}

fn finding_json(f: &LintFinding) -> serde_json::Value {
    json!({
        "rule": f.rule,
        "severity": f.severity,
        "file": f.file,
        "line": f.span.line,
        "col": f.span.col,
        "offset": f.span.offset,
        "len": f.span.len,
        "message": f.message,
        "evidence": f.evidence,
    })
}

fn cmd_lint(emit: Emit, paths: &[PathBuf]) -> Result<()> {
    let files = collect_sources(paths)?;
    let findings = lint_sources(&files);
    match emit {
        Emit::Json => print_json(&findings.iter().map(finding_json).collect::<Vec<_>>()),
        Emit::Csv => {
            println!("rule,severity,file,line,col,message");
            for f in &findings {
                println!(
                    "{}",
                    csv_row(&[
                        f.rule.to_string(),
                        f.severity.to_string(),
                        f.file.clone(),
                        f.span.line.to_string(),
                        f.span.col.to_string(),
                        f.message.clone(),
                    ])
                );
            }
            Ok(())
        }
        Emit::Text => {
            for f in &findings {
                println!("{f}");
            }
            println!("{} finding(s) in {} file(s)", findings.len(), files.len());
            Ok(())
        }
    }
}

fn load_spec(p: &Path) -> Result<DesignSpec> {
    DesignSpec::from_json(&read(p)?).with_context(|| format!("parsing {}", p.display()))
}

fn cmd_prompt(cmd: &PromptCmd) -> Result<()> {
    let PromptCmd::Render { spec, out } = cmd;
    let text = render_prompt(&load_spec(spec)?)?;
    match out {
        Some(p) => write_out(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn split_holdout(bytes: &[u8], holdout: usize) -> Result<(&[u8], &[u8])> {
    if holdout >= bytes.len() {
        bail!("holdout of {holdout} bytes leaves nothing of a {}-byte text", bytes.len());
    }
    Ok(bytes.split_at(bytes.len() - holdout))
}

fn cmd_train(emit: Emit, a: &TrainArgs) -> Result<()> {
    let corpus = std::fs::read(&a.corpus).with_context(|| format!("reading {}", a.corpus.display()))?;
    let (train, _) = split_holdout(&corpus, a.holdout)?;
    let config = ModelConfig {
        n_layers: a.shape.layers,
        n_heads: a.shape.heads,
        d_model: a.shape.d_model,
        d_ff: a.shape.d_ff,
        vocab_size: 256,
        train_context_len: a.shape.ctx,
    };
    let opts = TrainOptions {
        steps: a.steps,
        seed: a.seed,
        learning_rate: a.lr,
        batch_size: a.batch,
        ..Default::default()
    };
    let out = train_with(train, config, &opts)?;
    out.model.save(&a.out)?;
    let tail = &out.losses[out.losses.len().saturating_sub(50)..];
    let tail_mean = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    match emit {
        Emit::Json => print_json(&json!({
            "model": a.out,
            "params": config.param_count(),
            "steps": a.steps,
            "seed": a.seed,
            "learning_rate": a.lr,
            "first_loss": out.losses.first(),
            "final_loss_mean50": tail_mean,
        })),
        _ => {
            println!(
                "trained {} params for {} steps; loss {:.4} -> {:.4} (mean of last 50); saved {}",
                config.param_count(),
                a.steps,
                out.losses.first().copied().unwrap_or(f64::NAN),
                tail_mean,
                a.out.display()
            );
            Ok(())
        }
    }
}

fn cmd_gen(emit: Emit, a: &GenArgs) -> Result<()> {
    let model = TinyLmModel::load(&a.model)?;
    let prompt = match (&a.prompt, &a.prompt_file) {
        (Some(p), _) => p.clone(),
        (None, Some(f)) => read(f)?,
        (None, None) => bail!("give --prompt or --prompt-file"),
    };
    let spec: PolicySpec = a.policy.parse()?;
    let tokens: Vec<usize> = prompt.bytes().map(usize::from).collect();
    let started_at = harness::timestamp();
    let g = generate(&model, &tokens, a.max_new, spec, a.stop.map(usize::from))?;
    let bytes: Vec<u8> = g.tokens.iter().map(|&t| t as u8).collect();
    let completion = String::from_utf8_lossy(&bytes).into_owned();
    if let Some(p) = &a.transcript {
        let t = Transcript {
            format_version: harness::TRANSCRIPT_FORMAT_VERSION,
            endpoint: "local".into(),
            model: a.model.display().to_string(),
            policy: g.policy.to_string(),
            params: RequestParams {
                max_tokens: a.max_new as u32,
                temperature: 0.0,
            },
            prompt,
            completion: completion.clone(),
            started_at,
            finished_at: harness::timestamp(),
            attempts: 0,
            note: None,
        };
        t.save(p)?;
    }
    match emit {
        Emit::Json => print_json(&json!({
            "policy": g.policy.to_string(),
            "tokens": g.tokens,
            "text": completion,
            "retained_positions": g.retained_positions,
        })),
        _ => {
            println!("{completion}");
            Ok(())
        }
    }
}

fn cmd_ppl(emit: Emit, a: &PplArgs) -> Result<()> {
    let model = TinyLmModel::load(&a.model)?;
    let text = std::fs::read(&a.text).with_context(|| format!("reading {}", a.text.display()))?;
    let stream: Vec<usize> = if a.holdout >= text.len() {
        text.iter().map(|&b| b as usize).collect()
    } else {
        text[text.len() - a.holdout..].iter().map(|&b| b as usize).collect()
    };
    let names: Vec<String> = if a.policy.is_empty() {
        vec!["dense".into(), "window:64".into(), "sink:4,60".into()]
    } else {
        a.policy.clone()
    };
    let mut rows: Vec<(String, f64)> = Vec::new();
    for n in &names {
        let p: CachePolicy = n.parse()?;
        rows.push((p.to_string(), streaming_perplexity(&model, &stream, p)?));
    }
    if let Some(w) = a.recompute {
        rows.push((format!("recompute:{w}"), sliding_recompute_perplexity(&model, &stream, w)?));
    }
    match emit {
        Emit::Json => print_json(
            &rows
                .iter()
                .map(|(p, v)| json!({"policy": p, "perplexity": v, "tokens": stream.len()}))
                .collect::<Vec<_>>(),
        ),
        Emit::Csv => {
            println!("policy,perplexity");
            for (p, v) in &rows {
                println!("{},{v:.6}", csv_row(&[p.clone()]));
            }
            Ok(())
        }
        Emit::Text => {
            for (p, v) in &rows {
                println!("{p:<16} {v:.4}");
            }
            Ok(())
        }
    }
}

fn cmd_llm(emit: Emit, cmd: &LlmCmd) -> Result<()> {
    let LlmCmd::Run(a) = cmd;
    // credential and endpoint are checked before reading anything else
    let mut cfg = EndpointConfig::from_env(a.endpoint.as_deref(), &a.model)?;
    if !(a.retry_base.is_finite() && a.retry_base >= 0.0) {
        bail!("--retry-base must be a non-negative number of seconds");
    }
    cfg.retry.base_delay = std::time::Duration::from_secs_f64(a.retry_base);
    let prompt = match (&a.prompt_file, &a.spec) {
        (Some(p), _) => read(p)?,
        (None, Some(s)) => render_prompt(&load_spec(s)?)?,
        (None, None) => bail!("give --prompt-file or --spec"),
    };
    let params = RequestParams {
        max_tokens: a.max_tokens,
        temperature: a.temperature,
    };
    let t = harness::run_remote(&cfg, &prompt, &params, &a.policy)?;
    t.save(&a.out)?;
    match emit {
        Emit::Json => print_json(&json!({"transcript": a.out, "attempts": t.attempts, "completion_bytes": t.completion.len()})),
        _ => {
            println!(
                "stored {} ({} bytes, {} attempt(s))",
                a.out.display(),
                t.completion.len(),
                t.attempts
            );
            Ok(())
        }
    }
}

fn cmd_replay(emit: Emit, transcript: &Path, out: Option<&Path>) -> Result<()> {
    let t = harness::replay(transcript)?;
    if let Some(p) = out {
        return write_out(p, &t.completion);
    }
    match emit {
        Emit::Json => print_json(&t),
        _ => {
            print!("{}", t.completion);
            Ok(())
        }
    }
}

fn cmd_report(emit: Emit, a: &ReportArgs) -> Result<()> {
    if !a.labels.is_empty() && a.labels.len() != a.transcripts.len() {
        bail!(
            "{} label(s) for {} transcript(s)",
            a.labels.len(),
            a.transcripts.len()
        );
    }
    let reference = collect_sources(&a.reference)?;
    let mut inputs = Vec::new();
    for (i, p) in a.transcripts.iter().enumerate() {
        let t = harness::replay(p)?;
        let label = a.labels.get(i).cloned().unwrap_or_else(|| {
            p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        });
        inputs.push(harness::evaluate(&label, &p.display().to_string(), &t, &reference)?);
    }
    let config = json!({
        "reference": a.reference,
        "transcripts": a.transcripts,
    });
    let report = harness::report_aggregate(&inputs, config)?;
    if let Some(p) = &a.out_csv {
        write_out(p, &report.to_csv())?;
    }
    if let Some(p) = &a.out_json {
        write_out(p, &report.to_json())?;
    }
    match emit {
        Emit::Json => print!("{}", report.to_json()),
        Emit::Csv => print!("{}", report.to_csv()),
        Emit::Text => print!("{}", report.to_text()),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let emit = cli.emit;
    match &cli.cmd {
        Cmd::Tokenize { file } => cmd_tokenize(emit, file),
        Cmd::Score(a) => cmd_score(emit, a),
        Cmd::Lint { paths } => cmd_lint(emit, paths),
        Cmd::Prompt(c) => cmd_prompt(c),
        Cmd::Train(a) => cmd_train(emit, a),
        Cmd::Gen(a) => cmd_gen(emit, a),
        Cmd::Ppl(a) => cmd_ppl(emit, a),
        Cmd::Llm(c) => cmd_llm(emit, c),
        Cmd::Replay { transcript, out } => cmd_replay(emit, transcript, out.as_deref()),
        Cmd::Report(a) => cmd_report(emit, a),
    }
}

/// 2 for I/O and network failures anywhere in the chain, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<std::io::Error>() {
            return 2;
        }
        if let Some(h) = cause.downcast_ref::<HarnessError>() {
            if h.is_io() {
                return 2;
            }
        }
        if let Some(sinklab::TransformerError::Io(_)) = cause.downcast_ref::<sinklab::TransformerError>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
