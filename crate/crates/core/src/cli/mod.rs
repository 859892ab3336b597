//! The `slicenet` command line: train, decode, audit, analyze.

mod config;
mod report;

pub use config::{Data, DataConfig, ExperimentConfig, SEED_ENV};
pub use report::{mode_comparison, Audit, AuditRow, StackAnalysis};

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::convops::parse_stack;
use crate::decoding::{decode_all, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::SliceNet;
use crate::training::{train_loop, Dataset, OutputPaths, Vocab};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Files `train` writes next to the checkpoint.
pub const CONFIG_FILE: &str = "config.json";
pub const SRC_VOCAB_FILE: &str = "src.vocab";
pub const TGT_VOCAB_FILE: &str = "tgt.vocab";

#[derive(Debug, Parser)]
#[command(
    name = "slicenet",
    version,
    about = "Depthwise separable convolutional seq2seq"
)]
pub struct Cli {
    /// Progress lines on standard error.
    #[arg(long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints and metrics to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode one source sequence per input line.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to config.json beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer and total parameter counts for a config.
    Audit {
        #[arg(long)]
        config: PathBuf,
    },
    /// Receptive field and coverage of a convolution stack.
    Analyze {
        /// JSON array of layers, or a path to a file holding one.
        #[arg(long)]
        stack: String,
    },
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) | Error::Tensor(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// Parse `args` (program name first) and run. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match execute(&cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Train {
            config,
            seed,
            out: dir,
        } => train(config, *seed, dir, cli.verbose, out, err),
        Command::Decode {
            checkpoint,
            config,
            input,
            beam,
            alpha,
            max_len,
            out: dest,
        } => {
            let overrides = DecodeOverrides {
                beam: *beam,
                alpha: *alpha,
                max_len: *max_len,
            };
            decode(
                checkpoint,
                config.as_deref(),
                input,
                overrides,
                dest.as_deref(),
                out,
            )
        }
        Command::Audit { config } => audit(config, out),
        Command::Analyze { stack } => analyze(stack, out),
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Load a config, apply the seed override, open its data and fill in the
/// vocabulary sizes.
pub fn prepare(path: &Path, seed: Option<u64>) -> Result<(ExperimentConfig, Data)> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.resolve_seed(seed)?;
    cfg.train.validate()?;
    let data = cfg.data.open(&base_dir(path), &cfg.train)?;
    cfg.resolve_vocab(data.vocab_sizes())?;
    Ok((cfg, data))
}

fn train(
    config: &Path,
    seed: Option<u64>,
    dir: &Path,
    verbose: bool,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<()> {
    let (cfg, mut data) = prepare(config, seed)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_path = dir.join(CONFIG_FILE);
    std::fs::write(&config_path, cfg.to_json() + "\n").map_err(|e| Error::io(&config_path, e))?;
    if let Data::Corpus(c) = &data {
        c.src_vocab.save(&dir.join(SRC_VOCAB_FILE))?;
        c.tgt_vocab.save(&dir.join(TGT_VOCAB_FILE))?;
    }
    let mut model = SliceNet::new(cfg.model.clone(), cfg.train.seed)?;
    let paths = OutputPaths::in_dir(dir);
    let report = train_loop(&mut model, &mut data, &cfg.train, Some(&paths), |r| {
        if verbose {
            let _ = writeln!(
                err,
                "step {:>6}  loss {:.4}  neg_log_ppl {:.4}  accuracy {:.4}",
                r.step, r.loss, r.neg_log_ppl, r.accuracy
            );
        }
    })?;
    let last = report.final_eval().expect("the loop always evaluates");
    let best = report.best.expect("the loop always evaluates");
    write_out(
        out,
        &format!(
            "step {}: neg_log_ppl {:.4}, accuracy {:.4}; best neg_log_ppl {:.4} at step {}\n",
            last.step, last.neg_log_ppl, last.accuracy, best.neg_log_ppl, best.step
        ),
    )
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DecodeOverrides {
    pub beam: Option<usize>,
    pub alpha: Option<f64>,
    pub max_len: Option<usize>,
}

impl DecodeOverrides {
    pub fn apply(&self, cfg: &DecodeConfig) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.beam.unwrap_or(cfg.beam_size),
            alpha: self.alpha.unwrap_or(cfg.alpha),
            max_len: self.max_len.or(cfg.max_len),
        }
    }
}

/// Word vocabularies when training saved them, token ids otherwise.
enum Codec {
    Ids,
    Words { src: Vocab, tgt: Vocab },
}

impl Codec {
    fn open(dir: &Path) -> Result<Self> {
        let (s, t) = (dir.join(SRC_VOCAB_FILE), dir.join(TGT_VOCAB_FILE));
        if s.exists() && t.exists() {
            Ok(Codec::Words {
                src: Vocab::load(&s)?,
                tgt: Vocab::load(&t)?,
            })
        } else {
            Ok(Codec::Ids)
        }
    }

    fn encode(&self, line: &str, lineno: usize) -> Result<Vec<usize>> {
        match self {
            Codec::Words { src, .. } => Ok(src.encode(line)),
            Codec::Ids => line
                .split_whitespace()
                .map(|t| {
                    t.parse().map_err(|_| {
                        Error::Input(format!("input line {lineno}: {t:?} is not a token id"))
                    })
                })
                .collect(),
        }
    }

    fn decode(&self, ids: &[usize]) -> String {
        match self {
            Codec::Words { tgt, .. } => tgt.decode(ids),
            Codec::Ids => ids
                .iter()
                .take_while(|&&t| t != crate::model::END_ID)
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(" "),
        }
    }
}

fn decode(
    checkpoint: &Path,
    config: Option<&Path>,
    input: &Path,
    overrides: DecodeOverrides,
    dest: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let dir = base_dir(checkpoint);
    let config_path = config.map_or_else(|| dir.join(CONFIG_FILE), Path::to_path_buf);
    let cfg = ExperimentConfig::load(&config_path)?;
    cfg.validate()?;
    let decode_cfg = overrides.apply(&cfg.decode);
    decode_cfg.validate()?;
    let mut model = SliceNet::new(cfg.model.clone(), 0)?;
    model.store.load(checkpoint)?;
    let codec = Codec::open(&dir)?;

    let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let lines: Vec<&str> = text.lines().collect();
    let sources = lines
        .iter()
        .enumerate()
        .map(|(i, l)| codec.encode(l, i + 1))
        .collect::<Result<Vec<_>>>()?;
    // Blank lines decode to blank lines.
    let nonempty: Vec<Vec<usize>> = sources.iter().filter(|s| !s.is_empty()).cloned().collect();
    let mut decoded = decode_all(&model, &nonempty, &decode_cfg).into_iter();
    let mut result = String::new();
    for src in &sources {
        if !src.is_empty() {
            let hyp = decoded.next().expect("one result per non-empty source")?;
            result.push_str(&codec.decode(&hyp.tokens));
        }
        result.push('\n');
    }
    match dest {
        Some(p) => std::fs::write(p, result).map_err(|e| Error::io(p, e)),
        None => write_out(out, &result),
    }
}

fn audit(config: &Path, out: &mut dyn Write) -> Result<()> {
    let (cfg, _) = prepare(config, None)?;
    let audit = Audit::new(&cfg.model)?;
    write_out(out, &audit.render())?;
    write_out(out, "\n")?;
    write_out(out, &mode_comparison(&cfg.model))
}

fn analyze(stack: &str, out: &mut dyn Write) -> Result<()> {
    let path = Path::new(stack);
    let json = if !stack.trim_start().starts_with('[') && path.is_file() {
        std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?
    } else {
        stack.to_string()
    };
    let specs = parse_stack(&json)?;
    if specs.is_empty() {
        return Err(Error::Config("stack has no layers".into()));
    }
    write_out(out, &StackAnalysis::new(specs)?.render())
}
