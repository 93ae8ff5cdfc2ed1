//! The `waitk` command line.
//!
//! ```text
//! waitk <command> [CONFIG] [key=value ...]
//! ```
//!
//! `CONFIG` is an optional `key=value` file (also accepted as
//! `--config FILE`); pairs given on the command line override it. Every key
//! must be understood by the command, otherwise the run stops with a usage
//! error before doing any work.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::bench::{scaling_sweep, to_csv as bench_csv, BenchSpec};
use crate::config::{parse_value, read_pairs};
use crate::decode::{default_max_len, streaming_decode_with, StreamEvent};
use crate::error::Error;
use crate::eval::{evaluate_model, hidden_distance_stats, k_matrix};
use crate::model::checkpoint;
use crate::training::{
    generate_synthetic, load_corpus, write_metrics_csv, ParallelExample, SyntheticTaskSpec, TrainConfig, Trainer,
};
use crate::vocab::Vocab;
use crate::{ModelConfig, Seq2Seq};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Failure of a command, carrying the exit status it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Help was requested; the text goes to standard output.
    Help(String),
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Help(m) | CliError::Usage(m) => f.write_str(m),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Exit status for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Ingestion(_) | Error::Checkpoint(_) => EXIT_IO,
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

fn status(e: &CliError) -> i32 {
    match e {
        CliError::Help(_) => EXIT_OK,
        CliError::Usage(_) => EXIT_USAGE,
        CliError::Run(e) => exit_code(e),
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Run(Error::io(path, e))
}

fn stdout_err(e: io::Error) -> CliError {
    CliError::Run(Error::io("<stdout>", e))
}

/// Key/value settings with usage tracking: every pair must be claimed by
/// the command, or [`Settings::finish`] reports it.
struct Settings {
    pairs: Vec<(String, String)>,
    used: Vec<bool>,
}

impl Settings {
    fn new(pairs: Vec<(String, String)>) -> Self {
        let used = vec![false; pairs.len()];
        Self { pairs, used }
    }

    /// Offers every pair, in order, to `f`; accepted pairs are marked used.
    fn apply(&mut self, mut f: impl FnMut(&str, &str) -> crate::Result<bool>) -> CliResult<()> {
        for (i, (k, v)) in self.pairs.iter().enumerate() {
            if f(k, v)? {
                self.used[i] = true;
            }
        }
        Ok(())
    }

    /// Last value given for `key`.
    fn take(&mut self, key: &str) -> Option<String> {
        let mut out = None;
        for (i, (k, v)) in self.pairs.iter().enumerate() {
            if k == key {
                self.used[i] = true;
                out = Some(v.clone());
            }
        }
        out
    }

    fn take_parsed<T: std::str::FromStr>(&mut self, key: &str, default: T) -> CliResult<T> {
        match self.take(key) {
            Some(v) => Ok(parse_value(key, &v)?),
            None => Ok(default),
        }
    }

    fn take_list(&mut self, key: &str, default: &[usize]) -> CliResult<Vec<usize>> {
        match self.take(key) {
            Some(v) => v
                .split(',')
                .map(|s| parse_value(key, s.trim()).map_err(CliError::from))
                .collect(),
            None => Ok(default.to_vec()),
        }
    }

    fn require(&mut self, key: &str) -> CliResult<String> {
        self.take(key)
            .ok_or_else(|| CliError::Usage(format!("missing required key {key:?}")))
    }

    fn finish(self) -> CliResult<()> {
        let unknown: Vec<&str> = self
            .pairs
            .iter()
            .zip(&self.used)
            .filter(|(_, &u)| !u)
            .map(|((k, _), _)| k.as_str())
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!(
                "unknown key(s) for this command: {}",
                unknown.join(", ")
            )))
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "waitk", about = "Wait-k simultaneous translation toolkit", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Eq)]
enum Command {
    /// Write a synthetic corpus (src.txt, tgt.txt, align.txt)
    GenData(Common),
    /// Train a student/teacher pair; writes checkpoints and metrics.csv
    Train(Common),
    /// Decode a test set under wait-k and write the report CSV
    Eval(Common),
    /// BLEU of several checkpoints across test-time k values
    KMatrix(Common),
    /// Forward-pass timing and multiply-accumulate sweep
    Bench(Common),
    /// Stream source lines from stdin, print target tokens as they are written
    Decode(Common),
}

/// Arguments shared by every command.
#[derive(Args, Debug, Clone, PartialEq, Eq)]
struct Common {
    /// key=value file read before the overrides
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// CONFIG file (when not given with --config) and key=value overrides
    #[arg(value_name = "CONFIG|KEY=VALUE")]
    items: Vec<String>,
}

const AFTER_HELP: &str = "Each command takes an optional CONFIG file of key=value lines \
(positional or --config FILE) followed by key=value overrides.\n\
Exit status: 0 ok, 2 usage or configuration, 3 input/output, 4 numeric failure.";

fn parse_args(args: &[String]) -> CliResult<(Command, Vec<(String, String)>)> {
    let argv = std::iter::once("waitk").chain(args.iter().map(String::as_str));
    let cli = Cli::try_parse_from(argv).map_err(|e| match e.kind() {
        ErrorKind::DisplayHelp => CliError::Help(e.to_string()),
        _ => CliError::Usage(e.to_string()),
    })?;
    let rest = match &cli.command {
        Command::GenData(c)
        | Command::Train(c)
        | Command::Eval(c)
        | Command::KMatrix(c)
        | Command::Bench(c)
        | Command::Decode(c) => c.clone(),
    };
    let mut config = rest.config;
    let mut overrides = Vec::new();
    for a in rest.items {
        if let Some((k, v)) = a.split_once('=') {
            if k.is_empty() {
                return Err(CliError::Usage(format!("empty key in {a:?}")));
            }
            overrides.push((k.to_string(), v.to_string()));
        } else if config.is_none() {
            config = Some(PathBuf::from(a));
        } else {
            return Err(CliError::Usage(format!("unexpected argument {a:?}")));
        }
    }
    let mut pairs = match config {
        Some(p) => read_pairs(&p).map_err(|e| match e {
            Error::Config(m) => CliError::Usage(format!("{}: {m}", p.display())),
            other => CliError::Run(other),
        })?,
        None => Vec::new(),
    };
    pairs.extend(overrides);
    Ok((cli.command, pairs))
}

/// Runs one command with the process's standard streams. `argv` excludes
/// the program name.
pub fn run(argv: &[String]) -> i32 {
    let stdin = io::stdin();
    let stdout = io::stdout();
    let stderr = io::stderr();
    run_with(argv, &mut stdin.lock(), &mut stdout.lock(), &mut stderr.lock())
}

/// [`run`] with explicit streams.
pub fn run_with(argv: &[String], input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = parse_args(argv).and_then(|(command, pairs)| {
        let mut s = Settings::new(pairs);
        match command {
            Command::GenData(_) => gen_data(&mut s, out),
            Command::Train(_) => train(&mut s, out, err),
            Command::Eval(_) => eval(&mut s, out),
            Command::KMatrix(_) => kmatrix(&mut s, out),
            Command::Bench(_) => bench(&mut s, out),
            Command::Decode(_) => decode(&mut s, input, out, err),
        }
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Help(text)) => {
            let _ = out.write_all(text.as_bytes());
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "waitk: {}", e.to_string().trim_end());
            status(&e)
        }
    }
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Writes to `path`, or to `out` when no path was given.
fn emit(path: Option<String>, text: &str, out: &mut dyn Write) -> CliResult<()> {
    match path {
        Some(p) => write_file(Path::new(&p), text),
        None => out.write_all(text.as_bytes()).map_err(stdout_err),
    }
}

fn task_spec(s: &mut Settings) -> CliResult<SyntheticTaskSpec> {
    let mut spec = SyntheticTaskSpec::default();
    s.apply(|k, v| spec.set(k, v))?;
    spec.validate()?;
    Ok(spec)
}

fn alignment_line(a: &[(usize, usize)]) -> String {
    a.iter().map(|(i, j)| format!("{i}-{j}")).collect::<Vec<_>>().join(" ")
}

fn parse_alignment(line: &str, n: usize) -> crate::Result<Vec<(usize, usize)>> {
    line.split_whitespace()
        .map(|p| {
            let bad = || Error::Ingestion(format!("line {n}: bad alignment pair {p:?}"));
            let (i, j) = p.split_once('-').ok_or_else(bad)?;
            Ok((i.parse().map_err(|_| bad())?, j.parse().map_err(|_| bad())?))
        })
        .collect()
}

fn gen_data(s: &mut Settings, out: &mut dyn Write) -> CliResult<()> {
    let spec = task_spec(s)?;
    let count: usize = s.take_parsed("count", 1000)?;
    let dir = PathBuf::from(s.take("out_dir").unwrap_or_else(|| "data".into()));
    std::mem::take(s).finish()?;
    let examples = generate_synthetic(&spec, count)?;
    let vocab = spec.vocab();
    let join = |ids: &[usize]| vocab.decode(ids).join(" ");
    let mut src = String::new();
    let mut tgt = String::new();
    let mut align = String::new();
    for ex in &examples {
        src.push_str(&join(&ex.src));
        src.push('\n');
        tgt.push_str(&join(&ex.tgt));
        tgt.push('\n');
        align.push_str(&alignment_line(ex.alignment.as_deref().unwrap_or(&[])));
        align.push('\n');
    }
    write_file(&dir.join("src.txt"), &src)?;
    write_file(&dir.join("tgt.txt"), &tgt)?;
    write_file(&dir.join("align.txt"), &align)?;
    writeln!(out, "wrote {count} {} pairs to {}", spec.kind.name(), dir.display()).map_err(stdout_err)?;
    Ok(())
}

impl Default for Settings {
    fn default() -> Self {
        Self::new(Vec::new())
    }
}

fn write_vocab(path: &Path, v: &Vocab) -> CliResult<()> {
    let mut text = v.words().join("\n");
    text.push('\n');
    write_file(path, &text)
}

fn read_vocab(path: &Path) -> CliResult<Vocab> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(Vocab::from_words(text.lines().map(str::to_string).collect()))
}

/// Source/target vocabularies stored beside a checkpoint, or the numeric
/// vocabulary of the synthetic tasks when there are none.
fn vocabs_for(model: &Seq2Seq, dir: &Path) -> CliResult<(Vocab, Vocab)> {
    let (sp, tp) = (dir.join("src.vocab"), dir.join("tgt.vocab"));
    let (src, tgt) = if sp.exists() && tp.exists() {
        (read_vocab(&sp)?, read_vocab(&tp)?)
    } else {
        (
            Vocab::numeric(model.config.src_vocab),
            Vocab::numeric(model.config.tgt_vocab),
        )
    };
    if src.len() != model.config.src_vocab || tgt.len() != model.config.tgt_vocab {
        return Err(CliError::Run(Error::Config(format!(
            "vocabulary sizes {}/{} do not match the checkpoint's {}/{}",
            src.len(),
            tgt.len(),
            model.config.src_vocab,
            model.config.tgt_vocab
        ))));
    }
    Ok((src, tgt))
}

/// Evaluation or training pairs: text files when `src`/`tgt` are given,
/// otherwise the synthetic task.
enum DataSource {
    Text {
        src: PathBuf,
        tgt: PathBuf,
        align: Option<PathBuf>,
    },
    Synthetic(SyntheticTaskSpec, usize),
}

fn data_source(s: &mut Settings, size_key: &str, default_size: usize, default_seed: u64) -> CliResult<DataSource> {
    let src = s.take("src");
    let tgt = s.take("tgt");
    let align = s.take("align");
    match (src, tgt) {
        (Some(src), Some(tgt)) => Ok(DataSource::Text {
            src: src.into(),
            tgt: tgt.into(),
            align: align.map(PathBuf::from),
        }),
        (None, None) => {
            if align.is_some() {
                return Err(CliError::Usage("align needs src and tgt".into()));
            }
            let mut spec = SyntheticTaskSpec {
                seed: default_seed,
                ..Default::default()
            };
            s.apply(|k, v| spec.set(k, v))?;
            spec.validate()?;
            let size = s.take_parsed(size_key, default_size)?;
            Ok(DataSource::Synthetic(spec, size))
        }
        _ => Err(CliError::Usage("src and tgt must be given together".into())),
    }
}

fn encode_text(
    src: &Path,
    tgt: &Path,
    align: Option<&Path>,
    sv: &Vocab,
    tv: &Vocab,
) -> CliResult<Vec<ParallelExample>> {
    let read = |p: &Path| fs::read_to_string(p).map_err(io_err(p));
    let (s, t) = (read(src)?, read(tgt)?);
    let (s, t): (Vec<&str>, Vec<&str>) = (s.lines().collect(), t.lines().collect());
    if s.len() != t.len() {
        return Err(CliError::Run(Error::Ingestion(format!(
            "{} has {} lines but {} has {}",
            src.display(),
            s.len(),
            tgt.display(),
            t.len()
        ))));
    }
    let a: Option<Vec<String>> = match align {
        Some(p) => Some(read(p)?.lines().map(str::to_string).collect()),
        None => None,
    };
    if let Some(a) = &a {
        if a.len() != s.len() {
            return Err(CliError::Run(Error::Ingestion(
                "alignment file has a different line count".into(),
            )));
        }
    }
    let mut out = Vec::new();
    for (i, (sl, tl)) in s.iter().zip(&t).enumerate() {
        if sl.trim().is_empty() || tl.trim().is_empty() {
            continue;
        }
        let alignment = match &a {
            Some(a) => Some(parse_alignment(&a[i], i + 1)?),
            None => None,
        };
        out.push(ParallelExample {
            src: sv.encode(sl),
            tgt: tv.encode(tl),
            alignment,
        });
    }
    if out.is_empty() {
        return Err(CliError::Run(Error::Ingestion("no non-empty sentence pairs".into())));
    }
    Ok(out)
}

fn train(s: &mut Settings, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let mut model = ModelConfig::default();
    let mut cfg = TrainConfig::default();
    s.apply(|k, v| model.set(k, v))?;
    s.apply(|k, v| cfg.set(k, v))?;
    let dir = PathBuf::from(s.take("out_dir").unwrap_or_else(|| "run".into()));
    let log_every: usize = s.take_parsed("log_every", 100)?;
    let source = data_source(s, "train_size", 4000, 1)?;
    std::mem::take(s).finish()?;
    cfg.validate()?;
    let data = match source {
        DataSource::Text { src, tgt, align } => {
            if align.is_some() {
                return Err(CliError::Usage("train does not use alignments".into()));
            }
            let corpus = load_corpus(&src, &tgt)?;
            model.src_vocab = corpus.src_vocab.len();
            model.tgt_vocab = corpus.tgt_vocab.len();
            write_vocab(&dir.join("src.vocab"), &corpus.src_vocab)?;
            write_vocab(&dir.join("tgt.vocab"), &corpus.tgt_vocab)?;
            corpus.examples
        }
        DataSource::Synthetic(spec, size) => {
            model.src_vocab = spec.vocab_size;
            model.tgt_vocab = spec.vocab_size;
            generate_synthetic(&spec, size)?
        }
    };
    let longest = data.iter().map(|e| e.src.len().max(e.tgt.len())).max().unwrap_or(0);
    if longest > model.max_len {
        return Err(CliError::Run(Error::Length {
            len: longest,
            max: model.max_len,
        }));
    }
    model.k = cfg.k;
    model.validate()?;
    let mut trainer = Trainer::new(model, cfg)?;
    let mut log_err = None;
    let metrics = trainer.fit(&data, |m| {
        if log_every > 0 && m.step % log_every == 0 {
            if let Err(e) = writeln!(
                err,
                "step {} student {:.4} teacher {:.4} distill {:.4}",
                m.step, m.loss_student, m.loss_teacher, m.loss_distill
            ) {
                log_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(CliError::Run(Error::io("<stderr>", e)));
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    checkpoint::save(&trainer.student, &dir.join("student.ckpt"))?;
    checkpoint::save(&trainer.teacher, &dir.join("teacher.ckpt"))?;
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &metrics).map_err(stdout_err)?;
    let path = dir.join("metrics.csv");
    fs::write(&path, csv).map_err(io_err(&path))?;
    writeln!(out, "trained {} steps; wrote {}", metrics.len(), dir.display()).map_err(stdout_err)?;
    Ok(())
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_eval_data(source: DataSource, model: &Seq2Seq, vocab_dir: &Path) -> CliResult<Vec<ParallelExample>> {
    match source {
        DataSource::Text { src, tgt, align } => {
            let (sv, tv) = vocabs_for(model, vocab_dir)?;
            encode_text(&src, &tgt, align.as_deref(), &sv, &tv)
        }
        DataSource::Synthetic(spec, size) => Ok(generate_synthetic(&spec, size)?),
    }
}

fn eval(s: &mut Settings, out: &mut dyn Write) -> CliResult<()> {
    let ckpt = PathBuf::from(s.require("checkpoint")?);
    let teacher = s.take("teacher").map(PathBuf::from);
    let k_override: Option<usize> = s.take("k").map(|v| parse_value("k", &v)).transpose()?;
    let report_path = s.take("out");
    let traces_path = s.take("traces");
    let vocab_dir = s
        .take("vocab_dir")
        .map(PathBuf::from)
        .unwrap_or_else(|| checkpoint_dir(&ckpt));
    let source = data_source(s, "test_size", 200, 777)?;
    std::mem::take(s).finish()?;
    let model = checkpoint::load(&ckpt)?;
    let k = k_override.unwrap_or(model.config.k);
    let data = load_eval_data(source, &model, &vocab_dir)?;
    let mut ev = evaluate_model(&model, &data, k)?;
    if let Some(t) = teacher {
        let teacher = checkpoint::load(&t)?;
        ev.report.mean_hidden_l2 = Some(hidden_distance_stats(&model, &teacher, &data)?);
    }
    if let Some(p) = traces_path {
        let mut text = String::new();
        for d in &ev.decodes {
            text.push_str(&d.trace.to_json_line());
            text.push('\n');
        }
        write_file(Path::new(&p), &text)?;
    }
    emit(report_path, &ev.report.to_csv(), out)
}

fn kmatrix(s: &mut Settings, out: &mut dyn Write) -> CliResult<()> {
    let paths: Vec<PathBuf> = s
        .require("checkpoints")?
        .split(',')
        .map(|p| PathBuf::from(p.trim()))
        .collect();
    let test_ks = s.take_list("test_ks", &[1, 3, 5])?;
    let report_path = s.take("out");
    let vocab_dir = s.take("vocab_dir").map(PathBuf::from);
    let source = data_source(s, "test_size", 200, 777)?;
    std::mem::take(s).finish()?;
    let models = paths
        .iter()
        .map(|p| checkpoint::load(p))
        .collect::<crate::Result<Vec<_>>>()?;
    let dir = vocab_dir.unwrap_or_else(|| checkpoint_dir(&paths[0]));
    let data = load_eval_data(source, &models[0], &dir)?;
    let refs: Vec<(usize, &Seq2Seq)> = models.iter().map(|m| (m.config.k, m)).collect();
    let m = k_matrix(&refs, &test_ks, &data)?;
    emit(report_path, &m.to_csv(), out)
}

fn bench(s: &mut Settings, out: &mut dyn Write) -> CliResult<()> {
    let mut base = BenchSpec::standard(64, 1);
    s.apply(|k, v| base.model.set(k, v))?;
    let n_values = s.take_list("n_values", &[8, 16, 32, 64])?;
    let k_values = s.take_list("k_values", &[1, 3, 5])?;
    base.trials = s.take_parsed("trials", base.trials)?;
    base.batch = s.take_parsed("batch", base.batch)?;
    base.seed = s.take_parsed("seed", base.seed)?;
    let report_path = s.take("out");
    std::mem::take(s).finish()?;
    base.model.validate()?;
    let rows = scaling_sweep(&base, &n_values, &k_values)?;
    emit(report_path, &bench_csv(&rows), out)
}

fn decode(s: &mut Settings, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let ckpt = PathBuf::from(s.require("checkpoint")?);
    let k_override: Option<usize> = s.take("k").map(|v| parse_value("k", &v)).transpose()?;
    let verbose: bool = s.take_parsed("verbose", false)?;
    let vocab_dir = s
        .take("vocab_dir")
        .map(PathBuf::from)
        .unwrap_or_else(|| checkpoint_dir(&ckpt));
    std::mem::take(s).finish()?;
    let model = checkpoint::load(&ckpt)?;
    let k = k_override.unwrap_or(model.config.k);
    let (sv, tv) = vocabs_for(&model, &vocab_dir)?;
    let mut line = String::new();
    loop {
        line.clear();
        let read = input.read_line(&mut line).map_err(io_err(Path::new("<stdin>")))?;
        if read == 0 {
            break;
        }
        let src = sv.encode(&line);
        if !src.is_empty() {
            let mut first = true;
            streaming_decode_with(&model, &src, k, default_max_len(src.len()), |ev| {
                let result = match ev {
                    StreamEvent::Read(t) => {
                        if verbose {
                            writeln!(err, "read {}", sv.word(t))
                        } else {
                            Ok(())
                        }
                    }
                    StreamEvent::Write(t) => {
                        let sep = if first { "" } else { " " };
                        first = false;
                        let r = write!(out, "{sep}{}", tv.word(t)).and_then(|_| out.flush());
                        if verbose {
                            r.and_then(|_| writeln!(err, "write {}", tv.word(t)))
                        } else {
                            r
                        }
                    }
                };
                result.map_err(|e| Error::io("<stdout>", e))
            })?;
        }
        writeln!(out).and_then(|_| out.flush()).map_err(stdout_err)?;
    }
    Ok(())
}
