use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use eos_core::evaluation::{evaluate, format_scores, StreamScorer, INTERVALS};
use eos_core::features::featurize;
use eos_core::ingest::{group_by_student, parse_log, write_log, ParseMode, StudentLog};
use eos_core::kv::KvMap;
use eos_core::neural::{load_checkpoint, save_checkpoint};
use eos_core::sessionize::{sessionize_all, HomeworkClass, LabeledSequence};
use eos_core::synthgen::{generate, summarize, GenConfig};
use eos_core::training::{encode_all, format_history, split_students, train_with, Level, Split, TrainConfig};
use eos_core::EosError;

use crate::manifest::{sha256_hex, RunManifest};
use crate::{CliError, Global};

pub const LOG_FILE: &str = "actions.csv";

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e.into()))
}

fn read_config(path: Option<&Path>) -> Result<Option<(String, Vec<u8>)>, CliError> {
    let Some(path) = path else { return Ok(None) };
    if !path.is_file() {
        return Err(CliError::Usage(format!("config file {} not found", path.display())));
    }
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| CliError::Usage(format!("config file {} is not UTF-8", path.display())))?;
    Ok(Some((text, bytes)))
}

fn train_config(g: &Global, manifest: Option<&mut RunManifest>) -> Result<TrainConfig, CliError> {
    let mut config = match read_config(g.config.as_deref())? {
        Some((text, bytes)) => {
            if let Some(m) = manifest {
                m.input("config", g.config.as_deref().unwrap(), &bytes);
            }
            TrainConfig::from_kv_text(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e.into()))
}

/// A data argument may name a log file or a directory holding `actions.csv`.
pub fn resolve_log(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(LOG_FILE)
    } else {
        path.to_path_buf()
    }
}

pub struct Data {
    pub path: PathBuf,
    pub bytes: Vec<u8>,
    pub logs: Vec<StudentLog>,
}

pub fn load_data(path: &Path, lenient: bool, g: &Global) -> Result<Data, CliError> {
    let path = resolve_log(path);
    let bytes = read_bytes(&path)?;
    let mode = if lenient { ParseMode::Lenient } else { ParseMode::Strict };
    let parsed = parse_log(BufReader::new(bytes.as_slice()), mode)?;
    if !parsed.skipped.is_empty() {
        g.note(&format!("skipped {} malformed lines", parsed.skipped.len()));
    }
    if parsed.actions.is_empty() {
        return Err(eos_core::EosError::Invalid(format!("{} holds no actions", path.display())).into());
    }
    Ok(Data {
        path,
        bytes,
        logs: group_by_student(parsed.actions),
    })
}

pub fn cmd_generate(g: &Global, out: &Path) -> Result<(), CliError> {
    let Some(config_path) = g.config.as_deref() else {
        return Err(CliError::Usage("generate needs --config <file>".into()));
    };
    let mut manifest = RunManifest::new("generate");
    let (text, bytes) = read_config(Some(config_path))?.expect("path given");
    manifest.input("config", config_path, &bytes);
    let mut config = GenConfig::from_kv_text(&text)?;
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    manifest.seed("generator", config.seed);
    manifest.config("gen", &config.to_kv());
    ensure_dir(out)?;

    let started = Instant::now();
    let logs = generate(&config)?;
    manifest.lap("generate", started.elapsed().as_secs_f64());
    let actions: Vec<_> = logs.iter().flat_map(|l| l.actions.iter().cloned()).collect();
    let mut log = Vec::new();
    write_log(&mut log, &actions).map_err(EosError::from)?;
    manifest.write("log", &out.join(LOG_FILE), &log)?;
    manifest.write("config", &out.join("gen.cfg"), config.to_kv().to_text().as_bytes())?;
    let summary = summarize(&logs, eos_core::sessionize::DEFAULT_GAP_SECONDS);
    manifest.write("summary", &out.join("summary.txt"), summary.to_text().as_bytes())?;
    g.note(&format!(
        "generated {} students, {} sessions, {} actions",
        summary.students, summary.sessions, summary.actions
    ));
    manifest.finish(out)
}

pub fn cmd_sessionize(g: &Global, data: &Path, out: &Path, gap: i64, lenient: bool) -> Result<(), CliError> {
    let d = load_data(data, lenient, g)?;
    let seqs = sessionize_all(&d.logs, gap);
    let mut text = String::from("student_id,timestamp,session,label\n");
    for s in &seqs {
        let actions = s
            .sessions
            .iter()
            .flat_map(|sess| sess.actions.iter().map(move |a| (sess.index, a)));
        for ((session, a), label) in actions.zip(&s.labels) {
            let _ = writeln!(text, "{},{},{session},{label}", s.student_id, a.timestamp);
        }
    }
    write_single(g, "sessionize", &d, out, text)
}

pub fn cmd_featurize(
    g: &Global,
    data: &Path,
    out: &Path,
    gap: i64,
    utc_offset: i32,
    lenient: bool,
) -> Result<(), CliError> {
    let d = load_data(data, lenient, g)?;
    let seqs = sessionize_all(&d.logs, gap);
    let mut text = String::from("student_id,index,label");
    for k in 0..eos_core::features::FRAME_DIM {
        let _ = write!(text, ",f{k}");
    }
    text.push('\n');
    for s in &seqs {
        for (i, (frame, label)) in featurize(s, utc_offset).iter().zip(&s.labels).enumerate() {
            let _ = write!(text, "{},{i},{label}", s.student_id);
            for v in frame {
                let _ = write!(text, ",{v}");
            }
            text.push('\n');
        }
    }
    write_single(g, "featurize", &d, out, text)
}

/// Writes one derived table plus a manifest beside it.
fn write_single(g: &Global, command: &str, d: &Data, out: &Path, text: String) -> Result<(), CliError> {
    let mut manifest = RunManifest::new(command);
    manifest.input("data", &d.path, &d.bytes);
    let dir = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    ensure_dir(dir)?;
    manifest.write(command, out, text.as_bytes())?;
    g.note(&format!("wrote {}", out.display()));
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or(command);
    let path = dir.join(format!("{stem}.manifest.txt"));
    eos_core::neural::write_atomic(&path, manifest.to_text().as_bytes()).map_err(|e| CliError::io(&path, e))
}

fn select(seqs: &[LabeledSequence], ids: &[String]) -> Vec<LabeledSequence> {
    seqs.iter()
        .filter(|s| ids.binary_search(&s.student_id).is_ok())
        .cloned()
        .collect()
}

fn split_text(split: &Split) -> String {
    let mut out = String::from("part,student_id\n");
    for (part, ids) in [
        ("train", &split.train),
        ("validation", &split.validation),
        ("test", &split.test),
    ] {
        for id in ids {
            let _ = writeln!(out, "{part},{id}");
        }
    }
    out
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    pub level: Option<Level>,
    pub gap: i64,
    pub utc_offset: i32,
    pub lenient: bool,
}

pub fn cmd_train(g: &Global, a: TrainArgs<'_>) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("train");
    let mut config = train_config(g, Some(&mut manifest))?;
    if let Some(level) = a.level {
        config.level = level;
    }
    let d = load_data(a.data, a.lenient, g)?;
    manifest.input("data", &d.path, &d.bytes);
    manifest.seed("train", config.seed);
    manifest.seed("split", config.split_seed);
    manifest.config("train", &config.to_kv());
    ensure_dir(a.out)?;

    let seqs = sessionize_all(&d.logs, a.gap);
    let ids: Vec<String> = seqs.iter().map(|s| s.student_id.clone()).collect();
    let split = split_students(&ids, config.split_seed)?;
    let train_set = encode_all(&select(&seqs, &split.train), a.utc_offset);
    let val_set = encode_all(&select(&seqs, &split.validation), a.utc_offset);
    g.note(&format!(
        "{} level: {} train / {} validation / {} test students",
        config.level.as_str(),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    ));

    let started = Instant::now();
    let outcome = train_with(&config, &train_set, &val_set, |r| {
        g.note(&format!(
            "epoch {:>3}  loss {:.5}  val_auc {:.4}  {:.1}s",
            r.epoch, r.train_loss, r.val_auc, r.seconds
        ))
    })?;
    manifest.lap("train", started.elapsed().as_secs_f64());
    if outcome.stopped_early {
        g.note(&format!(
            "early stop after epoch {}: no improvement for {} epochs since epoch {}",
            outcome.history.len(),
            config.patience,
            outcome.best_epoch
        ));
    }
    g.note(&format!("keeping parameters from epoch {}", outcome.best_epoch));

    let model = a.out.join("model.ckpt");
    save_checkpoint(&outcome.params, &model)?;
    let bytes = read_bytes(&model)?;
    manifest.outputs.push(crate::manifest::Artifact {
        role: "model".into(),
        path: model.clone(),
        sha256: sha256_hex(&bytes),
    });
    manifest.write(
        "history",
        &a.out.join("history.csv"),
        format_history(&outcome.history).as_bytes(),
    )?;
    manifest.write("config", &a.out.join("train.cfg"), config.to_kv().to_text().as_bytes())?;
    manifest.write("split", &a.out.join("split.csv"), split_text(&split).as_bytes())?;
    manifest.finish(a.out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Subset {
    Train,
    Validation,
    Test,
    All,
}

pub struct EvaluateArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub out: &'a Path,
    pub level: Option<Level>,
    pub split_seed: Option<u64>,
    pub subset: Subset,
    pub dump_scores: bool,
    pub gap: i64,
    pub utc_offset: i32,
    pub lenient: bool,
}

pub fn cmd_evaluate(g: &Global, a: EvaluateArgs<'_>) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("evaluate");
    let mut config = train_config(g, Some(&mut manifest))?;
    if let Some(level) = a.level {
        config.level = level;
    }
    if let Some(seed) = a.split_seed {
        config.split_seed = seed;
    }
    let params = load_checkpoint(a.checkpoint)?;
    manifest.input("model", a.checkpoint, &read_bytes(a.checkpoint)?);
    let d = load_data(a.data, a.lenient, g)?;
    manifest.input("data", &d.path, &d.bytes);
    manifest.seed("split", config.split_seed);
    manifest.config("eval", &{
        let mut kv = KvMap::default();
        kv.insert("level", config.level.as_str());
        kv.insert("subset", format!("{:?}", a.subset).to_lowercase());
        kv
    });
    ensure_dir(a.out)?;

    let seqs = sessionize_all(&d.logs, a.gap);
    let chosen = if a.subset == Subset::All {
        seqs
    } else {
        let ids: Vec<String> = seqs.iter().map(|s| s.student_id.clone()).collect();
        let split = split_students(&ids, config.split_seed)?;
        let ids = match a.subset {
            Subset::Train => &split.train,
            Subset::Validation => &split.validation,
            _ => &split.test,
        };
        select(&seqs, ids)
    };
    let encoded = encode_all(&chosen, a.utc_offset);
    let started = Instant::now();
    let (report, scored) = evaluate(&params, &chosen, &encoded, config.level)?;
    manifest.lap("evaluate", started.elapsed().as_secs_f64());
    if let Some(auc) = report.global_auc {
        g.note(&format!("{} students, global AUC {auc:.4}", chosen.len()));
    }
    manifest.write("report", &a.out.join("report.csv"), report.to_text().as_bytes())?;
    manifest.write(
        "trajectory",
        &a.out.join("trajectory.csv"),
        report.trajectory_text().as_bytes(),
    )?;
    if a.dump_scores {
        manifest.write("scores", &a.out.join("scores.csv"), format_scores(&scored).as_bytes())?;
    }
    manifest.finish(a.out)
}

pub struct ScoreArgs<'a> {
    pub checkpoint: &'a Path,
    pub input: &'a Path,
    pub out: Option<&'a Path>,
    pub state_in: Option<&'a Path>,
    pub state_out: Option<&'a Path>,
    pub level: Level,
    pub gap: i64,
    pub utc_offset: i32,
}

/// Scores a stream in input order. Consecutive actions of one student are
/// scored together; a student may reappear later in the stream.
pub fn cmd_score(g: &Global, a: ScoreArgs<'_>) -> Result<(), CliError> {
    let params = load_checkpoint(a.checkpoint)?;
    let mut scorer = StreamScorer::new(&params, a.level, a.gap, a.utc_offset)?;
    if let Some(path) = a.state_in {
        if path.exists() {
            let f = fs::File::open(path).map_err(|e| CliError::io(path, e.into()))?;
            scorer.load_state(BufReader::new(f))?;
        }
    }
    let reader: Box<dyn BufRead> = if a.input == Path::new("-") {
        Box::new(BufReader::new(std::io::stdin()))
    } else {
        let f = fs::File::open(a.input).map_err(|e| CliError::io(a.input, e.into()))?;
        Box::new(BufReader::new(f))
    };
    let actions = parse_log(reader, ParseMode::Strict)?.actions;

    let mut out = String::from("student_id,timestamp,prob\n");
    let mut start = 0;
    while start < actions.len() {
        let id = &actions[start].student_id;
        let end = start + actions[start..].iter().take_while(|x| &x.student_id == id).count();
        let run = &actions[start..end];
        for (action, p) in run.iter().zip(scorer.push_many(run)?) {
            let _ = writeln!(out, "{},{},{p}", action.student_id, action.timestamp);
        }
        start = end;
    }
    match a.out {
        Some(path) => eos_core::neural::write_atomic(path, out.as_bytes()).map_err(|e| CliError::io(path, e))?,
        None => std::io::stdout()
            .lock()
            .write_all(out.as_bytes())
            .map_err(|e| CliError::io(Path::new("<stdout>"), e.into()))?,
    }
    if let Some(path) = a.state_out {
        let mut buf = Vec::new();
        scorer.save_state(&mut buf)?;
        eos_core::neural::write_atomic(path, &buf).map_err(|e| CliError::io(path, e))?;
    }
    g.note(&format!("scored {} actions", actions.len()));
    Ok(())
}

/// Parsed `metric,stratum,value` rows.
fn read_report(path: &Path) -> Result<Vec<(String, String, String)>, CliError> {
    let text = String::from_utf8(read_bytes(path)?)
        .map_err(|_| CliError::Usage(format!("{} is not UTF-8", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(eos_core::EosError::Parse {
                line: i + 1,
                message: format!("{}: expected metric,stratum,value", path.display()),
            }
            .into());
        }
        rows.push((parts[0].to_string(), parts[1].to_string(), parts[2].to_string()));
    }
    Ok(rows)
}

fn cell(v: &str) -> String {
    v.parse::<f64>().map_or_else(|_| v.to_string(), |x| format!("{x:.4}"))
}

/// Side-by-side tables, one column per report.
pub fn render_reports(paths: &[PathBuf]) -> Result<String, CliError> {
    let reports: Vec<Vec<(String, String, String)>> = paths.iter().map(|p| read_report(p)).collect::<Result<_, _>>()?;
    let lookup = |r: &[(String, String, String)], m: &str, s: &str| {
        r.iter()
            .find(|(mm, ss, _)| mm == m && ss == s)
            .map_or_else(|| "NA".to_string(), |(_, _, v)| cell(v))
    };
    let header: String = paths
        .iter()
        .map(|p| {
            let name = p
                .parent()
                .and_then(Path::file_name)
                .unwrap_or(p.as_os_str())
                .to_string_lossy();
            format!(" | {name}")
        })
        .collect();
    let sep: String = paths.iter().map(|_| " | ---").collect();
    let mut out = String::new();
    let mut table = |title: &str, metric: &str, strata: &[&str]| {
        let _ = writeln!(out, "## {title}\n\n| stratum{header} |\n| ---{sep} |");
        for s in strata {
            let cells: String = reports.iter().map(|r| format!(" | {}", lookup(r, metric, s))).collect();
            let _ = writeln!(out, "| {s}{cells} |");
        }
        out.push('\n');
    };
    table("Global AUC", "global_auc", &["all"]);
    let homework: Vec<&str> = HomeworkClass::ALL.iter().map(|c| c.key()).collect();
    table("AUC by session homework", "homework_auc", &homework);
    table("AUC by session length", "length_auc", &INTERVALS);
    table(
        "AUC by session length divisibility",
        "div5_auc",
        &["divisible", "not_divisible"],
    );
    table("AUC by sessions per student", "usage_auc", &INTERVALS);
    let chunks: Vec<String> = (1..=20).map(|c| c.to_string()).chain(["eos".to_string()]).collect();
    let chunks: Vec<&str> = chunks.iter().map(String::as_str).collect();
    table("Mean probability by 5% session chunk", "trajectory", &chunks);
    Ok(out)
}

pub fn cmd_report(
    g: &Global,
    reports: &[PathBuf],
    data: Option<&Path>,
    out: Option<&Path>,
    gap: i64,
) -> Result<(), CliError> {
    if reports.is_empty() && data.is_none() {
        return Err(CliError::Usage(
            "report needs --eval <report.csv> or --data <log>".into(),
        ));
    }
    let mut text = String::new();
    if let Some(path) = data {
        let d = load_data(path, false, g)?;
        let s = summarize(&d.logs, gap);
        let _ = writeln!(text, "## Data\n\n| statistic | value |\n| --- | --- |");
        let _ = writeln!(text, "| students | {} |", s.students);
        let _ = writeln!(text, "| sessions | {} |", s.sessions);
        let _ = writeln!(text, "| actions | {} |", s.actions);
        for class in HomeworkClass::ALL {
            let _ = writeln!(
                text,
                "| {} homework sessions | {:.1}% |",
                class.key(),
                100.0 * s.fraction(class)
            );
        }
        text.push('\n');
    }
    if !reports.is_empty() {
        text.push_str(&render_reports(reports)?);
    }
    match out {
        Some(path) => eos_core::neural::write_atomic(path, text.as_bytes()).map_err(|e| CliError::io(path, e)),
        None => std::io::stdout()
            .lock()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::io(Path::new("<stdout>"), e.into())),
    }
}
