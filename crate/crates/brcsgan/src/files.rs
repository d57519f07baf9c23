//! On-disk formats: checkpoints, parallel text, vocabularies and metrics CSV.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use brcsgan_core::corpus::{format_parallel, format_vocab, parse_parallel, parse_vocab, SentencePair, Vocab};
use brcsgan_core::numerics::{decode_checkpoint, encode_checkpoint, Tensor};
use brcsgan_core::trainer::{MetricsRow, Phase};

pub const METRICS_HEADER: [&str; 7] = [
    "step",
    "phase",
    "mean_reward",
    "reward_variance",
    "disc_accuracy",
    "dev_bleu",
    "wall_seconds",
];

/// Write `bytes` to a file that must not exist yet.
pub fn write_new(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .with_context(|| format!("refusing to overwrite {}", path.display()))?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, named: &[(String, Tensor)]) -> Result<()> {
    write_new(path, &encode_checkpoint(named))
}

/// Replace the file at `path` atomically via a sibling temporary file.
pub fn replace_checkpoint(path: &Path, named: &[(String, Tensor)]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(named))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    decode_checkpoint(&bytes).with_context(|| format!("decoding checkpoint {}", path.display()))
}

pub fn save_parallel(dir: &Path, split: &str, pairs: &[SentencePair], vocab: &Vocab) -> Result<()> {
    let (src, tgt) = format_parallel(pairs, vocab);
    write_new(&dir.join(format!("{split}.src")), src.as_bytes())?;
    write_new(&dir.join(format!("{split}.tgt")), tgt.as_bytes())
}

pub fn load_parallel(dir: &Path, split: &str, vocab: &Vocab, t_max: usize) -> Result<Vec<SentencePair>> {
    let read = |ext: &str| {
        let p = dir.join(format!("{split}.{ext}"));
        fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))
    };
    Ok(parse_parallel(&read("src")?, &read("tgt")?, vocab, t_max)?)
}

pub fn save_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    write_new(path, format_vocab(vocab).as_bytes())
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_vocab(&text)?)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.phase.to_string(),
            cell(r.mean_reward),
            cell(r.reward_variance),
            cell(r.disc_accuracy),
            cell(r.dev_bleu),
            r.wall_seconds.to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

pub fn save_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_new(path, &metrics_csv(rows)?)
}

fn parse_phase(s: &str) -> Result<Phase> {
    Ok(match s {
        "gen-pretrain" => Phase::GenPretrain,
        "disc-pretrain" => Phase::DiscPretrain,
        "adversarial" => Phase::Adversarial,
        "mrt" => Phase::Mrt,
        _ => anyhow::bail!("unknown phase {s:?}"),
    })
}

pub fn load_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let opt = |s: &str| -> Result<Option<f64>> { Ok(if s.is_empty() { None } else { Some(s.parse()?) }) };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != METRICS_HEADER.len() {
            anyhow::bail!("{}: expected {} columns", path.display(), METRICS_HEADER.len());
        }
        rows.push(MetricsRow {
            step: rec[0].parse()?,
            phase: parse_phase(&rec[1])?,
            mean_reward: opt(&rec[2])?,
            reward_variance: opt(&rec[3])?,
            disc_accuracy: opt(&rec[4])?,
            dev_bleu: opt(&rec[5])?,
            wall_seconds: rec[6].parse()?,
        });
    }
    Ok(rows)
}
