//! Source ingestion, FIM layout and member / non-member / eval splits.

pub mod fim;
pub mod synth;
pub mod tokenizer;

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

pub use fim::{make_fim_example, FimExample, FimRecord};

use crate::error::{Error, Result};
use crate::rng::{substream, STREAM_FIM, STREAM_PUBLIC_FIM, STREAM_SPLITS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub origin: String,
}

/// Read every file under `root` whose extension is in `extensions`, sorted by
/// relative path, each truncated to at most `max_bytes` (on a character
/// boundary). Non-UTF-8 and empty files are skipped with a warning.
pub fn ingest_corpus(root: &Path, extensions: &[String], max_bytes: usize) -> Result<Vec<Document>> {
    if !root.is_dir() {
        return Err(Error::MissingInput(root.to_path_buf()));
    }
    let wanted: HashSet<String> = extensions
        .iter()
        .map(|e| e.trim_start_matches('.').to_string())
        .collect();

    let mut paths = Vec::new();
    for entry in WalkDir::new(root).follow_links(true) {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let ext = entry.path().extension().and_then(|e| e.to_str()).unwrap_or("");
        if wanted.contains(ext) {
            paths.push(entry.into_path());
        }
    }
    let mut keyed: Vec<(String, std::path::PathBuf)> = paths
        .into_iter()
        .map(|p| {
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            (rel, p)
        })
        .collect();
    keyed.sort();

    let mut docs = Vec::with_capacity(keyed.len());
    for (rel, path) in keyed {
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut text = match String::from_utf8(bytes) {
            Ok(t) => t,
            Err(_) => {
                log::warn!("skipping {rel}: not valid UTF-8");
                continue;
            }
        };
        if text.len() > max_bytes {
            let mut cut = max_bytes;
            while !text.is_char_boundary(cut) {
                cut -= 1;
            }
            text.truncate(cut);
        }
        if text.is_empty() {
            log::warn!("skipping {rel}: empty");
            continue;
        }
        docs.push(Document {
            id: rel.clone(),
            text,
            origin: path.to_string_lossy().into_owned(),
        });
    }
    Ok(docs)
}

/// Content hash over document ids and text, in order.
pub fn fingerprint(docs: &[Document]) -> String {
    let mut h = Sha256::new();
    for d in docs {
        h.update((d.id.len() as u64).to_le_bytes());
        h.update(d.id.as_bytes());
        h.update((d.text.len() as u64).to_le_bytes());
        h.update(d.text.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub members: f64,
    pub nonmembers: f64,
    pub eval: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FimSettings {
    pub min_middle: usize,
    pub max_len: usize,
}

/// Disjoint partitions of the corpus. `public` holds the documents left over
/// after the three named fractions and feeds non-private pre-training.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorpusSplit {
    pub members: Vec<FimExample>,
    pub nonmembers: Vec<FimExample>,
    pub eval: Vec<FimExample>,
    pub public: Vec<FimExample>,
}

fn part_size(frac: f64, n: usize) -> usize {
    (frac * n as f64 + 1e-9).floor() as usize
}

/// Seeded shuffle of `docs`, contiguous partition by the three fractions, then
/// one fixed FIM layout per document. Documents too short for a FIM layout
/// are dropped before partitioning.
pub fn build_splits(
    docs: &[Document],
    seed: u64,
    fracs: SplitFractions,
    fim: FimSettings,
) -> Result<CorpusSplit> {
    let mut problems = Vec::new();
    for (name, f) in [
        ("member", fracs.members),
        ("nonmember", fracs.nonmembers),
        ("eval", fracs.eval),
    ] {
        if !(0.0..=1.0).contains(&f) {
            problems.push(format!("{name} fraction {f} outside [0, 1]"));
        }
    }
    let total = fracs.members + fracs.nonmembers + fracs.eval;
    if total > 1.0 + 1e-9 {
        problems.push(format!("split fractions sum to {total} > 1"));
    }
    if docs.is_empty() {
        problems.push("corpus is empty".into());
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }

    let needed = fim.min_middle + 2;
    let mut usable: Vec<&Document> = Vec::with_capacity(docs.len());
    for d in docs {
        if d.text.len().min(fim.max_len.saturating_sub(4)) < needed {
            log::warn!("skipping {}: too short for a FIM layout", d.id);
        } else {
            usable.push(d);
        }
    }
    let n = usable.len();
    let sizes = [
        part_size(fracs.members, n),
        part_size(fracs.nonmembers, n),
        part_size(fracs.eval, n),
    ];
    for (name, s) in ["members", "nonmembers", "eval"].iter().zip(sizes) {
        if s == 0 {
            problems.push(format!("{name} split would be empty ({n} usable documents)"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, STREAM_SPLITS));
    let mut fim_rng = substream(seed, STREAM_FIM);
    let mut examples = Vec::with_capacity(n);
    for &k in &order {
        examples.push(make_fim_example(usable[k], &mut fim_rng, fim.min_middle, fim.max_len)?);
    }

    let mut rest = examples.into_iter();
    let mut take = |s: usize| rest.by_ref().take(s).collect::<Vec<_>>();
    let members = take(sizes[0]);
    let nonmembers = take(sizes[1]);
    let eval = take(sizes[2]);
    let public = take(usize::MAX);
    Ok(CorpusSplit {
        members,
        nonmembers,
        eval,
        public,
    })
}

/// FIM examples for a separate public corpus, used only for pre-training.
/// Documents too short for a FIM layout are skipped; ids get a `public/`
/// prefix so they never collide with ids from the private corpus.
pub fn public_examples(docs: &[Document], seed: u64, fim: FimSettings) -> Result<Vec<FimExample>> {
    let needed = fim.min_middle + 2;
    let mut rng = substream(seed, STREAM_PUBLIC_FIM);
    let mut out = Vec::with_capacity(docs.len());
    for d in docs {
        if d.text.len().min(fim.max_len.saturating_sub(4)) < needed {
            log::warn!("skipping public {}: too short for a FIM layout", d.id);
            continue;
        }
        let mut ex = make_fim_example(d, &mut rng, fim.min_middle, fim.max_len)?;
        ex.id = format!("public/{}", ex.id);
        out.push(ex);
    }
    Ok(out)
}

/// Repeat a seeded random `fraction` of `members` so each appears `k` times.
///
/// Returns the expanded list (originals first, extra copies appended) and the
/// sorted ids of the duplicated examples, which are flagged as canaries.
pub fn inject_duplicates<R: Rng + ?Sized>(
    members: &[FimExample],
    k: usize,
    fraction: f64,
    rng: &mut R,
) -> Result<(Vec<FimExample>, Vec<String>)> {
    if k == 0 {
        return Err(Error::config("duplicate repetition count must be >= 1"));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config(format!("duplicate fraction {fraction} outside [0, 1]")));
    }
    let count = part_size(fraction, members.len());
    if k == 1 || count == 0 {
        return Ok((members.to_vec(), Vec::new()));
    }
    let picked: BTreeSet<usize> = rand::seq::index::sample(rng, members.len(), count).into_iter().collect();
    let mut out = members.to_vec();
    for &i in &picked {
        out[i].is_canary = true;
    }
    let mut copies = Vec::with_capacity(count * (k - 1));
    for &i in &picked {
        for _ in 1..k {
            copies.push(out[i].clone());
        }
    }
    out.extend(copies);
    let ids = picked.iter().map(|&i| members[i].id.clone()).collect();
    Ok((out, ids))
}

pub fn write_jsonl(path: &Path, examples: &[FimExample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, &ex.to_record())?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<FimExample>> {
    let file = fs::File::open(path).map_err(|_| Error::MissingInput(path.to_path_buf()))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FimRecord = serde_json::from_str(&line)?;
        out.push(FimExample::from_record(&rec));
    }
    Ok(out)
}
