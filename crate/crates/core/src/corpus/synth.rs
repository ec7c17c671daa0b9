//! Synthetic Kotlin-like snippets.
//!
//! Each snippet is drawn from a small set of templates (learnable structure)
//! filled with random names and literals (per-document
//! content a model can only reproduce by memorizing it).

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::substream;

const VERBS: &[&str] = &[
    "load", "save", "find", "build", "parse", "render", "check", "merge", "fetch", "apply",
    "reset", "update", "compute", "format", "resolve", "collect", "scan", "encode", "decode",
    "flush", "sort", "track", "emit", "open",
];

const NOUNS: &[&str] = &[
    "User", "Order", "Invoice", "Token", "Session", "Cache", "Report", "Config", "Buffer",
    "Account", "Payment", "Route", "Index", "Ledger", "Profile", "Shard", "Queue", "Widget",
    "Batch", "Record", "Filter", "Stream", "Handle", "Anchor", "Vault", "Signal", "Module",
    "Client", "Entry", "Frame",
];

const TYPES: &[&str] = &["Int", "Long", "String", "Boolean", "Double"];

fn key<R: Rng + ?Sized>(rng: &mut R, len: usize) -> String {
    const ALNUM: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
    (0..len).map(|_| *ALNUM.choose(rng).unwrap() as char).collect()
}

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).unwrap()
}

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

/// One random snippet.
pub fn snippet<R: Rng + ?Sized>(rng: &mut R) -> String {
    let verb = pick(rng, VERBS);
    let noun = pick(rng, NOUNS);
    let noun2 = pick(rng, NOUNS);
    let a: u32 = rng.gen_range(10..10_000);
    let b: u32 = rng.gen_range(2..100);
    let k = key(rng, 7);
    match rng.gen_range(0..6) {
        0 => format!("fun {verb}{noun}(x: Int): Int {{\n    val k = {a}\n    return x * k + {b}\n}}\n"),
        1 => format!(
            "object {noun}Keys {{\n    const val {} = \"{k}\"\n}}\n",
            noun2.to_uppercase()
        ),
        2 => format!("class {noun}{noun2}(val id: Int) {{\n    fun {verb}() = id + {a}\n}}\n"),
        3 => format!(
            "fun {verb}{noun}(s: String): Boolean {{\n    return s.startsWith(\"{k}\")\n}}\n"
        ),
        4 => format!(
            "data class {noun}(val {}: {}, val size: Int = {a})\n",
            lower_first(noun2),
            pick(rng, TYPES)
        ),
        _ => format!(
            "val {}{noun2} = mapOf(\"{k}\" to {a})\n",
            lower_first(noun)
        ),
    }
}

/// `n` snippets as `(file name, text)` pairs, deterministic in `seed`.
pub fn generate(n: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = substream(seed, "synthetic-corpus");
    (0..n)
        .map(|i| (format!("snippet_{i:05}.kt"), snippet(&mut rng)))
        .collect()
}

/// Write a synthetic corpus of `n` files into `dir`.
pub fn write_corpus(dir: &Path, n: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, text) in generate(n, seed) {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
