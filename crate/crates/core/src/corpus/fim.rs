use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{self, Token, EOM, MID, PRE, SUF};
use super::Document;
use crate::error::{Error, Result};

/// One fill-in-the-middle instance in prefix-suffix-middle layout.
///
/// `sequence` is `[PRE] prefix [SUF] suffix [MID] middle [EOM]`.
/// `loss_mask[t]` marks positions whose next-token target `sequence[t + 1]`
/// belongs to `middle ⊕ [EOM]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FimExample {
    pub id: String,
    pub prefix: Vec<Token>,
    pub middle: Vec<Token>,
    pub suffix: Vec<Token>,
    pub sequence: Vec<Token>,
    pub loss_mask: Vec<bool>,
    /// Set on members that were repeated by duplicate injection.
    pub is_canary: bool,
}

impl FimExample {
    pub fn new(id: impl Into<String>, prefix: Vec<Token>, middle: Vec<Token>, suffix: Vec<Token>) -> Self {
        let mut sequence = Vec::with_capacity(prefix.len() + middle.len() + suffix.len() + 4);
        sequence.push(PRE);
        sequence.extend_from_slice(&prefix);
        sequence.push(SUF);
        sequence.extend_from_slice(&suffix);
        let mid_pos = sequence.len();
        sequence.push(MID);
        sequence.extend_from_slice(&middle);
        sequence.push(EOM);

        let mut loss_mask = vec![false; sequence.len()];
        // predictions made at [MID] .. last middle token target middle ⊕ EOM
        for m in loss_mask.iter_mut().skip(mid_pos).take(middle.len() + 1) {
            *m = true;
        }
        FimExample {
            id: id.into(),
            prefix,
            middle,
            suffix,
            sequence,
            loss_mask,
            is_canary: false,
        }
    }

    /// Build from explicit cut points `i <= j` over `tokens`.
    pub fn from_cuts(id: impl Into<String>, tokens: &[Token], i: usize, j: usize) -> Self {
        assert!(i <= j && j <= tokens.len(), "cut points out of range");
        FimExample::new(
            id,
            tokens[..i].to_vec(),
            tokens[i..j].to_vec(),
            tokens[j..].to_vec(),
        )
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    pub fn masked_positions(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Prefix ⊕ middle ⊕ suffix, i.e. the original document slice.
    pub fn original_tokens(&self) -> Vec<Token> {
        let mut out = self.prefix.clone();
        out.extend_from_slice(&self.middle);
        out.extend_from_slice(&self.suffix);
        out
    }

    /// Prompt used for completion: `[PRE] prefix [SUF] suffix [MID]`.
    pub fn prompt(&self) -> Vec<Token> {
        let n = self.prefix.len() + self.suffix.len() + 3;
        self.sequence[..n].to_vec()
    }

    pub fn to_record(&self) -> FimRecord {
        FimRecord {
            id: self.id.clone(),
            prefix: tokenizer::detokenize_lossy(&self.prefix),
            middle: tokenizer::detokenize_lossy(&self.middle),
            suffix: tokenizer::detokenize_lossy(&self.suffix),
            duplicate: self.is_canary,
        }
    }

    pub fn from_record(rec: &FimRecord) -> Self {
        let mut ex = FimExample::new(
            rec.id.clone(),
            tokenizer::tokenize(rec.prefix.as_bytes()),
            tokenizer::tokenize(rec.middle.as_bytes()),
            tokenizer::tokenize(rec.suffix.as_bytes()),
        );
        ex.is_canary = rec.duplicate;
        ex
    }
}

/// Line-delimited JSON form of a [`FimExample`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FimRecord {
    pub id: String,
    pub prefix: String,
    pub middle: String,
    pub suffix: String,
    pub duplicate: bool,
}

fn is_char_boundary(bytes: &[u8], pos: usize) -> bool {
    pos == 0 || pos >= bytes.len() || (bytes[pos] & 0xC0) != 0x80
}

/// Draw FIM cut points for `doc` and lay it out as an example.
///
/// Cuts `i < j` are uniform over all pairs with `j - i >= min_middle`, both on
/// UTF-8 character boundaries so every span is valid text. A document longer
/// than `max_len - 4` tokens is cut down to its leading slice first.
pub fn make_fim_example<R: Rng + ?Sized>(
    doc: &Document,
    rng: &mut R,
    min_middle: usize,
    max_len: usize,
) -> Result<FimExample> {
    let needed = min_middle + 2;
    if max_len < needed + 4 {
        return Err(Error::config(format!(
            "max_len {max_len} cannot hold a middle of {min_middle} tokens plus sentinels"
        )));
    }
    let bytes = doc.text.as_bytes();
    let mut n = bytes.len().min(max_len - 4);
    while !is_char_boundary(bytes, n) {
        n -= 1;
    }
    if n < needed {
        return Err(Error::TooShort { len: n, needed });
    }
    let bytes = &bytes[..n];
    let bounds: Vec<usize> = (0..=n).filter(|&p| is_char_boundary(bytes, p)).collect();
    let (i, j) = loop {
        let a = bounds[rng.gen_range(0..bounds.len())];
        let b = bounds[rng.gen_range(0..bounds.len())];
        let (i, j) = if a <= b { (a, b) } else { (b, a) };
        if j - i >= min_middle {
            break (i, j);
        }
    };
    Ok(FimExample::from_cuts(
        doc.id.clone(),
        &tokenizer::tokenize(bytes),
        i,
        j,
    ))
}
