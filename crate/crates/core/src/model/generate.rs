use super::transformer::last_logits;
use super::ParameterSet;
use crate::corpus::tokenizer::{self, Token, EOM, MID, PRE, SUF};
use crate::error::{Error, Result};

/// Greedy infilling from `[PRE] prefix [SUF] suffix [MID]`.
///
/// Decodes argmax tokens until `EOM` or `max_new` tokens; sentinel tokens
/// other than `EOM` are emitted as no bytes. Returns the middle as text.
pub fn generate_completion(p: &ParameterSet, prefix: &str, suffix: &str, max_new: usize) -> Result<String> {
    let mut prompt: Vec<Token> = Vec::with_capacity(prefix.len() + suffix.len() + 3 + max_new);
    prompt.push(PRE);
    prompt.extend(tokenizer::tokenize(prefix.as_bytes()));
    prompt.push(SUF);
    prompt.extend(tokenizer::tokenize(suffix.as_bytes()));
    prompt.push(MID);
    let tokens = generate_tokens(p, &prompt, max_new)?;
    Ok(tokenizer::detokenize_lossy(&tokens))
}

/// Greedy continuation of `prompt`, excluding the terminating `EOM`.
pub fn generate_tokens(p: &ParameterSet, prompt: &[Token], max_new: usize) -> Result<Vec<Token>> {
    let ctx = p.model.context_len;
    if prompt.len() + max_new > ctx {
        return Err(Error::Invalid(format!(
            "prompt of {} tokens plus {max_new} new tokens exceeds context length {ctx}",
            prompt.len()
        )));
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let logits = last_logits(p, &seq)?;
        let next = argmax(&logits) as Token;
        if next == EOM {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

/// First index of the maximum; ties resolve to the lowest id.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
