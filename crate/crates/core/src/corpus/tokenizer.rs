//! Byte-level tokenizer with five reserved sentinel ids.

pub type Token = u16;

pub const PRE: Token = 256;
pub const SUF: Token = 257;
pub const MID: Token = 258;
pub const EOM: Token = 259;
pub const PAD: Token = 260;
pub const VOCAB_SIZE: usize = 261;

pub fn is_sentinel(t: Token) -> bool {
    t >= 256
}

/// One token per byte; the token id is the byte value.
pub fn tokenize(text: &[u8]) -> Vec<Token> {
    text.iter().map(|&b| Token::from(b)).collect()
}

/// Inverse of [`tokenize`]. Sentinel ids carry no bytes and are dropped.
pub fn detokenize(tokens: &[Token]) -> Vec<u8> {
    tokens
        .iter()
        .filter(|&&t| !is_sentinel(t))
        .map(|&t| t as u8)
        .collect()
}

/// Lossy UTF-8 view of a token span, for metrics and display.
pub fn detokenize_lossy(tokens: &[Token]) -> String {
    String::from_utf8_lossy(&detokenize(tokens)).into_owned()
}

pub fn sentinel_name(t: Token) -> Option<&'static str> {
    match t {
        PRE => Some("<PRE>"),
        SUF => Some("<SUF>"),
        MID => Some("<MID>"),
        EOM => Some("<EOM>"),
        PAD => Some("<PAD>"),
        _ => None,
    }
}
