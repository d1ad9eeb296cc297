//! Token alphabet of the synthetic instruction-following task.

pub type Token = u32;

pub const PAD: Token = 0;
pub const EOS: Token = 1;
pub const SYSTEM: Token = 2;
pub const USER: Token = 3;
pub const ASSISTANT: Token = 4;
pub const TASK_COPY: Token = 5;
pub const TASK_REVERSE: Token = 6;
pub const TASK_SORT: Token = 7;
pub const TASK_DEDUP: Token = 8;
/// First of the 16 payload symbols `a..=p`.
pub const SYMBOL_BASE: Token = 10;
pub const NUM_SYMBOLS: u32 = 16;
/// Embedding table size; ids 26..32 are unused.
pub const VOCAB_SIZE: usize = 32;

pub fn symbol(i: u32) -> Token {
    debug_assert!(i < NUM_SYMBOLS);
    SYMBOL_BASE + i
}

pub fn is_symbol(t: Token) -> bool {
    (SYMBOL_BASE..SYMBOL_BASE + NUM_SYMBOLS).contains(&t)
}

/// Human-readable rendering, e.g. `<user> <sort> c a b <asst> a b c <eos>`.
pub fn render(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|&t| match t {
            PAD => "<pad>".to_string(),
            EOS => "<eos>".to_string(),
            SYSTEM => "<sys>".to_string(),
            USER => "<user>".to_string(),
            ASSISTANT => "<asst>".to_string(),
            TASK_COPY => "<copy>".to_string(),
            TASK_REVERSE => "<reverse>".to_string(),
            TASK_SORT => "<sort>".to_string(),
            TASK_DEDUP => "<dedup>".to_string(),
            t if is_symbol(t) => char::from(b'a' + (t - SYMBOL_BASE) as u8).to_string(),
            t => format!("<{t}>"),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses letters `a..=p` into symbol tokens.
pub fn symbols_from_str(s: &str) -> Option<Vec<Token>> {
    s.bytes().map(|b| (b'a'..b'a' + NUM_SYMBOLS as u8).contains(&b).then(|| SYMBOL_BASE + (b - b'a') as u32)).collect()
}
