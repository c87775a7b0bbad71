use crate::error::{Error, Result};

/// Punctuation characters that become standalone tokens.
pub fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{00AB}' | '\u{00BB}'
                | '\u{2013}' | '\u{2014}' | '\u{2026}' | '\u{00BF}' | '\u{00A1}' | '\u{00B7}'
        )
}

/// True for tokens made only of punctuation.
pub fn is_punct_token(token: &str) -> bool {
    !token.is_empty() && token.chars().all(is_punct)
}

/// Lowercase, split on whitespace, and break punctuation out into its own
/// tokens.
///
/// ```
/// assert_eq!(lexki::corpus::tokenize("I don't know"), ["i", "don", "'", "t", "know"]);
/// ```
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in lower.chars() {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if is_punct(c) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Join tokens back into display text: closing punctuation attaches to the
/// previous token and apostrophes join both neighbours ("don ' t" → "don't").
/// Retokenizing the result gives back `tokens`.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = true;
    for t in tokens {
        let t = t.as_ref();
        let closing = matches!(t, "." | "," | "!" | "?" | ";" | ":" | ")" | "'" | "’");
        if !glue_next && !closing {
            out.push(' ');
        }
        out.push_str(t);
        glue_next = matches!(t, "(" | "'" | "’");
    }
    out
}

const MIN_SENTENCE_TOKENS: usize = 5;

const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "st", "jr", "sr", "prof", "vs", "etc", "inc", "ltd", "co", "corp", "no", "mt",
    "ft", "gen", "col", "lt", "sgt", "capt", "rev", "hon", "gov", "sen", "rep", "est", "approx", "fig", "vol",
];

/// Whether the `.` at byte offset `dot` closes an initial ("L.") or a known
/// abbreviation ("Dr.").
fn is_abbreviation(text: &str, dot: usize) -> bool {
    let word_start = text[..dot]
        .char_indices()
        .rev()
        .find(|(_, c)| c.is_whitespace() || *c == '(' || *c == '"')
        .map_or(0, |(i, c)| i + c.len_utf8());
    let word = &text[word_start..dot];
    let mut chars = word.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        if c.is_alphabetic() {
            return true;
        }
    }
    // Dotted forms such as "U.S." or "e.g."
    if word.contains('.') && word.split('.').all(|p| p.chars().count() <= 1) {
        return true;
    }
    let lw = word.to_lowercase();
    ABBREVIATIONS.contains(&lw.as_str())
}

/// The leading sentence of an article.
///
/// A boundary is a `.`, `!` or `?` followed by whitespace and an uppercase
/// letter, excluding periods after initials and common abbreviations. A
/// candidate shorter than five tokens is extended to the next boundary.
pub fn extract_first_sentence(article: &str) -> Result<String> {
    let text = article.trim();
    if text.is_empty() {
        return Err(Error::EmptyArticle);
    }
    for (i, c) in text.char_indices() {
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        let end = i + c.len_utf8();
        let rest = &text[end..];
        if !rest.chars().next().is_some_and(char::is_whitespace) {
            continue;
        }
        let next_visible = rest.chars().find(|ch| !ch.is_whitespace());
        if !next_visible.is_some_and(char::is_uppercase) {
            continue;
        }
        if c == '.' && is_abbreviation(text, i) {
            continue;
        }
        let candidate = &text[..end];
        if tokenize(candidate).len() >= MIN_SENTENCE_TOKENS {
            return Ok(candidate.trim().to_string());
        }
    }
    Ok(text.to_string())
}
