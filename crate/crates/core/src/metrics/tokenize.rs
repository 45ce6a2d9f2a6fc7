/// Bumped whenever tokenization changes; recorded in golden files.
pub const TOKENIZER_VERSION: &str = "tok-v1";

/// Shared tokenizer for all NLG metrics.
///
/// Lowercases, splits on whitespace, and makes every punctuation character a
/// token of its own. A `.` or `,` between two digits stays inside the number,
/// so "1.78" is one token.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut tokens = Vec::new();
    let mut word = String::new();

    for (i, &ch) in chars.iter().enumerate() {
        if ch.is_whitespace() {
            flush(&mut word, &mut tokens);
            continue;
        }
        let in_number = matches!(ch, '.' | ',')
            && i > 0
            && chars[i - 1].is_ascii_digit()
            && chars.get(i + 1).is_some_and(|c| c.is_ascii_digit());
        if is_punct(ch) && !in_number {
            flush(&mut word, &mut tokens);
            tokens.push(ch.to_string());
        } else {
            word.push(ch);
        }
    }
    flush(&mut word, &mut tokens);
    tokens
}

fn is_punct(ch: char) -> bool {
    ch.is_ascii_punctuation() || (!ch.is_ascii() && !ch.is_alphanumeric())
}

fn flush(word: &mut String, tokens: &mut Vec<String>) {
    if !word.is_empty() {
        tokens.push(std::mem::take(word));
    }
}
