//! Lowercasing word/punctuation tokenizer shared by ingestion and ROUGE.

/// Punctuation that stays inside a token when flanked by alphanumerics
/// (`13:45`, `3.5`, `01223-365`, `that's`).
const JOINERS: &[char] = &['.', ',', ':', '-', '/', '\''];

pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut tokens = Vec::new();
    let mut current = String::new();
    let flush = |current: &mut String, tokens: &mut Vec<String>| {
        if !current.is_empty() {
            tokens.push(std::mem::take(current));
        }
    };
    for (i, &c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            flush(&mut current, &mut tokens);
        } else if c.is_alphanumeric() {
            current.push(c);
        } else {
            let joined = JOINERS.contains(&c)
                && i > 0
                && chars[i - 1].is_alphanumeric()
                && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            if joined {
                current.push(c);
            } else {
                flush(&mut current, &mut tokens);
                tokens.push(c.to_string());
            }
        }
    }
    flush(&mut current, &mut tokens);
    tokens
}

#[cfg(test)]
mod tests {
    use super::tokenize;

    #[test]
    fn isolates_trailing_punctuation() {
        assert_eq!(
            tokenize("Done. Your reference number is QNVDZ4RT."),
            ["done", ".", "your", "reference", "number", "is", "qnvdz4rt", "."]
        );
    }

    #[test]
    fn keeps_times_numbers_and_contractions() {
        assert_eq!(tokenize("at 13:45, that's 3.5 (ok)"), ["at", "13:45", ",", "that's", "3.5", "(", "ok", ")"]);
    }

    #[test]
    fn whitespace_only_is_empty() {
        assert!(tokenize("  \t ").is_empty());
    }
}
