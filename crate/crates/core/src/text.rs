//! Word-level tokenization shared by the corpus, the templates and the scorers.

const PUNCT: &[char] = &['.', ',', ';', ':', '!', '?', '"', '(', ')'];

/// Splits on whitespace, then peels leading and trailing punctuation off each
/// word into tokens of their own. Case is preserved.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut rest = word;
        while let Some(c) = rest.chars().next().filter(|c| PUNCT.contains(c)) {
            out.push(c.to_string());
            rest = &rest[c.len_utf8()..];
        }
        let mut tail = Vec::new();
        while let Some(c) = rest.chars().next_back().filter(|c| PUNCT.contains(c)) {
            tail.push(c.to_string());
            rest = &rest[..rest.len() - c.len_utf8()];
        }
        if !rest.is_empty() {
            out.push(rest.to_string());
        }
        out.extend(tail.into_iter().rev());
    }
    out
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}
