//! Deterministic whitespace tokenizer shared by the planner, the prompt
//! abstraction, and the denoiser's text encoder. Tokens are lowercased with
//! punctuation stripped; ids come from FNV-1a hashing into the vocabulary.

/// Split `text` into lowercase alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let tok: String = raw
                .chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(|c| c.to_lowercase())
                .collect();
            if tok.is_empty() {
                None
            } else {
                Some(tok)
            }
        })
        .collect()
}

/// Like [`tokenize`], but each token carries the byte range of its
/// alphanumeric core in the original text, so callers can recover verbatim
/// substrings (case and inner punctuation intact).
pub fn tokenize_with_offsets(text: &str) -> Vec<(String, std::ops::Range<usize>)> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut word_start = 0;
    for (i, c) in text.char_indices().chain(std::iter::once((text.len(), ' '))) {
        if c.is_whitespace() {
            if word_start < i {
                let word = &text[word_start..i];
                let tok: String = word
                    .chars()
                    .filter(|c| c.is_alphanumeric())
                    .flat_map(|c| c.to_lowercase())
                    .collect();
                if !tok.is_empty() {
                    let core_start = word_start
                        + word
                            .char_indices()
                            .find(|(_, c)| c.is_alphanumeric())
                            .map(|(j, _)| j)
                            .unwrap();
                    let core_end = word_start
                        + word
                            .char_indices()
                            .rev()
                            .find(|(_, c)| c.is_alphanumeric())
                            .map(|(j, c)| j + c.len_utf8())
                            .unwrap();
                    out.push((tok, core_start..core_end));
                }
            }
            word_start = i + c.len_utf8();
        }
    }
    debug_assert!(word_start >= bytes.len() || !text[word_start..].contains(char::is_whitespace));
    out
}

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Map a token to a vocabulary id.
pub fn token_id(token: &str, vocab: usize) -> usize {
    (fnv1a64(token.as_bytes()) % vocab as u64) as usize
}

/// Tokenize and map to ids, truncated to `max_len`.
pub fn encode(text: &str, vocab: usize, max_len: usize) -> Vec<usize> {
    tokenize(text)
        .iter()
        .take(max_len)
        .map(|t| token_id(t, vocab))
        .collect()
}

/// Locate `needle` as a contiguous token subsequence of `haystack`,
/// returning the half-open index range of the first occurrence.
pub fn find_token_span(haystack: &[String], needle: &[String]) -> Option<std::ops::Range<usize>> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    (0..=haystack.len() - needle.len())
        .find(|&i| haystack[i..i + needle.len()] == *needle)
        .map(|i| i..i + needle.len())
}
