//! Parsing of model responses.

use super::KEYWORD_COUNT;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedExplanation {
    pub text: String,
    pub keywords: [String; KEYWORD_COUNT],
}

fn find_ci(haystack: &str, needle: &str) -> Option<usize> {
    haystack.to_ascii_lowercase().rfind(&needle.to_ascii_lowercase())
}

fn strip_prefix_ci<'a>(s: &'a str, prefix: &str) -> &'a str {
    if s.len() >= prefix.len() && s[..prefix.len()].eq_ignore_ascii_case(prefix) {
        &s[prefix.len()..]
    } else {
        s
    }
}

fn clean_item(s: &str) -> String {
    s.trim()
        .trim_start_matches(['-', '*', '•'])
        .trim()
        .trim_matches(['"', '\'', '`'])
        .trim_end_matches('.')
        .trim()
        .to_string()
}

/// Parses `DESCRIPTION: ... KEYWORDS: a; b; c`. Case and whitespace are
/// free; the `DESCRIPTION:` marker is optional; keyword lists that are not
/// exactly three long are padded (repeating the last one) or truncated.
pub fn parse_explanation(raw: &str) -> Option<ParsedExplanation> {
    let at = find_ci(raw, "keywords:")?;
    let head = raw[..at].trim();
    let head = strip_prefix_ci(head, "**description:**");
    let head = strip_prefix_ci(head, "description:");
    let text = head.trim().trim_end_matches('*').trim().trim_end_matches('.').trim().to_string();
    if text.is_empty() {
        return None;
    }
    let tail = raw[at + "keywords:".len()..].trim().trim_start_matches('*').trim();
    let tail = tail.lines().next().unwrap_or("");
    let sep = if !tail.contains(';') && tail.contains(',') { ',' } else { ';' };
    let mut keywords: Vec<String> = tail.split(sep).map(clean_item).filter(|k| !k.is_empty()).collect();
    if keywords.is_empty() {
        return None;
    }
    if keywords.len() != KEYWORD_COUNT {
        log::warn!("expected {KEYWORD_COUNT} keywords, got {}; adjusting", keywords.len());
        keywords.truncate(KEYWORD_COUNT);
        while keywords.len() < KEYWORD_COUNT {
            let last = keywords.last().cloned().expect("nonempty");
            keywords.push(last);
        }
    }
    let keywords: [String; KEYWORD_COUNT] = keywords.try_into().expect("exactly three");
    Some(ParsedExplanation { text, keywords })
}

/// Items of a numbered or bulleted list, one per line, markers removed.
pub fn parse_numbered_list(raw: &str) -> Vec<String> {
    raw.lines()
        .filter_map(|line| {
            let l = line.trim();
            if l.is_empty() || l.ends_with(':') {
                return None;
            }
            let digits = l.chars().take_while(|c| c.is_ascii_digit()).count();
            let l = if digits > 0 {
                let rest = &l[digits..];
                rest.strip_prefix('.')
                    .or_else(|| rest.strip_prefix(')'))
                    .or_else(|| rest.strip_prefix(':'))
                    .unwrap_or(rest)
            } else {
                l.trim_start_matches(['-', '*', '•'])
            };
            let item = l.trim().trim_matches('"').trim();
            (!item.is_empty()).then(|| item.to_string())
        })
        .collect()
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(String::from).collect()
}

fn bare(token: &str) -> &str {
    token.trim_matches(|c: char| c.is_ascii_punctuation() && c != '\'' && c != '-')
}

/// Index of the first token equal to `focus`, ignoring case and attached
/// punctuation.
pub fn focus_position(tokens: &[String], focus: &str) -> Option<usize> {
    let focus = bare(focus);
    tokens.iter().position(|t| bare(t).eq_ignore_ascii_case(focus))
}
