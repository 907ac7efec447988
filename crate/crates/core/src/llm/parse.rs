use serde::{Deserialize, Serialize};

use crate::kg::Choice;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub label: Option<String>,
    pub parse_ok: bool,
    pub raw: String,
}

impl ParsedAnswer {
    fn found(label: &str, raw: &str) -> Self {
        ParsedAnswer {
            label: Some(label.to_string()),
            parse_ok: true,
            raw: raw.to_string(),
        }
    }
}

/// Extract a choice label from a reply. In order: the first `(<label>)`;
/// the first standalone label token; the first choice text occurring
/// verbatim (case-insensitive); otherwise a parse failure.
pub fn parse_answer(reply: &str, choices: &[Choice]) -> ParsedAnswer {
    let fail = ParsedAnswer {
        label: None,
        parse_ok: false,
        raw: reply.to_string(),
    };
    let labels: Vec<&str> = choices
        .iter()
        .map(|c| c.label.as_str())
        .filter(|l| !l.is_empty())
        .collect();
    if labels.is_empty() {
        return fail;
    }

    let paren = labels
        .iter()
        .filter_map(|l| reply.find(&format!("({l})")).map(|pos| (pos, *l)))
        .min_by_key(|&(pos, l)| (pos, std::cmp::Reverse(l.len())));
    if let Some((_, l)) = paren {
        return ParsedAnswer::found(l, reply);
    }

    for token in reply.split(|c: char| !c.is_alphanumeric()) {
        if let Some(l) = labels.iter().find(|&&l| l == token) {
            return ParsedAnswer::found(l, reply);
        }
    }

    let lower = reply.to_lowercase();
    let by_text = choices
        .iter()
        .filter(|c| !c.label.is_empty() && !c.text.trim().is_empty())
        .filter_map(|c| lower.find(&c.text.to_lowercase()).map(|pos| (pos, c)))
        .min_by_key(|&(pos, c)| (pos, std::cmp::Reverse(c.text.len())));
    if let Some((_, c)) = by_text {
        return ParsedAnswer::found(&c.label, reply);
    }
    fail
}

/// [`parse_answer`] when only the labels are known.
pub fn parse_labels<S: AsRef<str>>(reply: &str, labels: &[S]) -> ParsedAnswer {
    let choices: Vec<Choice> = labels
        .iter()
        .map(|l| Choice {
            label: l.as_ref().to_string(),
            text: String::new(),
        })
        .collect();
    parse_answer(reply, &choices)
}
