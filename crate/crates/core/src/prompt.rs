//! Knowledge rendering (triples, sentences, graph description) and the
//! final prompt frame.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::kg::{EntityId, KnowledgeGraph, QuestionContext, Triple};
use crate::llm::{LlmClient, LlmRequest};
use crate::rl::ReasoningChain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extractor {
    Subgraph,
    Rl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Triples,
    Sentences,
    GraphDescription,
}

impl TemplateId {
    pub const ALL: [TemplateId; 3] = [TemplateId::Triples, TemplateId::Sentences, TemplateId::GraphDescription];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Triples => "triples",
            TemplateId::Sentences => "sentences",
            TemplateId::GraphDescription => "graph_description",
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Extractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Extractor::Subgraph => "subgraph",
            Extractor::Rl => "rl",
        })
    }
}

/// Ordered, duplicate-free evidence triples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBundle {
    triples: Vec<Triple>,
    pub origin: Extractor,
}

impl KnowledgeBundle {
    pub fn new(triples: impl IntoIterator<Item = Triple>, origin: Extractor) -> Self {
        let mut seen = HashSet::new();
        let triples = triples.into_iter().filter(|t| seen.insert(*t)).collect();
        KnowledgeBundle { triples, origin }
    }

    pub fn from_chains<'a>(chains: impl IntoIterator<Item = &'a ReasoningChain>) -> Self {
        Self::new(
            chains.into_iter().flat_map(|c| c.steps.iter().copied()),
            Extractor::Rl,
        )
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }
}

/// `(head, relation, tail)` items joined by `", "`.
pub fn render_triples(b: &KnowledgeBundle, g: &KnowledgeGraph) -> String {
    b.triples()
        .iter()
        .map(|t| format_triple(g.entity_name(t.head), g.relation_name(t.rel), g.entity_name(t.tail)))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn format_triple(head: &str, rel: &str, tail: &str) -> String {
    format!("({head}, {rel}, {tail})")
}

/// Inverse of [`render_triples`] for names free of commas and parentheses.
pub fn parse_triples(text: &str) -> Vec<(String, String, String)> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('(') {
        let Some(close) = rest[open..].find(')') else {
            break;
        };
        let inner = &rest[open + 1..open + close];
        let parts: Vec<&str> = inner.split(", ").collect();
        if parts.len() == 3 {
            out.push((parts[0].to_string(), parts[1].to_string(), parts[2].to_string()));
        }
        rest = &rest[open + close + 1..];
    }
    out
}

fn display_name(name: &str) -> String {
    name.replace('_', " ")
}

fn relation_key(rel: &str) -> String {
    let rel = rel.strip_prefix("/r/").unwrap_or(rel);
    rel.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(|c| c.to_lowercase())
        .collect()
}

const DEFAULT_PATTERNS: &[(&str, &str)] = &[
    ("isa", "is a"),
    ("instanceof", "is an instance of"),
    ("partof", "is part of"),
    ("hasa", "has a"),
    ("usedfor", "is used for"),
    ("capableof", "is capable of"),
    ("atlocation", "is located at"),
    ("locatednear", "is located near"),
    ("causes", "causes"),
    ("causesdesire", "makes people want"),
    ("hassubevent", "has the subevent"),
    ("hasfirstsubevent", "begins with"),
    ("haslastsubevent", "ends with"),
    ("hasprerequisite", "requires"),
    ("hasproperty", "has the property"),
    ("hascontext", "is used in the context of"),
    ("motivatedbygoal", "is motivated by"),
    ("obstructedby", "is obstructed by"),
    ("desires", "desires"),
    ("notdesires", "does not desire"),
    ("notcapableof", "is not capable of"),
    ("nothasproperty", "does not have the property"),
    ("notusedfor", "is not used for"),
    ("createdby", "is created by"),
    ("madeof", "is made of"),
    ("receivesaction", "can be"),
    ("relatedto", "is related to"),
    ("synonym", "is a synonym of"),
    ("antonym", "is the opposite of"),
    ("distinctfrom", "is distinct from"),
    ("derivedfrom", "is derived from"),
    ("formof", "is a form of"),
    ("similarto", "is similar to"),
    ("symbolof", "is a symbol of"),
    ("definedas", "is defined as"),
    ("mannerof", "is a manner of"),
    ("entails", "entails"),
    ("etymologicallyrelatedto", "is etymologically related to"),
    ("etymologicallyderivedfrom", "is etymologically derived from"),
    ("founderof", "is a founder of"),
    ("ceoof", "is the CEO of"),
];

/// Relation-to-phrase table used to turn triples into sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verbalizer {
    patterns: HashMap<String, String>,
}

impl Default for Verbalizer {
    fn default() -> Self {
        Verbalizer {
            patterns: DEFAULT_PATTERNS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl Verbalizer {
    pub fn with_pattern(mut self, relation: &str, phrase: &str) -> Self {
        self.patterns.insert(relation_key(relation), phrase.to_string());
        self
    }

    pub fn phrase(&self, relation: &str) -> Option<&str> {
        self.patterns.get(&relation_key(relation)).map(String::as_str)
    }

    /// One sentence, including the final period.
    pub fn sentence(&self, head: &str, relation: &str, tail: &str) -> String {
        let (h, t) = (display_name(head), display_name(tail));
        match self.phrase(relation) {
            Some(p) => format!("{h} {p} {t}."),
            None => format!("{h} is related to {t} via {relation}."),
        }
    }
}

fn sentence_of(t: &Triple, g: &KnowledgeGraph, v: &Verbalizer) -> String {
    v.sentence(g.entity_name(t.head), g.relation_name(t.rel), g.entity_name(t.tail))
}

/// Each triple verbalized, sentences joined by single spaces.
pub fn render_sentences(b: &KnowledgeBundle, g: &KnowledgeGraph, v: &Verbalizer) -> String {
    b.triples()
        .iter()
        .map(|t| sentence_of(t, g, v))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Highest-degree entity within the bundle, ties to the lower id.
pub fn center_entity(b: &KnowledgeBundle) -> Option<EntityId> {
    let mut degree: BTreeMap<EntityId, usize> = BTreeMap::new();
    for t in b.triples() {
        *degree.entry(t.head).or_default() += 1;
        if t.tail != t.head {
            *degree.entry(t.tail).or_default() += 1;
        }
    }
    let max = degree.values().copied().max()?;
    degree.into_iter().find(|&(_, d)| d == max).map(|(e, _)| e)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphDescription {
    pub text: String,
    /// Set when LLM mode was requested but the template had to be used.
    pub fell_back: bool,
}

fn join_names(names: &[String]) -> String {
    match names {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

fn template_description(b: &KnowledgeBundle, g: &KnowledgeGraph, v: &Verbalizer) -> String {
    let Some(center) = center_entity(b) else {
        return String::new();
    };
    let center_name = display_name(g.entity_name(center));
    let (incident, rest): (Vec<&Triple>, Vec<&Triple>) = b.triples().iter().partition(|t| t.touches(center));
    let mut neighbors: Vec<String> = Vec::new();
    for t in &incident {
        let other = if t.head == center { t.tail } else { t.head };
        let name = display_name(g.entity_name(other));
        if other != center && !neighbors.contains(&name) {
            neighbors.push(name);
        }
    }
    let mut parts = vec![format!("{center_name} stands central in the network.")];
    if !neighbors.is_empty() {
        parts.push(format!("It is directly connected to {}.", join_names(&neighbors)));
    }
    parts.extend(incident.iter().map(|t| sentence_of(t, g, v)));
    parts.extend(rest.iter().map(|t| sentence_of(t, g, v)));
    parts.join(" ")
}

/// Instruction sent to the LLM when it writes the graph description itself.
pub fn graph_description_request(b: &KnowledgeBundle, g: &KnowledgeGraph) -> String {
    let center = center_entity(b)
        .map(|e| g.entity_name(e).to_string())
        .unwrap_or_default();
    format!(
        "Describe the following knowledge graph in a short paragraph. Start from its central entity ({center}) \
         and explain how the other entities relate to it. Use only the facts given.\n\nTriples: {}",
        render_triples(b, g)
    )
}

/// Center-entity description. With `llm` set, the model rewrites the triples;
/// any failure falls back to the template with `fell_back = true`.
pub fn render_graph_description(
    b: &KnowledgeBundle,
    g: &KnowledgeGraph,
    v: &Verbalizer,
    llm: Option<&dyn LlmClient>,
) -> GraphDescription {
    if b.is_empty() {
        return GraphDescription {
            text: String::new(),
            fell_back: false,
        };
    }
    if let Some(client) = llm {
        match client.complete(&LlmRequest::new(graph_description_request(b, g))) {
            Ok(reply) if !reply.text.trim().is_empty() => {
                return GraphDescription {
                    text: reply.text.trim().to_string(),
                    fell_back: false,
                }
            }
            Ok(_) => log::warn!("empty graph description from llm; using template"),
            Err(e) => log::warn!("graph description via llm failed ({e}); using template"),
        }
        return GraphDescription {
            text: template_description(b, g, v),
            fell_back: true,
        };
    }
    GraphDescription {
        text: template_description(b, g, v),
        fell_back: false,
    }
}

/// Knowledge text for one template in template mode.
pub fn render(b: &KnowledgeBundle, g: &KnowledgeGraph, v: &Verbalizer, template: TemplateId) -> String {
    match template {
        TemplateId::Triples => render_triples(b, g),
        TemplateId::Sentences => render_sentences(b, g, v),
        TemplateId::GraphDescription => template_description(b, g, v),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub template: TemplateId,
    pub token_estimate: usize,
    /// Estimated tokens of the background section alone (0 for the bare frame).
    pub knowledge_tokens: usize,
}

pub const KNOWLEDGE_HEADER: &str = "Background knowledge:";
pub const ANSWER_INSTRUCTION: &str = "Answer with the letter of the correct choice only.";

/// `ceil(bytes / 4)`.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

/// Fixed frame: optional background section, question, labeled choices,
/// answer instruction. Empty knowledge drops the background section.
pub fn assemble_prompt(q: &QuestionContext, knowledge_text: &str, template: TemplateId) -> RenderedPrompt {
    let mut text = String::new();
    let mut knowledge_tokens = 0;
    if !knowledge_text.is_empty() {
        let section = format!("{KNOWLEDGE_HEADER}\n{knowledge_text}\n\n");
        knowledge_tokens = estimate_tokens(&section);
        text.push_str(&section);
    }
    text.push_str("Question: ");
    text.push_str(&q.question_text);
    text.push('\n');
    for c in &q.choices {
        text.push_str(&format!("({}) {}\n", c.label, c.text));
    }
    text.push_str(ANSWER_INSTRUCTION);
    RenderedPrompt {
        token_estimate: estimate_tokens(&text),
        text,
        template,
        knowledge_tokens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Choice, GraphBuilder};

    fn google() -> (KnowledgeGraph, KnowledgeBundle) {
        let mut b = GraphBuilder::new();
        b.add("Sergey_Brin", "founder_of", "Google");
        b.add("Sundar_Pichai", "ceo_of", "Google");
        b.add("Google", "is_a", "High-tech Company");
        let g = b.build();
        let bundle = KnowledgeBundle::new(g.triples().to_vec(), Extractor::Subgraph);
        (g, bundle)
    }

    #[test]
    fn triples_golden() {
        let (g, b) = google();
        assert_eq!(
            render_triples(&b, &g),
            "(Sergey_Brin, founder_of, Google), (Sundar_Pichai, ceo_of, Google), (Google, is_a, High-tech Company)"
        );
        assert_eq!(render_triples(&KnowledgeBundle::new([], Extractor::Rl), &g), "");
    }

    #[test]
    fn single_triple() {
        let mut gb = GraphBuilder::new();
        gb.add("a", "r", "b");
        let g = gb.build();
        let b = KnowledgeBundle::new(g.triples().to_vec(), Extractor::Rl);
        assert_eq!(render_triples(&b, &g), "(a, r, b)");
    }

    #[test]
    fn sentences() {
        let mut gb = GraphBuilder::new();
        gb.add("Google", "is_a", "High-tech_Company");
        gb.add("a", "zorps", "b");
        let g = gb.build();
        let v = Verbalizer::default();
        let one = KnowledgeBundle::new(g.triples()[..1].to_vec(), Extractor::Rl);
        assert_eq!(render_sentences(&one, &g, &v), "Google is a High-tech Company.");
        let two = KnowledgeBundle::new(g.triples().to_vec(), Extractor::Rl);
        assert_eq!(
            render_sentences(&two, &g, &v),
            "Google is a High-tech Company. a is related to b via zorps."
        );
        assert_eq!(v.phrase("/r/AtLocation"), Some("is located at"));
        assert_eq!(v.phrase("at_location"), Some("is located at"));
    }

    #[test]
    fn graph_description_centers_on_hub() {
        let (g, b) = google();
        assert_eq!(g.entity_name(center_entity(&b).unwrap()), "Google");
        let d = render_graph_description(&b, &g, &Verbalizer::default(), None);
        assert!(d.text.starts_with("Google stands central in the network."));
        assert!(!d.fell_back);
        assert_eq!(d, render_graph_description(&b, &g, &Verbalizer::default(), None));
        let empty = KnowledgeBundle::new([], Extractor::Rl);
        assert_eq!(render_graph_description(&empty, &g, &Verbalizer::default(), None).text, "");
    }

    #[test]
    fn bundle_dedups_in_order() {
        let (g, _) = google();
        let t = g.triples();
        let b = KnowledgeBundle::new([t[2], t[0], t[2], t[1], t[0]], Extractor::Rl);
        assert_eq!(b.triples(), &[t[2], t[0], t[1]]);
    }

    fn question(n: usize) -> QuestionContext {
        QuestionContext {
            id: "q1".into(),
            question_text: "Where would you find a seat?".into(),
            choices: (0..n)
                .map(|i| Choice {
                    label: ((b'A' + i as u8) as char).to_string(),
                    text: format!("option {i}"),
                })
                .collect(),
            gold_label: None,
            source_entities: vec![],
            target_entities: BTreeMap::new(),
        }
    }

    #[test]
    fn frame_without_knowledge() {
        let p = assemble_prompt(&question(5), "", TemplateId::Sentences);
        assert!(!p.text.contains(KNOWLEDGE_HEADER));
        assert!(p.text.starts_with("Question: Where would you find a seat?\n(A) option 0\n"));
        assert!(p.text.ends_with("(E) option 4\nAnswer with the letter of the correct choice only."));
        assert_eq!(p.knowledge_tokens, 0);
        assert_eq!(p.token_estimate, p.text.len().div_ceil(4));
    }

    #[test]
    fn frame_with_knowledge() {
        let p = assemble_prompt(&question(2), "(a, r, b)", TemplateId::Triples);
        assert!(p.text.starts_with("Background knowledge:\n(a, r, b)\n\nQuestion: "));
        assert!(p.knowledge_tokens > 0);
    }

    #[test]
    fn token_estimate_rounds_up() {
        assert_eq!(estimate_tokens(&"x".repeat(100)), 25);
        assert_eq!(estimate_tokens(&"x".repeat(101)), 26);
        assert_eq!(estimate_tokens(""), 0);
    }
}
