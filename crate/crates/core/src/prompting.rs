//! Prompt rendering and completion parsing.
//!
//! The three templates are frozen literal grammars: one demonstration per
//! line, a period after each demonstration label, `\n` separators, and no
//! trailing whitespace after the final cue.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Content, Example, Label, TaskKind};
use crate::digest::sha256_hex;
use crate::selection::DemonstrationSet;

pub const SENTENCE_PREFIX: &str = "The sentence is ";
pub const SENTIMENT_CUE: &str = ", the sentiment is";
pub const PREMISE_PREFIX: &str = "The premise is ";
pub const HYPOTHESIS_INFIX: &str = ", the hypothesis is ";
pub const RELATION_CUE: &str = ", the relation is";
pub const INDUCTION_PREAMBLE: &str = "I gave a friend an instruction and some inputs. The friend read the instruction and wrote an output for every input. Here are the input-output pairs:";
pub const INPUT_PREFIX: &str = "The input is ";
pub const OUTPUT_INFIX: &str = ", the output is ";
pub const INDUCTION_CLOSING: &str = "The instruction was";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template {template} needs {expected} examples, got {actual} ({id})")]
    TaskMismatch { template: TemplateKind, expected: TaskKind, actual: TaskKind, id: String },
    #[error("instruction induction needs at least one demonstration")]
    NoDemonstrations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    IclSentiment,
    IclNli,
    InstructionInduction,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 3] = [TemplateKind::IclSentiment, TemplateKind::IclNli, TemplateKind::InstructionInduction];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKind::IclSentiment => "icl_sentiment",
            TemplateKind::IclNli => "icl_nli",
            TemplateKind::InstructionInduction => "instruction_induction",
        }
    }

    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Sentiment => TemplateKind::IclSentiment,
            TaskKind::Nli => TemplateKind::IclNli,
        }
    }

    /// The literal segments of the template, in order.
    pub fn skeleton(self) -> &'static [&'static str] {
        match self {
            TemplateKind::IclSentiment => &[SENTENCE_PREFIX, SENTIMENT_CUE, "."],
            TemplateKind::IclNli => &[PREMISE_PREFIX, HYPOTHESIS_INFIX, RELATION_CUE, "."],
            TemplateKind::InstructionInduction => &[INDUCTION_PREAMBLE, INPUT_PREFIX, OUTPUT_INFIX, ".", INDUCTION_CLOSING],
        }
    }

    /// Digest of the skeleton, recorded in run manifests.
    pub fn skeleton_hash(self) -> String {
        sha256_hex(self.skeleton().join("\u{1f}").as_bytes())
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub demo_ids: Vec<String>,
    pub test_id: Option<String>,
    pub template_kind: TemplateKind,
    pub content_hash: String,
}

impl RenderedPrompt {
    fn new(text: String, demos: &[Example], test_id: Option<String>, template_kind: TemplateKind) -> Self {
        let content_hash = sha256_hex(text.as_bytes());
        Self { text, demo_ids: demos.iter().map(|d| d.id.clone()).collect(), test_id, template_kind, content_hash }
    }
}

fn check_task(template: TemplateKind, expected: TaskKind, ex: &Example) -> Result<(), PromptError> {
    if ex.task_kind() != expected {
        return Err(PromptError::TaskMismatch { template, expected, actual: ex.task_kind(), id: ex.id.clone() });
    }
    Ok(())
}

pub fn render_icl_sentiment(demos: &[Example], test: &Example) -> Result<RenderedPrompt, PromptError> {
    let template = TemplateKind::IclSentiment;
    let mut lines = Vec::with_capacity(demos.len() + 1);
    for ex in demos.iter().chain(std::iter::once(test)) {
        check_task(template, TaskKind::Sentiment, ex)?;
    }
    for demo in demos {
        if let Content::Text { text } = &demo.content {
            lines.push(format!("{SENTENCE_PREFIX}{text}{SENTIMENT_CUE} {}.", demo.label));
        }
    }
    if let Content::Text { text } = &test.content {
        lines.push(format!("{SENTENCE_PREFIX}{text}{SENTIMENT_CUE}"));
    }
    Ok(RenderedPrompt::new(lines.join("\n"), demos, Some(test.id.clone()), template))
}

pub fn render_icl_nli(demos: &[Example], test: &Example) -> Result<RenderedPrompt, PromptError> {
    let template = TemplateKind::IclNli;
    for ex in demos.iter().chain(std::iter::once(test)) {
        check_task(template, TaskKind::Nli, ex)?;
    }
    let mut lines = Vec::with_capacity(demos.len() + 1);
    for demo in demos {
        if let Content::Pair { premise, hypothesis } = &demo.content {
            lines.push(format!("{PREMISE_PREFIX}{premise}{HYPOTHESIS_INFIX}{hypothesis}{RELATION_CUE} {}.", demo.label));
        }
    }
    if let Content::Pair { premise, hypothesis } = &test.content {
        lines.push(format!("{PREMISE_PREFIX}{premise}{HYPOTHESIS_INFIX}{hypothesis}{RELATION_CUE}"));
    }
    Ok(RenderedPrompt::new(lines.join("\n"), demos, Some(test.id.clone()), template))
}

/// Render the ICL prompt matching the test example's task.
pub fn render_icl(demos: &[Example], test: &Example) -> Result<RenderedPrompt, PromptError> {
    match test.task_kind() {
        TaskKind::Sentiment => render_icl_sentiment(demos, test),
        TaskKind::Nli => render_icl_nli(demos, test),
    }
}

pub fn render_icl_set(set: &DemonstrationSet, test: &Example) -> Result<RenderedPrompt, PromptError> {
    render_icl(&set.demos, test)
}

fn induction_input(ex: &Example) -> String {
    match &ex.content {
        Content::Text { text } => text.clone(),
        Content::Pair { premise, hypothesis } => format!("premise: {premise} hypothesis: {hypothesis}"),
    }
}

pub fn render_induction(demos: &[Example]) -> Result<RenderedPrompt, PromptError> {
    let Some(first) = demos.first() else {
        return Err(PromptError::NoDemonstrations);
    };
    for ex in demos {
        check_task(TemplateKind::InstructionInduction, first.task_kind(), ex)?;
    }
    let mut lines = Vec::with_capacity(demos.len() + 2);
    lines.push(INDUCTION_PREAMBLE.to_string());
    for demo in demos {
        lines.push(format!("{INPUT_PREFIX}{}{OUTPUT_INFIX}{}.", induction_input(demo), demo.label));
    }
    lines.push(INDUCTION_CLOSING.to_string());
    Ok(RenderedPrompt::new(lines.join("\n"), demos, None, TemplateKind::InstructionInduction))
}

/// Test input recovered from the final line of an ICL prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueryLine {
    Sentiment { text: String },
    Nli { premise: String, hypothesis: String },
}

impl QueryLine {
    pub fn task_kind(&self) -> TaskKind {
        match self {
            QueryLine::Sentiment { .. } => TaskKind::Sentiment,
            QueryLine::Nli { .. } => TaskKind::Nli,
        }
    }

    pub fn joined(&self) -> String {
        match self {
            QueryLine::Sentiment { text } => text.clone(),
            QueryLine::Nli { premise, hypothesis } => format!("{premise} {hypothesis}"),
        }
    }
}

/// Parse a query line of either ICL grammar.
pub fn parse_query_line(line: &str) -> Option<QueryLine> {
    if let Some(body) = line.strip_prefix(PREMISE_PREFIX).and_then(|r| r.strip_suffix(RELATION_CUE)) {
        let split = body.rfind(HYPOTHESIS_INFIX)?;
        return Some(QueryLine::Nli {
            premise: body[..split].to_string(),
            hypothesis: body[split + HYPOTHESIS_INFIX.len()..].to_string(),
        });
    }
    let text = line.strip_prefix(SENTENCE_PREFIX)?.strip_suffix(SENTIMENT_CUE)?;
    Some(QueryLine::Sentiment { text: text.to_string() })
}

/// Label to surface-string mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verbalizer {
    task_kind: TaskKind,
    forms: Vec<(Label, &'static str)>,
}

impl Verbalizer {
    pub fn for_task(task_kind: TaskKind) -> Self {
        let forms = task_kind.labels().iter().map(|l| (*l, l.as_str())).collect();
        Self { task_kind, forms }
    }

    pub fn task_kind(&self) -> TaskKind {
        self.task_kind
    }

    pub fn surface(&self, label: Label) -> Option<&'static str> {
        self.forms.iter().find(|(l, _)| *l == label).map(|(_, s)| *s)
    }

    pub fn forms(&self) -> impl Iterator<Item = (Label, &'static str)> + '_ {
        self.forms.iter().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsedLabel {
    Label(Label),
    Unparseable(String),
}

impl ParsedLabel {
    pub fn label(&self) -> Option<Label> {
        match self {
            ParsedLabel::Label(l) => Some(*l),
            ParsedLabel::Unparseable(_) => None,
        }
    }
}

/// Map a completion to the single label whose surface form it contains.
pub fn parse_label(completion: &str, verbalizer: &Verbalizer) -> ParsedLabel {
    let lowered = completion.to_lowercase();
    let cleaned = lowered.trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation());
    let found: Vec<Label> = verbalizer.forms().filter(|(_, s)| cleaned.contains(s)).map(|(l, _)| l).collect();
    match found.as_slice() {
        [only] => ParsedLabel::Label(*only),
        _ => ParsedLabel::Unparseable(completion.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CdRole;
    use proptest::prelude::*;

    fn text(id: &str, t: &str, label: Label) -> Example {
        Example {
            id: id.into(),
            content: Content::Text { text: t.into() },
            label,
            source: "t".into(),
            pair_id: None,
            cd_role: CdRole::None,
        }
    }

    fn nli(id: &str, p: &str, h: &str, label: Label) -> Example {
        Example {
            id: id.into(),
            content: Content::Pair { premise: p.into(), hypothesis: h.into() },
            label,
            source: "t".into(),
            pair_id: None,
            cd_role: CdRole::None,
        }
    }

    #[test]
    fn sentiment_one_demo() {
        let p = render_icl_sentiment(&[text("d", "great film", Label::Positive)], &text("t", "dull film", Label::Negative)).unwrap();
        assert_eq!(p.text, "The sentence is great film, the sentiment is positive.\nThe sentence is dull film, the sentiment is");
        assert_eq!(p.demo_ids, ["d"]);
        assert_eq!(p.test_id.as_deref(), Some("t"));
    }

    #[test]
    fn zero_demos_is_query_only() {
        let p = render_icl_sentiment(&[], &text("t", "dull film", Label::Negative)).unwrap();
        assert_eq!(p.text, "The sentence is dull film, the sentiment is");
        let p = render_icl_nli(&[], &nli("t", "A man sleeps.", "A man rests.", Label::Entailment)).unwrap();
        assert_eq!(p.text, "The premise is A man sleeps., the hypothesis is A man rests., the relation is");
    }

    #[test]
    fn nli_one_demo() {
        let p = render_icl_nli(
            &[nli("d", "A dog runs.", "An animal moves.", Label::Entailment)],
            &nli("t", "A cat sleeps.", "A cat runs.", Label::Contradiction),
        )
        .unwrap();
        assert_eq!(
            p.text,
            "The premise is A dog runs., the hypothesis is An animal moves., the relation is entailment.\n\
             The premise is A cat sleeps., the hypothesis is A cat runs., the relation is"
        );
    }

    #[test]
    fn task_mismatch() {
        let err = render_icl_sentiment(&[], &nli("t", "a", "b", Label::Neutral)).unwrap_err();
        assert!(matches!(err, PromptError::TaskMismatch { .. }));
        let err = render_icl_nli(&[text("d", "x", Label::Positive)], &nli("t", "a", "b", Label::Neutral)).unwrap_err();
        assert!(matches!(err, PromptError::TaskMismatch { .. }));
    }

    #[test]
    fn induction_layout() {
        let p = render_induction(&[text("a", "loved it", Label::Positive)]).unwrap();
        assert_eq!(p.text, format!("{INDUCTION_PREAMBLE}\nThe input is loved it, the output is positive.\nThe instruction was"));
        assert_eq!(p.test_id, None);
        let p = render_induction(&[nli("a", "P.", "H.", Label::Neutral)]).unwrap();
        assert!(p.text.contains("The input is premise: P. hypothesis: H., the output is neutral."));
        assert_eq!(render_induction(&[]).unwrap_err(), PromptError::NoDemonstrations);
    }

    #[test]
    fn parse_label_examples() {
        let s = Verbalizer::for_task(TaskKind::Sentiment);
        let n = Verbalizer::for_task(TaskKind::Nli);
        assert_eq!(parse_label("Positive.", &s), ParsedLabel::Label(Label::Positive));
        assert_eq!(parse_label(" the relation is entailment", &n), ParsedLabel::Label(Label::Entailment));
        assert_eq!(
            parse_label("positive, though arguably negative", &s),
            ParsedLabel::Unparseable("positive, though arguably negative".into())
        );
        assert_eq!(parse_label("", &s), ParsedLabel::Unparseable(String::new()));
        assert_eq!(parse_label("  NEGATIVE!!\n", &s), ParsedLabel::Label(Label::Negative));
    }

    #[test]
    fn query_line_round_trip() {
        let q = parse_query_line("The premise is a, the hypothesis is b, the hypothesis is c, the relation is").unwrap();
        assert_eq!(q, QueryLine::Nli { premise: "a, the hypothesis is b".into(), hypothesis: "c".into() });
        assert_eq!(parse_query_line("The sentence is x, the sentiment is"), Some(QueryLine::Sentiment { text: "x".into() }));
        assert_eq!(parse_query_line("The sentence is x, the sentiment is positive."), None);
    }

    #[test]
    fn skeleton_hashes_are_distinct() {
        let hashes: std::collections::HashSet<_> = TemplateKind::ALL.iter().map(|t| t.skeleton_hash()).collect();
        assert_eq!(hashes.len(), 3);
    }

    #[test]
    fn verbalizer_round_trip() {
        for task in [TaskKind::Sentiment, TaskKind::Nli] {
            let v = Verbalizer::for_task(task);
            for (label, surface) in v.forms() {
                assert_eq!(parse_label(surface, &v), ParsedLabel::Label(label));
                assert_eq!(v.surface(label), Some(surface));
            }
        }
    }

    fn words() -> impl Strategy<Value = String> {
        prop::collection::vec("[a-z]{1,6}", 1..6).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn parse_label_is_total(s in ".*") {
            let _ = parse_label(&s, &Verbalizer::for_task(TaskKind::Nli));
        }

        #[test]
        fn demo_text_appears_verbatim(a in words(), b in words(), t in words()) {
            let demos = [text("a", &a, Label::Positive), text("b", &b, Label::Negative)];
            let p = render_icl_sentiment(&demos, &text("t", &t, Label::Positive)).unwrap();
            prop_assert!(p.text.contains(&a));
            prop_assert!(p.text.contains(&b));
            let p = render_induction(&demos).unwrap();
            prop_assert!(p.text.contains(&a));
        }

        #[test]
        fn distinct_inputs_distinct_hashes(a in words(), b in words(), t in words(), u in words()) {
            let x = render_icl_sentiment(&[text("a", &a, Label::Positive)], &text("t", &t, Label::Positive)).unwrap();
            let y = render_icl_sentiment(&[text("b", &b, Label::Positive)], &text("u", &u, Label::Positive)).unwrap();
            prop_assert_eq!(a == b && t == u, x.content_hash == y.content_hash);
        }
    }
}
