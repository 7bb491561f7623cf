//! Validation loss, answer extraction, and exact-match accuracy.

use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::basemodel::tokenizer::ByteTokenizer;
use crate::basemodel::{BaseModel, TokenSequence, BOS, EOS};
use crate::carryon::{CarryOn, TapSet};
use crate::error::{Error, Result};
use crate::numcore::{sequence_nll, Float, Tensor};
use crate::trainer::source::TapSource;

/// Default prompt, spelling preserved.
pub const DEFAULT_PROMPT_TEMPLATE: &str = "Math Question: {question}  Let's analyze and solve the question, but don't write program code, and write the final number results after ####. Examples:  after calculattion, the square footage is #### 1000 square feets.";

/// Relative tolerance for comparing non-integer answers.
pub const FLOAT_REL_TOL: f64 = 1e-9;

/// Fractions are tried before plain numbers so `3/4` is not cut to `3`.
const ANSWER_PATTERN: &str = r"####\s*(\d+/\d+|-?\d+(?:\.\d+)?)";

fn answer_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(ANSWER_PATTERN).expect("valid pattern"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Int(i64),
    Float(f64),
}

impl Answer {
    pub fn value(self) -> f64 {
        match self {
            Answer::Int(i) => i as f64,
            Answer::Float(f) => f,
        }
    }

    /// Integers compare exactly; anything involving a float uses
    /// [`FLOAT_REL_TOL`].
    pub fn matches(self, gold: Answer) -> bool {
        match (self, gold) {
            (Answer::Int(a), Answer::Int(b)) => a == b,
            _ => {
                let (a, b) = (self.value(), gold.value());
                a == b || (a - b).abs() <= FLOAT_REL_TOL * a.abs().max(b.abs())
            }
        }
    }
}

impl std::fmt::Display for Answer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Answer::Int(i) => write!(f, "{i}"),
            Answer::Float(x) => write!(f, "{x}"),
        }
    }
}

fn parse_number(s: &str) -> Option<Answer> {
    if let Some((n, d)) = s.split_once('/') {
        let (n, d): (f64, f64) = (n.parse().ok()?, d.parse().ok()?);
        return (d != 0.0).then(|| Answer::Float(n / d));
    }
    if s.contains('.') {
        return s.parse().ok().map(Answer::Float);
    }
    s.parse::<i64>()
        .map(Answer::Int)
        .ok()
        .or_else(|| s.parse().ok().map(Answer::Float))
}

/// The last valid `####`-delimited number in `text`.
pub fn extract_answer(text: &str) -> Option<Answer> {
    answer_regex()
        .captures_iter(text)
        .filter_map(|c| parse_number(c.get(1)?.as_str()))
        .last()
}

pub fn render_prompt(template: &str, question: &str) -> String {
    template.replace("{question}", question)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub question: String,
    pub answer: String,
}

impl QaItem {
    /// Gold value: the `####` answer if present, otherwise the whole field.
    pub fn gold(&self) -> Option<Answer> {
        extract_answer(&self.answer).or_else(|| parse_number(self.answer.trim()))
    }
}

pub fn parse_qa_jsonl(text: &str) -> Result<Vec<QaItem>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::data(format!("qa line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn load_qa_jsonl(path: &Path) -> Result<Vec<QaItem>> {
    parse_qa_jsonl(&std::fs::read_to_string(path)?)
}

/// Training text for one item: prompt, newline, worked answer.
pub fn qa_document(template: &str, item: &QaItem) -> String {
    format!("{}\n{}", render_prompt(template, &item.question), item.answer)
}

/// Decoding context for one item: BOS, prompt, newline.
pub fn qa_prompt_ids(template: &str, item: &QaItem) -> Vec<u32> {
    let mut ids = vec![BOS];
    ids.extend(ByteTokenizer.encode(&format!("{}\n", render_prompt(template, &item.question))));
    ids
}

/// Taps and next-token targets for one sequence, ready for scoring.
#[derive(Clone, Debug)]
pub struct Example {
    pub taps: TapSet,
    pub targets: Vec<u32>,
}

pub fn prepare_examples(source: &mut dyn TapSource, seqs: &[TokenSequence]) -> Result<Vec<Example>> {
    seqs.iter()
        .map(|s| {
            Ok(Example {
                taps: source.taps(s.inputs())?,
                targets: s.targets().to_vec(),
            })
        })
        .collect()
}

/// Mean over sequences of each sequence's masked mean next-token loss.
pub fn val_cross_entropy(carry: &CarryOn, examples: &[Example], alpha: Float, mask_before: usize) -> Result<Float> {
    if examples.is_empty() {
        return Err(Error::Evaluation("empty validation set".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        let logits = carry.logits(&ex.taps, alpha)?;
        total += sequence_nll(&logits, &ex.targets, mask_before)?;
    }
    Ok(total / examples.len() as Float)
}

/// The same statistic computed from the base model alone.
pub fn base_val_cross_entropy(base: &BaseModel, seqs: &[TokenSequence], mask_before: usize) -> Result<Float> {
    if seqs.is_empty() {
        return Err(Error::Evaluation("empty validation set".into()));
    }
    let mut total = 0.0;
    for s in seqs {
        let logits = base.base_logits(s.inputs())?;
        total += sequence_nll(&logits, s.targets(), mask_before)?;
    }
    Ok(total / seqs.len() as Float)
}

/// Index of the largest entry of the last row; ties go to the lower index.
fn argmax_last_row(logits: &Tensor) -> u32 {
    let row = logits.row(logits.rows() - 1);
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding until EOS or `max_new_tokens`. The context passed to
/// `next_logits` is the trailing `window` tokens. Returns generated ids,
/// EOS excluded.
pub fn greedy_decode<F>(mut next_logits: F, prompt: &[u32], max_new_tokens: usize, window: usize) -> Result<Vec<u32>>
where
    F: FnMut(&[u32]) -> Result<Tensor>,
{
    if prompt.is_empty() || window == 0 {
        return Err(Error::Evaluation("decoding needs a nonempty prompt and window".into()));
    }
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new_tokens {
        let start = ids.len().saturating_sub(window);
        let next = argmax_last_row(&next_logits(&ids[start..])?);
        if next == EOS {
            break;
        }
        ids.push(next);
        out.push(next);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: usize,
    pub gold: Option<Answer>,
    pub base_pred: Option<Answer>,
    pub base_match: bool,
    pub carryon_pred: Option<Answer>,
    pub carryon_match: bool,
    pub carryon_text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub alpha: Float,
    pub val_loss: Option<Float>,
    pub accuracy_base: Float,
    pub accuracy_carryon: Float,
    pub items: Vec<ItemRecord>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let opt = |a: &Option<Answer>| a.map(|v| v.to_string()).unwrap_or_default();
        let mut s = String::from("id,gold,base_pred,base_match,carryon_pred,carryon_match\n");
        for r in &self.items {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.id,
                opt(&r.gold),
                opt(&r.base_pred),
                u8::from(r.base_match),
                opt(&r.carryon_pred),
                u8::from(r.carryon_match)
            ));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub max_new_tokens: usize,
    pub template: String,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            max_new_tokens: 800,
            template: DEFAULT_PROMPT_TEMPLATE.to_string(),
        }
    }
}

/// Greedy-decodes every item with the base alone and with the carry-on at
/// `alpha`. At `alpha == 0` only the base pathway runs and its results are
/// reported for both columns.
pub fn exact_match_accuracy(
    base: &BaseModel,
    carry: &CarryOn,
    source: &mut dyn TapSource,
    items: &[QaItem],
    alpha: Float,
    opts: &DecodeOptions,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Evaluation("empty qa set".into()));
    }
    let window = source.max_len().min(base.config().max_seq);
    let tok = ByteTokenizer;
    let mut records = Vec::with_capacity(items.len());
    for (id, item) in items.iter().enumerate() {
        let gold = item.gold();
        let prompt = qa_prompt_ids(&opts.template, item);
        let base_ids = greedy_decode(|ctx| base.base_logits(ctx), &prompt, opts.max_new_tokens, window)?;
        let base_pred = extract_answer(&tok.decode(&base_ids));
        let (carry_pred, carry_text) = if alpha == 0.0 {
            (base_pred, tok.decode(&base_ids))
        } else {
            let ids = greedy_decode(
                |ctx| carry.logits(&source.taps(ctx)?, alpha),
                &prompt,
                opts.max_new_tokens,
                window,
            )?;
            let text = tok.decode(&ids);
            (extract_answer(&text), text)
        };
        let hit = |p: Option<Answer>| matches!((p, gold), (Some(p), Some(g)) if p.matches(g));
        records.push(ItemRecord {
            id,
            gold,
            base_pred,
            base_match: hit(base_pred),
            carryon_pred: carry_pred,
            carryon_match: hit(carry_pred),
            carryon_text: carry_text,
        });
    }
    let n = records.len() as Float;
    Ok(EvalReport {
        alpha,
        val_loss: None,
        accuracy_base: records.iter().filter(|r| r.base_match).count() as Float / n,
        accuracy_carryon: records.iter().filter(|r| r.carryon_match).count() as Float / n,
        items: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn last_match_wins() {
        assert_eq!(
            extract_answer("the square footage is #### 1000 square feets. #### 42"),
            Some(Answer::Int(42))
        );
        assert_eq!(
            extract_answer("Calculate the number of parameters: #### 4097000"),
            Some(Answer::Int(4097000))
        );
        assert_eq!(extract_answer("#### 3/4"), Some(Answer::Float(0.75)));
    }

    #[test]
    fn zero_denominator_is_skipped() {
        assert_eq!(extract_answer("#### 5 then #### 1/0"), Some(Answer::Int(5)));
        assert_eq!(extract_answer("#### 1/0"), None);
    }

    #[test]
    fn comparison_rules() {
        assert!(Answer::Int(7).matches(Answer::Int(7)));
        assert!(!Answer::Int(1000).matches(Answer::Int(7)));
        assert!(Answer::Float(7.0).matches(Answer::Int(7)));
        assert!(Answer::Float(0.1 + 0.2).matches(Answer::Float(0.3)));
        assert!(!Answer::Float(0.3001).matches(Answer::Float(0.3)));
    }

    #[test]
    fn template_is_verbatim() {
        assert!(DEFAULT_PROMPT_TEMPLATE.contains("calculattion"));
        let p = render_prompt(DEFAULT_PROMPT_TEMPLATE, "What is 2 plus 2?");
        assert!(p.starts_with("Math Question: What is 2 plus 2?  Let's"));
    }

    #[test]
    fn greedy_stops_at_eos_and_limit() {
        // Emits token 65 three times, then EOS.
        let mut calls = 0;
        let out = greedy_decode(
            |_| {
                calls += 1;
                let mut t = Tensor::zeros(&[1, 258]);
                t.data_mut()[if calls > 3 { EOS as usize } else { 65 }] = 1.0;
                Ok(t)
            },
            &[BOS],
            10,
            4,
        )
        .unwrap();
        assert_eq!(out, vec![65, 65, 65]);
        let out = greedy_decode(|_| Ok(Tensor::zeros(&[1, 258])), &[BOS], 5, 4).unwrap();
        assert_eq!(out, vec![0; 5]);
    }

    #[test]
    fn qa_parsing() {
        let items = parse_qa_jsonl("{\"question\":\"q\",\"answer\":\"1 + 1 = 2. #### 2\"}\n\n").unwrap();
        assert_eq!(items[0].gold(), Some(Answer::Int(2)));
        assert!(parse_qa_jsonl("{bad").is_err());
    }
}
