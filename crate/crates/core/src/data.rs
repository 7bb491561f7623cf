//! Bundled synthetic corpora. Everything is a pure function of the seed.

use rand::Rng;

use crate::basemodel::tokenizer::ByteTokenizer;
use crate::basemodel::TokenSequence;
use crate::error::Result;
use crate::evalkit::{qa_document, QaItem};
use crate::numcore::named_rng;

type Op = (&'static str, fn(i64, i64) -> i64);

const OPS: [Op; 3] = [("plus", |a, b| a + b), ("minus", |a, b| a - b), ("times", |a, b| a * b)];

fn operands<R: Rng>(rng: &mut R, op: usize) -> (i64, i64) {
    if op == 2 {
        (rng.random_range(0..13), rng.random_range(0..13))
    } else {
        let a = rng.random_range(0..100);
        let b = rng.random_range(0..100);
        if op == 1 && b > a {
            (b, a)
        } else {
            (a, b)
        }
    }
}

/// One arithmetic fact in words, e.g. `12 plus 7 is 19.`
pub fn arithmetic_fact<R: Rng>(rng: &mut R) -> (String, i64) {
    let op = rng.random_range(0..OPS.len());
    let (a, b) = operands(rng, op);
    let (name, f) = OPS[op];
    let c = f(a, b);
    (format!("{a} {name} {b} is {c}."), c)
}

/// Newline-separated arithmetic facts, at least `min_chars` long.
pub fn arithmetic_corpus(min_chars: usize, seed: u64) -> String {
    let mut rng = named_rng(seed, "data.arithmetic");
    let mut out = String::with_capacity(min_chars + 64);
    while out.len() < min_chars {
        let (line, _) = arithmetic_fact(&mut rng);
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Word problems answered in the `#### <number>` format.
pub fn arithmetic_qa(n: usize, seed: u64) -> Vec<QaItem> {
    let mut rng = named_rng(seed, "data.qa");
    (0..n)
        .map(|_| {
            let op = rng.random_range(0..OPS.len());
            let (a, b) = operands(&mut rng, op);
            let (name, f) = OPS[op];
            let c = f(a, b);
            QaItem {
                question: format!("What is {a} {name} {b}?"),
                answer: format!("{a} {name} {b} is {c}. #### {c}"),
            }
        })
        .collect()
}

/// QA items rendered as BOS/EOS training documents.
pub fn qa_sequences(items: &[QaItem], template: &str, max_len: usize) -> Result<Vec<TokenSequence>> {
    items
        .iter()
        .map(|it| TokenSequence::new(ByteTokenizer.encode_document(&qa_document(template, it)), 258, max_len))
        .collect()
}

/// Lines of text as BOS/EOS documents.
pub fn text_sequences(text: &str, max_len: usize) -> Result<Vec<TokenSequence>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| TokenSequence::new(ByteTokenizer.encode_document(l), 258, max_len))
        .collect()
}

/// Fixed random lowercase strings; the only way to predict them is to
/// memorize them.
pub fn memorization_corpus(n: usize, len: usize, seed: u64) -> Vec<String> {
    let mut rng = named_rng(seed, "data.memorize");
    (0..n)
        .map(|_| (0..len).map(|_| (b'a' + rng.random_range(0..26u8)) as char).collect())
        .collect()
}
