//! Synthetic tagged corpus generator: a tiny 3-tag grammar whose tags are
//! genuinely informative, used by tests, examples, and the `demo-corpus`
//! CLI subcommand.
//!
//! The grammar has determiners (D), nouns (N), and verbs (V) over a 12-word
//! lexicon. Four surface forms ("play", "walk", "show", "look") belong to
//! both the noun and the verb set, so two of every five noun or verb slots
//! are filled by a word whose tag cannot be read off the spelling. The four
//! tag patterns share prefixes and diverge late: after "the play walk" both
//! the noun-noun and noun-verb readings stay live, and they continue
//! differently. A lexical model has to carry that uncertainty through the
//! characters to predict what follows, while the tag prefixes hand the
//! syntactic state over explicitly.

use crate::corpus::TaggedSentence;
use crate::nncore::RngStream;

pub const TAGS: [&str; 3] = ["D", "N", "V"];

/// Emission tables; repeated entries are sampling weights, not typos.
/// Words unique to one class are weighted double, so unambiguous words
/// still carry most of the mass.
pub const DETERMINERS: [&str; 2] = ["the", "a"];
pub const NOUNS: [&str; 10] =
    ["cat", "cat", "dog", "dog", "fur", "fur", "play", "walk", "show", "look"];
pub const VERBS: [&str; 10] =
    ["runs", "runs", "eats", "eats", "digs", "digs", "play", "walk", "show", "look"];

/// The noun/verb homograph the posterior walkthroughs use. "walk", "show",
/// and "look" are ambiguous the same way.
pub const AMBIGUOUS_WORD: &str = "play";

/// Tag patterns and their sampling weights. The two "D N N ..." patterns
/// put nouns where verb readings are also live, and whenever the third
/// word is a homograph nothing before the fourth word tells the pattern
/// families apart.
const PATTERNS: [(&[usize], f64); 4] = [
    (&[0, 1, 2, 0, 1, 1], 0.35), // D N V D N N
    (&[0, 1, 2, 0, 1], 0.35),    // D N V D N
    (&[0, 1, 1, 2], 0.15),       // D N N V
    (&[0, 1, 1, 2, 0, 1], 0.15), // D N N V D N
];

fn words_for(tag: usize) -> &'static [&'static str] {
    match tag {
        0 => &DETERMINERS,
        1 => &NOUNS,
        _ => &VERBS,
    }
}

fn pick<'a>(choices: &[&'a str], rng: &mut RngStream) -> &'a str {
    let i = (rng.next_f64() * choices.len() as f64) as usize;
    choices[i.min(choices.len() - 1)]
}

fn sample_sentence(rng: &mut RngStream) -> TaggedSentence {
    let u = rng.next_f64();
    let mut acc = 0.0;
    let mut pattern = PATTERNS[PATTERNS.len() - 1].0;
    for (tags, w) in PATTERNS {
        acc += w;
        if u < acc {
            pattern = tags;
            break;
        }
    }
    let tokens = pattern
        .iter()
        .map(|&t| (pick(words_for(t), rng).to_string(), TAGS[t].to_string()))
        .collect();
    TaggedSentence::new(tokens)
}

/// Deterministically sample `n` sentences from the grammar.
pub fn sample_corpus(n: usize, seed: u64) -> Vec<TaggedSentence> {
    let mut rng = RngStream::new(seed);
    (0..n).map(|_| sample_sentence(&mut rng)).collect()
}

/// Render sentences back to two-column tab-separated text, one token per
/// line, blank line between sentences.
pub fn to_conll(sentences: &[TaggedSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        for (surface, tag) in &s.tokens {
            out.push_str(surface);
            out.push('\t');
            out.push_str(tag);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Render sentences as plain text, one sentence per line.
pub fn to_plain(sentences: &[TaggedSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        let words: Vec<&str> = s.surfaces().collect();
        out.push_str(&words.join(" "));
        out.push('\n');
    }
    out
}
