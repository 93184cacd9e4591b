//! Seeded generator of small sentiment treebanks with compositional labels,
//! for tests, benchmarks and offline demos.
//!
//! Sentences are binarized like SST trees. An adjective carries the base
//! sentiment; `very` pushes it away from neutral, `not` flips it and pulls
//! it toward the middle, and in `X but Y` the second clause decides.

use rand::Rng;

use crate::numerics::rng::stream;
use crate::treebank::{Corpus, PhraseTree, SentimentLabel, Split};

const ADJECTIVES: [[&str; 6]; 5] = [
    [
        "dreadful",
        "unwatchable",
        "atrocious",
        "abysmal",
        "insufferable",
        "horrid",
    ],
    [
        "dull",
        "tedious",
        "clumsy",
        "bland",
        "forgettable",
        "shallow",
    ],
    [
        "ordinary",
        "familiar",
        "long",
        "quiet",
        "conventional",
        "modest",
    ],
    [
        "charming", "solid", "engaging", "pleasant", "funny", "likable",
    ],
    [
        "brilliant",
        "masterful",
        "stunning",
        "superb",
        "riveting",
        "magnificent",
    ],
];
const NOUNS: [&str; 10] = [
    "film",
    "movie",
    "story",
    "plot",
    "cast",
    "script",
    "ending",
    "performance",
    "soundtrack",
    "director",
];
const VERBS: [&str; 5] = ["is", "was", "feels", "seems", "remains"];
const DETERMINERS: [&str; 3] = ["the", "this", "its"];

fn label(v: u8) -> SentimentLabel {
    SentimentLabel::new(v as i64).expect("synthetic labels are in range")
}

fn leaf(v: u8, token: &str) -> PhraseTree {
    PhraseTree::leaf(label(v), token).expect("synthetic tokens are valid")
}

fn node(v: u8, children: Vec<PhraseTree>) -> PhraseTree {
    PhraseTree::internal(label(v), children).expect("non-empty children")
}

fn intensify(v: u8) -> u8 {
    match v {
        3 => 4,
        1 => 0,
        other => other,
    }
}

fn negate(v: u8) -> u8 {
    match v {
        4 | 3 => 1,
        0 | 1 => 3,
        other => other,
    }
}

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, items: &[&'a str]) -> &'a str {
    items[rng.random_range(0..items.len())]
}

fn adjective_phrase<R: Rng + ?Sized>(rng: &mut R) -> PhraseTree {
    let base = rng.random_range(0..5u8);
    let mut phrase = leaf(base, pick(rng, &ADJECTIVES[base as usize]));
    let mut v = base;
    if rng.random::<f64>() < 0.3 {
        v = intensify(v);
        phrase = node(v, vec![leaf(2, "very"), phrase]);
    }
    if rng.random::<f64>() < 0.25 {
        v = negate(v);
        phrase = node(v, vec![leaf(2, "not"), phrase]);
    }
    phrase
}

fn clause<R: Rng + ?Sized>(rng: &mut R) -> PhraseTree {
    let np = node(
        2,
        vec![leaf(2, pick(rng, &DETERMINERS)), leaf(2, pick(rng, &NOUNS))],
    );
    let adjp = adjective_phrase(rng);
    let v = adjp.label().value();
    let vp = node(v, vec![leaf(2, pick(rng, &VERBS)), adjp]);
    node(v, vec![np, vp])
}

/// One random sentence tree.
pub fn sentence<R: Rng + ?Sized>(rng: &mut R) -> PhraseTree {
    let first = clause(rng);
    if rng.random::<f64>() < 0.3 {
        let second = clause(rng);
        let v = second.label().value();
        node(v, vec![first, node(v, vec![leaf(2, "but"), second])])
    } else {
        first
    }
}

/// `n` sentences drawn from stream `split` of `seed`.
pub fn corpus(split: Split, n: usize, seed: u64) -> Corpus {
    let mut rng = stream(seed, split as u64 + 1);
    Corpus {
        split,
        trees: (0..n).map(|_| sentence(&mut rng)).collect(),
    }
}

/// A corpus in the one-tree-per-line distribution format.
pub fn distribution_text(corpus: &Corpus) -> String {
    let mut out = String::new();
    for t in &corpus.trees {
        out.push_str(&t.serialize());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treebank::parse_tree;

    #[test]
    fn deterministic_and_parseable() {
        let a = corpus(Split::Train, 50, 3);
        assert_eq!(a, corpus(Split::Train, 50, 3));
        assert_ne!(a, corpus(Split::Dev, 50, 3));
        for (line, tree) in distribution_text(&a).lines().zip(&a.trees) {
            assert_eq!(&parse_tree(line).unwrap(), tree);
        }
    }

    #[test]
    fn composition_rules() {
        let t = parse_tree(&node(1, vec![leaf(2, "not"), leaf(4, "superb")]).serialize()).unwrap();
        assert_eq!(t.label().value(), negate(4));
        assert_eq!(intensify(3), 4);
        assert_eq!(negate(intensify(1)), 3);
    }

    #[test]
    fn roots_cover_every_class() {
        let c = corpus(Split::Train, 400, 1);
        let mut seen = [0usize; 5];
        for t in &c.trees {
            seen[t.label().index()] += 1;
        }
        assert!(seen.iter().all(|&n| n > 20), "{seen:?}");
    }
}
