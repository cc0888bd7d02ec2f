//! Annotated explanations: placeholder substitution, random corruption and
//! ExpBERT-style feature construction.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::encoder::{pack_pair, Encoder, PackedInput};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};
use crate::vocab::{TokenId, Vocab};

pub const O1_PLACEHOLDER: &str = "{o1}";
pub const O2_PLACEHOLDER: &str = "{o2}";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExpToken {
    Word(TokenId),
    O1,
    O2,
}

/// A token sequence with at most one slot for each entity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Explanation {
    tokens: Vec<ExpToken>,
}

impl Explanation {
    pub fn new(tokens: Vec<ExpToken>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::contract("empty explanation"));
        }
        for slot in [ExpToken::O1, ExpToken::O2] {
            if tokens.iter().filter(|t| **t == slot).count() > 1 {
                return Err(Error::contract(format!("explanation repeats placeholder {slot:?}")));
            }
        }
        Ok(Explanation { tokens })
    }

    /// Parses one whitespace-tokenized line, interning unseen words.
    pub fn parse(line: &str, vocab: &mut Vocab) -> Result<Self> {
        let tokens = line
            .split_whitespace()
            .map(|w| match w {
                O1_PLACEHOLDER => ExpToken::O1,
                O2_PLACEHOLDER => ExpToken::O2,
                _ => ExpToken::Word(vocab.intern(w)),
            })
            .collect();
        Explanation::new(tokens)
    }

    pub fn render(&self, vocab: &Vocab) -> String {
        self.tokens
            .iter()
            .map(|t| match t {
                ExpToken::Word(id) => vocab.word(*id),
                ExpToken::O1 => O1_PLACEHOLDER,
                ExpToken::O2 => O2_PLACEHOLDER,
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokens(&self) -> &[ExpToken] {
        &self.tokens
    }

    /// Number of tokens that are not entity placeholders.
    pub fn word_count(&self) -> usize {
        self.tokens.iter().filter(|t| matches!(t, ExpToken::Word(_))).count()
    }

    pub fn words(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.tokens.iter().filter_map(|t| match t {
            ExpToken::Word(id) => Some(*id),
            _ => None,
        })
    }
}

/// Ordered list of explanations. Feature blocks follow this order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationSet {
    pub explanations: Vec<Explanation>,
}

impl ExplanationSet {
    pub fn new(explanations: Vec<Explanation>) -> Self {
        ExplanationSet { explanations }
    }

    pub fn len(&self) -> usize {
        self.explanations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.explanations.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Explanation> {
        self.explanations.iter()
    }

    /// One explanation per nonblank line; `{o1}`/`{o2}` mark the entity slots.
    pub fn parse_text(text: &str, vocab: &mut Vocab) -> Result<Self> {
        let explanations = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Explanation::parse(l, vocab))
            .collect::<Result<_>>()?;
        Ok(ExplanationSet { explanations })
    }

    pub fn to_text(&self, vocab: &Vocab) -> String {
        self.explanations.iter().map(|e| e.render(vocab) + "\n").collect()
    }

    pub fn load(path: impl AsRef<Path>, vocab: &mut Vocab) -> Result<Self> {
        Self::parse_text(&fs::read_to_string(path)?, vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>, vocab: &Vocab) -> Result<()> {
        fs::write(path, self.to_text(vocab))?;
        Ok(())
    }

    /// The first `n` explanations, cycling through the list when `n` exceeds it.
    pub fn cycled(&self, n: usize) -> Self {
        ExplanationSet {
            explanations: self.explanations.iter().cycle().take(if self.is_empty() { 0 } else { n }).cloned().collect(),
        }
    }
}

/// Replaces each placeholder by the corresponding entity tokens.
pub fn substitute(e: &Explanation, o1: &[TokenId], o2: &[TokenId]) -> Vec<TokenId> {
    substitute_tracked(e, o1, o2).into_iter().map(|(t, _)| t).collect()
}

/// Like [`substitute`], also reporting which explanation position produced each
/// output token (`None` for entity tokens).
pub fn substitute_tracked(e: &Explanation, o1: &[TokenId], o2: &[TokenId]) -> Vec<(TokenId, Option<usize>)> {
    let mut out = Vec::with_capacity(e.tokens.len() + o1.len() + o2.len());
    for (i, t) in e.tokens.iter().enumerate() {
        match t {
            ExpToken::Word(id) => out.push((*id, Some(i))),
            ExpToken::O1 => out.extend(o1.iter().map(|&id| (id, None))),
            ExpToken::O2 => out.extend(o2.iter().map(|&id| (id, None))),
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub fraction: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::contract(format!("corruption fraction {fraction} outside [0, 1]")));
        }
        Ok(CorruptionSpec { fraction, seed })
    }
}

/// A corrupted explanation set plus the positions that were replaced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorruptedSet {
    pub set: ExplanationSet,
    /// Per explanation, sorted token positions that received a random word.
    pub replaced: Vec<Vec<usize>>,
}

impl CorruptedSet {
    /// Distinct words written into corrupted positions, in ascending id order.
    pub fn replacement_tokens(&self) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = self
            .set
            .iter()
            .zip(&self.replaced)
            .flat_map(|(e, pos)| {
                pos.iter().map(move |&p| match e.tokens[p] {
                    ExpToken::Word(id) => id,
                    _ => unreachable!("placeholders are never replaced"),
                })
            })
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// `round(p·k)` with halves rounded up.
pub fn replacement_count(fraction: f64, k: usize) -> usize {
    ((fraction * k as f64) + 0.5).floor() as usize
}

/// Replaces `round(p·k)` uniformly chosen word positions of every explanation
/// with uniformly drawn words from `vocab`, never touching placeholders.
///
/// A replacement always differs from the word it replaces when `vocab` offers
/// an alternative, so the count of changed positions is exact. The same seed
/// gives the same output.
pub fn corrupt_set(set: &ExplanationSet, spec: &CorruptionSpec, vocab: &[TokenId]) -> Result<CorruptedSet> {
    if !(0.0..=1.0).contains(&spec.fraction) {
        return Err(Error::contract(format!("corruption fraction {} outside [0, 1]", spec.fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(set.len());
    let mut replaced = Vec::with_capacity(set.len());
    for e in set.iter() {
        let word_pos: Vec<usize> = e
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| matches!(t, ExpToken::Word(_)))
            .map(|(i, _)| i)
            .collect();
        let r = replacement_count(spec.fraction, word_pos.len());
        let mut tokens = e.tokens.clone();
        let mut chosen: Vec<usize> = if r == 0 {
            Vec::new()
        } else {
            if vocab.is_empty() {
                return Err(Error::contract("corruption vocabulary is empty"));
            }
            sample(&mut rng, word_pos.len(), r).into_iter().map(|k| word_pos[k]).collect()
        };
        chosen.sort_unstable();
        for &p in &chosen {
            let ExpToken::Word(orig) = tokens[p] else { unreachable!() };
            let mut w = vocab[rng.random_range(0..vocab.len())];
            while w == orig && vocab.len() > 1 {
                w = vocab[rng.random_range(0..vocab.len())];
            }
            tokens[p] = ExpToken::Word(w);
        }
        out.push(Explanation { tokens });
        replaced.push(chosen);
    }
    Ok(CorruptedSet { set: ExplanationSet::new(out), replaced })
}

/// `(s, e_i)` pairs for every example, example-major: pair `b·n + i` pairs
/// example `b` with explanation `i`.
pub fn explanation_pairs(xs: &[&Example], set: &ExplanationSet, max_len: usize) -> Result<Vec<PackedInput>> {
    let mut out = Vec::with_capacity(xs.len() * set.len());
    for (b, x) in xs.iter().enumerate() {
        for e in set.iter() {
            let ctx = substitute(e, x.entity1(), x.entity2());
            out.push(pack_pair(&x.tokens, &ctx, max_len).map_err(|err| err.for_example(b))?);
        }
    }
    Ok(out)
}

/// Concatenated pooled encodings of `(s, e_1) … (s, e_n)`: a `B x n·d` node.
pub fn expbert_features(g: &mut Graph<'_>, enc: &Encoder, xs: &[&Example], set: &ExplanationSet) -> Result<Var> {
    if set.is_empty() {
        return Err(Error::contract("ExpBERT features need at least one explanation"));
    }
    let pairs = explanation_pairs(xs, set, enc.config.max_len)?;
    let out = enc.encode(g, &pairs, None)?;
    g.reshape(out.pooled, &[xs.len(), set.len() * enc.d()])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn honeymoon(vocab: &mut Vocab) -> Explanation {
        Explanation::parse("{o1} and {o2} went on a honeymoon", vocab).unwrap()
    }

    #[test]
    fn substitution_replaces_placeholders_in_place() {
        let mut v = Vocab::new();
        let e = honeymoon(&mut v);
        let (robert, julie) = (v.intern("Robert"), v.intern("Julie"));
        let out = substitute(&e, &[robert], &[julie]);
        assert_eq!(v.decode(&out), "Robert and Julie went on a honeymoon");
    }

    #[test]
    fn substitution_without_placeholders_is_identity() {
        let mut v = Vocab::new();
        let e = Explanation::parse("they are married", &mut v).unwrap();
        let out = substitute(&e, &[99], &[98]);
        assert_eq!(out, e.words().collect::<Vec<_>>());
    }

    #[test]
    fn multi_token_entity_splices() {
        let mut v = Vocab::new();
        let e = honeymoon(&mut v);
        let (new, york, julie) = (v.intern("new"), v.intern("york"), v.intern("Julie"));
        let one = substitute(&e, &[julie], &[julie]);
        let two = substitute(&e, &[new, york], &[julie]);
        assert_eq!(two.len(), one.len() + 1);
        assert_eq!(&two[..2], &[new, york]);
    }

    #[test]
    fn parse_rejects_repeated_placeholders_and_empty_lines() {
        let mut v = Vocab::new();
        assert!(Explanation::parse("{o1} {o1} met", &mut v).is_err());
        assert!(Explanation::parse("   ", &mut v).is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut v = Vocab::new();
        let text = "{o1} and {o2} went on a honeymoon\n{o1} married {o2}\n";
        let set = ExplanationSet::parse_text(text, &mut v).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.to_text(&v), text);
    }

    #[test]
    fn full_corruption_replaces_all_five_words() {
        let mut v = Vocab::new();
        let e = honeymoon(&mut v);
        for w in ["frog", "table", "blue", "run", "seven"] {
            v.intern(w);
        }
        let set = ExplanationSet::new(vec![e.clone()]);
        let c = corrupt_set(&set, &CorruptionSpec::new(1.0, 3).unwrap(), &v.regular_ids()).unwrap();
        assert_eq!(c.replaced[0], vec![1, 3, 4, 5, 6]);
        let out = &c.set.explanations[0];
        assert_eq!(out.tokens[0], ExpToken::O1);
        assert_eq!(out.tokens[2], ExpToken::O2);
        for p in [1, 3, 4, 5, 6] {
            assert_ne!(out.tokens[p], e.tokens[p]);
        }
    }

    #[test]
    fn zero_fraction_is_identity() {
        let mut v = Vocab::new();
        let set = ExplanationSet::new(vec![honeymoon(&mut v)]);
        let c = corrupt_set(&set, &CorruptionSpec::new(0.0, 9).unwrap(), &v.regular_ids()).unwrap();
        assert_eq!(c.set, set);
        assert!(c.replaced[0].is_empty());
    }

    #[test]
    fn half_of_seven_rounds_up_to_four() {
        assert_eq!(replacement_count(0.5, 7), 4);
        assert_eq!(replacement_count(0.25, 4), 1);
        assert_eq!(replacement_count(0.25, 2), 1);
        assert_eq!(replacement_count(0.0, 7), 0);
        let mut v = Vocab::new();
        let e = Explanation::parse("{o1} a b c d e f g {o2}", &mut v).unwrap();
        let set = ExplanationSet::new(vec![e.clone()]);
        let c = corrupt_set(&set, &CorruptionSpec::new(0.5, 1).unwrap(), &v.regular_ids()).unwrap();
        let changed = e.tokens.iter().zip(c.set.explanations[0].tokens()).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 4);
    }

    #[test]
    fn fraction_out_of_range_is_rejected() {
        assert!(CorruptionSpec::new(1.5, 0).is_err());
        let bad = CorruptionSpec { fraction: -0.1, seed: 0 };
        assert!(corrupt_set(&ExplanationSet::default(), &bad, &[7]).is_err());
    }

    #[test]
    fn cycled_repeats_in_order() {
        let mut v = Vocab::new();
        let set = ExplanationSet::parse_text("{o1} a {o2}\n{o1} b {o2}\n", &mut v).unwrap();
        let c = set.cycled(5);
        assert_eq!(c.len(), 5);
        assert_eq!(c.explanations[2], set.explanations[0]);
        assert!(ExplanationSet::default().cycled(3).is_empty());
    }
}
