use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const IMAGE_TOKEN: &str = "<image>";
pub const SEG_TOKEN: &str = "<seg>";
pub const EOS_TOKEN: &str = "<eos>";

/// Word-level vocabulary. Ids 0..3 are `<image>`, `<seg>`, `<eos>`; the
/// remaining words are sorted so the mapping depends only on the word set.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub const IMAGE: usize = 0;
    pub const SEG: usize = 1;
    pub const EOS: usize = 2;

    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let specials = [IMAGE_TOKEN, SEG_TOKEN, EOS_TOKEN];
        let rest: BTreeSet<String> = words
            .into_iter()
            .flat_map(|w| split_words(w.as_ref()))
            .filter(|w| !specials.contains(&w.as_str()))
            .collect();
        let words: Vec<String> = specials.iter().map(|s| s.to_string()).chain(rest).collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Lower-cases, splits on whitespace and detaches `?`, `,`, `.`.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let words = split_words(text);
        if words.is_empty() {
            return Err(Error::EmptyText);
        }
        let mut ids = Vec::with_capacity(words.len());
        let mut missing = Vec::new();
        for w in words {
            match self.index.get(&w) {
                Some(&i) => ids.push(i),
                None => missing.push(w),
            }
        }
        if !missing.is_empty() {
            return Err(Error::OutOfVocabulary(missing));
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.words.get(i).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let mut word = lower.as_str();
        let mut trailing = Vec::new();
        while let Some(c) = word.chars().last().filter(|c| matches!(c, '?' | ',' | '.')) {
            trailing.push(c.to_string());
            word = &word[..word.len() - 1];
        }
        if !word.is_empty() {
            out.push(word.to_string());
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Visual,
    Text,
    Seg,
}

/// Visual placeholder span, then instruction words, then the answer.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub tags: Vec<Segment>,
    /// First position of the answer span.
    pub answer_start: usize,
}

impl TokenSequence {
    pub fn new(num_visual: usize, instruction: &[usize], answer: &[usize]) -> Result<Self> {
        let mut ids = vec![Vocab::IMAGE; num_visual];
        ids.extend_from_slice(instruction);
        let answer_start = ids.len();
        ids.extend_from_slice(answer);
        let mut tags: Vec<Segment> = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| match id {
                _ if i < num_visual => Segment::Visual,
                Vocab::SEG => Segment::Seg,
                _ => Segment::Text,
            })
            .collect();
        let segs = tags.iter().filter(|t| **t == Segment::Seg).count();
        if segs > 1 {
            // Only the first <seg> prompts the decoder.
            let first = tags.iter().position(|t| *t == Segment::Seg).unwrap();
            for t in tags.iter_mut().skip(first + 1) {
                if *t == Segment::Seg {
                    *t = Segment::Text;
                }
            }
        }
        if instruction.iter().chain(answer).any(|&i| i == Vocab::IMAGE) {
            return Err(Error::contract("<image> may only appear in the visual span"));
        }
        Ok(Self {
            ids,
            tags,
            answer_start,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_visual(&self) -> usize {
        self.tags.iter().take_while(|t| **t == Segment::Visual).count()
    }

    pub fn seg_position(&self) -> Option<usize> {
        self.tags.iter().position(|t| *t == Segment::Seg)
    }

    pub fn push(&mut self, id: usize) {
        let tag = if id == Vocab::SEG && self.seg_position().is_none() {
            Segment::Seg
        } else {
            Segment::Text
        };
        self.ids.push(id);
        self.tags.push(tag);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(["the fabric is normal", "is there any anomaly ?", "it is <seg>"])
    }

    #[test]
    fn specials_have_fixed_ids() {
        let v = vocab();
        assert_eq!(v.id("<image>"), Some(Vocab::IMAGE));
        assert_eq!(v.id("<seg>"), Some(Vocab::SEG));
        assert_eq!(v.id("<eos>"), Some(Vocab::EOS));
    }

    #[test]
    fn tokenize_is_deterministic_and_splits_punctuation() {
        let v = vocab();
        let a = v.tokenize("Is there any anomaly?").unwrap();
        assert_eq!(a, v.tokenize("is there any anomaly ?").unwrap());
        assert_eq!(v.decode(&a), "is there any anomaly ?");
    }

    #[test]
    fn empty_and_unknown_words_are_errors() {
        let v = vocab();
        assert!(matches!(v.tokenize("   "), Err(Error::EmptyText)));
        match v.tokenize("the shiny fabric glows") {
            Err(Error::OutOfVocabulary(w)) => assert_eq!(w, vec!["shiny", "glows"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sequence_layout() {
        let v = vocab();
        let ins = v.tokenize("is there any anomaly ?").unwrap();
        let ans = v.tokenize("it is <seg>").unwrap();
        let seq = TokenSequence::new(4, &ins, &ans).unwrap();
        assert_eq!(seq.num_visual(), 4);
        assert_eq!(seq.answer_start, 9);
        assert_eq!(seq.seg_position(), Some(11));
        assert!(seq.tags[..4].iter().all(|t| *t == Segment::Visual));
    }

    #[test]
    fn only_first_seg_is_tagged() {
        let seq = TokenSequence::new(1, &[3], &[Vocab::SEG, Vocab::SEG]).unwrap();
        assert_eq!(seq.tags.iter().filter(|t| **t == Segment::Seg).count(), 1);
        assert_eq!(seq.seg_position(), Some(2));
    }
}
