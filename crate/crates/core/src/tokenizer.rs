//! Synthetic token types: character-level and greedy-merge tokenizers that
//! differ in vocabulary size, segmentation and id ordering, plus paired
//! encoding of one question/answer pair for two tokenizers.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_SPECIALS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitScheme {
    Character,
    GreedyMerge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndexOrdering {
    FrequencyDescending,
    Lexicographic,
}

/// Where the four special ids sit in the id space.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpecialPlacement {
    #[default]
    Front,
    Back,
}

macro_rules! kebab_names {
    ($ty:ident { $($variant:ident => $name:literal),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                match self { $($ty::$variant => f.write_str($name)),* }
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)*
                    other => Err(Error::format("tokvocab", format!("unknown {} `{other}`", stringify!($ty)))),
                }
            }
        }
    };
}

kebab_names!(SplitScheme { Character => "character", GreedyMerge => "greedy-merge" });
kebab_names!(IndexOrdering { FrequencyDescending => "frequency-descending", Lexicographic => "lexicographic" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub bos: usize,
    pub eos: usize,
    pub pad: usize,
    pub prefix: usize,
}

impl SpecialIds {
    fn at(start: usize) -> Self {
        Self {
            bos: start,
            eos: start + 1,
            pad: start + 2,
            prefix: start + 3,
        }
    }

    pub fn contains(&self, id: usize) -> bool {
        id == self.bos || id == self.eos || id == self.pad || id == self.prefix
    }

    fn name(&self, id: usize) -> Option<&'static str> {
        match id {
            _ if id == self.bos => Some("<bos>"),
            _ if id == self.eos => Some("<eos>"),
            _ if id == self.pad => Some("<pad>"),
            _ if id == self.prefix => Some("<prefix>"),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenTypeDescriptor {
    pub vocab_size: usize,
    pub split_scheme: SplitScheme,
    pub index_ordering: IndexOrdering,
    pub special_ids: SpecialIds,
}

/// What to build: scheme, ordering, target size (greedy-merge only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerRequest {
    pub scheme: SplitScheme,
    pub ordering: IndexOrdering,
    #[serde(default)]
    pub vocab_size: Option<usize>,
    #[serde(default)]
    pub specials: SpecialPlacement,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    descriptor: TokenTypeDescriptor,
    /// Indexed by id; specials hold an empty string.
    tokens: Vec<String>,
    lookup: HashMap<String, usize>,
    merges: Vec<(String, String)>,
    max_token_chars: usize,
}

fn alphabet(corpus: &[String]) -> Vec<char> {
    let mut chars: Vec<char> = corpus.iter().flat_map(|s| s.chars()).collect();
    chars.sort_unstable();
    chars.dedup();
    chars
}

/// Runs greedy pair merging over the corpus until `target` non-special
/// tokens exist. Ties between equally frequent pairs go to the
/// lexicographically smallest `(left, right)`.
fn learn_merges(corpus: &[String], target: usize) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut seqs: Vec<Vec<String>> = corpus
        .iter()
        .map(|s| s.chars().map(String::from).collect())
        .collect();
    let mut vocab: Vec<String> = alphabet(corpus).into_iter().map(String::from).collect();
    let mut merges = Vec::new();

    while vocab.len() < target {
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for seq in &seqs {
            for w in seq.windows(2) {
                *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += 1;
            }
        }
        // BTreeMap iterates in key order, so the first maximum is the smallest pair.
        let Some(((l, r), _)) = counts
            .iter()
            .fold(None, |best: Option<(&(&str, &str), usize)>, (k, &c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((k, c)),
            })
            .map(|(k, c)| ((k.0.to_string(), k.1.to_string()), c))
        else {
            return Err(Error::contract(format!(
                "corpus supports at most {} merged tokens, requested {target}",
                vocab.len()
            )));
        };

        let merged = format!("{l}{r}");
        for seq in &mut seqs {
            let mut out = Vec::with_capacity(seq.len());
            let mut i = 0;
            while i < seq.len() {
                if i + 1 < seq.len() && seq[i] == l && seq[i + 1] == r {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut seq[i]));
                    i += 1;
                }
            }
            *seq = out;
        }
        if !vocab.contains(&merged) {
            vocab.push(merged);
        }
        merges.push((l, r));
    }
    Ok((vocab, merges))
}

impl Tokenizer {
    pub fn build(corpus: &[String], request: &TokenizerRequest) -> Result<Self> {
        if corpus.is_empty() || corpus.iter().all(String::is_empty) {
            return Err(Error::contract("tokenizer corpus is empty"));
        }
        let alpha = alphabet(corpus);
        let (strings, merges) = match request.scheme {
            SplitScheme::Character => {
                if let Some(v) = request.vocab_size {
                    if v != alpha.len() + NUM_SPECIALS {
                        return Err(Error::contract(format!(
                            "character tokenizer over {} symbols has {} ids, requested {v}",
                            alpha.len(),
                            alpha.len() + NUM_SPECIALS
                        )));
                    }
                }
                (alpha.iter().map(|c| c.to_string()).collect(), Vec::new())
            }
            SplitScheme::GreedyMerge => {
                let requested = request
                    .vocab_size
                    .ok_or_else(|| Error::contract("greedy-merge tokenizer needs a vocab_size"))?;
                let minimum = alpha.len() + NUM_SPECIALS;
                if requested < minimum {
                    return Err(Error::contract(format!(
                        "requested vocab_size {requested} is below alphabet + specials = {minimum}"
                    )));
                }
                learn_merges(corpus, requested - NUM_SPECIALS)?
            }
        };

        // Provisional tokenizer (arbitrary order) to count token frequencies.
        let provisional = Self::assemble(strings.clone(), merges.clone(), request, SpecialPlacement::Back, request.scheme);
        let mut freq: HashMap<String, usize> = strings.iter().map(|s| (s.clone(), 0)).collect();
        for text in corpus {
            for id in provisional.encode(text)? {
                *freq.get_mut(&provisional.tokens[id]).expect("known token") += 1;
            }
        }

        let mut ordered = strings;
        match request.ordering {
            IndexOrdering::Lexicographic => ordered.sort(),
            IndexOrdering::FrequencyDescending => {
                ordered.sort_by(|a, b| freq[b].cmp(&freq[a]).then_with(|| a.cmp(b)))
            }
        }
        Ok(Self::assemble(ordered, merges, request, request.specials, request.scheme))
    }

    fn assemble(
        ordered: Vec<String>,
        merges: Vec<(String, String)>,
        request: &TokenizerRequest,
        placement: SpecialPlacement,
        scheme: SplitScheme,
    ) -> Self {
        let n = ordered.len();
        let (specials, offset) = match placement {
            SpecialPlacement::Front => (SpecialIds::at(0), NUM_SPECIALS),
            SpecialPlacement::Back => (SpecialIds::at(n), 0),
        };
        let mut tokens = vec![String::new(); n + NUM_SPECIALS];
        let mut lookup = HashMap::with_capacity(n);
        for (i, s) in ordered.into_iter().enumerate() {
            lookup.insert(s.clone(), i + offset);
            tokens[i + offset] = s;
        }
        let max_token_chars = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(1);
        Self {
            descriptor: TokenTypeDescriptor {
                vocab_size: n + NUM_SPECIALS,
                split_scheme: scheme,
                index_ordering: request.ordering,
                special_ids: specials,
            },
            tokens,
            lookup,
            merges,
            max_token_chars,
        }
    }

    pub fn descriptor(&self) -> &TokenTypeDescriptor {
        &self.descriptor
    }

    pub fn vocab_size(&self) -> usize {
        self.descriptor.vocab_size
    }

    pub fn specials(&self) -> SpecialIds {
        self.descriptor.special_ids
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Token string for `id`; specials map to `None`.
    pub fn token(&self, id: usize) -> Option<&str> {
        if self.descriptor.special_ids.contains(id) {
            None
        } else {
            self.tokens.get(id).map(String::as_str)
        }
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.lookup.get(token).copied()
    }

    /// All non-special `(id, token)` pairs.
    pub fn entries(&self) -> impl Iterator<Item = (usize, &str)> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(id, _)| !self.descriptor.special_ids.contains(*id))
            .map(|(id, t)| (id, t.as_str()))
    }

    /// Greedy left-to-right longest-match segmentation.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let chars: Vec<char> = text.chars().collect();
        let mut ids = Vec::new();
        let mut i = 0;
        let mut buf = String::new();
        while i < chars.len() {
            let longest = self.max_token_chars.min(chars.len() - i);
            let mut matched = None;
            for len in (1..=longest).rev() {
                buf.clear();
                buf.extend(&chars[i..i + len]);
                if let Some(&id) = self.lookup.get(&buf) {
                    matched = Some((id, len));
                    break;
                }
            }
            let (id, len) = matched.ok_or(Error::UnknownChar(chars[i]))?;
            ids.push(id);
            i += len;
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            if id >= self.tokens.len() {
                return Err(Error::UnknownId(id));
            }
            if !self.descriptor.special_ids.contains(id) {
                out.push_str(&self.tokens[id]);
            }
        }
        Ok(out)
    }

    /// `tokvocab-v1` text form.
    pub fn to_text(&self) -> String {
        let d = &self.descriptor;
        let mut out = format!("tokvocab-v1 {} {}\n", d.split_scheme, d.index_ordering);
        for (id, tok) in self.tokens.iter().enumerate() {
            let rendered = match d.special_ids.name(id) {
                Some(name) => name.to_string(),
                None => escape(tok),
            };
            out.push_str(&format!("{id}\t{rendered}\n"));
        }
        out.push_str("#merges\n");
        for (l, r) in &self.merges {
            out.push_str(&format!("{}\t{}\n", escape(l), escape(r)));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::format("tokvocab", msg);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let mut parts = header.split(' ');
        if parts.next() != Some("tokvocab-v1") {
            return Err(bad(format!("bad header `{header}`")));
        }
        let scheme: SplitScheme = parts.next().ok_or_else(|| bad("missing scheme".into()))?.parse()?;
        let ordering: IndexOrdering = parts.next().ok_or_else(|| bad("missing ordering".into()))?.parse()?;

        let mut tokens = Vec::new();
        let mut special_pos: HashMap<&str, usize> = HashMap::new();
        let mut merges = Vec::new();
        let mut in_merges = false;
        for line in lines {
            if !in_merges && line == "#merges" {
                in_merges = true;
                continue;
            }
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("line without tab: `{line}`")))?;
            if in_merges {
                merges.push((unescape(a)?, unescape(b)?));
                continue;
            }
            let id: usize = a.parse().map_err(|_| bad(format!("bad id `{a}`")))?;
            if id != tokens.len() {
                return Err(bad(format!("ids must be consecutive, found {id}")));
            }
            match b {
                "<bos>" | "<eos>" | "<pad>" | "<prefix>" => {
                    if special_pos.insert(b, id).is_some() {
                        return Err(bad(format!("duplicate special {b}")));
                    }
                    tokens.push(String::new());
                }
                _ => tokens.push(unescape(b)?),
            }
        }
        let get = |n: &str| special_pos.get(n).copied().ok_or_else(|| bad(format!("missing special {n}")));
        let specials = SpecialIds {
            bos: get("<bos>")?,
            eos: get("<eos>")?,
            pad: get("<pad>")?,
            prefix: get("<prefix>")?,
        };
        let mut lookup = HashMap::new();
        for (id, t) in tokens.iter().enumerate() {
            if specials.contains(id) {
                continue;
            }
            if lookup.insert(t.clone(), id).is_some() {
                return Err(bad(format!("duplicate token `{}`", escape(t))));
            }
        }
        let max_token_chars = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(1);
        Ok(Self {
            descriptor: TokenTypeDescriptor {
                vocab_size: tokens.len(),
                split_scheme: scheme,
                index_ordering: ordering,
                special_ids: specials,
            },
            tokens,
            lookup,
            merges,
            max_token_chars,
        })
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '<' => out.push_str("\\<"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('<') => out.push('<'),
            other => {
                return Err(Error::format("tokvocab", format!("bad escape `\\{other:?}`")));
            }
        }
    }
    Ok(out)
}

/// One question/answer pair encoded for both the teacher (`_l`) and the
/// student (`_s`).
///
/// Framing per side: `q = [bos, prefix × P, question…]`,
/// `a = [bos, answer…]`, `gt = [answer…, eos]`. The answer span opens with
/// a `bos` marker so the hidden state at every answer position predicts the
/// matching `gt` entry, including the first answer token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedExample {
    pub question: String,
    pub answer: String,
    pub q_l: Vec<usize>,
    pub a_l: Vec<usize>,
    pub q_s: Vec<usize>,
    pub a_s: Vec<usize>,
    pub gt_l: Vec<usize>,
    pub gt_s: Vec<usize>,
    pub prefix_len_l: usize,
    pub prefix_len_s: usize,
    /// Task payload rendered into the synthetic prefix (grid contents).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Vec<usize>>,
}

/// Question ids for one tokenizer: `[bos, prefix × prefix_len, question…]`.
pub fn frame_question(tok: &Tokenizer, question: &str, prefix_len: usize) -> Result<Vec<usize>> {
    let sp = tok.specials();
    let mut q = Vec::with_capacity(1 + prefix_len + question.len());
    q.push(sp.bos);
    q.extend(std::iter::repeat_n(sp.prefix, prefix_len));
    q.extend(tok.encode(question)?);
    Ok(q)
}

fn frame_answer(tok: &Tokenizer, answer: &str) -> Result<(Vec<usize>, Vec<usize>)> {
    let sp = tok.specials();
    let ids = tok.encode(answer)?;
    let mut a = Vec::with_capacity(ids.len() + 1);
    a.push(sp.bos);
    a.extend_from_slice(&ids);
    let mut gt = ids;
    gt.push(sp.eos);
    Ok((a, gt))
}

pub fn paired_encode(
    tok_l: &Tokenizer,
    tok_s: &Tokenizer,
    question: &str,
    answer: &str,
    prefix_lens: (usize, usize),
) -> Result<PairedExample> {
    let q_l = frame_question(tok_l, question, prefix_lens.0)?;
    let q_s = frame_question(tok_s, question, prefix_lens.1)?;
    let (a_l, gt_l) = frame_answer(tok_l, answer)?;
    let (a_s, gt_s) = frame_answer(tok_s, answer)?;
    Ok(PairedExample {
        question: question.to_string(),
        answer: answer.to_string(),
        q_l,
        a_l,
        q_s,
        a_s,
        gt_l,
        gt_s,
        prefix_len_l: prefix_lens.0,
        prefix_len_s: prefix_lens.1,
        payload: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn req(scheme: SplitScheme, ordering: IndexOrdering, vocab_size: Option<usize>) -> TokenizerRequest {
        TokenizerRequest {
            scheme,
            ordering,
            vocab_size,
            specials: SpecialPlacement::Front,
        }
    }

    #[test]
    fn character_scheme_enumerates_alphabet() {
        let tok = Tokenizer::build(
            &corpus(&["abab"]),
            &req(SplitScheme::Character, IndexOrdering::Lexicographic, None),
        )
        .unwrap();
        assert_eq!(tok.vocab_size(), 6);
        let mut toks: Vec<&str> = tok.entries().map(|(_, t)| t).collect();
        toks.sort();
        assert_eq!(toks, vec!["a", "b"]);
        assert_eq!(tok.encode("ab").unwrap(), vec![tok.id_of("a").unwrap(), tok.id_of("b").unwrap()]);
    }

    #[test]
    fn first_merge_takes_the_most_frequent_pair() {
        // Pair counts in "abab": (a,b) twice, (b,a) once.
        let text = "abab";
        let chars: Vec<char> = text.chars().collect();
        let mut counts: HashMap<(char, char), usize> = HashMap::new();
        for w in chars.windows(2) {
            *counts.entry((w[0], w[1])).or_default() += 1;
        }
        let best = counts.iter().max_by_key(|(_, c)| **c).unwrap().0;
        assert_eq!(*best, ('a', 'b'));

        let tok = Tokenizer::build(
            &corpus(&[text]),
            &req(SplitScheme::GreedyMerge, IndexOrdering::Lexicographic, Some(7)),
        )
        .unwrap();
        assert_eq!(tok.merges(), &[("a".to_string(), "b".to_string())]);
        let ab = tok.id_of("ab").unwrap();
        assert_eq!(tok.encode("abab").unwrap(), vec![ab, ab]);
    }

    #[test]
    fn orderings_permute_the_same_token_set() {
        let c = corpus(&["abab", "bbbc", "cab"]);
        let lex = Tokenizer::build(&c, &req(SplitScheme::GreedyMerge, IndexOrdering::Lexicographic, Some(9))).unwrap();
        let freq = Tokenizer::build(
            &c,
            &req(SplitScheme::GreedyMerge, IndexOrdering::FrequencyDescending, Some(9)),
        )
        .unwrap();
        let mut a: Vec<&str> = lex.entries().map(|(_, t)| t).collect();
        let mut b: Vec<&str> = freq.entries().map(|(_, t)| t).collect();
        assert_ne!(a, b, "ids should be assigned in a different order");
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn too_small_vocab_is_rejected() {
        let err = Tokenizer::build(
            &corpus(&["abc"]),
            &req(SplitScheme::GreedyMerge, IndexOrdering::Lexicographic, Some(6)),
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn encoding_errors_name_the_character() {
        let tok = Tokenizer::build(&corpus(&["ab"]), &req(SplitScheme::Character, IndexOrdering::Lexicographic, None)).unwrap();
        assert!(matches!(tok.encode("az"), Err(Error::UnknownChar('z'))));
        assert_eq!(tok.encode("").unwrap(), Vec::<usize>::new());
        assert!(matches!(tok.decode(&[99]), Err(Error::UnknownId(99))));
    }

    #[test]
    fn specials_decode_to_nothing() {
        let tok = Tokenizer::build(&corpus(&["ab"]), &req(SplitScheme::Character, IndexOrdering::Lexicographic, None)).unwrap();
        let sp = tok.specials();
        assert_eq!(tok.decode(&[sp.bos, sp.eos]).unwrap(), "");
    }

    #[test]
    fn back_placement_moves_specials_to_the_end() {
        let mut r = req(SplitScheme::Character, IndexOrdering::Lexicographic, None);
        r.specials = SpecialPlacement::Back;
        let tok = Tokenizer::build(&corpus(&["ab"]), &r).unwrap();
        assert_eq!(tok.specials().bos, 2);
        assert_eq!(tok.id_of("a"), Some(0));
    }

    #[test]
    fn text_format_round_trips() {
        let c = corpus(&["a<b\\a<b", "b\ta"]);
        let tok = Tokenizer::build(&c, &req(SplitScheme::GreedyMerge, IndexOrdering::FrequencyDescending, Some(10))).unwrap();
        let text = tok.to_text();
        assert!(text.starts_with("tokvocab-v1 greedy-merge frequency-descending\n"));
        assert!(text.contains("\n0\t<bos>\n"));
        assert_eq!(Tokenizer::from_text(&text).unwrap(), tok);
    }

    #[test]
    fn malformed_text_is_rejected() {
        assert!(Tokenizer::from_text("tokvocab-v2 character lexicographic\n").is_err());
        assert!(Tokenizer::from_text("tokvocab-v1 character lexicographic\n0\ta\n").is_err());
    }

    #[test]
    fn paired_encode_frames_both_sides() {
        let c = corpus(&["q:ab", "ba", "baba"]);
        let teacher = Tokenizer::build(&c, &req(SplitScheme::Character, IndexOrdering::FrequencyDescending, None)).unwrap();
        let student = Tokenizer::build(&c, &req(SplitScheme::GreedyMerge, IndexOrdering::Lexicographic, Some(10))).unwrap();
        assert!(student.id_of("ba").is_some());
        let ex = paired_encode(&teacher, &student, "q:ab", "ba", (4, 2)).unwrap();
        assert_ne!(ex.a_l.len(), ex.a_s.len());
        assert_eq!(ex.gt_l.len(), ex.a_l.len());
        assert_eq!(ex.gt_s.len(), ex.a_s.len());
        let sp_l = teacher.specials();
        let sp_s = student.specials();
        assert_eq!(ex.q_l.iter().filter(|&&i| i == sp_l.prefix).count(), 4);
        assert_eq!(ex.q_s.iter().filter(|&&i| i == sp_s.prefix).count(), 2);

        let join = |q: &[usize], a: &[usize]| [q, a].concat();
        assert_eq!(teacher.decode(&join(&ex.q_l, &ex.a_l)).unwrap(), "q:abba");
        assert_eq!(student.decode(&join(&ex.q_s, &ex.a_s)).unwrap(), "q:abba");
    }

    #[test]
    fn identical_tokenizers_give_identical_sides() {
        let c = corpus(&["q:ab", "ba"]);
        let tok = Tokenizer::build(&c, &req(SplitScheme::Character, IndexOrdering::Lexicographic, None)).unwrap();
        let ex = paired_encode(&tok, &tok, "q:ab", "ba", (2, 2)).unwrap();
        assert_eq!(ex.q_l, ex.q_s);
        assert_eq!(ex.a_l, ex.a_s);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(s in "[abcd:]{0,24}") {
            let c = corpus(&["abcd:", "abab:cd", "dcba", "aabbccdd"]);
            let merged = Tokenizer::build(&c, &req(SplitScheme::GreedyMerge, IndexOrdering::FrequencyDescending, Some(14))).unwrap();
            let chars = Tokenizer::build(&c, &req(SplitScheme::Character, IndexOrdering::Lexicographic, None)).unwrap();
            for tok in [&merged, &chars] {
                prop_assert_eq!(tok.decode(&tok.encode(&s).unwrap()).unwrap(), s.clone());
            }
        }
    }
}
