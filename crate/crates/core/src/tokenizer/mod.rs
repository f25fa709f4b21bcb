//! Byte-pair encoding over SAFE lexemes plus atomic context tokens.
//!
//! Ids are laid out as: reserved specials, base alphabet (sorted), merge
//! products in merge order, then context tokens in registration order.
//! Merges never cross a `.` separator; each fragment is a BPE word.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::safe::{parse_safe, SafeError, SafeMolecule};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";
pub const MASK: &str = "<mask>";
pub const RESERVED: [&str; 4] = [BOS, EOS, PAD, MASK];
pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const PAD_ID: usize = 2;
pub const MASK_ID: usize = 3;
pub const SEPARATOR: &str = ".";
/// Three context slots plus `<bos>`.
pub const BOUNDARY: usize = 4;
pub const DEFAULT_MAX_LEN: usize = 512;
pub const VOCAB_VERSION: &str = "vocab-v1";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("corpus is empty")]
    CorpusEmpty,
    #[error("target size {target} must exceed the base alphabet size {alphabet}")]
    TargetTooSmall { target: usize, alphabet: usize },
    #[error("corpus entry {index} does not parse: {source}")]
    Parse { index: usize, source: SafeError },
    #[error("context token {0} already present")]
    DuplicateContextToken(String),
    #[error("context token {0:?} is not of the form [name]")]
    NotBracketed(String),
    #[error("no context token registered for {0}")]
    UnknownContextToken(String),
    #[error("sequence of {len} tokens exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("unknown token id {0}")]
    UnknownId(usize),
    #[error("symbol {0:?} is not in the vocabulary")]
    UnknownSymbol(String),
    #[error("token {id} not allowed at position {position}")]
    UnexpectedToken { id: usize, position: usize },
    #[error("invalid vocabulary file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// (family, target, mechanism) names; `None` is a masked slot.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextTriplet {
    pub fam: Option<String>,
    pub tgt: Option<String>,
    pub moa: Option<String>,
}

impl ContextTriplet {
    pub fn new(fam: Option<&str>, tgt: Option<&str>, moa: Option<&str>) -> Self {
        Self {
            fam: fam.map(str::to_string),
            tgt: tgt.map(str::to_string),
            moa: moa.map(str::to_string),
        }
    }

    /// All slots masked.
    pub fn null() -> Self {
        Self::default()
    }

    pub fn is_null(&self) -> bool {
        self.fam.is_none() && self.tgt.is_none() && self.moa.is_none()
    }

    pub fn slots(&self) -> [Option<&str>; 3] {
        [
            self.fam.as_deref(),
            self.tgt.as_deref(),
            self.moa.as_deref(),
        ]
    }

    /// Copy with slot `k` masked wherever `mask[k]` is true.
    pub fn masked(&self, mask: [bool; 3]) -> Self {
        let keep = |m: bool, s: &Option<String>| if m { None } else { s.clone() };
        Self {
            fam: keep(mask[0], &self.fam),
            tgt: keep(mask[1], &self.tgt),
            moa: keep(mask[2], &self.moa),
        }
    }

    /// True when every unmasked slot of `known` agrees with `self`.
    pub fn consistent_with(&self, known: &ContextTriplet) -> bool {
        self.slots()
            .iter()
            .zip(known.slots())
            .all(|(mine, k)| k.is_none() || *mine == k)
    }
}

impl fmt::Display for ContextTriplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self
            .slots()
            .map(|s| s.map_or(MASK.to_string(), context_token));
        write!(f, "{a}{b}{c}")
    }
}

/// `[name]`.
pub fn context_token(name: &str) -> String {
    format!("[{name}]")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Index of the first molecular token (just after `<bos>`).
    pub boundary: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn molecular(&self) -> &[usize] {
        &self.ids[self.boundary.min(self.ids.len())..]
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: String,
    alphabet: Vec<String>,
    merges: Vec<(String, String)>,
    reserved: BTreeMap<String, usize>,
    context_tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, usize>,
    alphabet: Vec<String>,
    merges: Vec<(String, String)>,
    merge_rank: HashMap<(String, String), usize>,
    context_start: usize,
}

type Word = Vec<String>;

fn pair_counts(words: &[(Word, usize)]) -> BTreeMap<(&str, &str), usize> {
    let mut counts = BTreeMap::new();
    for (w, n) in words {
        for p in w.windows(2) {
            *counts.entry((p[0].as_str(), p[1].as_str())).or_insert(0) += n;
        }
    }
    counts
}

fn merge_word(word: &mut Word, a: &str, b: &str) {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == a && word[i + 1] == b {
            out.push(format!("{a}{b}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut word[i]));
            i += 1;
        }
    }
    *word = out;
}

fn fragment_words(mol: &SafeMolecule) -> impl Iterator<Item = Word> + '_ {
    mol.fragments()
        .iter()
        .map(|f| f.tokens().iter().map(ToString::to_string).collect())
}

/// Greedy BPE: repeatedly merge the most frequent adjacent pair (ties go to
/// the lexicographically smallest pair) until the structural vocabulary,
/// alphabet plus distinct merge products, reaches `target_size` or no pair
/// remains.
pub fn train_bpe<I, S>(corpus: I, target_size: usize) -> Result<Vocabulary, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_freq: HashMap<Word, usize> = HashMap::new();
    let mut alphabet: BTreeSet<String> = BTreeSet::from([SEPARATOR.to_string()]);
    let mut seen = 0usize;
    for (index, text) in corpus.into_iter().enumerate() {
        let mol =
            parse_safe(text.as_ref()).map_err(|source| TokenizerError::Parse { index, source })?;
        for w in fragment_words(&mol) {
            alphabet.extend(w.iter().cloned());
            *word_freq.entry(w).or_insert(0) += 1;
        }
        seen += 1;
    }
    if seen == 0 {
        return Err(TokenizerError::CorpusEmpty);
    }
    if target_size <= alphabet.len() {
        return Err(TokenizerError::TargetTooSmall {
            target: target_size,
            alphabet: alphabet.len(),
        });
    }
    let mut words: Vec<(Word, usize)> = word_freq.into_iter().collect();
    words.sort();
    let mut known: BTreeSet<String> = alphabet.clone();
    let mut merges = Vec::new();
    while known.len() < target_size {
        let best =
            pair_counts(&words)
                .into_iter()
                .fold(None::<((&str, &str), usize)>, |best, (p, n)| match best {
                    Some((_, bn)) if bn >= n => best,
                    _ => Some((p, n)),
                });
        let Some(((a, b), _)) = best else { break };
        let (a, b) = (a.to_string(), b.to_string());
        for (w, _) in &mut words {
            merge_word(w, &a, &b);
        }
        known.insert(format!("{a}{b}"));
        merges.push((a, b));
    }
    Ok(Vocabulary::assemble(
        alphabet.into_iter().collect(),
        merges,
        Vec::new(),
    ))
}

impl Vocabulary {
    fn assemble(
        alphabet: Vec<String>,
        merges: Vec<(String, String)>,
        contexts: Vec<String>,
    ) -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            token_to_id: HashMap::new(),
            alphabet: alphabet.clone(),
            merge_rank: merges
                .iter()
                .enumerate()
                .map(|(r, m)| (m.clone(), r))
                .collect(),
            merges,
            context_start: 0,
        };
        let products: Vec<String> = v.merges.iter().map(|(a, b)| format!("{a}{b}")).collect();
        for t in RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(alphabet)
            .chain(products)
        {
            v.push_token(t);
        }
        v.context_start = v.tokens.len();
        for c in contexts {
            v.push_token(c);
        }
        v
    }

    fn push_token(&mut self, t: String) {
        if !self.token_to_id.contains_key(&t) {
            self.token_to_id.insert(t.clone(), self.tokens.len());
            self.tokens.push(t);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Alphabet plus merge products.
    pub fn structural_len(&self) -> usize {
        self.context_start - RESERVED.len()
    }

    pub fn alphabet(&self) -> &[String] {
        &self.alphabet
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn separator_id(&self) -> usize {
        self.token_to_id[SEPARATOR]
    }

    pub fn is_context(&self, id: usize) -> bool {
        id >= self.context_start && id < self.tokens.len()
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        id < RESERVED.len()
    }

    /// Ids that may appear inside a molecule body.
    pub fn is_structural(&self, id: usize) -> bool {
        id >= RESERVED.len() && id < self.context_start
    }

    pub fn context_ids(&self) -> std::ops::Range<usize> {
        self.context_start..self.tokens.len()
    }

    /// Appends bracketed context tokens; existing ids are untouched.
    pub fn extend_with_context<S: AsRef<str>>(&self, names: &[S]) -> Result<Self, TokenizerError> {
        let mut out = self.clone();
        for n in names {
            let n = n.as_ref();
            if n.len() < 3 || !n.starts_with('[') || !n.ends_with(']') {
                return Err(TokenizerError::NotBracketed(n.to_string()));
            }
            if out.token_to_id.contains_key(n) {
                return Err(TokenizerError::DuplicateContextToken(n.to_string()));
            }
            out.push_token(n.to_string());
        }
        Ok(out)
    }

    /// Registers every unmasked slot name of `contexts` not yet present.
    pub fn with_contexts<'a>(
        &self,
        contexts: impl IntoIterator<Item = &'a ContextTriplet>,
    ) -> Result<Self, TokenizerError> {
        let mut names: BTreeSet<String> = BTreeSet::new();
        for c in contexts {
            for s in c.slots().into_iter().flatten() {
                let t = context_token(s);
                if !self.token_to_id.contains_key(&t) {
                    names.insert(t);
                }
            }
        }
        self.extend_with_context(&names.into_iter().collect::<Vec<_>>())
    }

    fn bpe_word(&self, word: &[String]) -> Result<Vec<usize>, TokenizerError> {
        let mut syms: Vec<String> = word.to_vec();
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| {
                    self.merge_rank
                        .get(&(p[0].clone(), p[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = self.merges[rank].clone();
            merge_word(&mut syms, &a, &b);
        }
        syms.into_iter()
            .map(|s| self.id(&s).ok_or(TokenizerError::UnknownSymbol(s)))
            .collect()
    }

    /// Molecular token ids, without specials.
    pub fn encode_molecule(&self, mol: &SafeMolecule) -> Result<Vec<usize>, TokenizerError> {
        let sep = self.separator_id();
        let mut ids = Vec::new();
        for (k, w) in fragment_words(mol).enumerate() {
            if k > 0 {
                ids.push(sep);
            }
            ids.extend(self.bpe_word(&w)?);
        }
        Ok(ids)
    }

    /// `[fam][tgt][moa]<bos>`; masked slots become `<mask>`.
    pub fn encode_prefix(&self, ctx: &ContextTriplet) -> Result<TokenSequence, TokenizerError> {
        let mut ids = Vec::with_capacity(BOUNDARY);
        for slot in ctx.slots() {
            ids.push(match slot {
                None => MASK_ID,
                Some(name) => {
                    let t = context_token(name);
                    match self.id(&t) {
                        Some(id) if self.is_context(id) => id,
                        _ => return Err(TokenizerError::UnknownContextToken(t)),
                    }
                }
            });
        }
        ids.push(BOS_ID);
        Ok(TokenSequence {
            ids,
            boundary: BOUNDARY,
        })
    }

    pub fn encode(
        &self,
        ctx: &ContextTriplet,
        mol: &SafeMolecule,
        max_len: usize,
    ) -> Result<TokenSequence, TokenizerError> {
        let mut seq = self.encode_prefix(ctx)?;
        seq.ids.extend(self.encode_molecule(mol)?);
        seq.ids.push(EOS_ID);
        if seq.ids.len() > max_len {
            return Err(TokenizerError::SequenceTooLong {
                len: seq.ids.len(),
                max_len,
            });
        }
        Ok(seq)
    }

    /// Concatenated text of structural ids.
    pub fn decode_molecular(&self, ids: &[usize]) -> Result<String, TokenizerError> {
        let mut s = String::new();
        for (position, &id) in ids.iter().enumerate() {
            if !self.is_structural(id) {
                return Err(if id >= self.tokens.len() {
                    TokenizerError::UnknownId(id)
                } else {
                    TokenizerError::UnexpectedToken { id, position }
                });
            }
            s.push_str(&self.tokens[id]);
        }
        Ok(s)
    }

    /// Inverse of [`encode`](Self::encode): context slots and SAFE text. The
    /// molecular part stops at the first `<eos>`.
    pub fn decode(&self, seq: &TokenSequence) -> Result<(ContextTriplet, String), TokenizerError> {
        if let Some(&bad) = seq.ids.iter().find(|&&id| id >= self.tokens.len()) {
            return Err(TokenizerError::UnknownId(bad));
        }
        if seq.boundary != BOUNDARY || seq.ids.len() < BOUNDARY || seq.ids[BOUNDARY - 1] != BOS_ID {
            return Err(TokenizerError::UnexpectedToken {
                id: seq.ids.get(BOUNDARY - 1).copied().unwrap_or(PAD_ID),
                position: BOUNDARY - 1,
            });
        }
        let mut slots: [Option<String>; 3] = Default::default();
        for (k, &id) in seq.ids[..3].iter().enumerate() {
            if id == MASK_ID {
                continue;
            }
            if !self.is_context(id) {
                return Err(TokenizerError::UnexpectedToken { id, position: k });
            }
            let t = &self.tokens[id];
            slots[k] = Some(t[1..t.len() - 1].to_string());
        }
        let body = &seq.ids[BOUNDARY..];
        let end = body
            .iter()
            .position(|&id| id == EOS_ID)
            .unwrap_or(body.len());
        let text = self.decode_molecular(&body[..end]).map_err(|e| match e {
            TokenizerError::UnexpectedToken { id, position } => TokenizerError::UnexpectedToken {
                id,
                position: position + BOUNDARY,
            },
            e => e,
        })?;
        let [fam, tgt, moa] = slots;
        Ok((ContextTriplet { fam, tgt, moa }, text))
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: VOCAB_VERSION.to_string(),
            alphabet: self.alphabet.clone(),
            merges: self.merges.clone(),
            reserved: RESERVED
                .iter()
                .enumerate()
                .map(|(i, s)| (s.to_string(), i))
                .collect(),
            context_tokens: self.tokens[self.context_start..].to_vec(),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TokenizerError> {
        let file: VocabFile =
            serde_json::from_str(text).map_err(|e| TokenizerError::Format(e.to_string()))?;
        if file.version != VOCAB_VERSION {
            return Err(TokenizerError::Format(format!(
                "unsupported version {}",
                file.version
            )));
        }
        for (i, s) in RESERVED.iter().enumerate() {
            if file.reserved.get(*s) != Some(&i) {
                return Err(TokenizerError::Format(format!(
                    "reserved token {s} must have id {i}"
                )));
            }
        }
        if file.reserved.len() != RESERVED.len() {
            return Err(TokenizerError::Format("unexpected reserved tokens".into()));
        }
        let base = Self::assemble(file.alphabet, file.merges, Vec::new());
        base.extend_with_context(&file.context_tokens)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_merge_on_carbon_chain() {
        let v = train_bpe(["CCCC"], 3).unwrap();
        assert_eq!(v.alphabet(), &[".", "C"]);
        assert_eq!(v.merges(), &[("C".to_string(), "C".to_string())]);
        assert_eq!(v.len(), 3 + RESERVED.len());
        let m = parse_safe("CCCC").unwrap();
        assert_eq!(v.encode_molecule(&m).unwrap(), vec![v.id("CC").unwrap(); 2]);
    }

    #[test]
    fn target_too_small_and_empty() {
        assert!(matches!(
            train_bpe(["CCO"], 3),
            Err(TokenizerError::TargetTooSmall {
                target: 3,
                alphabet: 3
            })
        ));
        assert!(matches!(
            train_bpe(Vec::<String>::new(), 10),
            Err(TokenizerError::CorpusEmpty)
        ));
    }

    #[test]
    fn ties_take_smallest_pair() {
        // (N,O) and (O,N) each occur once
        let v = train_bpe(["NO.ON"], 4).unwrap();
        assert_eq!(v.merges()[0], ("N".to_string(), "O".to_string()));
    }

    #[test]
    fn merges_stay_inside_fragments() {
        let v = train_bpe(["C.C.C.C"], 10).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.structural_len(), 2);
    }

    #[test]
    fn context_layout_and_round_trip() {
        let v = train_bpe(["c1ccccc12.N2", "CCO"], 12)
            .unwrap()
            .extend_with_context(&["[Kinase]", "[CHEMBL203]", "[inhibitor]"])
            .unwrap();
        let mol = parse_safe("c1ccccc12.N2").unwrap();
        let null = v
            .encode(&ContextTriplet::null(), &mol, DEFAULT_MAX_LEN)
            .unwrap();
        assert_eq!(&null.ids[..4], &[MASK_ID, MASK_ID, MASK_ID, BOS_ID]);
        assert_eq!(*null.ids.last().unwrap(), EOS_ID);
        let ctx = ContextTriplet::new(Some("Kinase"), Some("CHEMBL203"), Some("inhibitor"));
        let seq = v.encode(&ctx, &mol, DEFAULT_MAX_LEN).unwrap();
        assert!(seq.ids[..3].iter().all(|&id| v.is_context(id)));
        let (c, text) = v.decode(&seq).unwrap();
        assert_eq!(c, ctx);
        assert_eq!(text, "c1ccccc12.N2");
        assert!(matches!(
            v.encode(&ContextTriplet::new(Some("GPCR"), None, None), &mol, 512),
            Err(TokenizerError::UnknownContextToken(_))
        ));
        assert!(matches!(
            v.encode(&ctx, &mol, 5),
            Err(TokenizerError::SequenceTooLong { max_len: 5, .. })
        ));
    }

    #[test]
    fn context_extension_rules() {
        let v = train_bpe(["CCO"], 5).unwrap();
        assert_eq!(v.extend_with_context::<&str>(&[]).unwrap(), v);
        let e = v.extend_with_context(&["[A]"]).unwrap();
        assert_eq!(e.len(), v.len() + 1);
        assert!(matches!(
            e.extend_with_context(&["[A]"]),
            Err(TokenizerError::DuplicateContextToken(_))
        ));
        assert!(matches!(
            e.extend_with_context(&["B"]),
            Err(TokenizerError::NotBracketed(_))
        ));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let v = train_bpe(["c1ccccc12.N2", "C1CCCCC12.O2"], 20)
            .unwrap()
            .extend_with_context(&["[A]", "[B]"])
            .unwrap();
        let json = v.to_json();
        let w = Vocabulary::from_json(&json).unwrap();
        assert_eq!(w, v);
        assert_eq!(w.to_json(), json);
        assert_eq!(w.hash(), v.hash());
    }

    #[test]
    fn decode_rejects_bad_ids() {
        let v = train_bpe(["CCO"], 5).unwrap();
        let seq = TokenSequence {
            ids: vec![MASK_ID, MASK_ID, MASK_ID, BOS_ID, 999],
            boundary: BOUNDARY,
        };
        assert!(matches!(
            v.decode(&seq),
            Err(TokenizerError::UnknownId(999))
        ));
        let seq = TokenSequence {
            ids: vec![MASK_ID, MASK_ID, MASK_ID, BOS_ID, MASK_ID],
            boundary: BOUNDARY,
        };
        assert!(matches!(
            v.decode(&seq),
            Err(TokenizerError::UnexpectedToken { position: 4, .. })
        ));
    }
}
