//! SMILES tokenization with single-index embedding of two-character atoms.
//!
//! The scan is greedy and left to right. Outside brackets only the
//! organic-subset pairs `Cl` and `Br` merge into one token; inside a bracket
//! atom any two-letter element symbol (plus the aromatic `se`, `te`, `as`)
//! does. `H` is tagged as a bond/signal token, like `@`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const UNK_TEXT: &str = "<unk>";
pub const DEFAULT_MAX_SEQ_LEN: usize = 200;

/// Pairs merged outside bracket atoms.
pub const ORGANIC_TWO_CHAR: [&str; 2] = ["Cl", "Br"];

/// Two-letter element symbols recognized inside bracket atoms.
pub const BRACKET_TWO_CHAR: [&str; 107] = [
    "He", "Li", "Be", "Ne", "Na", "Mg", "Al", "Si", "Cl", "Ar", "Ca", "Sc", "Ti", "Cr", "Mn", "Fe", "Co", "Ni", "Cu",
    "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm",
    "Yb", "Lu", "Hf", "Ta", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac",
    "Th", "Pa", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt",
    "Ds", "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og", "se", "te", "as",
];

pub fn is_two_char_atom(text: &str) -> bool {
    BRACKET_TWO_CHAR.contains(&text)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenizeError {
    #[error("empty SMILES string")]
    EmptyInput,
    #[error("SMILES {smiles:?} has {len} tokens, more than the maximum of {max}")]
    SequenceTooLong { smiles: String, len: usize, max: usize },
    #[error("max_seq_len must be at least 1")]
    ZeroLength,
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("token id {0} is unknown or out of range and cannot be detokenized")]
    UnknownIdPresent(u32),
    #[error("SMILES {0:?} contains a token that is not in the vocabulary")]
    UnknownToken(String),
    #[error("malformed vocabulary file at line {line}: {reason}")]
    BadVocabFile { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Atom,
    TwoCharAtom,
    BondOrSignal,
    RingDigit,
    Branch,
    Bracket,
    Padding,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
}

/// Whether two-character atoms receive one embedding index or are split
/// into single characters (the ablation setting).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizeMode {
    #[default]
    TwoCharAtoms,
    SingleChar,
}

/// Splits a SMILES string into tokens without consulting a vocabulary.
pub fn segment(smiles: &str, mode: TokenizeMode) -> Result<Vec<Token>, TokenizeError> {
    if smiles.is_empty() {
        return Err(TokenizeError::EmptyInput);
    }
    let chars: Vec<char> = smiles.chars().collect();
    let mut tokens = Vec::with_capacity(chars.len());
    let mut in_bracket = false;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if mode == TokenizeMode::TwoCharAtoms && i + 1 < chars.len() {
            let pair: String = chars[i..i + 2].iter().collect();
            let merge = if in_bracket { is_two_char_atom(&pair) } else { ORGANIC_TWO_CHAR.contains(&pair.as_str()) };
            if merge {
                tokens.push(Token { text: pair, kind: TokenKind::TwoCharAtom });
                i += 2;
                continue;
            }
        }
        let kind = match c {
            '[' => {
                in_bracket = true;
                TokenKind::Bracket
            }
            ']' => {
                in_bracket = false;
                TokenKind::Bracket
            }
            '(' | ')' => TokenKind::Branch,
            'H' => TokenKind::BondOrSignal,
            '0'..='9' if in_bracket => TokenKind::BondOrSignal,
            '0'..='9' | '%' => TokenKind::RingDigit,
            '-' | '=' | '#' | '$' | ':' | '/' | '\\' | '.' | '@' | '+' => TokenKind::BondOrSignal,
            c if c.is_ascii_alphabetic() || c == '*' => TokenKind::Atom,
            _ => TokenKind::Unknown,
        };
        tokens.push(Token { text: c.to_string(), kind });
        i += 1;
    }
    Ok(tokens)
}

/// Bijective token-text <-> id map. Id 0 is padding (empty text), id 1 is
/// the unknown token, the rest are corpus tokens in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: std::collections::HashMap<String, u32>,
    mode: TokenizeMode,
}

impl Vocabulary {
    pub fn build<S: AsRef<str>>(corpus: &[S], mode: TokenizeMode) -> Result<Self, TokenizeError> {
        if corpus.is_empty() {
            return Err(TokenizeError::EmptyCorpus);
        }
        let mut texts = BTreeSet::new();
        for smiles in corpus {
            for tok in segment(smiles.as_ref(), mode)? {
                texts.insert(tok.text);
            }
        }
        let mut id_to_token = vec![String::new(), UNK_TEXT.to_string()];
        id_to_token.extend(texts.into_iter().filter(|t| t != UNK_TEXT));
        Ok(Self::from_ordered(id_to_token, mode))
    }

    fn from_ordered(id_to_token: Vec<String>, mode: TokenizeMode) -> Self {
        let token_to_id = id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { id_to_token, token_to_id, mode }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn mode(&self) -> TokenizeMode {
        self.mode
    }

    pub fn id(&self, text: &str) -> Option<u32> {
        self.token_to_id.get(text).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> impl Iterator<Item = (u32, &str)> {
        self.id_to_token.iter().enumerate().map(|(i, t)| (i as u32, t.as_str()))
    }

    /// `token<TAB>id` per line, sorted by id.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, text) in self.tokens() {
            let _ = writeln!(out, "{text}\t{id}");
        }
        out
    }

    pub fn from_tsv(text: &str, mode: TokenizeMode) -> Result<Self, TokenizeError> {
        let mut id_to_token = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let bad = |reason: &str| TokenizeError::BadVocabFile { line: n + 1, reason: reason.into() };
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| bad("missing tab"))?;
            let id: usize = id.parse().map_err(|_| bad("id is not an integer"))?;
            if id != id_to_token.len() {
                return Err(bad("ids must be contiguous and sorted"));
            }
            id_to_token.push(tok.to_string());
        }
        if id_to_token.len() < 2 || !id_to_token[0].is_empty() || id_to_token[1] != UNK_TEXT {
            return Err(TokenizeError::BadVocabFile {
                line: 1,
                reason: "first entries must be padding (empty) and <unk>".into(),
            });
        }
        let vocab = Self::from_ordered(id_to_token, mode);
        if vocab.token_to_id.len() != vocab.id_to_token.len() {
            return Err(TokenizeError::BadVocabFile { line: 0, reason: "duplicate token".into() });
        }
        Ok(vocab)
    }
}

/// A right-padded id sequence for one SMILES string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub kinds: Vec<TokenKind>,
    pub true_len: usize,
    pub source: String,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.ids[..self.true_len]
    }

    pub fn has_unknown(&self) -> bool {
        self.tokens().contains(&UNK_ID)
    }

    /// Builds a sequence directly from ids (used for padding-only probes).
    pub fn from_ids(ids: &[u32], max_seq_len: usize) -> Self {
        let mut padded = ids.to_vec();
        padded.resize(max_seq_len, PAD_ID);
        let mut kinds = vec![TokenKind::Atom; ids.len()];
        kinds.resize(max_seq_len, TokenKind::Padding);
        Self { ids: padded, kinds, true_len: ids.len(), source: String::new() }
    }
}

pub fn tokenize(smiles: &str, vocab: &Vocabulary, max_seq_len: usize) -> Result<TokenSequence, TokenizeError> {
    if max_seq_len == 0 {
        return Err(TokenizeError::ZeroLength);
    }
    let toks = segment(smiles, vocab.mode())?;
    if toks.len() > max_seq_len {
        return Err(TokenizeError::SequenceTooLong { smiles: smiles.to_string(), len: toks.len(), max: max_seq_len });
    }
    let mut ids = Vec::with_capacity(max_seq_len);
    let mut kinds = Vec::with_capacity(max_seq_len);
    for tok in &toks {
        match vocab.id(&tok.text) {
            Some(id) if id > UNK_ID => {
                ids.push(id);
                kinds.push(tok.kind);
            }
            _ => {
                ids.push(UNK_ID);
                kinds.push(TokenKind::Unknown);
            }
        }
    }
    let true_len = ids.len();
    ids.resize(max_seq_len, PAD_ID);
    kinds.resize(max_seq_len, TokenKind::Padding);
    Ok(TokenSequence { ids, kinds, true_len, source: smiles.to_string() })
}

/// Like [`tokenize`] but rejects sequences containing unknown tokens; used
/// on training data, where every token must have been seen.
pub fn tokenize_strict(smiles: &str, vocab: &Vocabulary, max_seq_len: usize) -> Result<TokenSequence, TokenizeError> {
    let seq = tokenize(smiles, vocab, max_seq_len)?;
    if seq.has_unknown() {
        return Err(TokenizeError::UnknownToken(smiles.to_string()));
    }
    Ok(seq)
}

pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> Result<String, TokenizeError> {
    let mut out = String::with_capacity(seq.true_len * 2);
    for &id in seq.tokens() {
        if id <= UNK_ID {
            return Err(TokenizeError::UnknownIdPresent(id));
        }
        out.push_str(vocab.token(id).ok_or(TokenizeError::UnknownIdPresent(id))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const PROPANIL: &str = "CCC(=O)Nc1ccc(Cl)c(Cl)c1";

    fn texts(s: &str) -> Vec<String> {
        segment(s, TokenizeMode::TwoCharAtoms).unwrap().into_iter().map(|t| t.text).collect()
    }

    #[test]
    fn dichloro_anilide_segmentation() {
        // Hand count: 24 characters, two "Cl" merges.
        let toks = texts(PROPANIL);
        assert_eq!(toks.len(), 22);
        let cl: Vec<usize> = toks.iter().enumerate().filter(|(_, t)| *t == "Cl").map(|(i, _)| i).collect();
        assert_eq!(cl, vec![14, 18]);
        assert!(!toks.iter().any(|t| t == "l"));
    }

    #[test]
    fn single_atom_is_padded() {
        let vocab = Vocabulary::build(&["C"], TokenizeMode::TwoCharAtoms).unwrap();
        let seq = tokenize("C", &vocab, 4).unwrap();
        assert_eq!(seq.ids, vec![vocab.id("C").unwrap(), 0, 0, 0]);
        assert_eq!(seq.true_len, 1);
    }

    #[test]
    fn bracket_hydrogen_is_a_signal() {
        let toks = segment("[nH]", TokenizeMode::TwoCharAtoms).unwrap();
        let t: Vec<&str> = toks.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(t, vec!["[", "n", "H", "]"]);
        assert_eq!(toks[2].kind, TokenKind::BondOrSignal);
        assert_eq!(toks[1].kind, TokenKind::Atom);
    }

    #[test]
    fn bracket_elements_merge_but_organic_sc_does_not() {
        assert_eq!(texts("[Na+].[Cl-]"), vec!["[", "Na", "+", "]", ".", "[", "Cl", "-", "]"]);
        // sulfur followed by aromatic carbon outside brackets
        assert_eq!(texts("Sc1ccccc1")[..2], ["S", "c"]);
        assert_eq!(texts("[Sc]"), vec!["[", "Sc", "]"]);
        assert_eq!(texts("[se]1cccc1")[1], "se");
        assert_eq!(texts("C[C@@H](O)Br"), vec!["C", "[", "C", "@", "@", "H", "]", "(", "O", ")", "Br"]);
    }

    #[test]
    fn single_char_mode_splits_chlorine() {
        let toks = segment("CCl", TokenizeMode::SingleChar).unwrap();
        assert_eq!(toks.len(), 3);
        assert_eq!(toks[2].text, "l");
    }

    #[test]
    fn tiny_vocabulary_layout() {
        let vocab = Vocabulary::build(&["CC"], TokenizeMode::TwoCharAtoms).unwrap();
        assert_eq!(vocab.len(), 3);
        assert_eq!(vocab.id(""), Some(0));
        assert_eq!(vocab.id(UNK_TEXT), Some(1));
        assert_eq!(vocab.id("C"), Some(2));
    }

    #[test]
    fn chlorine_gets_its_own_entry() {
        let vocab = Vocabulary::build(&["CCl"], TokenizeMode::TwoCharAtoms).unwrap();
        assert!(vocab.id("C").is_some());
        assert!(vocab.id("Cl").is_some());
        assert!(vocab.id("l").is_none());
    }

    #[test]
    fn errors() {
        let vocab = Vocabulary::build(&["CC"], TokenizeMode::TwoCharAtoms).unwrap();
        assert_eq!(tokenize("", &vocab, 5), Err(TokenizeError::EmptyInput));
        assert!(matches!(tokenize("CCCCCC", &vocab, 5), Err(TokenizeError::SequenceTooLong { len: 6, .. })));
        assert_eq!(Vocabulary::build::<&str>(&[], TokenizeMode::TwoCharAtoms), Err(TokenizeError::EmptyCorpus));
        let seq = tokenize("CN", &vocab, 5).unwrap();
        assert_eq!(seq.ids[1], UNK_ID);
        assert_eq!(detokenize(&seq, &vocab), Err(TokenizeError::UnknownIdPresent(UNK_ID)));
        assert!(matches!(tokenize_strict("CN", &vocab, 5), Err(TokenizeError::UnknownToken(_))));
    }

    #[test]
    fn round_trips() {
        let corpus = ["c1ccccc1", PROPANIL];
        let vocab = Vocabulary::build(&corpus, TokenizeMode::TwoCharAtoms).unwrap();
        for s in corpus {
            let seq = tokenize(s, &vocab, 64).unwrap();
            assert_eq!(detokenize(&seq, &vocab).unwrap(), s);
        }
    }

    #[test]
    fn tsv_round_trip_and_determinism() {
        let corpus = [PROPANIL, "C[N+](C)(C)C.[Br-]", "O=C(O)c1ccccc1"];
        let a = Vocabulary::build(&corpus, TokenizeMode::TwoCharAtoms).unwrap();
        let b = Vocabulary::build(&corpus, TokenizeMode::TwoCharAtoms).unwrap();
        assert_eq!(a.to_tsv(), b.to_tsv());
        assert!(a.to_tsv().starts_with("\t0\n<unk>\t1\n"));
        let back = Vocabulary::from_tsv(&a.to_tsv(), TokenizeMode::TwoCharAtoms).unwrap();
        assert_eq!(back, a);
        assert!(Vocabulary::from_tsv("C\t0\n", TokenizeMode::TwoCharAtoms).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_and_padding_suffix(s in "[CNOcnos()=#1-9\\[\\]@+H]{1,40}|(Cl|Br|C|c1|N|O|\\(|\\)|=){1,30}") {
            let vocab = Vocabulary::build(&[s.as_str()], TokenizeMode::TwoCharAtoms).unwrap();
            let seq = tokenize(&s, &vocab, 64).unwrap();
            prop_assert_eq!(detokenize(&seq, &vocab).unwrap(), s.clone());
            for (i, &id) in seq.ids.iter().enumerate() {
                prop_assert_eq!(id == PAD_ID, i >= seq.true_len);
            }
            let toks = segment(&s, TokenizeMode::TwoCharAtoms).unwrap();
            prop_assert!(!toks.iter().any(|t| t.text == "l" || t.text == "r"));
        }
    }
}
