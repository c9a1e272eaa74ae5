//! Atom-level SMILES tokenization and vocabularies.
//!
//! Tokens follow the widely used SMILES regular expression: bracket atoms
//! (`[Li+]`, `[C@@H]`) are one token, `Br` and `Cl` are one token, `%nn`
//! ring labels are one token, and every other symbol (single-letter atoms,
//! aromatic atoms, bonds, branches, ring digits, stereo marks) is its own
//! token.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;

use crate::{Error, Result};

/// Longest encoded sequence, including `<bos>` and `<eos>`.
pub const MAX_TOKENS: usize = 202;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const MASK: u32 = 4;
pub const SEP: u32 = 5;

/// Special tokens in id order.
pub const SPECIALS: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<unk>", "<mask>", "<sep>"];

static SMILES_TOKEN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\[[^\]]+\]|Br?|Cl?|N|O|S|P|F|I|b|c|n|o|s|p|\(|\)|\.|=|#|-|\+|\\|/|:|~|@|\?|>|\*|\$|%[0-9]{2}|[0-9]")
        .expect("valid token regex")
});

/// Splits `smiles` into tokens. Concatenating the result gives back the
/// input exactly; a character no rule matches is an error naming its
/// byte offset.
pub fn tokenize(smiles: &str) -> Result<Vec<String>> {
    if smiles.is_empty() {
        return Err(Error::InvalidValue(
            "cannot tokenize an empty SMILES".into(),
        ));
    }
    let mut tokens = Vec::new();
    let mut pos = 0;
    for m in SMILES_TOKEN.find_iter(smiles) {
        if m.start() != pos {
            return Err(unmatched(smiles, pos));
        }
        tokens.push(m.as_str().to_owned());
        pos = m.end();
    }
    if pos != smiles.len() {
        return Err(unmatched(smiles, pos));
    }
    Ok(tokens)
}

fn unmatched(smiles: &str, offset: usize) -> Error {
    Error::Tokenize {
        smiles: smiles.to_owned(),
        offset,
        ch: smiles[offset..].chars().next().unwrap_or('\0'),
    }
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Specials followed by `chemical` in the given order. Fails if a
    /// token repeats or shadows a special.
    pub fn from_tokens<I, S>(chemical: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(chemical.into_iter().map(Into::into))
        {
            if v.ids.contains_key(&t) {
                return Err(Error::Vocab(format!("duplicate token `{t}`")));
            }
            v.ids.insert(t.clone(), v.tokens.len() as u32);
            v.tokens.push(t);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// All tokens in id order, specials first.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Every distinct token of `corpus`, sorted lexicographically after the
/// specials.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S]) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Empty("vocabulary corpus".into()));
    }
    let mut set = BTreeSet::new();
    for (i, s) in corpus.iter().enumerate() {
        let toks =
            tokenize(s.as_ref()).map_err(|e| Error::Vocab(format!("corpus entry {i}: {e}")))?;
        set.extend(toks);
    }
    Vocabulary::from_tokens(set)
}

/// One token per line; line `i` (0-based) holds id `i`.
pub fn save_vocab(v: &Vocabulary, path: &Path) -> Result<()> {
    let mut text = v.tokens.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
        return Err(Error::Vocab(format!(
            "{}: first lines must be the specials {}",
            path.display(),
            SPECIALS.join(",")
        )));
    }
    if let Some(i) = lines.iter().position(|l| l.is_empty()) {
        return Err(Error::Vocab(format!(
            "{}: empty token on line {}",
            path.display(),
            i + 1
        )));
    }
    Vocabulary::from_tokens(lines[SPECIALS.len()..].iter().copied())
        .map_err(|e| Error::Vocab(format!("{}: {e}", path.display())))
}

/// Token ids of one molecule (or a separator-joined formulation).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Chemical tokens were dropped to respect [`MAX_TOKENS`].
    pub truncated: bool,
    /// Tokens mapped to `<unk>`.
    pub unknown: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `<bos> tokens <eos>`, cutting chemical tokens from the right so the
/// result never exceeds [`MAX_TOKENS`].
pub fn encode<S: AsRef<str>>(tokens: &[S], v: &Vocabulary) -> TokenSequence {
    let keep = tokens.len().min(MAX_TOKENS - 2);
    let mut unknown = 0;
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(BOS);
    for t in &tokens[..keep] {
        ids.push(v.id(t.as_ref()).unwrap_or_else(|| {
            unknown += 1;
            UNK
        }));
    }
    ids.push(EOS);
    TokenSequence {
        ids,
        truncated: keep < tokens.len(),
        unknown,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("CCO").unwrap(), ["C", "C", "O"]);
        assert_eq!(tokenize("[Li+]").unwrap(), ["[Li+]"]);
        assert_eq!(tokenize("ClCCl").unwrap(), ["Cl", "C", "Cl"]);
        assert_eq!(
            tokenize("C%12CC%12").unwrap(),
            ["C", "%12", "C", "C", "%12"]
        );
        assert_eq!(
            tokenize("C/C=C\\C").unwrap(),
            ["C", "/", "C", "=", "C", "\\", "C"]
        );
        assert_eq!(
            tokenize("[C@@H](Br)O").unwrap(),
            ["[C@@H]", "(", "Br", ")", "O"]
        );
    }

    #[test]
    fn tfsi_token_count() {
        // Count from the reference Python regex:
        // F C ( F ) ( F ) S ( = O ) ( = O ) [N-] S ( = O ) ( = O ) C ( F ) ( F ) F
        let toks = tokenize("FC(F)(F)S(=O)(=O)[N-]S(=O)(=O)C(F)(F)F").unwrap();
        assert_eq!(toks.len(), 35);
    }

    #[test]
    fn tokenize_errors_name_the_offset() {
        match tokenize("CC!O") {
            Err(Error::Tokenize { offset, ch, .. }) => assert_eq!((offset, ch), (2, '!')),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            tokenize("CC%1"),
            Err(Error::Tokenize { offset: 2, .. })
        ));
        assert!(tokenize("").is_err());
    }

    #[test]
    fn detokenize_examples() {
        assert_eq!(detokenize(&["C", "C", "O"]), "CCO");
        assert_eq!(detokenize::<&str>(&[]), "");
    }

    #[test]
    fn vocab_build_and_encode() {
        let v = build_vocab(&["CCO"]).unwrap();
        assert_eq!(&v.tokens()[6..], ["C", "O"]);
        assert_eq!(v, build_vocab(&["CCO"]).unwrap());
        let v2 = build_vocab(&["[Li+]", "CCO"]).unwrap();
        assert_eq!(&v2.tokens()[6..], ["C", "O", "[Li+]"]);

        let c = v.id("C").unwrap();
        let s = encode(&["C"], &v);
        assert_eq!(s.ids, vec![BOS, c, EOS]);
        assert!(!s.truncated);

        let s = encode(&["N"], &v);
        assert_eq!((s.ids[1], s.unknown), (UNK, 1));

        let long = vec!["C"; 250];
        let s = encode(&long, &v);
        assert_eq!(s.len(), MAX_TOKENS);
        assert!(s.truncated);
        assert_eq!(*s.ids.last().unwrap(), EOS);
    }

    #[test]
    fn vocab_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = build_vocab(&["[Li+]", "CCOCl", "c1ccccc1"]).unwrap();
        save_vocab(&v, &p).unwrap();
        assert_eq!(load_vocab(&p).unwrap(), v);

        fs::write(&p, "C\nO\n").unwrap();
        assert!(load_vocab(&p).unwrap_err().to_string().contains("specials"));
        fs::write(&p, format!("{}\nC\nC\n", SPECIALS.join("\n"))).unwrap();
        assert!(load_vocab(&p)
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
    }

    proptest! {
        #[test]
        fn round_trip_on_token_soup(idx in prop::collection::vec(0usize..14, 1..40)) {
            const PIECES: [&str; 14] = ["C", "Cl", "Br", "[Li+]", "%10", "1", "(", ")", "=", "c", "[nH]", "/", "O", "#"];
            let s: String = idx.iter().map(|&i| PIECES[i]).collect();
            let toks = tokenize(&s).unwrap();
            prop_assert_eq!(detokenize(&toks), s.clone());
            let v = build_vocab(&[s.as_str()]).unwrap();
            let seq = encode(&toks, &v);
            prop_assert!(seq.len() >= 3 && seq.len() <= MAX_TOKENS);
            prop_assert_eq!(seq.unknown, 0);
        }
    }
}
