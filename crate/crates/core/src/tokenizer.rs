//! Word-internal byte-pair encoding with an end-of-word marker, plus
//! vocabulary management. Ids are dense with blank pinned at 0 so CTC
//! formulas can index it directly.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::error::{CoreError, Result};

pub const BLANK: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const N_SPECIALS: usize = 4;
pub const WORD_MARK: &str = "</w>";

pub const SPECIAL_TOKENS: [&str; N_SPECIALS] = ["<blank>", "<sos>", "<eos>", "<unk>"];

/// Dense id space: specials at 0..4, then base symbols, then merge
/// outputs in merge order.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < N_SPECIALS {
            return Err(CoreError::Vocab(format!(
                "vocabulary has {} tokens, needs at least the {} specials",
                tokens.len(),
                N_SPECIALS
            )));
        }
        for (i, want) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(CoreError::Vocab(format!(
                    "token {i} must be {want}, found {:?}",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(CoreError::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(|s| s.as_str())
            .ok_or_else(|| CoreError::Vocab(format!("id {id} out of range ({})", self.size())))
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id < N_SPECIALS
    }

    /// One token per line; the id is the line number.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            if t.contains('\n') {
                return Err(CoreError::Vocab(format!("token {t:?} contains a newline")));
            }
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocab> {
        let text = std::fs::read_to_string(&path)?;
        Vocab::from_tokens(text.lines().map(|s| s.to_string()).collect())
    }
}

/// Ids back to text: skips specials and turns end-of-word markers into
/// spaces.
pub fn detokenize(vocab: &Vocab, ids: &[usize]) -> Result<String> {
    let mut text = String::new();
    for &id in ids {
        let tok = vocab.token(id)?;
        if Vocab::is_special(id) {
            continue;
        }
        text.push_str(tok);
    }
    Ok(text.replace(WORD_MARK, " ").trim_end().to_string())
}

/// Trained BPE model: base symbols plus an ordered merge list.
#[derive(Debug, Clone)]
pub struct BpeModel {
    base: Vec<String>,
    merges: Vec<(String, String, String)>,
    vocab: Vocab,
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    syms.push(WORD_MARK.to_string());
    syms
}

fn apply_merge(syms: &[String], left: &str, right: &str, new: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
            out.push(new.to_string());
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

fn assemble_vocab(base: &[String], merges: &[(String, String, String)]) -> Result<Vocab> {
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(base.iter().cloned());
    tokens.extend(merges.iter().map(|(_, _, n)| n.clone()));
    Vocab::from_tokens(tokens)
}

impl BpeModel {
    /// Greedy BPE: merge the most frequent adjacent pair each round,
    /// ties broken by lexicographically smallest pair, until the vocab
    /// reaches `target_vocab` or no pair occurs twice.
    pub fn train(corpus: &str, target_vocab: usize) -> Result<BpeModel> {
        let mut words: BTreeMap<Vec<String>, u64> = BTreeMap::new();
        for w in corpus.split_whitespace() {
            *words.entry(word_symbols(w)).or_insert(0) += 1;
        }
        if words.is_empty() {
            return Err(CoreError::Data("bpe training corpus is empty".into()));
        }
        let base: Vec<String> = words
            .keys()
            .flat_map(|syms| syms.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let min_vocab = N_SPECIALS + base.len();
        if target_vocab < min_vocab {
            return Err(CoreError::Config(format!(
                "target vocab {target_vocab} below minimum {min_vocab} (specials + base alphabet)"
            )));
        }

        let mut merges: Vec<(String, String, String)> = Vec::new();
        while min_vocab + merges.len() < target_vocab {
            let mut counts: BTreeMap<(&String, &String), u64> = BTreeMap::new();
            for (syms, n) in &words {
                for pair in syms.windows(2) {
                    *counts.entry((&pair[0], &pair[1])).or_insert(0) += n;
                }
            }
            // highest count wins; equal counts fall back to the
            // lexicographically smallest pair
            let best = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|((l, r), n)| (l.to_string(), r.to_string(), *n));
            let Some((left, right, n)) = best else { break };
            if n < 2 {
                break;
            }
            let new = format!("{left}{right}");
            let mut next: BTreeMap<Vec<String>, u64> = BTreeMap::new();
            for (syms, n) in &words {
                *next.entry(apply_merge(syms, &left, &right, &new)).or_insert(0) += n;
            }
            words = next;
            merges.push((left, right, new));
        }
        let vocab = assemble_vocab(&base, &merges)?;
        Ok(BpeModel { base, merges, vocab })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn merges(&self) -> &[(String, String, String)] {
        &self.merges
    }

    /// Tokenize; characters outside the base alphabet become unk.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            let mut syms = word_symbols(word);
            for (l, r, n) in &self.merges {
                syms = apply_merge(&syms, l, r, n);
            }
            for s in syms {
                ids.push(self.vocab.id(&s).unwrap_or(UNK));
            }
        }
        ids
    }

    /// Inverse of encode on known text.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        detokenize(&self.vocab, ids)
    }

    /// Header `bpe v1 <base_alphabet_size> <n_merges>`, one merge per
    /// line; the vocab file carries the token list itself.
    pub fn save(&self, model_path: impl AsRef<Path>, vocab_path: impl AsRef<Path>) -> Result<()> {
        let mut out = format!("bpe v1 {} {}\n", self.base.len(), self.merges.len());
        for (l, r, n) in &self.merges {
            out.push_str(&format!("{l}\t{r}\t{n}\n"));
        }
        std::fs::write(model_path, out)?;
        self.vocab.save(vocab_path)
    }

    pub fn load(model_path: impl AsRef<Path>, vocab_path: impl AsRef<Path>) -> Result<BpeModel> {
        let model_path = model_path.as_ref();
        let text = std::fs::read_to_string(model_path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| CoreError::Format(format!("{}: empty bpe file", model_path.display())))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (base_len, n_merges) = match fields.as_slice() {
            ["bpe", "v1", b, m] => (
                b.parse::<usize>().map_err(|_| bad_header(model_path))?,
                m.parse::<usize>().map_err(|_| bad_header(model_path))?,
            ),
            _ => return Err(bad_header(model_path)),
        };
        let mut merges = Vec::with_capacity(n_merges);
        for (i, line) in lines.enumerate() {
            let mut parts = line.split('\t');
            match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), Some(n), None) => {
                    merges.push((l.to_string(), r.to_string(), n.to_string()))
                }
                _ => {
                    return Err(CoreError::Format(format!(
                        "{}: merge line {} is not left<TAB>right<TAB>new",
                        model_path.display(),
                        i + 2
                    )))
                }
            }
        }
        if merges.len() != n_merges {
            return Err(CoreError::Format(format!(
                "{}: header promises {} merges, file has {}",
                model_path.display(),
                n_merges,
                merges.len()
            )));
        }
        let vocab = Vocab::load(vocab_path)?;
        if vocab.size() != N_SPECIALS + base_len + n_merges {
            return Err(CoreError::Format(format!(
                "vocab has {} tokens, bpe model expects {}",
                vocab.size(),
                N_SPECIALS + base_len + n_merges
            )));
        }
        let base: Vec<String> = vocab.tokens()[N_SPECIALS..N_SPECIALS + base_len].to_vec();
        for (k, (_, _, n)) in merges.iter().enumerate() {
            let at = N_SPECIALS + base_len + k;
            if vocab.tokens()[at] != *n {
                return Err(CoreError::Format(format!(
                    "vocab token {at} is {:?}, bpe merge {k} produces {n:?}",
                    vocab.tokens()[at]
                )));
            }
        }
        Ok(BpeModel { base, merges, vocab })
    }
}

fn bad_header(path: &Path) -> CoreError {
    CoreError::Format(format!(
        "{}: expected header 'bpe v1 <base> <merges>'",
        path.display()
    ))
}
