//! Synthetic domain-shift corpora and WER scoring. The two domains
//! differ only in their character bigram chains; the token-to-feature
//! prototype map is shared bit-exactly, so all acoustic evidence comes
//! from one process and the shift is purely linguistic.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::adapt::Domain;
use crate::error::{CoreError, Result};
use crate::rng::{derive_seed, derive_seed_indexed, seeded, Prng};
use crate::tensor::Tensor;

const FEAT_MAGIC: &[u8; 8] = b"RILMFEAT";
const FEAT_VERSION: u32 = 1;

/// Character-level domain description: a bigram chain over the
/// alphabet plus the acoustic prototype process shared across domains.
#[derive(Debug, Clone)]
pub struct SyntheticDomainSpec {
    pub domain: Domain,
    pub alphabet: Vec<char>,
    /// Row-stochastic transition matrix over alphabet indices.
    pub transition: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    /// Transcript length range in characters, inclusive.
    pub len_range: (usize, usize),
    pub feat_dim: usize,
    /// Frames emitted per character, inclusive range.
    pub frames_range: (usize, usize),
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Zipf weights over the letters ordered by `perm` (most frequent
/// first), with a boosted successor so the chain has bigram structure
/// beyond its unigram profile.
fn domain_chain(perm: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = perm.len();
    let space = n; // index of ' ' after the letters
    let mut rank = vec![0usize; n];
    for (pos, &letter) in perm.iter().enumerate() {
        rank[letter] = pos;
    }
    let mut unigram = vec![0.0; n];
    for letter in 0..n {
        unigram[letter] = 1.0 / (1.0 + rank[letter] as f64);
    }
    let z: f64 = unigram.iter().sum();
    unigram.iter_mut().for_each(|u| *u /= z);

    let mut rows = Vec::with_capacity(n + 1);
    for letter in 0..n {
        let succ = perm[(rank[letter] + 1) % n];
        let mut row = vec![0.0; n + 1];
        let mut z = 0.0;
        for next in 0..n {
            let boost = if next == succ { 4.0 } else { 1.0 };
            row[next] = unigram[next] * boost;
            z += row[next];
        }
        for next in 0..n {
            row[next] *= 0.82 / z;
        }
        row[space] = 0.18;
        rows.push(row);
    }
    let mut space_row = vec![0.0; n + 1];
    space_row[..n].copy_from_slice(&unigram);
    rows.push(space_row);

    let initial = stationary(&rows);
    (rows, initial)
}

/// Stationary distribution of a row-stochastic matrix by power
/// iteration from the uniform vector.
pub fn stationary(transition: &[Vec<f64>]) -> Vec<f64> {
    let n = transition.len();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..10_000 {
        let mut next = vec![0.0; n];
        for (i, row) in transition.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                next[j] += pi[i] * p;
            }
        }
        let delta: f64 = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if delta < 1e-14 {
            break;
        }
    }
    pi
}

impl SyntheticDomainSpec {
    /// Desk-scale default: 26 letters + space, Zipf unigram profiles
    /// with the target profile over the reversed alphabet.
    pub fn desk_default(domain: Domain, seed: u64) -> SyntheticDomainSpec {
        let mut alphabet: Vec<char> = ('a'..='z').collect();
        let perm: Vec<usize> = match domain {
            Domain::Source => (0..26).collect(),
            Domain::Target => (0..26).rev().collect(),
        };
        let (transition, initial) = domain_chain(&perm);
        alphabet.push(' ');
        SyntheticDomainSpec {
            domain,
            alphabet,
            transition,
            initial,
            len_range: (12, 40),
            feat_dim: 16,
            frames_range: (1, 3),
            noise_sigma: 0.3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.alphabet.len();
        if n < 2 {
            return Err(CoreError::Config("alphabet needs at least two symbols".into()));
        }
        if self.transition.len() != n || self.initial.len() != n {
            return Err(CoreError::Config(format!(
                "chain over {} rows / {} initial entries vs alphabet of {n}",
                self.transition.len(),
                self.initial.len()
            )));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != n {
                return Err(CoreError::Config(format!("transition row {i} has {} entries", row.len())));
            }
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(CoreError::Config(format!("transition row {i} leaves [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(CoreError::Config(format!("transition row {i} sums to {s}")));
            }
        }
        let s: f64 = self.initial.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(CoreError::Config(format!("initial distribution sums to {s}")));
        }
        if self.len_range.0 == 0 || self.len_range.0 > self.len_range.1 {
            return Err(CoreError::Config(format!("bad length range {:?}", self.len_range)));
        }
        if self.frames_range.0 == 0 || self.frames_range.0 > self.frames_range.1 {
            return Err(CoreError::Config(format!("bad frames range {:?}", self.frames_range)));
        }
        if self.feat_dim == 0 {
            return Err(CoreError::Config("feature dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Per-character prototype rows. Depends only on the seed, the
    /// alphabet size and the feature dim: domains sharing a seed share
    /// the map bit-exactly.
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = seeded(derive_seed(self.seed, "prototypes"));
        (0..self.alphabet.len())
            .map(|_| {
                (0..self.feat_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect()
    }
}

/// One utterance: features as stored on disk plus the transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct UttRecord {
    pub id: String,
    pub frames: usize,
    pub dim: usize,
    pub feats: Vec<f32>,
    pub transcript: String,
}

impl UttRecord {
    /// Feature matrix for the model ops.
    pub fn feats_tensor(&self) -> Tensor {
        Tensor::from_vec(
            vec![self.frames, self.dim],
            self.feats.iter().map(|&x| x as f64).collect(),
        )
        .expect("stored feature geometry")
    }
}

fn sample_categorical(rng: &mut Prng, probs: &[f64]) -> usize {
    let x: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if x < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Sample `n_utts` utterances. Each one draws from its own derived
/// stream, so corpora are seed-deterministic and order-independent.
/// The split tag keeps train/dev streams apart.
pub fn gen_domain_corpus(
    spec: &SyntheticDomainSpec,
    n_utts: usize,
    split: &str,
) -> Result<Vec<UttRecord>> {
    spec.validate()?;
    let protos = spec.prototypes();
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| CoreError::Config(format!("noise sigma: {e}")))?;
    let tag = format!("{}-{split}", spec.domain.as_str());
    let space = spec.alphabet.len() - 1;
    let mut corpus = Vec::with_capacity(n_utts);
    for i in 0..n_utts {
        let mut rng = seeded(derive_seed_indexed(spec.seed, &tag, i as u64));
        let len = rng.gen_range(spec.len_range.0..=spec.len_range.1);
        let mut chars = Vec::with_capacity(len);
        let mut state = sample_categorical(&mut rng, &spec.initial);
        chars.push(state);
        for _ in 1..len {
            state = sample_categorical(&mut rng, &spec.transition[state]);
            chars.push(state);
        }
        // boundary spaces stay: whitespace tokenization makes them
        // inert, and keeping every draw leaves the chain stationary
        if chars.iter().all(|&c| c == space) {
            return Err(CoreError::Data(format!(
                "utterance {i} of {tag} collapsed to an empty transcript"
            )));
        }
        let transcript: String = chars.iter().map(|&c| spec.alphabet[c]).collect();

        let mut feats = Vec::new();
        let mut frames = 0usize;
        for &c in &chars {
            let n_frames = rng.gen_range(spec.frames_range.0..=spec.frames_range.1);
            for _ in 0..n_frames {
                for d in 0..spec.feat_dim {
                    let x: f64 = protos[c][d] + noise.sample(&mut rng);
                    feats.push(x as f32);
                }
                frames += 1;
            }
        }
        corpus.push(UttRecord {
            id: format!("{tag}-{i:05}"),
            frames,
            dim: spec.feat_dim,
            feats,
            transcript,
        });
    }
    Ok(corpus)
}

/// Binary feature container: magic, version, utterance count, then
/// per utterance the id, the geometry and row-major f32 features.
pub fn save_feats(path: impl AsRef<Path>, corpus: &[UttRecord]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(FEAT_MAGIC);
    out.extend_from_slice(&FEAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(corpus.len() as u32).to_le_bytes());
    for utt in corpus {
        out.extend_from_slice(&(utt.id.len() as u32).to_le_bytes());
        out.extend_from_slice(utt.id.as_bytes());
        out.extend_from_slice(&(utt.frames as u32).to_le_bytes());
        out.extend_from_slice(&(utt.dim as u32).to_le_bytes());
        for &x in &utt.feats {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::Format("feature file truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Load a feature container. Transcripts are not stored here; use
/// `load_corpus` to join them back from the manifest.
pub fn load_feats(path: impl AsRef<Path>) -> Result<Vec<UttRecord>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    let mut r = ByteReader { bytes: &bytes, pos: 0 };
    if r.take(8)? != FEAT_MAGIC {
        return Err(CoreError::Format("not a feature file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FEAT_VERSION {
        return Err(CoreError::Format(format!("unsupported feature file version {version}")));
    }
    let n_utts = r.u32()? as usize;
    let mut corpus = Vec::with_capacity(n_utts);
    for _ in 0..n_utts {
        let id_len = r.u32()? as usize;
        let id = String::from_utf8(r.take(id_len)?.to_vec())
            .map_err(|_| CoreError::Format("utterance id is not utf-8".into()))?;
        let frames = r.u32()? as usize;
        let dim = r.u32()? as usize;
        if frames == 0 || dim == 0 {
            return Err(CoreError::Format(format!("utterance {id} has empty geometry")));
        }
        let raw = r.take(frames * dim * 4)?;
        let feats = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        corpus.push(UttRecord {
            id,
            frames,
            dim,
            feats,
            transcript: String::new(),
        });
    }
    if r.pos != bytes.len() {
        return Err(CoreError::Format("trailing bytes after the last utterance".into()));
    }
    Ok(corpus)
}

/// `utt_id<TAB>transcript` per line.
pub fn save_manifest(path: impl AsRef<Path>, corpus: &[UttRecord]) -> Result<()> {
    let mut out = String::new();
    for utt in corpus {
        out.push_str(&format!("{}\t{}\n", utt.id, utt.transcript));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let mut seen = BTreeMap::new();
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, transcript) = line.split_once('\t').ok_or_else(|| {
            CoreError::Format(format!("manifest line {}: expected id<TAB>text", ln + 1))
        })?;
        if seen.insert(id.to_string(), ()).is_some() {
            return Err(CoreError::Format(format!("manifest line {}: duplicate id {id}", ln + 1)));
        }
        rows.push((id.to_string(), transcript.to_string()));
    }
    Ok(rows)
}

/// Join a feature container with its transcript manifest by id.
pub fn load_corpus(
    feat_path: impl AsRef<Path>,
    manifest_path: impl AsRef<Path>,
) -> Result<Vec<UttRecord>> {
    let mut corpus = load_feats(feat_path)?;
    let manifest: BTreeMap<String, String> = load_manifest(manifest_path)?.into_iter().collect();
    if manifest.len() != corpus.len() {
        return Err(CoreError::Data(format!(
            "manifest covers {} utterances, feature file holds {}",
            manifest.len(),
            corpus.len()
        )));
    }
    for utt in &mut corpus {
        let text = manifest
            .get(&utt.id)
            .ok_or_else(|| CoreError::Data(format!("manifest is missing utterance {}", utt.id)))?;
        if text.is_empty() {
            return Err(CoreError::Data(format!("empty transcript for utterance {}", utt.id)));
        }
        utt.transcript = text.clone();
    }
    Ok(corpus)
}

/// Edit counts from a minimal alignment; ties prefer substitution,
/// then insertion, then deletion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WerReport {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_tokens: usize,
}

impl WerReport {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn percent(&self) -> f64 {
        100.0 * self.errors() as f64 / self.ref_tokens as f64
    }
}

impl std::fmt::Display for WerReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "WER {:.2}% (S={} D={} I={} / N={})",
            self.percent(),
            self.substitutions,
            self.deletions,
            self.insertions,
            self.ref_tokens
        )
    }
}

/// Levenshtein alignment with unit costs over arbitrary tokens.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<WerReport> {
    if reference.is_empty() {
        return Err(CoreError::Data("wer reference is empty".into()));
    }
    let n = reference.len();
    let m = hypothesis.len();
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let ins = d[i][j - 1] + 1;
            let del = d[i - 1][j] + 1;
            d[i][j] = sub.min(ins).min(del);
        }
    }
    let (mut i, mut j) = (n, m);
    let (mut s, mut del, mut ins) = (0usize, 0usize, 0usize);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let step = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            if step == d[i][j] {
                if reference[i - 1] != hypothesis[j - 1] {
                    s += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i][j - 1] + 1 == d[i][j] {
            ins += 1;
            j -= 1;
            continue;
        }
        del += 1;
        i -= 1;
    }
    Ok(WerReport {
        substitutions: s,
        deletions: del,
        insertions: ins,
        ref_tokens: n,
    })
}

fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Hypothesis rows from either a plain manifest or an n-best file
/// (`utt_id<TAB>rank<TAB>score<TAB>transcript`, rank-1 rows used).
pub fn load_hypotheses(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let mut out = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(4, '\t').collect();
        let (id, transcript) = match fields.len() {
            2 => (fields[0], fields[1]),
            4 => {
                if fields[1] != "1" {
                    continue;
                }
                (fields[0], fields[3])
            }
            _ => {
                return Err(CoreError::Format(format!(
                    "hypothesis line {}: expected 2 (manifest) or 4 (n-best) fields",
                    ln + 1
                )))
            }
        };
        if out.insert(id.to_string(), transcript.to_string()).is_some() {
            return Err(CoreError::Format(format!(
                "hypothesis line {}: duplicate id {id}",
                ln + 1
            )));
        }
    }
    Ok(out)
}

/// Corpus-level WER: error counts pooled over utterances before the
/// division, never a mean of per-utterance rates.
pub fn score_corpus(ref_path: impl AsRef<Path>, hyp_path: impl AsRef<Path>) -> Result<WerReport> {
    let refs: BTreeMap<String, String> = load_manifest(ref_path)?.into_iter().collect();
    let hyps = load_hypotheses(hyp_path)?;
    let missing: Vec<&String> = refs.keys().filter(|id| !hyps.contains_key(*id)).collect();
    let extra: Vec<&String> = hyps.keys().filter(|id| !refs.contains_key(*id)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(CoreError::Data(format!(
            "utterance ids differ; missing from hypotheses: {missing:?}, unexpected: {extra:?}"
        )));
    }
    let mut total = WerReport {
        substitutions: 0,
        deletions: 0,
        insertions: 0,
        ref_tokens: 0,
    };
    for (id, text) in &refs {
        let r = words(text);
        if r.is_empty() {
            return Err(CoreError::Data(format!("empty reference for utterance {id}")));
        }
        let h = words(&hyps[id]);
        let rep = wer(&r, &h)?;
        total.substitutions += rep.substitutions;
        total.deletions += rep.deletions;
        total.insertions += rep.insertions;
        total.ref_tokens += rep.ref_tokens;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn wer_hand_alignments() {
        let r = wer(&["a", "b", "c"], &["a", "b", "c"]).unwrap();
        assert_eq!(r.errors(), 0);
        assert_eq!(r.percent(), 0.0);

        let r = wer(&["a", "b", "c"], &["a", "c"]).unwrap();
        assert_eq!((r.substitutions, r.deletions, r.insertions), (0, 1, 0));
        assert!((r.percent() - 100.0 / 3.0).abs() < 1e-9);

        let r = wer(&["a"], &["b", "c"]).unwrap();
        assert_eq!((r.substitutions, r.deletions, r.insertions), (1, 0, 1));
        assert_eq!(r.percent(), 200.0);

        assert!(wer::<&str>(&[], &["a"]).is_err());
    }

    #[test]
    fn wer_tie_breaks_prefer_substitution_then_insertion() {
        let r = wer(&["a"], &["b"]).unwrap();
        assert_eq!((r.substitutions, r.deletions, r.insertions), (1, 0, 0));
        // swap needs two edits; the alignment takes substitutions
        let r = wer(&["a", "b"], &["b", "a"]).unwrap();
        assert_eq!((r.substitutions, r.deletions, r.insertions), (2, 0, 0));
        let r = wer(&["a", "b"], &["c"]).unwrap();
        assert_eq!(r.errors(), 2);
        assert_eq!(r.insertions, 0);
    }

    #[test]
    fn wer_swapping_sides_exchanges_deletions_and_insertions() {
        let mut rng = ChaCha12Rng::seed_from_u64(50);
        for _ in 0..100 {
            let n = rng.gen_range(1..=8);
            let m = rng.gen_range(1..=8);
            let a: Vec<u8> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let b: Vec<u8> = (0..m).map(|_| rng.gen_range(0..4)).collect();
            let fwd = wer(&a, &b).unwrap();
            let rev = wer(&b, &a).unwrap();
            assert_eq!(fwd.errors(), rev.errors());
            assert_eq!(fwd.substitutions, rev.substitutions);
            assert_eq!(fwd.deletions, rev.insertions);
            assert_eq!(fwd.insertions, rev.deletions);
        }
    }

    #[test]
    fn wer_is_invariant_under_relabeling() {
        let mut rng = ChaCha12Rng::seed_from_u64(51);
        for _ in 0..50 {
            let a: Vec<u8> = (0..rng.gen_range(1..=8)).map(|_| rng.gen_range(0..4)).collect();
            let b: Vec<u8> = (0..rng.gen_range(0..=8)).map(|_| rng.gen_range(0..4)).collect();
            let plain = wer(&a, &b).unwrap();
            let map = |x: &u8| ["kite", "quay", "moss", "fern"][*x as usize];
            let renamed = wer(
                &a.iter().map(map).collect::<Vec<_>>(),
                &b.iter().map(map).collect::<Vec<_>>(),
            )
            .unwrap();
            assert_eq!(plain, renamed);
        }
    }

    #[test]
    fn score_corpus_pools_error_counts() {
        let dir = tempfile::tempdir().unwrap();
        let refs = dir.path().join("refs.tsv");
        let hyps = dir.path().join("hyps.tsv");
        std::fs::write(&refs, "u1\tx y\nu2\tp q\n").unwrap();
        std::fs::write(&hyps, "u1\tx z\nu2\tp q\n").unwrap();
        let rep = score_corpus(&refs, &hyps).unwrap();
        assert_eq!(rep.errors(), 1);
        assert_eq!(rep.ref_tokens, 4);
        assert_eq!(rep.percent(), 25.0);

        // permuting the hypothesis file changes nothing
        std::fs::write(&hyps, "u2\tp q\nu1\tx z\n").unwrap();
        assert_eq!(score_corpus(&refs, &hyps).unwrap(), rep);
    }

    #[test]
    fn score_corpus_matches_hand_totals_on_three_utterances() {
        let dir = tempfile::tempdir().unwrap();
        let refs = dir.path().join("refs.tsv");
        let hyps = dir.path().join("hyps.tsv");
        // per-utterance: (S=1 D=0 I=0, N=3), (0,1,0, N=2), (0,0,2, N=1)
        std::fs::write(&refs, "a\tone two three\nb\tfour five\nc\tsix\n").unwrap();
        std::fs::write(&hyps, "a\tone too three\nb\tfour\nc\tsix seven eight\n").unwrap();
        let rep = score_corpus(&refs, &hyps).unwrap();
        assert_eq!(
            (rep.substitutions, rep.deletions, rep.insertions, rep.ref_tokens),
            (1, 1, 2, 6)
        );
        assert!((rep.percent() - 400.0 / 6.0).abs() < 1e-9);
    }

    #[test]
    fn score_corpus_reports_id_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let refs = dir.path().join("refs.tsv");
        let hyps = dir.path().join("hyps.tsv");
        std::fs::write(&refs, "u1\tx\nu2\ty\n").unwrap();
        std::fs::write(&hyps, "u1\tx\nu3\ty\n").unwrap();
        let err = score_corpus(&refs, &hyps).unwrap_err().to_string();
        assert!(err.contains("u2") && err.contains("u3"), "{err}");
    }

    #[test]
    fn nbest_hypotheses_use_rank_one_rows() {
        let dir = tempfile::tempdir().unwrap();
        let refs = dir.path().join("refs.tsv");
        let hyps = dir.path().join("nbest.tsv");
        std::fs::write(&refs, "u1\tx y\n").unwrap();
        std::fs::write(&hyps, "u1\t1\t-3.25\tx y\nu1\t2\t-4.5\tz z\n").unwrap();
        let rep = score_corpus(&refs, &hyps).unwrap();
        assert_eq!(rep.errors(), 0);
    }

    #[test]
    fn noiseless_single_frame_features_are_prototype_rows() {
        let mut spec = SyntheticDomainSpec::desk_default(Domain::Source, 7);
        spec.noise_sigma = 0.0;
        spec.frames_range = (1, 1);
        let corpus = gen_domain_corpus(&spec, 20, "train").unwrap();
        let protos = spec.prototypes();
        let alphabet = spec.alphabet.clone();
        for utt in corpus {
            assert_eq!(utt.frames, utt.transcript.chars().count());
            for (ch, row) in utt.transcript.chars().zip(utt.feats.chunks_exact(utt.dim)) {
                // nearest prototype recovers the character exactly
                let mut best = (f64::INFINITY, usize::MAX);
                for (c, proto) in protos.iter().enumerate() {
                    let d: f64 = proto
                        .iter()
                        .zip(row)
                        .map(|(p, &x)| (p - x as f64).powi(2))
                        .sum();
                    if d < best.0 {
                        best = (d, c);
                    }
                }
                assert_eq!(alphabet[best.1], ch);
            }
        }
    }

    #[test]
    fn generation_is_seed_deterministic_and_shares_prototypes() {
        let spec = SyntheticDomainSpec::desk_default(Domain::Target, 11);
        let a = gen_domain_corpus(&spec, 12, "train").unwrap();
        let b = gen_domain_corpus(&spec, 12, "train").unwrap();
        assert_eq!(a, b);
        let dev = gen_domain_corpus(&spec, 12, "dev").unwrap();
        assert_ne!(a[0].transcript, dev[0].transcript);

        let src = SyntheticDomainSpec::desk_default(Domain::Source, 11);
        for (p, q) in spec.prototypes().iter().zip(src.prototypes()) {
            for (x, y) in p.iter().zip(q) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn empirical_unigram_matches_stationary_distribution() {
        let spec = SyntheticDomainSpec::desk_default(Domain::Target, 3);
        let pi = stationary(&spec.transition);
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let corpus = gen_domain_corpus(&spec, 10_000, "train").unwrap();
        let mut counts = vec![0f64; spec.alphabet.len()];
        let mut total = 0f64;
        for utt in &corpus {
            for ch in utt.transcript.chars() {
                let idx = spec.alphabet.iter().position(|&a| a == ch).unwrap();
                counts[idx] += 1.0;
                total += 1.0;
            }
        }
        let tv: f64 = counts
            .iter()
            .zip(&pi)
            .map(|(c, p)| (c / total - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "total variation {tv}");
    }

    #[test]
    fn feature_file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let feat_path = dir.path().join("dev.feats");
        let manifest_path = dir.path().join("dev.tsv");
        let spec = SyntheticDomainSpec::desk_default(Domain::Source, 5);
        let corpus = gen_domain_corpus(&spec, 8, "dev").unwrap();
        save_feats(&feat_path, &corpus).unwrap();
        save_manifest(&manifest_path, &corpus).unwrap();
        let loaded = load_corpus(&feat_path, &manifest_path).unwrap();
        assert_eq!(loaded, corpus);

        // same seed, same bytes
        let again = dir.path().join("again.feats");
        save_feats(&again, &gen_domain_corpus(&spec, 8, "dev").unwrap()).unwrap();
        assert_eq!(
            std::fs::read(&feat_path).unwrap(),
            std::fs::read(&again).unwrap()
        );

        let mut bytes = std::fs::read(&feat_path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.feats");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(load_feats(&bad).is_err());
        let truncated = dir.path().join("short.feats");
        std::fs::write(&truncated, &std::fs::read(&feat_path).unwrap()[..40]).unwrap();
        assert!(load_feats(&truncated).is_err());
    }

    #[test]
    fn spec_validation_rejects_bad_chains() {
        let mut spec = SyntheticDomainSpec::desk_default(Domain::Source, 1);
        spec.transition[3][0] += 0.5;
        assert!(spec.validate().is_err());
        let mut spec = SyntheticDomainSpec::desk_default(Domain::Source, 1);
        spec.frames_range = (0, 2);
        assert!(spec.validate().is_err());
        let mut spec = SyntheticDomainSpec::desk_default(Domain::Source, 1);
        spec.len_range = (9, 3);
        assert!(spec.validate().is_err());
    }
}
