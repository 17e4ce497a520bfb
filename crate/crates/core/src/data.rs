//! Synthetic image/report corpus with machine-checkable findings.
//!
//! Each image renders zero or more bright shapes (disk, horizontal bar,
//! vertical bar) at quadrant centers on a dark background, and its report is
//! produced by a fixed template grammar. Because the grammar is invertible,
//! any generated report can be parsed back into a finding set and compared
//! against the ground truth, which is what makes hallucination measurable.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{TokenSequence, Vocabulary, BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::vision::ImageSample;

/// The fixed instruction prepended to every generation request.
pub const SEED_PROMPT: &str = "generate report :";

pub const BACKGROUND: f64 = 0.1;
pub const FOREGROUND: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FindingType {
    Disk,
    HorizontalBar,
    VerticalBar,
}

impl FindingType {
    pub const ALL: [FindingType; 3] = [
        FindingType::Disk,
        FindingType::HorizontalBar,
        FindingType::VerticalBar,
    ];

    pub fn words(&self) -> &'static str {
        match self {
            FindingType::Disk => "disk",
            FindingType::HorizontalBar => "horizontal bar",
            FindingType::VerticalBar => "vertical bar",
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            FindingType::Disk => "disk",
            FindingType::HorizontalBar => "horizontal-bar",
            FindingType::VerticalBar => "vertical-bar",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.tag() == tag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Quadrant {
    UpperLeft,
    UpperRight,
    LowerLeft,
    LowerRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::UpperLeft,
        Quadrant::UpperRight,
        Quadrant::LowerLeft,
        Quadrant::LowerRight,
    ];

    pub fn words(&self) -> &'static str {
        match self {
            Quadrant::UpperLeft => "upper left",
            Quadrant::UpperRight => "upper right",
            Quadrant::LowerLeft => "lower left",
            Quadrant::LowerRight => "lower right",
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Quadrant::UpperLeft => "upper-left",
            Quadrant::UpperRight => "upper-right",
            Quadrant::LowerLeft => "lower-left",
            Quadrant::LowerRight => "lower-right",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|q| q.tag() == tag)
    }
}

pub type Finding = (FindingType, Quadrant);

/// One paired sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: ImageSample,
    pub report: String,
    pub findings: BTreeSet<Finding>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_examples: usize,
    pub height: usize,
    pub width: usize,
    pub max_findings: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_examples: 200,
            height: 16,
            width: 16,
            max_findings: 2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_examples == 0 {
            return Err(Error::Config("data: n_examples must be >= 1".into()));
        }
        if self.height % 2 != 0 || self.width % 2 != 0 || self.height < 8 || self.width < 8 {
            return Err(Error::Config(
                "data: image sides must be even and at least 8".into(),
            ));
        }
        Ok(())
    }
}

// ── Rendering ───────────────────────────────────────────────────────────

fn quadrant_center(q: Quadrant, h: usize, w: usize) -> (usize, usize) {
    let (qh, qw) = (h / 2, w / 2);
    match q {
        Quadrant::UpperLeft => (qh / 2, qw / 2),
        Quadrant::UpperRight => (qh / 2, qw + qw / 2),
        Quadrant::LowerLeft => (qh + qh / 2, qw / 2),
        Quadrant::LowerRight => (qh + qh / 2, qw + qw / 2),
    }
}

fn render(findings: &BTreeSet<Finding>, h: usize, w: usize) -> ImageSample {
    let mut img = ImageSample::constant(h, w, 1, BACKGROUND);
    let unit = (h / 2).min(w / 2);
    let radius = unit as f64 / 3.0;
    let half_len = (3 * unit / 4) / 2; // bar half-length
    let half_thick = (unit / 4).max(1) / 2; // bar half-thickness

    for &(ty, q) in findings {
        let (cy, cx) = quadrant_center(q, h, w);
        match ty {
            FindingType::Disk => {
                for y in 0..h {
                    for x in 0..w {
                        let dy = y as f64 - cy as f64;
                        let dx = x as f64 - cx as f64;
                        if dy * dy + dx * dx <= radius * radius {
                            img.pixels[y * w + x] = FOREGROUND;
                        }
                    }
                }
            }
            FindingType::HorizontalBar => {
                for y in cy.saturating_sub(half_thick)..=(cy + half_thick).min(h - 1) {
                    for x in cx.saturating_sub(half_len)..=(cx + half_len).min(w - 1) {
                        img.pixels[y * w + x] = FOREGROUND;
                    }
                }
            }
            FindingType::VerticalBar => {
                for y in cy.saturating_sub(half_len)..=(cy + half_len).min(h - 1) {
                    for x in cx.saturating_sub(half_thick)..=(cx + half_thick).min(w - 1) {
                        img.pixels[y * w + x] = FOREGROUND;
                    }
                }
            }
        }
    }
    img
}

// ── Template grammar ────────────────────────────────────────────────────

/// Render a finding set as report text; the inverse of [`parse_findings`].
pub fn report_text(findings: &BTreeSet<Finding>) -> String {
    let mut out = String::from("findings :");
    if findings.is_empty() {
        out.push_str(" no acute abnormality .");
        return out;
    }
    for &(ty, q) in findings {
        out.push(' ');
        out.push_str(ty.words());
        out.push_str(" in ");
        out.push_str(q.words());
        out.push_str(" quadrant .");
    }
    out
}

/// Extract every well-formed finding clause from arbitrary text. Malformed
/// fragments are skipped, so this is safe on model output.
pub fn parse_findings(text: &str) -> BTreeSet<Finding> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let mut found = BTreeSet::new();
    let mut i = 0;
    while i < tokens.len() {
        if let Some((finding, used)) = match_clause(&tokens[i..]) {
            found.insert(finding);
            i += used;
        } else {
            i += 1;
        }
    }
    found
}

fn match_clause(tokens: &[&str]) -> Option<(Finding, usize)> {
    let (ty, mut used) = match tokens {
        ["disk", ..] => (FindingType::Disk, 1),
        ["horizontal", "bar", ..] => (FindingType::HorizontalBar, 2),
        ["vertical", "bar", ..] => (FindingType::VerticalBar, 2),
        _ => return None,
    };
    let rest = &tokens[used..];
    if rest.first() != Some(&"in") {
        return None;
    }
    used += 1;
    let rest = &tokens[used..];
    let q = match rest {
        ["upper", "left", ..] => Quadrant::UpperLeft,
        ["upper", "right", ..] => Quadrant::UpperRight,
        ["lower", "left", ..] => Quadrant::LowerLeft,
        ["lower", "right", ..] => Quadrant::LowerRight,
        _ => return None,
    };
    used += 2;
    let rest = &tokens[used..];
    if rest.first() != Some(&"quadrant") || rest.get(1) != Some(&".") {
        return None;
    }
    Some(((ty, q), used + 2))
}

// ── Corpus generation ───────────────────────────────────────────────────

/// Deterministically generate a corpus from the spec.
pub fn generate_corpus(spec: &SyntheticSpec) -> Result<Vec<Example>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut all_findings: Vec<Finding> = Vec::new();
    for ty in FindingType::ALL {
        for q in Quadrant::ALL {
            all_findings.push((ty, q));
        }
    }

    let mut out = Vec::with_capacity(spec.n_examples);
    for _ in 0..spec.n_examples {
        let count = rng.gen_range(0..=spec.max_findings);
        let mut pool = all_findings.clone();
        pool.shuffle(&mut rng);
        let findings: BTreeSet<Finding> = pool.into_iter().take(count).collect();
        let image = render(&findings, spec.height, spec.width);
        let report = report_text(&findings);
        out.push(Example {
            image,
            report,
            findings,
        });
    }
    Ok(out)
}

/// Vocabulary over the corpus reports plus the seed prompt, so prompt tokens
/// are never UNK.
pub fn build_vocab(corpus: &[Example]) -> Vocabulary {
    let texts = std::iter::once(SEED_PROMPT).chain(corpus.iter().map(|e| e.report.as_str()));
    Vocabulary::from_texts(texts)
}

// ── Tokenization ────────────────────────────────────────────────────────

/// Whitespace tokenize with BOS prepended and EOS appended.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let mut ids = vec![BOS];
    ids.extend(text.split_whitespace().map(|w| vocab.id(w)));
    ids.push(EOS);
    TokenSequence::new(ids, vocab.size()).expect("tokenizer produces valid sequences")
}

/// Strip specials and join tokens with spaces.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> String {
    let words: Vec<&str> = seq
        .ids()
        .iter()
        .filter(|&&id| id != PAD && id != BOS && id != EOS)
        .map(|&id| if id == UNK { "<unk>" } else { vocab.token(id) })
        .collect();
    words.join(" ")
}

/// Token ids of the seed prompt, without the trailing EOS.
pub fn prompt_ids(vocab: &Vocabulary) -> Vec<usize> {
    let seq = tokenize(SEED_PROMPT, vocab);
    let ids = seq.ids();
    ids[..ids.len() - 1].to_vec()
}

// ── File I/O ────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ExampleRow {
    image: Vec<Vec<f64>>,
    report: String,
    findings: Vec<(String, String)>,
}

/// Write a corpus as JSON Lines (single-channel images only).
pub fn save_corpus(path: impl AsRef<Path>, corpus: &[Example]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for example in corpus {
        let img = &example.image;
        if img.channels != 1 {
            return Err(Error::invalid(
                "save_corpus",
                "only single-channel images are serializable",
            ));
        }
        let image: Vec<Vec<f64>> = (0..img.height)
            .map(|y| img.pixels[y * img.width..(y + 1) * img.width].to_vec())
            .collect();
        let row = ExampleRow {
            image,
            report: example.report.clone(),
            findings: example
                .findings
                .iter()
                .map(|(t, q)| (t.tag().to_string(), q.tag().to_string()))
                .collect(),
        };
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn line_err(path: &Path, line: usize, msg: impl fmt::Display) -> Error {
    Error::CorpusLine {
        path: path.display().to_string(),
        line,
        msg: msg.to_string(),
    }
}

/// Read a JSONL corpus, reporting the offending line on any malformed entry.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut corpus = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            return Err(line_err(path, lineno, "empty line"));
        }
        let row: ExampleRow =
            serde_json::from_str(&line).map_err(|e| line_err(path, lineno, e))?;
        let height = row.image.len();
        if height == 0 {
            return Err(line_err(path, lineno, "empty image"));
        }
        let width = row.image[0].len();
        for (y, r) in row.image.iter().enumerate() {
            if r.len() != width {
                return Err(line_err(
                    path,
                    lineno,
                    format!("row {y} has width {} but row 0 has {width}", r.len()),
                ));
            }
        }
        let pixels: Vec<f64> = row.image.into_iter().flatten().collect();
        let image = ImageSample::new(height, width, 1, pixels)
            .map_err(|e| line_err(path, lineno, e))?;
        let mut findings = BTreeSet::new();
        for (t, q) in &row.findings {
            let ty = FindingType::from_tag(t)
                .ok_or_else(|| line_err(path, lineno, format!("unknown finding type {t:?}")))?;
            let qd = Quadrant::from_tag(q)
                .ok_or_else(|| line_err(path, lineno, format!("unknown quadrant {q:?}")))?;
            findings.insert((ty, qd));
        }
        corpus.push(Example {
            image,
            report: row.report,
            findings,
        });
    }
    if corpus.is_empty() {
        return Err(line_err(path, 0, "corpus file has no lines"));
    }
    Ok(corpus)
}

// ── Splits ──────────────────────────────────────────────────────────────

/// Disjoint, covering train/val/test index lists.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// 70/10/20 split of `n` indices, shuffled by seed.
    pub fn by_ratio(n: usize, seed: u64) -> Split {
        let train = n * 7 / 10;
        let val = n / 10;
        Split::by_counts(n, train, val, n - train - val, seed)
            .expect("ratio split always covers")
    }

    /// Explicit counts; must sum to `n`.
    pub fn by_counts(n: usize, train: usize, val: usize, test: usize, seed: u64) -> Result<Split> {
        if train + val + test != n {
            return Err(Error::Config(format!(
                "split counts {train}+{val}+{test} != {n}"
            )));
        }
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Split {
            train: indices[..train].to_vec(),
            val: indices[train..train + val].to_vec(),
            test: indices[train + val..].to_vec(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Split> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_findings_report() {
        let report = report_text(&BTreeSet::new());
        assert_eq!(report, "findings : no acute abnormality .");
        assert!(parse_findings(&report).is_empty());
    }

    #[test]
    fn disk_upper_left_brightens_only_that_quadrant() {
        let findings: BTreeSet<Finding> =
            [(FindingType::Disk, Quadrant::UpperLeft)].into_iter().collect();
        let img = render(&findings, 16, 16);
        let mut bright = 0;
        for y in 0..16 {
            for x in 0..16 {
                if img.pixel(y, x, 0) > BACKGROUND {
                    assert!(y < 8 && x < 8, "bright pixel outside upper-left at ({y},{x})");
                    bright += 1;
                }
            }
        }
        assert!(bright > 0);
    }

    #[test]
    fn report_round_trips_through_parser() {
        let spec = SyntheticSpec {
            n_examples: 1000,
            ..SyntheticSpec::default()
        };
        for example in generate_corpus(&spec).unwrap() {
            assert_eq!(parse_findings(&example.report), example.findings);
        }
    }

    #[test]
    fn corpus_generation_is_pure() {
        let spec = SyntheticSpec {
            n_examples: 20,
            seed: 9,
            ..SyntheticSpec::default()
        };
        assert_eq!(generate_corpus(&spec).unwrap(), generate_corpus(&spec).unwrap());
    }

    #[test]
    fn vocabulary_fits_sixty_four_entries() {
        let spec = SyntheticSpec {
            n_examples: 300,
            ..SyntheticSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let vocab = build_vocab(&corpus);
        assert!(vocab.size() <= 64, "vocab size {}", vocab.size());
        // the seed prompt must tokenize without UNK
        for &id in &prompt_ids(&vocab) {
            assert_ne!(id, UNK);
        }
    }

    #[test]
    fn tokenize_wraps_with_bos_eos() {
        let corpus = generate_corpus(&SyntheticSpec::default()).unwrap();
        let vocab = build_vocab(&corpus);
        let seq = tokenize("findings :", &vocab);
        assert_eq!(
            seq.ids(),
            &[BOS, vocab.id("findings"), vocab.id(":"), EOS]
        );
    }

    #[test]
    fn detokenize_round_trips_normalized_text() {
        let corpus = generate_corpus(&SyntheticSpec::default()).unwrap();
        let vocab = build_vocab(&corpus);
        let text = "findings : disk in upper left quadrant .";
        assert_eq!(detokenize(&tokenize(text, &vocab), &vocab), text);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let corpus = generate_corpus(&SyntheticSpec::default()).unwrap();
        let vocab = build_vocab(&corpus);
        let seq = tokenize("zzz", &vocab);
        assert_eq!(seq.ids(), &[BOS, UNK, EOS]);
    }

    #[test]
    fn corpus_file_round_trip() {
        let dir = std::env::temp_dir().join("serpent-data-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corpus.jsonl");
        let spec = SyntheticSpec {
            n_examples: 100,
            seed: 4,
            ..SyntheticSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        save_corpus(&path, &corpus).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(corpus, loaded);
    }

    #[test]
    fn saved_corpus_bytes_are_reproducible() {
        let dir = std::env::temp_dir().join("serpent-data-test");
        std::fs::create_dir_all(&dir).unwrap();
        let (p1, p2) = (dir.join("a.jsonl"), dir.join("b.jsonl"));
        let spec = SyntheticSpec {
            n_examples: 30,
            seed: 12,
            ..SyntheticSpec::default()
        };
        save_corpus(&p1, &generate_corpus(&spec).unwrap()).unwrap();
        save_corpus(&p2, &generate_corpus(&spec).unwrap()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn malformed_line_is_reported_with_its_number() {
        let dir = std::env::temp_dir().join("serpent-data-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.jsonl");
        let spec = SyntheticSpec {
            n_examples: 8,
            height: 8,
            width: 8,
            ..SyntheticSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        save_corpus(&path, &corpus).unwrap();
        let mut lines: Vec<String> = std::fs::read_to_string(&path)
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        // corrupt line 7: drop a pixel from the first image row
        lines[6] = lines[6].replacen("0.1,", "", 1);
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        let err = load_corpus(&path).unwrap_err().to_string();
        assert!(err.contains("line 7"), "{err}");
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = std::env::temp_dir().join("serpent-data-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_corpus(&path).is_err());
    }

    #[test]
    fn splits_are_disjoint_covering_and_reproducible() {
        let s1 = Split::by_ratio(100, 7);
        let s2 = Split::by_ratio(100, 7);
        assert_eq!(s1, s2);
        assert_eq!(s1.train.len(), 70);
        assert_eq!(s1.val.len(), 10);
        assert_eq!(s1.test.len(), 20);
        let mut all: Vec<usize> = s1
            .train
            .iter()
            .chain(&s1.val)
            .chain(&s1.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn split_counts_must_cover() {
        assert!(Split::by_counts(10, 5, 2, 2, 0).is_err());
        assert!(Split::by_counts(720, 500, 70, 150, 0).is_ok());
    }
}
