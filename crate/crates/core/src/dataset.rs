//! Behaviors, candidate label sets, the recording manifest, stratified
//! Monte-Carlo splits and mini-batching.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmenter::csv_err;
use crate::spectrogram::{Scale, SpectrogramImage};

/// The four behaviors; the discriminant is the output-head index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Behavior {
    /// Traveling.
    T = 0,
    /// Foraging.
    F = 1,
    /// Socializing.
    S = 2,
    /// Milling / resting.
    M = 3,
}

pub const N_BEHAVIORS: usize = 4;

impl Behavior {
    pub const ALL: [Behavior; N_BEHAVIORS] = [Behavior::T, Behavior::F, Behavior::S, Behavior::M];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Behavior> {
        Self::ALL.get(i).copied()
    }

    pub fn letter(self) -> char {
        match self {
            Behavior::T => 'T',
            Behavior::F => 'F',
            Behavior::S => 'S',
            Behavior::M => 'M',
        }
    }

    pub fn from_letter(c: char) -> Option<Behavior> {
        match c.to_ascii_uppercase() {
            'T' => Some(Behavior::T),
            'F' => Some(Behavior::F),
            'S' => Some(Behavior::S),
            'M' => Some(Behavior::M),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Behavior::T => "traveling",
            Behavior::F => "foraging",
            Behavior::S => "socializing",
            Behavior::M => "milling/resting",
        }
    }
}

/// Non-empty set of candidate behaviors, stored as a 4-bit mask (bit i = head i).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CandidateLabelSet(u8);

impl CandidateLabelSet {
    pub fn from_mask(mask: u8) -> Result<Self> {
        if mask == 0 || mask > 0b1111 {
            return Err(Error::invalid(format!("label mask {mask:#06b} is empty or out of range")));
        }
        Ok(Self(mask))
    }

    pub fn from_behaviors(bs: &[Behavior]) -> Result<Self> {
        Self::from_mask(bs.iter().fold(0u8, |m, b| m | (1 << b.index())))
    }

    pub fn singleton(b: Behavior) -> Self {
        Self(1 << b.index())
    }

    pub fn full() -> Self {
        Self(0b1111)
    }

    pub fn mask(self) -> u8 {
        self.0
    }

    pub fn contains(self, b: Behavior) -> bool {
        self.0 & (1 << b.index()) != 0
    }

    pub fn contains_index(self, i: usize) -> bool {
        i < N_BEHAVIORS && self.0 & (1 << i) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn iter(self) -> impl Iterator<Item = Behavior> {
        Behavior::ALL.into_iter().filter(move |b| self.contains(*b))
    }

    /// Letters in head order, e.g. `"TFM"`.
    pub fn letters(self) -> String {
        self.iter().map(Behavior::letter).collect()
    }

    /// Head-order membership as 0/1 weights.
    pub fn indicator(self) -> [bool; N_BEHAVIORS] {
        std::array::from_fn(|i| self.contains_index(i))
    }
}

impl fmt::Debug for CandidateLabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.iter().map(|b| b.letter().to_string()).collect::<Vec<_>>().join(","))
    }
}

impl fmt::Display for CandidateLabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for CandidateLabelSet {
    type Err = Error;

    /// Parse a letter string over `TFSM` (any order, case-insensitive).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::validation("empty label set"));
        }
        let mut mask = 0u8;
        for c in s.chars() {
            let b = Behavior::from_letter(c)
                .ok_or_else(|| Error::validation(format!("unknown behavior letter '{c}' in '{s}'")))?;
            mask |= 1 << b.index();
        }
        Ok(Self(mask))
    }
}

/// Segment counts per label combination in the reference corpus.
pub const REFERENCE_COUNTS: [(&str, u64); 6] = [
    ("T", 124),
    ("FS", 122),
    ("TS", 7),
    ("TF", 95),
    ("TFM", 112),
    ("TFSM", 58),
];

pub fn reference_counts() -> Vec<(CandidateLabelSet, u64)> {
    REFERENCE_COUNTS
        .iter()
        .map(|(l, n)| (l.parse().expect("static label"), *n))
        .collect()
}

/// One recording and the behaviors observed while it was made.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub source_id: String,
    pub path: PathBuf,
    pub label_set: CandidateLabelSet,
    /// Optional span CSV replacing automatic segmentation for this recording.
    pub spans: Option<PathBuf>,
}

impl ManifestEntry {
    /// Resolve relative paths against the manifest's directory.
    pub fn resolved(&self, base: &Path) -> ManifestEntry {
        let fix = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        ManifestEntry {
            path: fix(&self.path),
            spans: self.spans.as_deref().map(fix),
            ..self.clone()
        }
    }
}

/// Parse `source_id,path,labels[,spans]` rows (header required).
pub fn parse_manifest<R: Read>(r: R) -> Result<Vec<ManifestEntry>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(r);
    let headers: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let has_spans = match headers.iter().map(String::as_str).collect::<Vec<_>>()[..] {
        ["source_id", "path", "labels"] => false,
        ["source_id", "path", "labels", "spans"] => true,
        _ => {
            return Err(Error::validation(format!(
                "manifest header must be 'source_id,path,labels[,spans]', got '{}'",
                headers.join(",")
            )))
        }
    };
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row = i + 1;
        let field = |k: usize| rec.get(k).unwrap_or("").to_string();
        let source_id = field(0);
        if source_id.is_empty() {
            return Err(Error::validation(format!("manifest row {row}: empty source_id")));
        }
        if !seen.insert(source_id.clone()) {
            return Err(Error::validation(format!("manifest row {row}: duplicate source_id '{source_id}'")));
        }
        let path = field(1);
        if path.is_empty() {
            return Err(Error::validation(format!("manifest row {row}: empty path")));
        }
        let label_set = field(2)
            .parse()
            .map_err(|e| Error::validation(format!("manifest row {row} ('{source_id}'): {e}")))?;
        let spans = if has_spans {
            Some(field(3)).filter(|s| !s.is_empty()).map(PathBuf::from)
        } else {
            None
        };
        entries.push(ManifestEntry {
            source_id,
            path: PathBuf::from(path),
            label_set,
            spans,
        });
    }
    Ok(entries)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    parse_manifest(std::fs::File::open(path)?)
}

pub fn save_manifest<W: Write>(w: W, entries: &[ManifestEntry]) -> Result<()> {
    let with_spans = entries.iter().any(|e| e.spans.is_some());
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["source_id", "path", "labels"];
    if with_spans {
        header.push("spans");
    }
    out.write_record(&header).map_err(csv_err)?;
    for e in entries {
        let mut row = vec![
            e.source_id.clone(),
            e.path.to_string_lossy().into_owned(),
            e.label_set.letters(),
        ];
        if with_spans {
            row.push(e.spans.as_ref().map(|p| p.to_string_lossy().into_owned()).unwrap_or_default());
        }
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// A network input with its candidate labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInstance {
    pub id: String,
    pub image: SpectrogramImage,
    pub label_set: CandidateLabelSet,
}

impl LabeledInstance {
    pub fn new(id: impl Into<String>, image: SpectrogramImage, label_set: CandidateLabelSet) -> Result<Self> {
        if image.scale != Scale::Normalized {
            return Err(Error::invalid("instances hold normalized spectrogram images"));
        }
        Ok(Self {
            id: id.into(),
            image,
            label_set,
        })
    }
}

/// One train/test partition. Members are positions in the instance list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub repetition: usize,
    pub seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Test-set share of a stratum: round half up, but a stratum of two or more
/// keeps at least one member on each side.
pub fn stratum_test_count(n: usize, test_fraction: f64) -> usize {
    let raw = (n as f64 * test_fraction + 0.5 + 1e-9).floor() as usize;
    if n >= 2 {
        raw.clamp(1, n - 1)
    } else {
        raw.min(n)
    }
}

/// Stratify by exact label set, shuffle each stratum with a seeded PRNG and
/// send `stratum_test_count` members of each to the test side.
pub fn stratified_split(
    label_sets: &[CandidateLabelSet],
    test_fraction: f64,
    seed: u64,
    repetition: usize,
) -> Result<SplitPlan> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!("test_fraction {test_fraction} must lie in (0, 1)")));
    }
    let mut strata: BTreeMap<CandidateLabelSet, Vec<usize>> = BTreeMap::new();
    for (i, s) in label_sets.iter().enumerate() {
        strata.entry(*s).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut members) in strata {
        members.shuffle(&mut rng);
        let k = stratum_test_count(members.len(), test_fraction);
        test.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitPlan {
        repetition,
        seed,
        train,
        test,
    })
}

/// Shuffle `ids` and cut consecutive chunks of `batch_size`; the last batch may be short.
pub fn make_batches(ids: &[usize], batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(s: &str) -> CandidateLabelSet {
        s.parse().unwrap()
    }

    #[test]
    fn behavior_indices_are_fixed() {
        for (i, b) in Behavior::ALL.iter().enumerate() {
            assert_eq!(b.index(), i);
            assert_eq!(Behavior::from_index(i), Some(*b));
            assert_eq!(Behavior::from_letter(b.letter()), Some(*b));
        }
        assert_eq!(Behavior::from_index(4), None);
    }

    #[test]
    fn label_set_parsing() {
        assert_eq!(set("TF").iter().collect::<Vec<_>>(), vec![Behavior::T, Behavior::F]);
        assert_eq!(set("mft").letters(), "TFM");
        assert_eq!(set("TFSM"), CandidateLabelSet::full());
        assert!("X".parse::<CandidateLabelSet>().is_err());
        assert!("".parse::<CandidateLabelSet>().is_err());
        assert!(CandidateLabelSet::from_mask(0).is_err());
        assert_eq!(format!("{}", set("TS")), "{T,S}");
    }

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("source_id,path,labels\nrec1,audio/rec1.wav,TF\n".as_bytes()).unwrap();
        assert_eq!(m[0].label_set, set("TF"));
        assert_eq!(m[0].path, PathBuf::from("audio/rec1.wav"));
        assert!(parse_manifest("source_id,path,labels\nrec1,a.wav,X\n".as_bytes()).is_err());
        assert!(matches!(
            parse_manifest("source_id,path,labels\nrec1,a.wav,\n".as_bytes()),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            parse_manifest("source_id,path,labels\nr,a.wav,T\nr,b.wav,F\n".as_bytes()),
            Err(Error::Validation(_))
        ));
        assert!(parse_manifest("id,file\n".as_bytes()).is_err());
    }

    #[test]
    fn manifest_with_reference_combinations() {
        let mut text = String::from("source_id,path,labels,spans\n");
        for (i, (l, _)) in REFERENCE_COUNTS.iter().enumerate() {
            text.push_str(&format!("rec{i},r{i}.wav,{l},{}\n", if i % 2 == 0 { "s.csv" } else { "" }));
        }
        let m = parse_manifest(text.as_bytes()).unwrap();
        let distinct: HashSet<_> = m.iter().map(|e| e.label_set).collect();
        assert_eq!(distinct.len(), 6);
        assert_eq!(m[0].spans, Some(PathBuf::from("s.csv")));
        assert_eq!(m[1].spans, None);
        let mut buf = Vec::new();
        save_manifest(&mut buf, &m).unwrap();
        assert_eq!(parse_manifest(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn stratum_sizes_follow_rounding_rule() {
        assert_eq!(stratum_test_count(124, 0.2), 25);
        assert_eq!(stratum_test_count(7, 0.2), 1);
        assert_eq!(stratum_test_count(2, 0.2), 1);
        assert_eq!(stratum_test_count(2, 0.9), 1);
        assert_eq!(stratum_test_count(1, 0.2), 0);
        assert_eq!(stratum_test_count(5, 0.3), 2); // 1.5 rounds up
    }

    fn reference_sets() -> Vec<CandidateLabelSet> {
        reference_counts()
            .into_iter()
            .flat_map(|(s, n)| std::iter::repeat(s).take(n as usize))
            .collect()
    }

    #[test]
    fn split_of_reference_corpus() {
        let sets = reference_sets();
        let plan = stratified_split(&sets, 0.2, 11, 0).unwrap();
        let t_test = plan.test.iter().filter(|&&i| sets[i] == set("T")).count();
        assert_eq!(t_test, 25);
        let ts_test = plan.test.iter().filter(|&&i| sets[i] == set("TS")).count();
        assert_eq!(ts_test, 1);
        assert_eq!(plan.train.len() + plan.test.len(), 518);
        assert_eq!(stratified_split(&sets, 0.2, 11, 0).unwrap(), plan);
        assert_ne!(stratified_split(&sets, 0.2, 12, 1).unwrap().test, plan.test);
        assert!(stratified_split(&sets, 0.0, 1, 0).is_err());
        assert!(stratified_split(&sets, 1.0, 1, 0).is_err());
    }

    #[test]
    fn batching_examples() {
        let ids: Vec<usize> = (0..25).collect();
        let b = make_batches(&ids, 10, 3).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![10, 10, 5]);
        assert_eq!(make_batches(&ids, 1, 3).unwrap().len(), 25);
        assert!(make_batches(&ids, 0, 3).is_err());
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, ids);
    }

    proptest! {
        #[test]
        fn split_partitions_and_keeps_proportions(
            masks in proptest::collection::vec(1u8..16, 1..300),
            frac in 0.05f64..0.95,
            seed in any::<u64>(),
        ) {
            let sets: Vec<_> = masks.iter().map(|&m| CandidateLabelSet::from_mask(m).unwrap()).collect();
            let plan = stratified_split(&sets, frac, seed, 0).unwrap();
            let mut all = [plan.train.clone(), plan.test.clone()].concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..sets.len()).collect::<Vec<_>>());
            let mut strata: BTreeMap<CandidateLabelSet, (usize, usize)> = BTreeMap::new();
            for &i in &plan.test { strata.entry(sets[i]).or_default().1 += 1; }
            for &i in &plan.train { strata.entry(sets[i]).or_default().0 += 1; }
            for (_, (tr, te)) in strata {
                let n = tr + te;
                let target = (n as f64 * frac + 0.5).floor() as i64;
                prop_assert!((te as i64 - target).abs() <= 1);
                if n >= 2 { prop_assert!(tr >= 1 && te >= 1); }
            }
        }

        #[test]
        fn letters_round_trip(mask in 1u8..16) {
            let s = CandidateLabelSet::from_mask(mask).unwrap();
            prop_assert_eq!(s.letters().parse::<CandidateLabelSet>().unwrap(), s);
        }
    }
}
