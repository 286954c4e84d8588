//! Manifests, unit files, fixed-length segmentation, patient splits and the
//! synthetic Markov-chain benchmark.
//!
//! Manifest: one JSON object per line with exactly the keys `patient_id`,
//! `path`, `label`, `disease`, `language`, `split`. Relative paths resolve
//! against the manifest's directory; `.ulmf` paths are feature files, anything
//! else is a unit file.
//!
//! Unit file: a `#k=<K> seg=<len>` header line, then one segment per line as
//! space-separated integers.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::featio::read_features;
use crate::prompts::TaskSpec;
use crate::quantizer::{dedup_units, encode, Codebook, UnitSequence};
use crate::{Error, Exec, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub path: PathBuf,
    pub label: String,
    pub disease: String,
    pub language: String,
    pub split: Split,
}

const MANIFEST_FIELDS: [&str; 6] = ["patient_id", "path", "label", "disease", "language", "split"];

/// Parses manifest text; relative paths are joined onto `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |msg: String| Error::Manifest { line: line_no, msg };
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| err(format!("invalid record: {e}")))?;
        let obj = value.as_object().ok_or_else(|| err("record is not an object".into()))?;
        if let Some(extra) = obj.keys().find(|k| !MANIFEST_FIELDS.contains(&k.as_str())) {
            return Err(err(format!("unknown field `{extra}`")));
        }
        let field = |name: &str| -> Result<String> {
            match obj.get(name) {
                Some(serde_json::Value::String(s)) => Ok(s.clone()),
                Some(_) => Err(err(format!("field `{name}` must be a string"))),
                None => Err(err(format!("missing field `{name}`"))),
            }
        };
        let patient_id = field("patient_id")?;
        let raw_path = field("path")?;
        let label = field("label")?;
        let disease = field("disease")?;
        let language = field("language")?;
        let split_s = field("split")?;
        let split = Split::parse(&split_s).ok_or_else(|| err(format!("unknown split `{split_s}`")))?;
        let path = base.join(&raw_path);
        if !path.is_file() {
            return Err(err(format!("unreadable file {}", path.display())));
        }
        if !seen.insert((patient_id.clone(), raw_path.clone())) {
            return Err(err(format!("duplicate entry for patient {patient_id} and {raw_path}")));
        }
        out.push(ManifestEntry {
            patient_id,
            path,
            label,
            disease,
            language,
            split,
        });
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

pub fn manifest_text(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
        out.push('\n');
    }
    out
}

pub fn write_unit_file(path: &Path, k: usize, segment_units: usize, segments: &[UnitSequence]) -> Result<()> {
    let mut s = format!("#k={k} seg={segment_units}\n");
    for seg in segments {
        let mut first = true;
        for u in &seg.units {
            if !first {
                s.push(' ');
            }
            write!(s, "{u}").expect("writing to a String");
            first = false;
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Returns `(k, seg, lines)` of a unit file.
pub fn read_unit_file(path: &Path) -> Result<(usize, usize, Vec<Vec<usize>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let bad = |m: String| Error::Invalid(format!("{}: {m}", path.display()));
    let mut k = None;
    let mut seg = None;
    for tok in header.trim_start_matches('#').split_whitespace() {
        match tok.split_once('=') {
            Some(("k", v)) => k = v.parse().ok(),
            Some(("seg", v)) => seg = v.parse().ok(),
            _ => {}
        }
    }
    let (Some(k), Some(seg)) = (k, seg) else {
        return Err(bad(format!("bad unit-file header {header:?}")));
    };
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let units = line
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
        if let Some(&u) = units.iter().find(|&&u| u >= k) {
            return Err(bad(format!("line {}: unit {u} >= k={k}", i + 2)));
        }
        out.push(units);
    }
    Ok((k, seg, out))
}

/// Non-overlapping windows of exactly `segment_units`; the remainder is dropped.
/// Segment indices continue from `units.segment_index`.
pub fn segment_patient(units: &UnitSequence, segment_units: usize) -> Result<Vec<UnitSequence>> {
    if segment_units == 0 {
        return Err(Error::Config("segment_units must be >= 1".into()));
    }
    if units.len() < segment_units {
        log::warn!(
            "patient {}: recording of {} units is shorter than one {}-unit segment",
            units.patient_id,
            units.len(),
            segment_units
        );
    }
    Ok(units
        .units
        .chunks_exact(segment_units)
        .enumerate()
        .map(|(i, c)| UnitSequence::new(c.to_vec(), units.patient_id.clone(), units.segment_index + i))
        .collect())
}

/// Shuffles patients with `seed` and partitions them by `ratios`
/// (train, val, test).
pub fn split_by_patient(patients: &[String], ratios: [f64; 3], seed: u64) -> Result<BTreeMap<String, Split>> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut unique: Vec<String> = patients.to_vec();
    unique.sort();
    unique.dedup();
    let n = unique.len();
    let wanted = ratios.iter().filter(|r| **r > 0.0).count();
    if n < wanted {
        return Err(Error::Invalid(format!("{n} patients cannot fill {wanted} splits")));
    }
    let mut counts: Vec<usize> = ratios.iter().map(|r| (r * n as f64).floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = ratios[a] * n as f64 - counts[a] as f64;
        let fb = ratios[b] * n as f64 - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    for i in 0..3 {
        if ratios[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).expect("three splits");
            counts[donor] -= 1;
            counts[i] = 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    let mut out = BTreeMap::new();
    let mut it = unique.into_iter();
    for (split, &c) in Split::ALL.iter().zip(&counts) {
        for p in it.by_ref().take(c) {
            out.insert(p, *split);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub units: UnitSequence,
    /// Index into the task's class set.
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientInfo {
    pub label: usize,
    pub split: Split,
    /// Indices into [`SegmentedDataset::segments`].
    pub segments: Vec<usize>,
}

/// Labeled segments of one task with a patient index.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentedDataset {
    pub task: TaskSpec,
    pub segments: Vec<Segment>,
    pub patients: BTreeMap<String, PatientInfo>,
}

impl SegmentedDataset {
    pub fn empty(task: TaskSpec) -> Self {
        Self {
            task,
            segments: Vec::new(),
            patients: BTreeMap::new(),
        }
    }

    /// Appends a patient's segments.
    pub fn push_patient(&mut self, patient_id: &str, label: usize, split: Split, segments: Vec<UnitSequence>) {
        let info = self
            .patients
            .entry(patient_id.to_string())
            .or_insert_with(|| PatientInfo {
                label,
                split,
                segments: Vec::new(),
            });
        for s in segments {
            info.segments.push(self.segments.len());
            self.segments.push(Segment { units: s, label });
        }
    }

    /// Patients (and their segments) assigned to `split`.
    pub fn subset(&self, split: Split) -> SegmentedDataset {
        let mut out = SegmentedDataset::empty(self.task.clone());
        for (pid, info) in &self.patients {
            if info.split == split {
                let segs = info.segments.iter().map(|&i| self.segments[i].units.clone()).collect();
                out.push_patient(pid, info.label, split, segs);
            }
        }
        out
    }

    pub fn max_unit(&self) -> Option<usize> {
        self.segments.iter().flat_map(|s| s.units.units.iter().copied()).max()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.label).collect()
    }
}

/// Groups entries into tasks keyed by `(disease, language)` in order of first
/// appearance. Classes follow first appearance unless `classes` names an
/// explicit order for the task id.
pub fn group_tasks(
    entries: &[ManifestEntry],
    classes: &BTreeMap<String, Vec<String>>,
) -> Result<Vec<(TaskSpec, Vec<ManifestEntry>)>> {
    let mut out: Vec<(TaskSpec, Vec<ManifestEntry>)> = Vec::new();
    for e in entries {
        let pos = out
            .iter()
            .position(|(t, _)| t.disease == e.disease && t.language == e.language);
        let idx = match pos {
            Some(i) => i,
            None => {
                out.push((
                    TaskSpec {
                        disease: e.disease.clone(),
                        language: e.language.clone(),
                        classes: Vec::new(),
                    },
                    Vec::new(),
                ));
                out.len() - 1
            }
        };
        let (task, list) = &mut out[idx];
        if !task.classes.contains(&e.label) {
            task.classes.push(e.label.clone());
        }
        list.push(e.clone());
    }
    for (task, _) in out.iter_mut() {
        if let Some(order) = classes.get(&task.id()) {
            if let Some(missing) = task.classes.iter().find(|c| !order.contains(c)) {
                return Err(Error::Config(format!("task {}: label {missing} not in configured classes", task.id())));
            }
            task.classes = order.clone();
        }
        task.validate()?;
    }
    Ok(out)
}

/// Options for turning manifest entries into segments.
#[derive(Clone, Copy, Debug)]
pub struct SegmentOptions<'a> {
    pub segment_units: usize,
    pub dedup: bool,
    pub codebook: Option<&'a Codebook>,
    pub exec: Exec,
}

/// Loads, encodes and segments every entry of one task.
pub fn build_dataset(task: &TaskSpec, entries: &[ManifestEntry], opts: SegmentOptions<'_>) -> Result<SegmentedDataset> {
    let mut ds = SegmentedDataset::empty(task.clone());
    let mut next_index: BTreeMap<String, usize> = BTreeMap::new();
    for e in entries {
        let label = task
            .class_index(&e.label)
            .ok_or_else(|| Error::Invalid(format!("label {} not in task {}", e.label, task.id())))?;
        let recordings: Vec<Vec<usize>> = if e.path.extension().is_some_and(|x| x == "ulmf") {
            let cb = opts
                .codebook
                .ok_or_else(|| Error::Config(format!("{} is a feature file; a codebook is required", e.path.display())))?;
            let m = read_features(&e.path)?;
            vec![encode(&m, cb, &e.patient_id, opts.exec)?.units]
        } else {
            read_unit_file(&e.path)?.2
        };
        let start = next_index.entry(e.patient_id.clone()).or_insert(0);
        let mut segs = Vec::new();
        for rec in recordings {
            let seq = UnitSequence::new(rec, e.patient_id.clone(), *start);
            let pieces = segment_patient(&seq, opts.segment_units)?;
            *start += pieces.len();
            segs.extend(pieces);
        }
        if opts.dedup {
            segs = segs.iter().map(dedup_units).collect();
        }
        ds.push_patient(&e.patient_id, label, e.split, segs);
    }
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_patients_per_class: usize,
    pub segments_per_patient: usize,
    pub n_classes: usize,
    pub k: usize,
    pub segment_units: usize,
    /// Probability that a segment is drawn from the shared background chain.
    pub noise: f64,
    /// Gamma shape of the transition-row draws; small values give sparse rows.
    pub concentration: f64,
    pub split_ratios: [f64; 3],
    pub disease: String,
    pub language: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients_per_class: 40,
            segments_per_patient: 10,
            n_classes: 2,
            k: 32,
            segment_units: 250,
            noise: 0.2,
            concentration: 0.2,
            split_ratios: [0.6, 0.2, 0.2],
            disease: "SYN".into(),
            language: "xx".into(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.noise) {
            return bad("noise must be in [0, 1]");
        }
        if self.k < 2 {
            return bad("k must be >= 2");
        }
        if self.n_classes < 2 {
            return bad("n_classes must be >= 2");
        }
        if self.n_patients_per_class == 0 || self.segments_per_patient == 0 || self.segment_units == 0 {
            return bad("patients, segments and segment_units must be >= 1");
        }
        if !(self.concentration > 0.0) {
            return bad("concentration must be > 0");
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        if self.n_classes == 2 {
            vec!["neg".into(), "pos".into()]
        } else {
            (0..self.n_classes).map(|c| format!("c{c}")).collect()
        }
    }

    pub fn task(&self) -> TaskSpec {
        TaskSpec {
            disease: self.disease.clone(),
            language: self.language.clone(),
            classes: self.class_names(),
        }
    }
}

/// Generated benchmark: the dataset, which segments came from the background
/// chain, and manifest entries with paths relative to the output directory.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub config: SynthConfig,
    pub dataset: SegmentedDataset,
    pub background: Vec<bool>,
    pub entries: Vec<ManifestEntry>,
}

/// Row-stochastic `k × k` matrix with Gamma-distributed, normalized rows.
fn random_chain(k: usize, shape: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let gamma = Gamma::new(shape, 1.0).expect("positive shape");
    (0..k)
        .map(|_| {
            let mut row: Vec<f64> = (0..k).map(|_| gamma.sample(rng) + 1e-12).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            row
        })
        .collect()
}

fn sample_chain(chain: &[Vec<f64>], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = chain.len();
    let mut state = rng.random_range(0..k);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(state);
        let r: f64 = rng.random();
        let row = &chain[state];
        let mut acc = 0.0;
        let mut next = k - 1;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if r < acc {
                next = j;
                break;
            }
        }
        state = next;
    }
    out
}

/// Class-conditional Markov-chain unit segments with background contamination.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let class_chains: Vec<_> = (0..cfg.n_classes)
        .map(|_| random_chain(cfg.k, cfg.concentration, &mut rng))
        .collect();
    let background_chain = random_chain(cfg.k, cfg.concentration, &mut rng);

    let task = cfg.task();
    let names = cfg.class_names();
    let patients: Vec<(String, usize)> = (0..cfg.n_classes)
        .flat_map(|c| (0..cfg.n_patients_per_class).map(move |i| (format!("syn-{c}-{i:03}"), c)))
        .collect();
    let ids: Vec<String> = patients.iter().map(|p| p.0.clone()).collect();
    let splits = split_by_patient(&ids, cfg.split_ratios, cfg.seed.wrapping_add(1))?;

    let mut ds = SegmentedDataset::empty(task);
    let mut background = Vec::new();
    let mut entries = Vec::new();
    for (pid, class) in &patients {
        let mut segs = Vec::with_capacity(cfg.segments_per_patient);
        for j in 0..cfg.segments_per_patient {
            let bg = rng.random::<f64>() < cfg.noise;
            let chain = if bg { &background_chain } else { &class_chains[*class] };
            segs.push(UnitSequence::new(sample_chain(chain, cfg.segment_units, &mut rng), pid.clone(), j));
            background.push(bg);
        }
        let split = splits[pid];
        ds.push_patient(pid, *class, split, segs);
        entries.push(ManifestEntry {
            patient_id: pid.clone(),
            path: PathBuf::from(format!("units/{pid}.units")),
            label: names[*class].clone(),
            disease: cfg.disease.clone(),
            language: cfg.language.clone(),
            split,
        });
    }
    Ok(SynthData {
        config: cfg.clone(),
        dataset: ds,
        background,
        entries,
    })
}

/// Writes `manifest.jsonl` and `units/<patient>.units` under `dir`; returns the
/// manifest path.
pub fn write_synth(data: &SynthData, dir: &Path) -> Result<PathBuf> {
    let units_dir = dir.join("units");
    std::fs::create_dir_all(&units_dir).map_err(|e| Error::io(&units_dir, e))?;
    for e in &data.entries {
        let info = &data.dataset.patients[&e.patient_id];
        let segs: Vec<UnitSequence> = info
            .segments
            .iter()
            .map(|&i| data.dataset.segments[i].units.clone())
            .collect();
        write_unit_file(&dir.join(&e.path), data.config.k, data.config.segment_units, &segs)?;
    }
    let manifest = dir.join("manifest.jsonl");
    std::fs::write(&manifest, manifest_text(&data.entries)).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(n: usize) -> UnitSequence {
        UnitSequence::new((0..n).map(|i| i % 7).collect(), "p", 0)
    }

    #[test]
    fn segmentation_examples() {
        assert_eq!(segment_patient(&seq(1000), 250).unwrap().len(), 4);
        let s = segment_patient(&seq(999), 250).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.iter().map(|x| x.segment_index).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(segment_patient(&seq(100), 250).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn segmentation_conserves_length(n in 0usize..2000, len in 1usize..300) {
            let s = seq(n);
            let parts = segment_patient(&s, len).unwrap();
            let covered: usize = parts.iter().map(|p| p.len()).sum();
            prop_assert_eq!(covered + n % len, n);
            let joined: Vec<usize> = parts.iter().flat_map(|p| p.units.clone()).collect();
            prop_assert_eq!(&joined[..], &s.units[..covered]);
            prop_assert!(parts.iter().all(|p| p.len() == len));
        }
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn split_counts_and_determinism() {
        let a = split_by_patient(&ids(10), [0.8, 0.1, 0.1], 4).unwrap();
        let count = |s| a.values().filter(|&&v| v == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (8, 1, 1));
        assert_eq!(a, split_by_patient(&ids(10), [0.8, 0.1, 0.1], 4).unwrap());
        assert_eq!(a.len(), 10);
        assert!(split_by_patient(&ids(2), [0.8, 0.1, 0.1], 0).is_err());
        assert!(split_by_patient(&ids(5), [0.5, 0.1, 0.1], 0).is_err());
        let small = split_by_patient(&ids(3), [0.8, 0.1, 0.1], 0).unwrap();
        assert_eq!(small.values().collect::<HashSet<_>>().len(), 3);
    }

    #[test]
    fn manifest_parsing() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.units"), "#k=4 seg=2\n0 1\n").unwrap();
        assert!(parse_manifest("", dir.path()).unwrap().is_empty());
        let line = |p: &str| {
            format!(r#"{{"patient_id":"{p}","path":"a.units","label":"x","disease":"AD","language":"zh","split":"train"}}"#)
        };
        let text = [line("1"), line("2"), line("3")].join("\n");
        let got = parse_manifest(&text, dir.path()).unwrap();
        assert_eq!(got.iter().map(|e| e.patient_id.as_str()).collect::<Vec<_>>(), ["1", "2", "3"]);
        let missing = format!("{}\n{}", line("1"), r#"{"patient_id":"2","path":"a.units","disease":"AD","language":"zh","split":"val"}"#);
        let err = parse_manifest(&missing, dir.path()).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("label"), "{err}");
        let bad_split = line("1").replace("train", "dev");
        assert!(parse_manifest(&bad_split, dir.path()).unwrap_err().to_string().contains("unknown split"));
        let gone = line("1").replace("a.units", "b.units");
        assert!(parse_manifest(&gone, dir.path()).unwrap_err().to_string().contains("unreadable"));
        let dup = [line("1"), line("1")].join("\n");
        assert!(parse_manifest(&dup, dir.path()).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn group_tasks_orders_classes_by_appearance() {
        let e = |d: &str, l: &str| ManifestEntry {
            patient_id: format!("{d}{l}"),
            path: "x".into(),
            label: l.into(),
            disease: d.into(),
            language: "zh".into(),
            split: Split::Train,
        };
        let entries = [e("AD", "hc"), e("AD", "ad"), e("PD", "on"), e("PD", "off")];
        let tasks = group_tasks(&entries, &BTreeMap::new()).unwrap();
        assert_eq!(tasks.len(), 2);
        assert_eq!(tasks[0].0.classes, ["hc", "ad"]);
        let mut order = BTreeMap::new();
        order.insert("PD/zh".to_string(), vec!["off".to_string(), "on".to_string()]);
        let tasks = group_tasks(&entries, &order).unwrap();
        assert_eq!(tasks[1].0.classes, ["off", "on"]);
    }

    fn small_cfg(noise: f64) -> SynthConfig {
        SynthConfig {
            n_patients_per_class: 5,
            segments_per_patient: 4,
            segment_units: 30,
            noise,
            ..Default::default()
        }
    }

    #[test]
    fn synth_is_deterministic_and_in_range() {
        let a = synth_generate(&small_cfg(0.3)).unwrap();
        let b = synth_generate(&small_cfg(0.3)).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert!(a.dataset.max_unit().unwrap() < 32);
        assert!(a.dataset.segments.iter().all(|s| s.units.len() == 30));
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        let ma = write_synth(&a, da.path()).unwrap();
        let mb = write_synth(&b, db.path()).unwrap();
        assert_eq!(std::fs::read(ma).unwrap(), std::fs::read(mb).unwrap());
    }

    #[test]
    fn synth_noise_extremes() {
        assert!(synth_generate(&small_cfg(0.0)).unwrap().background.iter().all(|b| !b));
        assert!(synth_generate(&small_cfg(1.0)).unwrap().background.iter().all(|b| *b));
    }

    #[test]
    fn synth_background_fraction() {
        let cfg = SynthConfig {
            n_patients_per_class: 60,
            segments_per_patient: 10,
            segment_units: 5,
            noise: 0.3,
            ..Default::default()
        };
        let d = synth_generate(&cfg).unwrap();
        assert!(d.background.len() >= 1000);
        let frac = d.background.iter().filter(|b| **b).count() as f64 / d.background.len() as f64;
        assert!((frac - 0.3).abs() <= 0.05, "{frac}");
    }

    #[test]
    fn synth_files_reload_identically() {
        let data = synth_generate(&small_cfg(0.2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_synth(&data, dir.path()).unwrap();
        let entries = load_manifest(&manifest).unwrap();
        let tasks = group_tasks(&entries, &BTreeMap::new()).unwrap();
        assert_eq!(tasks.len(), 1);
        let opts = SegmentOptions {
            segment_units: 30,
            dedup: false,
            codebook: None,
            exec: Exec::Sequential,
        };
        let ds = build_dataset(&tasks[0].0, &tasks[0].1, opts).unwrap();
        assert_eq!(ds.segments.len(), data.dataset.segments.len());
        for p in data.dataset.patients.keys() {
            let a: Vec<_> = data.dataset.patients[p].segments.iter().map(|&i| &data.dataset.segments[i]).collect();
            let b: Vec<_> = ds.patients[p].segments.iter().map(|&i| &ds.segments[i]).collect();
            assert_eq!(a, b);
        }
        for s in Split::ALL {
            let sub = ds.subset(s);
            assert!(sub.patients.values().all(|i| i.split == s));
        }
    }
}
