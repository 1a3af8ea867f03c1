//! Samples, datasets, demographic metadata and stratified splits, plus the
//! on-disk formats the pipeline reads and writes.
//!
//! File formats:
//!
//! * embeddings: JSON lines, `{"id": "...", "embedding": [..]}`
//! * labels: CSV with header `id,label` (label is a class name)
//! * metadata: CSV with header `id,sex,age,anatomical_site,cohort`; empty
//!   cells mean unknown
//!
//! Age bands use `age < 30`, `30 <= age <= 60` and `age > 60`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Male,
    Female,
    Unknown,
}

impl Sex {
    pub const ALL: [Sex; 3] = [Sex::Male, Sex::Female, Sex::Unknown];

    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
            Sex::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Result<Sex> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" | "m" => Ok(Sex::Male),
            "female" | "f" => Ok(Sex::Female),
            "" | "unknown" | "nan" => Ok(Sex::Unknown),
            other => Err(Error::data(format!("unrecognized sex value {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeBand {
    Under30,
    From30To60,
    Over60,
    Unknown,
}

impl AgeBand {
    pub const ALL: [AgeBand; 4] = [
        AgeBand::Under30,
        AgeBand::From30To60,
        AgeBand::Over60,
        AgeBand::Unknown,
    ];

    pub fn from_age(age: Option<f64>) -> AgeBand {
        match age {
            None => AgeBand::Unknown,
            Some(a) if a < 30.0 => AgeBand::Under30,
            Some(a) if a <= 60.0 => AgeBand::From30To60,
            Some(_) => AgeBand::Over60,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgeBand::Under30 => "under30",
            AgeBand::From30To60 => "from30to60",
            AgeBand::Over60 => "over60",
            AgeBand::Unknown => "unknown",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnatomicalSite {
    AnteriorTorso,
    PosteriorTorso,
    HeadNeck,
    LowerExtremity,
    UpperExtremity,
    PalmsSoles,
    OralGenital,
    Unknown,
}

impl AnatomicalSite {
    pub const ALL: [AnatomicalSite; 8] = [
        AnatomicalSite::AnteriorTorso,
        AnatomicalSite::PosteriorTorso,
        AnatomicalSite::HeadNeck,
        AnatomicalSite::LowerExtremity,
        AnatomicalSite::UpperExtremity,
        AnatomicalSite::PalmsSoles,
        AnatomicalSite::OralGenital,
        AnatomicalSite::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AnatomicalSite::AnteriorTorso => "anterior torso",
            AnatomicalSite::PosteriorTorso => "posterior torso",
            AnatomicalSite::HeadNeck => "head/neck",
            AnatomicalSite::LowerExtremity => "lower extremity",
            AnatomicalSite::UpperExtremity => "upper extremity",
            AnatomicalSite::PalmsSoles => "palms/soles",
            AnatomicalSite::OralGenital => "oral/genital",
            AnatomicalSite::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Result<AnatomicalSite> {
        let t = s.trim().to_ascii_lowercase();
        if t.is_empty() || t == "nan" {
            return Ok(AnatomicalSite::Unknown);
        }
        AnatomicalSite::ALL
            .into_iter()
            .find(|site| site.as_str() == t)
            .ok_or_else(|| Error::data(format!("unrecognized anatomical site {s:?}")))
    }
}

impl fmt::Display for AnatomicalSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A metadata axis used to group samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Sex,
    AgeBand,
    AnatomicalSite,
    Cohort,
    All,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Sex => "sex",
            Axis::AgeBand => "age_band",
            Axis::AnatomicalSite => "anatomical_site",
            Axis::Cohort => "cohort",
            Axis::All => "all",
        }
    }

    pub fn parse(s: &str) -> Result<Axis> {
        match s.trim() {
            "sex" => Ok(Axis::Sex),
            "age_band" => Ok(Axis::AgeBand),
            "anatomical_site" => Ok(Axis::AnatomicalSite),
            "cohort" => Ok(Axis::Cohort),
            "all" => Ok(Axis::All),
            other => Err(Error::config(format!("unknown metadata axis {other:?}"))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const UNKNOWN_COHORT: &str = "unknown";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemographicMetadata {
    pub sex: Sex,
    pub age_years: Option<f64>,
    pub anatomical_site: AnatomicalSite,
    pub cohort: String,
}

impl Default for DemographicMetadata {
    fn default() -> Self {
        Self {
            sex: Sex::Unknown,
            age_years: None,
            anatomical_site: AnatomicalSite::Unknown,
            cohort: UNKNOWN_COHORT.to_string(),
        }
    }
}

impl DemographicMetadata {
    pub fn age_band(&self) -> AgeBand {
        AgeBand::from_age(self.age_years)
    }

    /// The value this record takes on `axis`; `"all"` for [`Axis::All`].
    pub fn axis_value(&self, axis: Axis) -> &str {
        match axis {
            Axis::Sex => self.sex.as_str(),
            Axis::AgeBand => self.age_band().as_str(),
            Axis::AnatomicalSite => self.anatomical_site.as_str(),
            Axis::Cohort => &self.cohort,
            Axis::All => "all",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ClassLabel {
    pub index: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub embedding: Vec<f64>,
    pub label: usize,
    pub metadata: DemographicMetadata,
}

/// An ordered, validated collection of samples sharing one embedding width.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    class_names: Vec<String>,
    embedding_dim: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>, embedding_dim: usize) -> Result<Self> {
        if embedding_dim == 0 {
            return Err(Error::data("embedding dimension must be positive"));
        }
        let mut names = HashSet::new();
        for name in &class_names {
            if !names.insert(name.as_str()) {
                return Err(Error::data(format!("duplicate class name {name:?}")));
            }
        }
        let mut ids = HashSet::with_capacity(samples.len());
        for s in &samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::data(format!("duplicate id {:?}", s.id)));
            }
            if s.label >= class_names.len() {
                return Err(Error::data(format!(
                    "sample {:?} has label index {} but only {} classes are declared",
                    s.id,
                    s.label,
                    class_names.len()
                )));
            }
            if s.embedding.len() != embedding_dim {
                return Err(Error::data(format!(
                    "dimension mismatch for {:?}: expected {embedding_dim}, got {}",
                    s.id,
                    s.embedding.len()
                )));
            }
            if s.embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::data(format!("non-finite embedding value for {:?}", s.id)));
            }
        }
        Ok(Self {
            samples,
            class_names,
            embedding_dim,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_label(&self, index: usize) -> Option<ClassLabel> {
        self.class_names.get(index).map(|name| ClassLabel {
            index,
            name: name.clone(),
        })
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Lookup from sample id to metadata.
    pub fn metadata_by_id(&self) -> HashMap<String, DemographicMetadata> {
        self.samples
            .iter()
            .map(|s| (s.id.clone(), s.metadata.clone()))
            .collect()
    }
}

/// Four disjoint index lists into a [`Dataset`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub calibration: Vec<usize>,
}

impl DatasetSplit {
    pub fn parts(&self) -> [&[usize]; 4] {
        [&self.train, &self.validation, &self.test, &self.calibration]
    }

    /// Checks that all parts index into `n` samples and are pairwise disjoint.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for part in self.parts() {
            for &i in part {
                if i >= n {
                    return Err(Error::data(format!("split index {i} out of range for {n} samples")));
                }
                if seen[i] {
                    return Err(Error::data(format!("split index {i} appears in more than one part")));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub calibration: f64,
}

impl SplitFractions {
    pub fn as_array(&self) -> [f64; 4] {
        [self.train, self.validation, self.test, self.calibration]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.as_array();
        if f.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::config("split fractions must be finite and non-negative"));
        }
        if f.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(Error::config("split fractions must sum to at most 1"));
        }
        Ok(())
    }
}

const FRACTION_EPS: f64 = 1e-9;

/// Per-part sample counts for one class of `n` samples: floors of
/// `fraction * n`, with the remainder up to `round(sum * n)` handed out one
/// each by largest fractional part (ties to the earlier part).
fn stratum_counts(n: usize, fractions: &[f64; 4]) -> [usize; 4] {
    let targets: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 4];
    for (c, t) in counts.iter_mut().zip(&targets) {
        *c = (t + FRACTION_EPS).floor() as usize;
    }
    let total_target = ((targets.iter().sum::<f64>()).round() as usize).min(n);
    let assigned: usize = counts.iter().sum();
    if total_target > assigned {
        let mut order: Vec<usize> = (0..4).filter(|&p| fractions[p] > 0.0).collect();
        order.sort_by(|&a, &b| {
            let ra = targets[a] - counts[a] as f64;
            let rb = targets[b] - counts[b] as f64;
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &p in order.iter().take(total_target - assigned) {
            counts[p] += 1;
        }
    }
    counts
}

const PART_NAMES: [&str; 4] = ["train", "validation", "test", "calibration"];

/// Stratified random split. Within each class the indices are shuffled with
/// the seed and cut into consecutive runs; each part is returned sorted.
pub fn split_dataset(dataset: &Dataset, fractions: SplitFractions, seed: u64) -> Result<DatasetSplit> {
    if dataset.is_empty() {
        return Err(Error::data("cannot split an empty dataset"));
    }
    fractions.validate()?;
    let f = fractions.as_array();
    let nonzero_parts = f.iter().filter(|x| **x > 0.0).count();

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_classes()];
    for (i, s) in dataset.samples().iter().enumerate() {
        by_class[s.label].push(i);
    }

    let mut rng = seed::rng(seed);
    let mut parts: [Vec<usize>; 4] = Default::default();
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < nonzero_parts {
            return Err(Error::data(format!(
                "class {:?} has {} samples, fewer than the {nonzero_parts} non-empty split parts",
                dataset.class_names()[class],
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let counts = stratum_counts(members.len(), &f);
        let mut offset = 0;
        for (p, &c) in counts.iter().enumerate() {
            parts[p].extend_from_slice(&members[offset..offset + c]);
            offset += c;
        }
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    let [train, validation, test, calibration] = parts;
    Ok(DatasetSplit {
        train,
        validation,
        test,
        calibration,
    })
}

pub fn part_name(index: usize) -> &'static str {
    PART_NAMES[index]
}

pub fn class_counts(dataset: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; dataset.n_classes()];
    for &i in indices {
        let s = dataset
            .samples()
            .get(i)
            .ok_or_else(|| Error::data(format!("index {i} out of range for {} samples", dataset.len())))?;
        counts[s.label] += 1;
    }
    Ok(counts)
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRecord {
    id: String,
    embedding: Vec<f64>,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn read_embeddings(path: &Path) -> Result<(HashMap<String, Vec<f64>>, usize)> {
    let reader = BufReader::new(open(path)?);
    let mut out = HashMap::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| {
            Error::data(format!("{}:{}: bad embedding record: {e}", path.display(), lineno + 1))
        })?;
        match dim {
            None => dim = Some(rec.embedding.len()),
            Some(d) if d != rec.embedding.len() => {
                return Err(Error::data(format!(
                    "dimension mismatch at {}:{}: expected {d}, got {}",
                    path.display(),
                    lineno + 1,
                    rec.embedding.len()
                )))
            }
            Some(_) => {}
        }
        if out.insert(rec.id.clone(), rec.embedding).is_some() {
            return Err(Error::data(format!("duplicate id {:?} in {}", rec.id, path.display())));
        }
    }
    let dim = dim.ok_or_else(|| Error::data(format!("{} contains no embeddings", path.display())))?;
    Ok((out, dim))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(open(path)?))
}

fn check_header(rdr: &mut csv::Reader<File>, path: &Path, expected: &[&str]) -> Result<()> {
    let headers = rdr
        .headers()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::data(format!(
            "{}: expected header {:?}, found {:?}",
            path.display(),
            expected.join(","),
            got.join(",")
        )));
    }
    Ok(())
}

fn read_labels(path: &Path) -> Result<Vec<(String, String)>> {
    let mut rdr = csv_reader(path)?;
    check_header(&mut rdr, path, &["id", "label"])?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        if rec.len() != 2 {
            return Err(Error::data(format!("{}: expected 2 columns, got {}", path.display(), rec.len())));
        }
        out.push((rec[0].to_string(), rec[1].trim().to_string()));
    }
    Ok(out)
}

fn read_metadata(path: &Path) -> Result<HashMap<String, DemographicMetadata>> {
    let mut rdr = csv_reader(path)?;
    check_header(&mut rdr, path, &["id", "sex", "age", "anatomical_site", "cohort"])?;
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        if rec.len() != 5 {
            return Err(Error::data(format!("{}: expected 5 columns, got {}", path.display(), rec.len())));
        }
        let age = match rec[2].trim() {
            "" | "nan" => None,
            a => {
                let v: f64 = a
                    .parse()
                    .map_err(|_| Error::data(format!("{}: bad age {a:?}", path.display())))?;
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::data(format!("{}: age must be non-negative, got {a}", path.display())));
                }
                Some(v)
            }
        };
        let cohort = match rec[4].trim() {
            "" => UNKNOWN_COHORT.to_string(),
            c => c.to_string(),
        };
        let meta = DemographicMetadata {
            sex: Sex::parse(&rec[1])?,
            age_years: age,
            anatomical_site: AnatomicalSite::parse(&rec[3])?,
            cohort,
        };
        if out.insert(rec[0].to_string(), meta).is_some() {
            return Err(Error::data(format!("duplicate id {:?} in {}", &rec[0], path.display())));
        }
    }
    Ok(out)
}

/// Loads a dataset from the three ingestion files. Samples follow the order of
/// the labels file; embeddings without a label row are ignored.
///
/// When `class_names` is `None` the class list is the sorted set of label
/// names found in the labels file.
pub fn load_dataset(
    embeddings_path: &Path,
    labels_path: &Path,
    metadata_path: Option<&Path>,
    class_names: Option<&[String]>,
) -> Result<Dataset> {
    let (mut embeddings, dim) = read_embeddings(embeddings_path)?;
    let labels = read_labels(labels_path)?;
    let mut metadata = match metadata_path {
        Some(p) => read_metadata(p)?,
        None => HashMap::new(),
    };

    let class_names: Vec<String> = match class_names {
        Some(names) => names.to_vec(),
        None => {
            let set: std::collections::BTreeSet<&str> = labels.iter().map(|(_, l)| l.as_str()).collect();
            set.into_iter().map(str::to_string).collect()
        }
    };
    let class_index: HashMap<&str, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();

    let mut samples = Vec::with_capacity(labels.len());
    for (id, label) in &labels {
        let &index = class_index
            .get(label.as_str())
            .ok_or_else(|| Error::data(format!("label {label:?} for id {id:?} is not a declared class")))?;
        let embedding = embeddings
            .remove(id)
            .ok_or_else(|| Error::data(format!("missing embedding for id {id:?}")))?;
        samples.push(Sample {
            id: id.clone(),
            embedding,
            label: index,
            metadata: metadata.remove(id).unwrap_or_default(),
        });
    }
    Dataset::new(samples, class_names, dim)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Writes the three ingestion files for `dataset`; [`load_dataset`] with the
/// same class list reads it back unchanged.
pub fn write_dataset(dataset: &Dataset, embeddings_path: &Path, labels_path: &Path, metadata_path: &Path) -> Result<()> {
    let mut emb = create(embeddings_path)?;
    for s in dataset.samples() {
        let line = serde_json::to_string(&EmbeddingRecord {
            id: s.id.clone(),
            embedding: s.embedding.clone(),
        })
        .map_err(|e| Error::data(e.to_string()))?;
        writeln!(emb, "{line}").map_err(|e| Error::io(embeddings_path, e))?;
    }
    emb.flush().map_err(|e| Error::io(embeddings_path, e))?;

    let csv_err = |path: &Path| {
        let path = path.to_path_buf();
        move |e: csv::Error| Error::data(format!("{}: {e}", path.display()))
    };

    let mut labels = csv::Writer::from_writer(create(labels_path)?);
    labels.write_record(["id", "label"]).map_err(csv_err(labels_path))?;
    for s in dataset.samples() {
        labels
            .write_record([s.id.as_str(), dataset.class_names()[s.label].as_str()])
            .map_err(csv_err(labels_path))?;
    }
    labels.flush().map_err(|e| Error::io(labels_path, e))?;

    let mut meta = csv::Writer::from_writer(create(metadata_path)?);
    meta.write_record(["id", "sex", "age", "anatomical_site", "cohort"])
        .map_err(csv_err(metadata_path))?;
    for s in dataset.samples() {
        let m = &s.metadata;
        let sex = match m.sex {
            Sex::Unknown => "",
            other => other.as_str(),
        };
        let age = m.age_years.map(|a| a.to_string()).unwrap_or_default();
        let site = match m.anatomical_site {
            AnatomicalSite::Unknown => "",
            other => other.as_str(),
        };
        let cohort = if m.cohort == UNKNOWN_COHORT { "" } else { m.cohort.as_str() };
        meta.write_record([s.id.as_str(), sex, age.as_str(), site, cohort])
            .map_err(csv_err(metadata_path))?;
    }
    meta.flush().map_err(|e| Error::io(metadata_path, e))?;
    Ok(())
}

/// Per-class sample counts for every part of a split, keyed by part name.
pub fn split_summary(dataset: &Dataset, split: &DatasetSplit) -> Result<BTreeMap<&'static str, Vec<usize>>> {
    let mut out = BTreeMap::new();
    for (i, part) in split.parts().into_iter().enumerate() {
        out.insert(part_name(i), class_counts(dataset, part)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(labels: &[usize], n_classes: usize) -> Dataset {
        let samples = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| Sample {
                id: format!("s{i}"),
                embedding: vec![i as f64, 1.0],
                label: l,
                metadata: DemographicMetadata::default(),
            })
            .collect();
        let names = (0..n_classes).map(|c| format!("C{c}")).collect();
        Dataset::new(samples, names, 2).unwrap()
    }

    #[test]
    fn age_band_cut_points() {
        assert_eq!(AgeBand::from_age(Some(29.99)), AgeBand::Under30);
        assert_eq!(AgeBand::from_age(Some(30.0)), AgeBand::From30To60);
        assert_eq!(AgeBand::from_age(Some(60.0)), AgeBand::From30To60);
        assert_eq!(AgeBand::from_age(Some(60.01)), AgeBand::Over60);
        assert_eq!(AgeBand::from_age(None), AgeBand::Unknown);
    }

    #[test]
    fn site_vocabulary_parses_back() {
        for site in AnatomicalSite::ALL {
            assert_eq!(AnatomicalSite::parse(site.as_str()).unwrap(), site);
        }
        assert_eq!(AnatomicalSite::parse("").unwrap(), AnatomicalSite::Unknown);
        assert!(AnatomicalSite::parse("elbow").is_err());
    }

    #[test]
    fn dataset_rejects_bad_rows() {
        let mk = |id: &str, emb: Vec<f64>, label| Sample {
            id: id.into(),
            embedding: emb,
            label,
            metadata: DemographicMetadata::default(),
        };
        let names = vec!["A".to_string()];
        assert!(Dataset::new(vec![mk("a", vec![1.0], 0), mk("a", vec![1.0], 0)], names.clone(), 1).is_err());
        assert!(Dataset::new(vec![mk("a", vec![1.0, 2.0], 0)], names.clone(), 1).is_err());
        assert!(Dataset::new(vec![mk("a", vec![1.0], 1)], names.clone(), 1).is_err());
        assert!(Dataset::new(vec![mk("a", vec![f64::NAN], 0)], names, 1).is_err());
    }

    #[test]
    fn class_counts_basic() {
        let ds = toy(&[0, 0, 1], 2);
        assert_eq!(class_counts(&ds, &[]).unwrap(), vec![0, 0]);
        assert_eq!(class_counts(&ds, &[0, 1, 2]).unwrap(), vec![2, 1]);
        assert!(class_counts(&ds, &[3]).is_err());
    }

    #[test]
    fn split_all_train() {
        let ds = toy(&[0, 1, 0, 1, 1], 2);
        let f = SplitFractions {
            train: 1.0,
            validation: 0.0,
            test: 0.0,
            calibration: 0.0,
        };
        let split = split_dataset(&ds, f, 3).unwrap();
        assert_eq!(split.train, vec![0, 1, 2, 3, 4]);
        assert!(split.validation.is_empty() && split.test.is_empty() && split.calibration.is_empty());
    }

    #[test]
    fn split_sizes_single_class() {
        let ds = toy(&vec![0; 100], 1);
        let f = SplitFractions {
            train: 0.5,
            validation: 0.25,
            test: 0.15,
            calibration: 0.1,
        };
        let split = split_dataset(&ds, f, 7).unwrap();
        let sizes: Vec<usize> = split.parts().iter().map(|p| p.len()).collect();
        assert_eq!(sizes, vec![50, 25, 15, 10]);
        split.validate(100).unwrap();
        assert_eq!(split, split_dataset(&ds, f, 7).unwrap());
        assert_ne!(split, split_dataset(&ds, f, 8).unwrap());
    }

    #[test]
    fn split_rejects_tiny_class() {
        let ds = toy(&[0, 0, 0, 0, 0, 1, 1], 2);
        let f = SplitFractions {
            train: 0.4,
            validation: 0.2,
            test: 0.2,
            calibration: 0.2,
        };
        let err = split_dataset(&ds, f, 1).unwrap_err().to_string();
        assert!(err.contains("\"C1\""), "{err}");
    }

    #[test]
    fn stratum_counts_hit_targets() {
        assert_eq!(stratum_counts(10, &[0.29, 0.31, 0.4, 0.0]), [3, 3, 4, 0]);
        assert_eq!(stratum_counts(7, &[0.5, 0.5, 0.0, 0.0]), [4, 3, 0, 0]);
        assert_eq!(stratum_counts(9, &[0.5, 0.0, 0.0, 0.0]), [5, 0, 0, 0]);
    }
}
