//! Demographic auditing of conformal prediction sets.
//!
//! Everything here is a count or a ratio over sets joined with their
//! sample's metadata:
//!
//! * A2 accuracy: share of a class's samples whose true label is among the
//!   two most confident entries of its set.
//! * coverage, mean set size, set-size histogram and forced-set share per
//!   subgroup.
//! * truth-confidence lists (all sets containing the truth, and only those
//!   with the truth in the top two), ordered by sample id.
//! * anatomical-site rankings among top-two hits of each class.
//!
//! Ratios over empty cells are reported as absent, never as zero.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conformal::{PredictionSet, SizeHistogram};
use crate::data_model::{AnatomicalSite, Axis, DemographicMetadata};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubgroupKey {
    pub axis: Axis,
    pub value: String,
}

impl SubgroupKey {
    pub fn new(axis: Axis, value: impl Into<String>) -> Self {
        Self {
            axis,
            value: value.into(),
        }
    }

    pub fn all() -> Self {
        Self::new(Axis::All, "all")
    }

    pub fn matches(&self, meta: &DemographicMetadata) -> bool {
        meta.axis_value(self.axis) == self.value
    }
}

/// Conjunction of subgroup keys; empty matches everything.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupFilter(pub Vec<SubgroupKey>);

impl SubgroupFilter {
    pub fn all() -> Self {
        Self(Vec::new())
    }

    pub fn single(key: SubgroupKey) -> Self {
        Self(vec![key])
    }

    pub fn matches(&self, meta: &DemographicMetadata) -> bool {
        self.0.iter().all(|k| k.matches(meta))
    }
}

/// One or more axes to group by; several axes give the crossed grouping.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Grouping(pub Vec<Axis>);

impl Grouping {
    pub fn single(axis: Axis) -> Self {
        Self(vec![axis])
    }

    /// Parses `"sex"` or a crossed grouping such as `"sex+age_band"`.
    pub fn parse(s: &str) -> Result<Self> {
        let axes = s.split('+').map(Axis::parse).collect::<Result<Vec<_>>>()?;
        if axes.is_empty() {
            return Err(Error::config("empty grouping"));
        }
        Ok(Self(axes))
    }

    pub fn label(&self) -> String {
        self.0.iter().map(|a| a.as_str()).collect::<Vec<_>>().join("+")
    }

    /// Group value of `meta`: the axis values joined with `|`.
    pub fn value_of(&self, meta: &DemographicMetadata) -> String {
        self.0.iter().map(|&a| meta.axis_value(a)).collect::<Vec<_>>().join("|")
    }

    pub fn filter_for(&self, meta: &DemographicMetadata) -> SubgroupFilter {
        SubgroupFilter(
            self.0
                .iter()
                .map(|&a| SubgroupKey::new(a, meta.axis_value(a)))
                .collect(),
        )
    }
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl Serialize for Grouping {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for Grouping {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Grouping::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// A prediction set paired with its sample's metadata.
#[derive(Clone, Copy, Debug)]
pub struct AuditRecord<'a> {
    pub set: &'a PredictionSet,
    pub meta: &'a DemographicMetadata,
}

/// Joins sets with metadata by sample id. Every set must carry a truth label.
pub fn join<'a>(sets: &'a [PredictionSet], metadata: &'a HashMap<String, DemographicMetadata>) -> Result<Vec<AuditRecord<'a>>> {
    let missing: Vec<&str> = sets
        .iter()
        .filter(|s| !metadata.contains_key(&s.sample_id))
        .map(|s| s.sample_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::data(format!("ids missing from metadata: {}", missing.join(", "))));
    }
    if let Some(s) = sets.iter().find(|s| s.truth.is_none()) {
        return Err(Error::data(format!("prediction set {:?} has no truth label", s.sample_id)));
    }
    Ok(sets
        .iter()
        .map(|set| AuditRecord {
            set,
            meta: &metadata[&set.sample_id],
        })
        .collect())
}

fn class_records<'r, 'a>(
    records: &'r [AuditRecord<'a>],
    filter: &'r SubgroupFilter,
    class: usize,
) -> impl Iterator<Item = &'r AuditRecord<'a>> + 'r {
    records
        .iter()
        .filter(move |r| r.set.truth == Some(class) && filter.matches(r.meta))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct A2 {
    /// `None` when the cell has no samples.
    pub a2: Option<f64>,
    pub n: usize,
}

pub fn a2_accuracy(records: &[AuditRecord<'_>], filter: &SubgroupFilter, class: usize) -> A2 {
    let (mut n, mut hits) = (0usize, 0usize);
    for r in class_records(records, filter, class) {
        n += 1;
        if r.set.truth_rank.is_some_and(|k| k <= 2) {
            hits += 1;
        }
    }
    A2 {
        a2: (n > 0).then(|| hits as f64 / n as f64),
        n,
    }
}

fn confidences_by_id<'a>(it: impl Iterator<Item = &'a AuditRecord<'a>>, top_two_only: bool) -> Vec<f64> {
    let mut pairs: Vec<(&str, f64)> = it
        .filter(|r| !top_two_only || r.set.truth_rank.is_some_and(|k| k <= 2))
        .filter_map(|r| r.set.truth_confidence.map(|c| (r.set.sample_id.as_str(), c)))
        .collect();
    pairs.sort_by(|a, b| a.0.cmp(b.0));
    pairs.into_iter().map(|p| p.1).collect()
}

/// Truth confidences of the class's sets that contain the truth, by sample id.
pub fn truth_confidence_distribution<'a>(records: &'a [AuditRecord<'a>], class: usize, filter: &'a SubgroupFilter) -> Vec<f64> {
    confidences_by_id(class_records(records, filter, class), false)
}

/// As [`truth_confidence_distribution`], restricted to truth rank 1 or 2.
pub fn toptwo_truth_confidence<'a>(records: &'a [AuditRecord<'a>], class: usize, filter: &'a SubgroupFilter) -> Vec<f64> {
    confidences_by_id(class_records(records, filter, class), true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteShare {
    pub site: AnatomicalSite,
    pub count: usize,
    /// `count * 100 / total`.
    pub percentage: f64,
}

/// Anatomical sites of the class's samples whose truth ranks in the top two
/// of their set, by descending count (ties by site name).
pub fn site_ranking(records: &[AuditRecord<'_>], class: usize) -> Vec<SiteShare> {
    let mut counts: BTreeMap<AnatomicalSite, usize> = BTreeMap::new();
    for r in records {
        if r.set.truth == Some(class) && r.set.truth_rank.is_some_and(|k| k <= 2) {
            *counts.entry(r.meta.anatomical_site).or_insert(0) += 1;
        }
    }
    let total: usize = counts.values().sum();
    let mut rows: Vec<SiteShare> = counts
        .into_iter()
        .map(|(site, count)| SiteShare {
            site,
            count,
            percentage: count as f64 * 100.0 / total as f64,
        })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.site.as_str().cmp(b.site.as_str())));
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCell {
    pub class: usize,
    pub n: usize,
    pub a2: Option<f64>,
    pub truth_confidence: Vec<f64>,
    pub toptwo_confidence: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub value: String,
    pub n: usize,
    pub coverage: f64,
    pub mean_set_size: f64,
    pub set_size_histogram: SizeHistogram,
    pub forced_fraction: f64,
    pub classes: Vec<ClassCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupingReport {
    pub grouping: Grouping,
    /// Observed groups, by value.
    pub groups: Vec<GroupSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSiteRanking {
    pub class: usize,
    pub rows: Vec<SiteShare>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub class_names: Vec<String>,
    pub n_sets: usize,
    pub groupings: Vec<GroupingReport>,
    pub site_rankings: Vec<ClassSiteRanking>,
}

fn summarize_group(records: &[AuditRecord<'_>], value: String, filter: &SubgroupFilter, n_classes: usize) -> GroupSummary {
    let members: Vec<&AuditRecord<'_>> = records.iter().filter(|r| filter.matches(r.meta)).collect();
    let n = members.len();
    let mut histogram = SizeHistogram::new();
    let (mut covered, mut forced, mut size_sum) = (0usize, 0usize, 0usize);
    for r in &members {
        *histogram.entry(r.set.size()).or_insert(0) += 1;
        covered += usize::from(r.set.contains_truth);
        forced += usize::from(r.set.forced_top1);
        size_sum += r.set.size();
    }
    let classes = (0..n_classes)
        .map(|class| {
            let a2 = a2_accuracy(records, filter, class);
            ClassCell {
                class,
                n: a2.n,
                a2: a2.a2,
                truth_confidence: truth_confidence_distribution(records, class, filter),
                toptwo_confidence: toptwo_truth_confidence(records, class, filter),
            }
        })
        .collect();
    GroupSummary {
        value,
        n,
        coverage: covered as f64 / n as f64,
        mean_set_size: size_sum as f64 / n as f64,
        set_size_histogram: histogram,
        forced_fraction: forced as f64 / n as f64,
        classes,
    }
}

/// Assembles every metric for each grouping. Groups are the values observed
/// in the data, ordered lexicographically; classes by index.
pub fn build_fairness_report(
    sets: &[PredictionSet],
    metadata: &HashMap<String, DemographicMetadata>,
    class_names: &[String],
    groupings: &[Grouping],
) -> Result<FairnessReport> {
    let records = join(sets, metadata)?;
    let n_classes = class_names.len();
    if let Some(s) = sets.iter().find(|s| s.truth.is_some_and(|t| t >= n_classes)) {
        return Err(Error::data(format!("prediction set {:?} has an out-of-range truth", s.sample_id)));
    }
    let mut out = Vec::with_capacity(groupings.len());
    for grouping in groupings {
        let mut filters: BTreeMap<String, SubgroupFilter> = BTreeMap::new();
        for r in &records {
            filters
                .entry(grouping.value_of(r.meta))
                .or_insert_with(|| grouping.filter_for(r.meta));
        }
        let groups = filters
            .into_iter()
            .map(|(value, filter)| summarize_group(&records, value, &filter, n_classes))
            .collect();
        out.push(GroupingReport {
            grouping: grouping.clone(),
            groups,
        });
    }
    Ok(FairnessReport {
        class_names: class_names.to_vec(),
        n_sets: sets.len(),
        groupings: out,
        site_rankings: (0..n_classes)
            .map(|class| ClassSiteRanking {
                class,
                rows: site_ranking(&records, class),
            })
            .collect(),
    })
}

/// Replaces characters that are awkward in file names with `_`.
pub fn file_token(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn grouping_token(g: &Grouping) -> String {
    g.0.iter().map(|a| a.as_str()).collect::<Vec<_>>().join("_by_")
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::data(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const REPORT_FILE: &str = "fairness_report.json";

/// Writes `fairness_report.json` plus the flat per-grouping and per-class
/// CSV tables into `dir`. Returns the file names written.
pub fn write_report(report: &FairnessReport, dir: &Path) -> Result<Vec<String>> {
    let mut written = Vec::new();
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::data(e.to_string()))?;
    fs::write(dir.join(REPORT_FILE), json + "\n").map_err(|e| Error::io(dir.join(REPORT_FILE), e))?;
    written.push(REPORT_FILE.to_string());

    for g in &report.groupings {
        let token = grouping_token(&g.grouping);

        let name = format!("set_size_by_{token}.csv");
        let rows = g
            .groups
            .iter()
            .flat_map(|grp| {
                grp.set_size_histogram
                    .iter()
                    .map(|(size, count)| vec![grp.value.clone(), size.to_string(), count.to_string()])
            })
            .collect();
        write_csv(&dir.join(&name), &["group", "set_size", "count"], rows)?;
        written.push(name);

        let name = format!("coverage_by_{token}.csv");
        let rows = g
            .groups
            .iter()
            .map(|grp| {
                vec![
                    grp.value.clone(),
                    grp.n.to_string(),
                    fmt6(grp.coverage),
                    fmt6(grp.mean_set_size),
                    fmt6(grp.forced_fraction),
                ]
            })
            .collect();
        write_csv(
            &dir.join(&name),
            &["group", "n", "coverage", "mean_set_size", "forced_fraction"],
            rows,
        )?;
        written.push(name);

        let name = format!("a2_by_{token}_class.csv");
        let rows = g
            .groups
            .iter()
            .flat_map(|grp| {
                grp.classes.iter().map(|c| {
                    vec![
                        grp.value.clone(),
                        report.class_names[c.class].clone(),
                        c.n.to_string(),
                        c.a2.map(fmt6).unwrap_or_default(),
                    ]
                })
            })
            .collect();
        write_csv(&dir.join(&name), &["group", "class", "n", "a2"], rows)?;
        written.push(name);
    }

    for (class, class_name) in report.class_names.iter().enumerate() {
        let token = file_token(class_name);
        for (prefix, top_two) in [("truth_confidence", false), ("toptwo_confidence", true)] {
            let name = format!("{prefix}_{token}.csv");
            let mut rows = Vec::new();
            for g in &report.groupings {
                for grp in &g.groups {
                    let cell = &grp.classes[class];
                    let values = if top_two { &cell.toptwo_confidence } else { &cell.truth_confidence };
                    rows.extend(values.iter().map(|v| vec![g.grouping.label(), grp.value.clone(), fmt6(*v)]));
                }
            }
            write_csv(&dir.join(&name), &["grouping", "group", "confidence"], rows)?;
            written.push(name);
        }

        let name = format!("site_ranking_{token}.csv");
        let rows = report.site_rankings[class]
            .rows
            .iter()
            .enumerate()
            .map(|(i, s)| vec![(i + 1).to_string(), s.site.as_str().to_string(), s.count.to_string(), format!("{:.2}", s.percentage)])
            .collect();
        write_csv(&dir.join(&name), &["rank", "site", "count", "percentage"], rows)?;
        written.push(name);
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> Result<FairnessReport> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::SetEntry;
    use crate::data_model::Sex;

    fn set(id: &str, truth: usize, ranked: &[(usize, f64)]) -> PredictionSet {
        let entries: Vec<SetEntry> = ranked.iter().map(|&(class, confidence)| SetEntry { class, confidence }).collect();
        let pos = entries.iter().position(|e| e.class == truth);
        PredictionSet {
            sample_id: id.into(),
            truth: Some(truth),
            contains_truth: pos.is_some(),
            truth_rank: pos.map(|p| p + 1),
            truth_confidence: pos.map(|p| entries[p].confidence),
            entries,
            forced_top1: false,
        }
    }

    fn meta_with(site: AnatomicalSite, sex: Sex) -> DemographicMetadata {
        DemographicMetadata {
            sex,
            anatomical_site: site,
            ..Default::default()
        }
    }

    fn metadata(ids: &[&str]) -> HashMap<String, DemographicMetadata> {
        ids.iter().map(|id| (id.to_string(), DemographicMetadata::default())).collect()
    }

    #[test]
    fn a2_counts() {
        let sets = vec![
            set("a", 0, &[(0, 0.9)]),
            set("b", 0, &[(1, 0.5), (2, 0.3), (0, 0.2)]),
            set("c", 0, &[(1, 0.5), (0, 0.4)]),
        ];
        let meta = metadata(&["a", "b", "c"]);
        let recs = join(&sets, &meta).unwrap();
        let a2 = a2_accuracy(&recs, &SubgroupFilter::all(), 0);
        assert_eq!(a2.n, 3);
        assert!((a2.a2.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(a2_accuracy(&recs, &SubgroupFilter::all(), 1), A2 { a2: None, n: 0 });
        let male = SubgroupFilter::single(SubgroupKey::new(Axis::Sex, "male"));
        assert_eq!(a2_accuracy(&recs, &male, 0).a2, None);
    }

    #[test]
    fn confidence_lists() {
        let sets = vec![
            set("b", 0, &[(0, 0.6)]),
            set("a", 0, &[(0, 0.9)]),
            set("c", 0, &[(1, 0.9)]),
        ];
        let meta = metadata(&["a", "b", "c"]);
        let recs = join(&sets, &meta).unwrap();
        let all = SubgroupFilter::all();
        assert_eq!(truth_confidence_distribution(&recs, 0, &all), vec![0.9, 0.6]);
        assert!(truth_confidence_distribution(&recs, 1, &all).is_empty());

        let sets = vec![
            set("x", 0, &[(0, 0.8)]),
            set("y", 0, &[(1, 0.5), (0, 0.3)]),
            set("z", 0, &[(1, 0.4), (2, 0.3), (0, 0.2)]),
        ];
        let meta = metadata(&["x", "y", "z"]);
        let recs = join(&sets, &meta).unwrap();
        assert_eq!(toptwo_truth_confidence(&recs, 0, &all), vec![0.8, 0.3]);
        assert_eq!(truth_confidence_distribution(&recs, 0, &all), vec![0.8, 0.3, 0.2]);
    }

    #[test]
    fn site_ranking_shares() {
        let sets: Vec<PredictionSet> = (0..4).map(|i| set(&format!("s{i}"), 0, &[(0, 0.9)])).collect();
        let mut meta = HashMap::new();
        for i in 0..3 {
            meta.insert(format!("s{i}"), meta_with(AnatomicalSite::AnteriorTorso, Sex::Male));
        }
        meta.insert("s3".to_string(), meta_with(AnatomicalSite::HeadNeck, Sex::Female));
        let recs = join(&sets, &meta).unwrap();
        let ranking = site_ranking(&recs, 0);
        assert_eq!(ranking.len(), 2);
        assert_eq!((ranking[0].site, ranking[0].percentage), (AnatomicalSite::AnteriorTorso, 75.0));
        assert_eq!((ranking[1].site, ranking[1].percentage), (AnatomicalSite::HeadNeck, 25.0));
    }

    #[test]
    fn missing_metadata_lists_ids() {
        let sets = vec![set("a", 0, &[(0, 0.9)]), set("q", 0, &[(0, 0.9)])];
        let err = build_fairness_report(&sets, &metadata(&["a"]), &["A".into()], &[Grouping::single(Axis::All)])
            .unwrap_err()
            .to_string();
        assert!(err.contains("q"), "{err}");
    }

    #[test]
    fn all_grouping_collapses_to_global() {
        let sets = vec![set("a", 0, &[(0, 0.9)]), set("b", 1, &[(0, 0.6)])];
        let report = build_fairness_report(&sets, &metadata(&["a", "b"]), &["A".into(), "B".into()], &[Grouping::single(Axis::All)]).unwrap();
        let g = &report.groupings[0].groups;
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].value, "all");
        assert_eq!(g[0].n, 2);
        assert_eq!(g[0].coverage, 0.5);
        assert_eq!(g[0].set_size_histogram, BTreeMap::from([(1, 2)]));
    }

    #[test]
    fn identical_cohorts_match() {
        let mut sets = Vec::new();
        let mut meta = HashMap::new();
        for cohort in ["asan", "isic"] {
            for (i, (t, ranked)) in [(0, vec![(0, 0.7), (1, 0.2)]), (1, vec![(0, 0.5), (1, 0.4)])].into_iter().enumerate() {
                let id = format!("{cohort}{i}");
                sets.push(set(&id, t, &ranked));
                meta.insert(
                    id,
                    DemographicMetadata {
                        cohort: cohort.into(),
                        ..Default::default()
                    },
                );
            }
        }
        let report = build_fairness_report(&sets, &meta, &["A".into(), "B".into()], &[Grouping::single(Axis::Cohort)]).unwrap();
        let groups = &report.groupings[0].groups;
        assert_eq!(groups.len(), 2);
        let strip = |g: &GroupSummary| GroupSummary {
            value: String::new(),
            ..g.clone()
        };
        assert_eq!(strip(&groups[0]), strip(&groups[1]));
    }

    #[test]
    fn grouping_parse() {
        assert_eq!(Grouping::parse("sex+age_band").unwrap(), Grouping(vec![Axis::Sex, Axis::AgeBand]));
        assert!(Grouping::parse("sex+height").is_err());
        assert_eq!(file_token("head/neck C"), "head_neck_C");
    }
}
