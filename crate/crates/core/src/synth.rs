//! Synthetic embedding datasets: one Gaussian blob per class, means on scaled
//! coordinate axes, with an optional constant offset for one demographic
//! subgroup.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::data_model::{AgeBand, AnatomicalSite, Axis, Dataset, DemographicMetadata, Sample, Sex};
use crate::error::{Error, Result};
use crate::seed;

/// Category probabilities for each metadata axis. Array orders follow
/// [`Sex::ALL`], [`AgeBand::ALL`] and [`AnatomicalSite::ALL`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupFractions {
    pub sex: [f64; 3],
    pub age_band: [f64; 4],
    pub site: [f64; 8],
    pub cohort: BTreeMap<String, f64>,
}

impl Default for SubgroupFractions {
    fn default() -> Self {
        Self {
            sex: [0.5, 0.45, 0.05],
            age_band: [0.2, 0.45, 0.3, 0.05],
            site: [0.25, 0.15, 0.15, 0.15, 0.12, 0.05, 0.03, 0.1],
            cohort: BTreeMap::from([("synthetic".to_string(), 1.0)]),
        }
    }
}

/// Which subgroup receives the covariate-shift offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftTarget {
    pub axis: Axis,
    pub value: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub embedding_dim: usize,
    pub class_counts: Vec<usize>,
    pub class_separation: f64,
    #[serde(default)]
    pub subgroup_shift: f64,
    #[serde(default)]
    pub shifted_subgroup: Option<ShiftTarget>,
    pub noise_sigma: f64,
    #[serde(default)]
    pub subgroup_fractions: SubgroupFractions,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
    #[serde(default)]
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::config("n_classes must be positive"));
        }
        if self.embedding_dim == 0 {
            return Err(Error::config("embedding_dim must be positive"));
        }
        if self.embedding_dim < self.n_classes {
            return Err(Error::config(format!(
                "embedding_dim {} is smaller than n_classes {}; class means need one axis each",
                self.embedding_dim, self.n_classes
            )));
        }
        if self.class_counts.len() != self.n_classes {
            return Err(Error::config(format!(
                "class_counts has {} entries for {} classes",
                self.class_counts.len(),
                self.n_classes
            )));
        }
        if self.class_counts.contains(&0) {
            return Err(Error::config("class_counts must all be positive"));
        }
        if !(self.class_separation.is_finite() && self.class_separation > 0.0) {
            return Err(Error::config("class_separation must be positive"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma must be non-negative"));
        }
        if !(self.subgroup_shift.is_finite() && self.subgroup_shift >= 0.0) {
            return Err(Error::config("subgroup_shift must be non-negative"));
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.n_classes {
                return Err(Error::config("class_names length must equal n_classes"));
            }
        }
        let f = &self.subgroup_fractions;
        check_probs("sex", &f.sex)?;
        check_probs("age_band", &f.age_band)?;
        check_probs("site", &f.site)?;
        let cohort: Vec<f64> = f.cohort.values().copied().collect();
        check_probs("cohort", &cohort)?;
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.class_names
            .clone()
            .unwrap_or_else(|| (0..self.n_classes).map(|c| format!("C{c}")).collect())
    }

    /// Mean of class `c`: `separation / sqrt(2)` along axis `c`, so every pair
    /// of means is exactly `separation` apart.
    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let mut mu = vec![0.0; self.embedding_dim];
        mu[class] = self.class_separation / std::f64::consts::SQRT_2;
        mu
    }

    /// Offset added to every embedding in the shifted subgroup: magnitude
    /// `subgroup_shift` along the all-ones diagonal.
    pub fn shift_vector(&self) -> Vec<f64> {
        let v = self.subgroup_shift / (self.embedding_dim as f64).sqrt();
        vec![v; self.embedding_dim]
    }
}

fn check_probs(axis: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::config(format!("{axis} fractions must be non-negative")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("{axis} fractions sum to {sum}, expected 1")));
    }
    Ok(())
}

fn categorical(p: &[f64]) -> WeightedIndex<f64> {
    WeightedIndex::new(p).expect("validated probabilities")
}

fn draw_age<R: Rng>(band: AgeBand, rng: &mut R) -> Option<f64> {
    match band {
        AgeBand::Under30 => Some(rng.random_range(18..=29) as f64),
        AgeBand::From30To60 => Some(rng.random_range(30..=60) as f64),
        AgeBand::Over60 => Some(rng.random_range(61..=90) as f64),
        AgeBand::Unknown => None,
    }
}

/// Generates a dataset from `config`. Sample order is shuffled; ids are
/// `s000000`, `s000001`, ... in output order.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = seed::rng(config.seed);
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::config(e.to_string()))?;

    let sex_dist = categorical(&config.subgroup_fractions.sex);
    let age_dist = categorical(&config.subgroup_fractions.age_band);
    let site_dist = categorical(&config.subgroup_fractions.site);
    let cohorts: Vec<(&String, f64)> = config.subgroup_fractions.cohort.iter().map(|(k, v)| (k, *v)).collect();
    let cohort_dist = categorical(&cohorts.iter().map(|c| c.1).collect::<Vec<_>>());
    let shift = config.shift_vector();

    let mut labels: Vec<usize> = config
        .class_counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    labels.shuffle(&mut rng);

    let means: Vec<Vec<f64>> = (0..config.n_classes).map(|c| config.class_mean(c)).collect();
    let width = labels.len().to_string().len().max(6);
    let mut samples = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        let band = AgeBand::ALL[age_dist.sample(&mut rng)];
        let metadata = DemographicMetadata {
            sex: Sex::ALL[sex_dist.sample(&mut rng)],
            age_years: draw_age(band, &mut rng),
            anatomical_site: AnatomicalSite::ALL[site_dist.sample(&mut rng)],
            cohort: cohorts[cohort_dist.sample(&mut rng)].0.clone(),
        };
        let shifted = config
            .shifted_subgroup
            .as_ref()
            .is_some_and(|t| metadata.axis_value(t.axis) == t.value);
        let embedding = means[label]
            .iter()
            .zip(&shift)
            .map(|(m, s)| {
                let eps = if config.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                m + if shifted { *s } else { 0.0 } + eps
            })
            .collect();
        samples.push(Sample {
            id: format!("s{i:0width$}"),
            embedding,
            label,
            metadata,
        });
    }
    Dataset::new(samples, config.class_names(), config.embedding_dim)
}
