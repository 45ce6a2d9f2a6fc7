//! Annotation-level k-fold assignment.
//!
//! [`stratified_kfold`] runs iterative multi-label stratification: labels are
//! `(feature, known value)` pairs, the rarest label with unassigned examples is
//! handled first, and each of its examples goes to the fold with the greatest
//! remaining demand for that label (ties: greatest remaining total demand, then
//! a seeded coin). [`enforce_minority_presence`] then repairs rare labels with
//! pairwise swaps.
//!
//! In the default mode every annotation is its own unit and fold sizes are
//! exactly ⌊n/k⌋ or ⌈n/k⌉. With `strict_patient` all annotations of one
//! patient move together, so fold sizes can drift.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{CohortManifest, Feature, FeatureSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub k: usize,
    pub seed: u64,
    pub stratify_on: Vec<Feature>,
    /// A label value with at least `minority_floor · k` instances must have at
    /// least `minority_floor` of them in every validation fold. Zero disables
    /// that rule; the training-side rule for counts ≥ 2 always applies.
    pub minority_floor: usize,
    /// Keep all annotations of a patient in one fold.
    pub strict_patient: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            k: 5,
            seed: 0,
            stratify_on: Feature::CATEGORICAL.to_vec(),
            minority_floor: 1,
            strict_patient: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("k must be at least 2, got {0}")]
    KTooSmall(usize),
    #[error("k = {k} exceeds the number of {unit}s ({n})")]
    KTooLarge { k: usize, n: usize, unit: &'static str },
    #[error("fold file does not match manifest: {0}")]
    Mismatch(String),
    #[error("fold file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("fold file json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldEntry {
    pub annotation_id: String,
    pub fold: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub seed: u64,
    pub k: usize,
    /// In manifest order.
    pub assignments: Vec<FoldEntry>,
    /// Annotations that never appear on a validation side.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pinned_training: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub swaps: usize,
}

impl FoldAssignment {
    pub fn fold_of(&self, annotation_id: &str) -> Option<usize> {
        self.assignments
            .iter()
            .find(|e| e.annotation_id == annotation_id)
            .map(|e| e.fold)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for e in &self.assignments {
            sizes[e.fold] += 1;
        }
        sizes
    }

    pub fn is_pinned(&self, annotation_id: &str) -> bool {
        self.pinned_training.iter().any(|p| p == annotation_id)
    }

    /// Validation ids of `fold`; pinned annotations are excluded.
    pub fn validation(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|e| e.fold == fold && !self.is_pinned(&e.annotation_id))
            .map(|e| e.annotation_id.as_str())
            .collect()
    }

    /// Training ids of `fold`: every other fold plus the pinned annotations.
    pub fn training(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|e| e.fold != fold || self.is_pinned(&e.annotation_id))
            .map(|e| e.annotation_id.as_str())
            .collect()
    }

    /// Checks that the assignment is a total function over `manifest` with no empty fold.
    pub fn check(&self, manifest: &CohortManifest) -> Result<(), SplitError> {
        if self.assignments.len() != manifest.len() {
            return Err(SplitError::Mismatch(format!(
                "{} assignments for {} annotations",
                self.assignments.len(),
                manifest.len()
            )));
        }
        let ids: BTreeSet<&str> = self.assignments.iter().map(|e| e.annotation_id.as_str()).collect();
        if ids.len() != self.assignments.len() {
            return Err(SplitError::Mismatch("duplicate annotation_id".into()));
        }
        for a in &manifest.annotations {
            if !ids.contains(a.annotation_id.as_str()) {
                return Err(SplitError::Mismatch(format!("{} has no fold", a.annotation_id)));
            }
        }
        if let Some(e) = self.assignments.iter().find(|e| e.fold >= self.k) {
            return Err(SplitError::Mismatch(format!("{} in fold {} ≥ k", e.annotation_id, e.fold)));
        }
        if let Some(f) = self.fold_sizes().iter().position(|&s| s == 0) {
            return Err(SplitError::Mismatch(format!("fold {f} is empty")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("fold assignment serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SplitError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SplitError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// A stratification label: one known value of one feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label {
    pub feature: Feature,
    pub value: &'static str,
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}={}", self.feature.key(), self.value)
    }
}

fn size_bin(cm: f64) -> &'static str {
    if cm < 1.0 {
        "lt1"
    } else if cm < 2.0 {
        "1to2"
    } else if cm < 4.0 {
        "2to4"
    } else {
        "ge4"
    }
}

/// Labels carried by one feature set. Size, when stratified on, is binned at 1, 2 and 4 cm.
pub fn labels_of(f: &FeatureSet, stratify_on: &[Feature]) -> Vec<Label> {
    let mut out: Vec<Label> = stratify_on
        .iter()
        .filter_map(|&feature| {
            let value = match feature {
                Feature::Size => f.size_cm.map(size_bin),
                _ => f.token(feature),
            }?;
            Some(Label { feature, value })
        })
        .collect();
    out.sort();
    out.dedup();
    out
}

struct Unit {
    members: Vec<usize>,
    labels: BTreeMap<Label, usize>,
}

fn build_units(manifest: &CohortManifest, cfg: &SplitConfig) -> Vec<Unit> {
    let mut units: Vec<Unit> = Vec::new();
    let mut by_patient: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, a) in manifest.annotations.iter().enumerate() {
        let slot = if cfg.strict_patient {
            *by_patient.entry(a.patient_id.as_str()).or_insert_with(|| {
                units.push(Unit {
                    members: Vec::new(),
                    labels: BTreeMap::new(),
                });
                units.len() - 1
            })
        } else {
            units.push(Unit {
                members: Vec::new(),
                labels: BTreeMap::new(),
            });
            units.len() - 1
        };
        units[slot].members.push(i);
        for l in labels_of(&a.features, &cfg.stratify_on) {
            *units[slot].labels.entry(l).or_insert(0) += 1;
        }
    }
    units
}

fn check_cfg(cfg: &SplitConfig, n_units: usize) -> Result<(), SplitError> {
    if cfg.k < 2 {
        return Err(SplitError::KTooSmall(cfg.k));
    }
    if cfg.k > n_units {
        return Err(SplitError::KTooLarge {
            k: cfg.k,
            n: n_units,
            unit: if cfg.strict_patient { "patient" } else { "annotation" },
        });
    }
    Ok(())
}

/// Iterative multi-label stratified k-fold assignment.
pub fn stratified_kfold(manifest: &CohortManifest, cfg: &SplitConfig) -> Result<FoldAssignment, SplitError> {
    let units = build_units(manifest, cfg);
    check_cfg(cfg, units.len())?;
    let k = cfg.k;
    let n = manifest.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut order: Vec<usize> = (0..units.len()).collect();
    order.shuffle(&mut rng);

    let mut unit_fold: Vec<Option<usize>> = vec![None; units.len()];
    let first_labels = &units[0].labels;
    let degenerate = units.iter().all(|u| &u.labels == first_labels);

    if degenerate {
        for (slot, &u) in order.iter().enumerate() {
            unit_fold[u] = Some(slot % k);
        }
    } else {
        let mut alloc = Allocator::new(&units, k, n, !cfg.strict_patient);
        // Rarest label first among those with unassigned examples.
        loop {
            let mut remaining: BTreeMap<Label, usize> = BTreeMap::new();
            for &u in &order {
                if unit_fold[u].is_none() {
                    for (&l, &c) in &units[u].labels {
                        *remaining.entry(l).or_insert(0) += c;
                    }
                }
            }
            let Some((&label, _)) = remaining.iter().min_by_key(|&(l, &c)| (c, *l)) else {
                break;
            };
            for &u in &order {
                if unit_fold[u].is_none() && units[u].labels.contains_key(&label) {
                    let f = alloc.choose(Some(label), &mut rng);
                    alloc.place(&units[u], f);
                    unit_fold[u] = Some(f);
                }
            }
        }
        for &u in &order {
            if unit_fold[u].is_none() {
                let f = alloc.choose(None, &mut rng);
                alloc.place(&units[u], f);
                unit_fold[u] = Some(f);
            }
        }
    }

    let mut fold = vec![0usize; n];
    for (u, unit) in units.iter().enumerate() {
        for &m in &unit.members {
            fold[m] = unit_fold[u].expect("every unit assigned");
        }
    }
    let out = FoldAssignment {
        seed: cfg.seed,
        k,
        assignments: manifest
            .annotations
            .iter()
            .zip(&fold)
            .map(|(a, &f)| FoldEntry {
                annotation_id: a.annotation_id.clone(),
                fold: f,
            })
            .collect(),
        pinned_training: Vec::new(),
        warnings: Vec::new(),
        swaps: 0,
    };
    if out.fold_sizes().contains(&0) {
        return Err(SplitError::Mismatch("stratification produced an empty fold".into()));
    }
    Ok(out)
}

struct Allocator {
    k: usize,
    label_demand: BTreeMap<Label, Vec<f64>>,
    total_demand: Vec<f64>,
    size: Vec<usize>,
    /// Exact capacities: `floor` per fold plus `extra` folds allowed to reach `floor + 1`.
    capacity: Option<(usize, usize)>,
}

impl Allocator {
    fn new(units: &[Unit], k: usize, n: usize, exact: bool) -> Self {
        let mut label_demand: BTreeMap<Label, Vec<f64>> = BTreeMap::new();
        for u in units {
            for (&l, &c) in &u.labels {
                let d = label_demand.entry(l).or_insert_with(|| vec![0.0; k]);
                for x in d.iter_mut() {
                    *x += c as f64 / k as f64;
                }
            }
        }
        Allocator {
            k,
            label_demand,
            total_demand: vec![n as f64 / k as f64; k],
            size: vec![0; k],
            capacity: exact.then_some((n / k, n % k)),
        }
    }

    fn open(&self, f: usize) -> bool {
        match self.capacity {
            None => true,
            Some((floor, extra)) => {
                let grown = self.size.iter().filter(|&&s| s > floor).count();
                self.size[f] < floor || (self.size[f] == floor && grown < extra)
            }
        }
    }

    fn choose(&self, label: Option<Label>, rng: &mut ChaCha8Rng) -> usize {
        let open: Vec<usize> = (0..self.k).filter(|&f| self.open(f)).collect();
        let key = |f: usize| {
            let ld = label.map_or(0.0, |l| self.label_demand[&l][f]);
            (ld, self.total_demand[f])
        };
        let best = open
            .iter()
            .map(|&f| key(f))
            .fold((f64::NEG_INFINITY, f64::NEG_INFINITY), |a, b| {
                if b.0 > a.0 || (b.0 == a.0 && b.1 > a.1) {
                    b
                } else {
                    a
                }
            });
        let tied: Vec<usize> = open.into_iter().filter(|&f| key(f) == best).collect();
        tied[rng.gen_range(0..tied.len())]
    }

    fn place(&mut self, unit: &Unit, f: usize) {
        self.size[f] += unit.members.len();
        self.total_demand[f] -= unit.members.len() as f64;
        for (l, &c) in &unit.labels {
            if let Some(d) = self.label_demand.get_mut(l) {
                d[f] -= c as f64;
            }
        }
    }
}

/// Per-label, per-fold instance counts of an assignment.
pub fn label_fold_counts(
    assignment: &FoldAssignment,
    manifest: &CohortManifest,
    stratify_on: &[Feature],
) -> BTreeMap<Label, Vec<usize>> {
    let mut counts: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for a in &manifest.annotations {
        let Some(f) = assignment.fold_of(&a.annotation_id) else {
            continue;
        };
        for l in labels_of(&a.features, stratify_on) {
            counts.entry(l).or_insert_with(|| vec![0; assignment.k])[f] += 1;
        }
    }
    counts
}

struct Repair<'a> {
    units: &'a [Unit],
    unit_fold: Vec<usize>,
    k: usize,
    floor: usize,
    /// Labels whose single instance is pinned; excluded from the rules.
    exempt: BTreeSet<Label>,
}

impl Repair<'_> {
    fn counts(&self) -> BTreeMap<Label, Vec<usize>> {
        let mut counts: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
        for (u, unit) in self.units.iter().enumerate() {
            for (&l, &c) in &unit.labels {
                counts.entry(l).or_insert_with(|| vec![0; self.k])[self.unit_fold[u]] += c;
            }
        }
        counts
    }

    /// Rule violations per label: how many folds fall short.
    fn violations(&self, counts: &BTreeMap<Label, Vec<usize>>) -> BTreeMap<Label, usize> {
        let mut out = BTreeMap::new();
        for (&l, per_fold) in counts {
            if self.exempt.contains(&l) {
                continue;
            }
            let total: usize = per_fold.iter().sum();
            let mut shortfall = 0;
            // Training side of fold f holds total − per_fold[f] instances.
            if total >= 2 {
                shortfall += per_fold.iter().filter(|&&c| c == total).count();
            }
            if self.floor > 0 && total >= self.floor * self.k {
                shortfall += per_fold.iter().filter(|&&c| c < self.floor).count();
            }
            if shortfall > 0 {
                out.insert(l, shortfall);
            }
        }
        out
    }

    fn score(&self) -> (usize, usize) {
        let v = self.violations(&self.counts());
        (v.len(), v.values().sum())
    }

    /// Best swap for `label`: moves one of its holders out of an over-supplied
    /// fold in exchange for a non-holder of a short fold, minimizing remaining violations.
    fn best_swap(&mut self, label: Label) -> Option<(usize, usize, (usize, usize))> {
        let counts = self.counts();
        let per_fold = &counts[&label];
        let total: usize = per_fold.iter().sum();
        let donors: Vec<usize> = (0..self.k).filter(|&f| per_fold[f] >= 2 || per_fold[f] == total).collect();
        let needy: Vec<usize> = (0..self.k)
            .filter(|&f| per_fold[f] < self.floor.max(1) && per_fold[f] < total)
            .collect();
        let mut best: Option<(usize, usize, (usize, usize))> = None;
        for u in 0..self.units.len() {
            if !donors.contains(&self.unit_fold[u]) || !self.units[u].labels.contains_key(&label) {
                continue;
            }
            for v in 0..self.units.len() {
                if !needy.contains(&self.unit_fold[v])
                    || self.units[v].labels.contains_key(&label)
                    || self.units[v].members.len() != self.units[u].members.len()
                {
                    continue;
                }
                let (fu, fv) = (self.unit_fold[u], self.unit_fold[v]);
                self.unit_fold[u] = fv;
                self.unit_fold[v] = fu;
                let s = self.score();
                self.unit_fold[u] = fu;
                self.unit_fold[v] = fv;
                if best.as_ref().is_none_or(|b| s < b.2) {
                    best = Some((u, v, s));
                }
            }
        }
        best
    }
}

/// Repairs rare labels so that every label value with ≥ 2 instances is present
/// on every fold's training side (and, past `minority_floor · k` instances, on
/// every validation side). Single-instance label values are pinned to training
/// with a warning. Swaps exchange fold indices of two same-sized units, so fold
/// sizes never change; a balanced assignment is returned untouched.
pub fn enforce_minority_presence(
    assignment: &FoldAssignment,
    manifest: &CohortManifest,
    cfg: &SplitConfig,
) -> FoldAssignment {
    let units = build_units(manifest, cfg);
    let mut out = assignment.clone();
    let fold_by_id: BTreeMap<&str, usize> = assignment
        .assignments
        .iter()
        .map(|e| (e.annotation_id.as_str(), e.fold))
        .collect();
    let unit_fold: Vec<usize> = units
        .iter()
        .map(|u| fold_by_id[manifest.annotations[u.members[0]].annotation_id.as_str()])
        .collect();

    let mut totals: BTreeMap<Label, usize> = BTreeMap::new();
    for u in &units {
        for (&l, &c) in &u.labels {
            *totals.entry(l).or_insert(0) += c;
        }
    }
    let exempt: BTreeSet<Label> = totals.iter().filter(|&(_, &c)| c < 2).map(|(&l, _)| l).collect();
    for l in &exempt {
        for u in &units {
            if u.labels.contains_key(l) {
                for &m in &u.members {
                    let id = manifest.annotations[m].annotation_id.clone();
                    let msg = format!("{l} occurs once; {id} pinned to training in all folds");
                    tracing::warn!("{msg}");
                    if !out.pinned_training.contains(&id) {
                        out.pinned_training.push(id);
                    }
                    out.warnings.push(msg);
                }
            }
        }
    }

    let mut repair = Repair {
        units: &units,
        unit_fold,
        k: assignment.k,
        floor: cfg.minority_floor,
        exempt,
    };
    let mut swaps = 0;
    let mut current = repair.score();
    while current.0 > 0 {
        let violations = repair.violations(&repair.counts());
        let mut by_rarity: Vec<Label> = violations.keys().copied().collect();
        by_rarity.sort_by_key(|l| (totals[l], *l));
        let mut progressed = false;
        for label in by_rarity {
            if let Some((u, v, s)) = repair.best_swap(label) {
                if s < current {
                    repair.unit_fold.swap(u, v);
                    current = s;
                    swaps += 1;
                    progressed = true;
                    break;
                }
            }
        }
        if !progressed {
            for l in repair.violations(&repair.counts()).keys() {
                let msg = format!("{l} could not be repaired by swaps");
                tracing::warn!("{msg}");
                out.warnings.push(msg);
            }
            break;
        }
    }

    for (u, unit) in units.iter().enumerate() {
        for &m in &unit.members {
            out.assignments[m].fold = repair.unit_fold[u];
        }
    }
    out.swaps = assignment.swaps + swaps;
    out
}

/// Stratify then repair.
pub fn split(manifest: &CohortManifest, cfg: &SplitConfig) -> Result<FoldAssignment, SplitError> {
    let a = stratified_kfold(manifest, cfg)?;
    Ok(enforce_minority_presence(&a, manifest, cfg))
}
