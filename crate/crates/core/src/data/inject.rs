//! Anomaly injection: attribute (Type-I), class (Type-II) and view
//! (Type-III) anomalies, and their mixture.
//!
//! Type-I replaces every view of an instance with per-feature uniform draws
//! over the feature's empirical range. Type-II swaps one view between two
//! instances of different classes. Type-III does the same swap and also
//! perturbs the remaining views of both instances as in Type-I.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnomalyType, MultiViewDataset};
use crate::error::{DpoeError, Result};
use crate::scalar::Scalar;

/// Share of instances each type receives in a mixture corpus.
pub const MIX_TYPE_RATIO: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InjectionKind {
    #[serde(rename = "1")]
    TypeI,
    #[serde(rename = "2")]
    TypeII,
    #[serde(rename = "3")]
    TypeIII,
    #[serde(rename = "mix")]
    Mix,
}

impl FromStr for InjectionKind {
    type Err = DpoeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1" | "I" => Ok(Self::TypeI),
            "2" | "II" => Ok(Self::TypeII),
            "3" | "III" => Ok(Self::TypeIII),
            "mix" | "Mix" => Ok(Self::Mix),
            other => Err(DpoeError::Injection(format!("unknown anomaly type '{other}'"))),
        }
    }
}

impl fmt::Display for InjectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TypeI => "I",
            Self::TypeII => "II",
            Self::TypeIII => "III",
            Self::Mix => "Mix",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeCounts {
    pub type_i: usize,
    pub type_ii: usize,
    pub type_iii: usize,
}

impl TypeCounts {
    pub fn total(&self) -> usize {
        self.type_i + self.type_ii + self.type_iii
    }
}

/// One swapped pair and the view that was exchanged.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapRecord {
    pub a: usize,
    pub b: usize,
    pub view: String,
    pub anomaly_type: AnomalyType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionReport {
    pub kind: InjectionKind,
    /// Requested anomalous share of the corpus (summed over types for a mixture).
    pub ratio: f64,
    pub seed: u64,
    pub n: usize,
    pub counts: TypeCounts,
    /// Type-I instances.
    pub perturbed: Vec<usize>,
    /// Type-II and Type-III pairs.
    pub swaps: Vec<SwapRecord>,
}

fn check_ratio(ratio: f64, n: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DpoeError::Injection(format!("ratio must lie in (0, 1), got {ratio}")));
    }
    let count = (ratio * n as f64).round() as usize;
    if count < 1 {
        return Err(DpoeError::Injection(format!("ratio {ratio} of {n} instances selects nobody")));
    }
    Ok(count)
}

fn check_classes<T: Scalar>(d: &MultiViewDataset<T>) -> Result<()> {
    let ids = d
        .class_ids
        .as_ref()
        .ok_or_else(|| DpoeError::Injection("class anomalies need class_ids".into()))?;
    if ids.iter().all(|&c| c == ids[0]) {
        return Err(DpoeError::Injection("class anomalies need at least two classes".into()));
    }
    Ok(())
}

struct Injector<T> {
    data: MultiViewDataset<T>,
    /// Per view, per feature `(min, max)` of the clean corpus.
    ranges: Vec<Vec<(f64, f64)>>,
    used: Vec<bool>,
    rng: ChaCha8Rng,
    report: InjectionReport,
}

impl<T: Scalar> Injector<T> {
    fn new(d: &MultiViewDataset<T>, kind: InjectionKind, ratio: f64, seed: u64) -> Result<Self> {
        d.validate()?;
        let ranges = d
            .views
            .iter()
            .map(|x| {
                x.columns()
                    .into_iter()
                    .map(|col| {
                        col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                            (lo.min(v.as_f64()), hi.max(v.as_f64()))
                        })
                    })
                    .collect()
            })
            .collect();
        let mut data = d.clone();
        let n = d.len();
        data.labels.get_or_insert_with(|| vec![0; n]);
        data.anomaly_type.get_or_insert_with(|| vec![AnomalyType::None; n]);
        let used = data.labels.as_ref().expect("labels").iter().map(|&l| l != 0).collect();
        Ok(Self {
            data,
            ranges,
            used,
            rng: ChaCha8Rng::seed_from_u64(seed),
            report: InjectionReport {
                kind,
                ratio,
                seed,
                n,
                counts: TypeCounts::default(),
                perturbed: Vec::new(),
                swaps: Vec::new(),
            },
        })
    }

    fn mark(&mut self, i: usize, t: AnomalyType) {
        self.used[i] = true;
        self.data.labels.as_mut().expect("labels")[i] = 1;
        self.data.anomaly_type.as_mut().expect("types")[i] = t;
    }

    fn perturb(&mut self, i: usize, view: usize) {
        let mut row = self.data.views[view].row_mut(i);
        for (j, &(lo, hi)) in self.ranges[view].iter().enumerate() {
            let v = if hi > lo { self.rng.random_range(lo..hi) } else { lo };
            row[j] = T::lit(v);
        }
    }

    fn swap(&mut self, a: usize, b: usize, view: usize) {
        let x = &mut self.data.views[view];
        for j in 0..x.ncols() {
            x.swap([a, j], [b, j]);
        }
    }

    fn free(&self) -> Vec<usize> {
        (0..self.used.len()).filter(|&i| !self.used[i]).collect()
    }

    fn type1(&mut self, count: usize) -> Result<()> {
        let free = self.free();
        if free.len() < count {
            return Err(DpoeError::Injection(format!("{count} Type-I instances requested, {} free", free.len())));
        }
        let mut chosen: Vec<usize> = free.choose_multiple(&mut self.rng, count).copied().collect();
        chosen.sort_unstable();
        for &i in &chosen {
            for v in 0..self.data.num_views() {
                self.perturb(i, v);
            }
            self.mark(i, AnomalyType::I);
        }
        self.report.counts.type_i += count;
        self.report.perturbed.extend(chosen);
        Ok(())
    }

    fn pairs(&mut self, pairs: usize, t: AnomalyType) -> Result<()> {
        check_classes(&self.data)?;
        let classes = self.data.class_ids.clone().expect("checked");
        let m = self.data.num_views();
        for _ in 0..pairs {
            let free = self.free();
            let has_partner = |a: usize| free.iter().any(|&b| classes[b] != classes[a]);
            let candidates: Vec<usize> = free.iter().copied().filter(|&a| has_partner(a)).collect();
            let &a = candidates
                .choose(&mut self.rng)
                .ok_or_else(|| DpoeError::Injection("no cross-class pair left to swap".into()))?;
            let partners: Vec<usize> = free.iter().copied().filter(|&b| classes[b] != classes[a]).collect();
            let &b = partners.choose(&mut self.rng).expect("partner exists");
            let view = self.rng.random_range(0..m);
            self.swap(a, b, view);
            if t == AnomalyType::III {
                for other in (0..m).filter(|&v| v != view) {
                    self.perturb(a, other);
                    self.perturb(b, other);
                }
            }
            self.mark(a, t);
            self.mark(b, t);
            self.report.swaps.push(SwapRecord {
                a,
                b,
                view: self.data.specs[view].name.clone(),
                anomaly_type: t,
            });
        }
        match t {
            AnomalyType::II => self.report.counts.type_ii += 2 * pairs,
            _ => self.report.counts.type_iii += 2 * pairs,
        }
        Ok(())
    }

    fn finish(self) -> (MultiViewDataset<T>, InjectionReport) {
        (self.data, self.report)
    }
}

/// Pairs for `count` anomalous instances; an odd count rounds down.
fn pair_count(count: usize) -> Result<usize> {
    if count < 2 {
        return Err(DpoeError::Injection("class anomalies need at least one pair".into()));
    }
    Ok(count / 2)
}

pub fn inject_type1<T: Scalar>(
    d: &MultiViewDataset<T>,
    ratio: f64,
    seed: u64,
) -> Result<(MultiViewDataset<T>, InjectionReport)> {
    let count = check_ratio(ratio, d.len())?;
    let mut inj = Injector::new(d, InjectionKind::TypeI, ratio, seed)?;
    inj.type1(count)?;
    Ok(inj.finish())
}

pub fn inject_type2<T: Scalar>(
    d: &MultiViewDataset<T>,
    ratio: f64,
    seed: u64,
) -> Result<(MultiViewDataset<T>, InjectionReport)> {
    let pairs = pair_count(check_ratio(ratio, d.len())?)?;
    check_classes(d)?;
    let mut inj = Injector::new(d, InjectionKind::TypeII, ratio, seed)?;
    inj.pairs(pairs, AnomalyType::II)?;
    Ok(inj.finish())
}

pub fn inject_type3<T: Scalar>(
    d: &MultiViewDataset<T>,
    ratio: f64,
    seed: u64,
) -> Result<(MultiViewDataset<T>, InjectionReport)> {
    let pairs = pair_count(check_ratio(ratio, d.len())?)?;
    check_classes(d)?;
    let mut inj = Injector::new(d, InjectionKind::TypeIII, ratio, seed)?;
    inj.pairs(pairs, AnomalyType::III)?;
    Ok(inj.finish())
}

/// Types I, II and III on disjoint instance sets, `per_type_ratio` of the
/// corpus each.
pub fn inject_mix_with_ratio<T: Scalar>(
    d: &MultiViewDataset<T>,
    per_type_ratio: f64,
    seed: u64,
) -> Result<(MultiViewDataset<T>, InjectionReport)> {
    let count = check_ratio(per_type_ratio, d.len())?;
    let pairs = pair_count(count)?;
    check_classes(d)?;
    let mut inj = Injector::new(d, InjectionKind::Mix, 3.0 * per_type_ratio, seed)?;
    inj.type1(count)?;
    inj.pairs(pairs, AnomalyType::II)?;
    inj.pairs(pairs, AnomalyType::III)?;
    Ok(inj.finish())
}

/// Mixture with 5% of each type.
pub fn inject_mix<T: Scalar>(d: &MultiViewDataset<T>, seed: u64) -> Result<(MultiViewDataset<T>, InjectionReport)> {
    inject_mix_with_ratio(d, MIX_TYPE_RATIO, seed)
}

/// Dispatch on `kind`; for a mixture `ratio` is the per-type share.
pub fn inject<T: Scalar>(
    d: &MultiViewDataset<T>,
    kind: InjectionKind,
    ratio: f64,
    seed: u64,
) -> Result<(MultiViewDataset<T>, InjectionReport)> {
    match kind {
        InjectionKind::TypeI => inject_type1(d, ratio, seed),
        InjectionKind::TypeII => inject_type2(d, ratio, seed),
        InjectionKind::TypeIII => inject_type3(d, ratio, seed),
        InjectionKind::Mix => inject_mix_with_ratio(d, ratio, seed),
    }
}
