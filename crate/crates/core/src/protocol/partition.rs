use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SampleRecord, Split};
use crate::error::{invalid_config, invalid_input, Result};

/// Fixed labeled subset plus ordered unlabeled folds of the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPartition {
    pub labeled: Vec<SampleRecord>,
    pub folds: Vec<Vec<SampleRecord>>,
    pub labeled_frac: f64,
    pub seed: u64,
}

impl DataPartition {
    pub fn unlabeled_len(&self) -> usize {
        self.folds.iter().map(Vec::len).sum()
    }
}

/// Stratified split of the train records: `floor(frac·N)` labeled, the rest
/// dealt round-robin (per class) into `folds` parts whose sizes differ by at
/// most one, earlier folds taking the remainder.
pub fn make_partition(manifest: &[SampleRecord], labeled_frac: f64, folds: usize, seed: u64) -> Result<DataPartition> {
    if !(labeled_frac > 0.0 && labeled_frac < 1.0) {
        return Err(invalid_config(format!("labeled_frac must lie in (0, 1), got {labeled_frac}")));
    }
    if folds == 0 {
        return Err(invalid_config("at least one unlabeled fold is required"));
    }
    let train: Vec<&SampleRecord> = manifest.iter().filter(|r| r.split == Split::Train).collect();
    if train.is_empty() {
        return Err(invalid_input("manifest has no train records"));
    }
    let n = train.len();
    let n_labeled = (labeled_frac * n as f64 + 1e-9).floor() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: BTreeMap<Option<usize>, Vec<&SampleRecord>> = BTreeMap::new();
    for r in &train {
        groups.entry(r.label).or_default().push(r);
    }
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
    }

    // per-class quotas by largest remainder
    let mut quotas: Vec<(Option<usize>, usize, f64)> = groups
        .iter()
        .map(|(k, v)| {
            let exact = labeled_frac * v.len() as f64;
            let base = (exact + 1e-9).floor() as usize;
            (*k, base, exact - base as f64)
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.1).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2).then(a.cmp(&b)));
    let mut remaining = n_labeled.saturating_sub(assigned);
    for &i in order.iter().cycle().take(order.len() * 2) {
        if remaining == 0 {
            break;
        }
        if quotas[i].1 < groups[&quotas[i].0].len() {
            quotas[i].1 += 1;
            remaining -= 1;
        }
    }

    let mut labeled = Vec::with_capacity(n_labeled);
    let mut rest = Vec::with_capacity(n - n_labeled);
    for (key, quota, _) in &quotas {
        let members = &groups[key];
        labeled.extend(members[..*quota].iter().map(|r| (*r).clone()));
        rest.extend(members[*quota..].iter().map(|r| (*r).clone()));
    }
    let mut fold_sets = vec![Vec::new(); folds];
    for (i, r) in rest.into_iter().enumerate() {
        fold_sets[i % folds].push(r);
    }
    Ok(DataPartition {
        labeled,
        folds: fold_sets,
        labeled_frac,
        seed,
    })
}

/// Which folds make up the unlabeled pool at each generation `T ∈ 1..=t_max`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationSchedule {
    pub t_max: usize,
    /// `cumulative[T - 1]` lists fold indices available at generation `T`.
    pub cumulative: Vec<Vec<usize>>,
}

impl GenerationSchedule {
    /// Adds folds evenly so generation `T` sees the first `ceil(T·F/t_max)`.
    pub fn linear(folds: usize, t_max: usize) -> Result<Self> {
        if folds == 0 {
            return Err(invalid_config("schedule needs at least one fold"));
        }
        let cumulative = (1..=t_max)
            .map(|t| (0..(t * folds).div_ceil(t_max)).collect())
            .collect();
        Ok(GenerationSchedule { t_max, cumulative })
    }

    pub fn folds_at(&self, t: usize) -> Result<&[usize]> {
        if t == 0 || t > self.t_max {
            return Err(invalid_input(format!("generation {t} outside 1..={}", self.t_max)));
        }
        Ok(&self.cumulative[t - 1])
    }
}

/// Union of the folds scheduled for generation `t`, in fold order.
pub fn pool_at(partition: &DataPartition, schedule: &GenerationSchedule, t: usize) -> Result<Vec<SampleRecord>> {
    let folds = schedule.folds_at(t)?;
    let mut pool = Vec::new();
    for &f in folds {
        let fold = partition
            .folds
            .get(f)
            .ok_or_else(|| invalid_input(format!("schedule references missing fold {f}")))?;
        pool.extend(fold.iter().cloned());
    }
    Ok(pool)
}

/// Pools for `T = 1..=t_max` with out-of-task records split into the same
/// number of folds and added on the same schedule. Injected copies lose their
/// label and carry the `injected` flag.
pub fn inject_unseen<R: Rng + ?Sized>(
    partition: &DataPartition,
    schedule: &GenerationSchedule,
    extra: &[SampleRecord],
    rng: &mut R,
) -> Result<Vec<Vec<SampleRecord>>> {
    let folds = partition.folds.len();
    let mut shuffled: Vec<SampleRecord> = extra
        .iter()
        .map(|r| SampleRecord {
            label: None,
            split: Split::Train,
            injected: true,
            ..r.clone()
        })
        .collect();
    shuffled.shuffle(rng);
    let mut extra_folds = vec![Vec::new(); folds];
    for (i, r) in shuffled.into_iter().enumerate() {
        extra_folds[i % folds].push(r);
    }
    (1..=schedule.t_max)
        .map(|t| {
            let mut pool = pool_at(partition, schedule, t)?;
            for &f in schedule.folds_at(t)? {
                pool.extend(extra_folds[f].iter().cloned());
            }
            Ok(pool)
        })
        .collect()
}

/// Copy of `records` in which each labeled record's label is replaced, with
/// probability `p`, by a uniformly drawn different class.
pub fn corrupt_labels<R: Rng + ?Sized>(
    records: &[SampleRecord],
    p: f64,
    class_names: &[String],
    rng: &mut R,
) -> Result<Vec<SampleRecord>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid_config(format!("corruption probability {p} outside [0, 1]")));
    }
    let k = class_names.len();
    if k < 2 {
        return Err(invalid_config("label corruption needs at least two classes"));
    }
    records
        .iter()
        .map(|r| {
            let mut out = r.clone();
            if let Some(label) = r.label {
                if label >= k {
                    return Err(invalid_input(format!("label {label} outside {k} classes")));
                }
                if rng.random_bool(p) {
                    let mut new = rng.random_range(0..k - 1);
                    if new >= label {
                        new += 1;
                    }
                    out.label = Some(new);
                    out.class_name = Some(class_names[new].clone());
                }
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn manifest(n: usize, classes: usize) -> Vec<SampleRecord> {
        (0..n)
            .map(|i| SampleRecord::new(format!("s{i:05}"), Some(i % classes), Split::Train))
            .collect()
    }

    #[test]
    fn paper_scale_arithmetic() {
        let m = manifest(35_985, 2);
        let p = make_partition(&m, 0.1, 3, 0).unwrap();
        assert_eq!(p.labeled.len(), 3_598);
        assert_eq!(p.unlabeled_len(), 32_387);
    }

    #[test]
    fn two_thousand_split() {
        let p = make_partition(&manifest(2000, 2), 0.1, 3, 1).unwrap();
        assert_eq!(p.labeled.len(), 200);
        let sizes: Vec<usize> = p.folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![600, 600, 600]);
    }

    #[test]
    fn single_fold_schedule() {
        let p = make_partition(&manifest(50, 2), 0.1, 1, 1).unwrap();
        assert_eq!(p.folds.len(), 1);
        let s = GenerationSchedule::linear(1, 1).unwrap();
        assert_eq!(pool_at(&p, &s, 1).unwrap().len(), 45);
        assert!(pool_at(&p, &s, 2).is_err());
    }

    #[test]
    fn stratified_labeled_fraction() {
        let mut m = manifest(300, 1);
        for r in m.iter_mut().take(70) {
            r.label = Some(1);
        }
        let p = make_partition(&m, 0.1, 3, 4).unwrap();
        let pos = p.labeled.iter().filter(|r| r.label == Some(1)).count();
        let neg = p.labeled.len() - pos;
        assert!((pos as f64 - 7.0).abs() <= 1.0);
        assert!((neg as f64 - 23.0).abs() <= 1.0);
    }

    #[test]
    fn bad_fraction_is_config_error() {
        for frac in [0.0, 1.0, -0.2, 1.5] {
            assert!(matches!(
                make_partition(&manifest(10, 2), frac, 3, 0),
                Err(crate::DistlError::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn pools_grow_and_t3_is_everything() {
        let p = make_partition(&manifest(100, 2), 0.1, 3, 2).unwrap();
        let s = GenerationSchedule::linear(3, 3).unwrap();
        assert_eq!(pool_at(&p, &s, 1).unwrap(), p.folds[0]);
        assert_eq!(pool_at(&p, &s, 3).unwrap().len(), 90);
    }

    #[test]
    fn injection_grows_by_thirds() {
        let p = make_partition(&manifest(90, 2), 0.1, 3, 2).unwrap();
        let s = GenerationSchedule::linear(3, 3).unwrap();
        let mut extra: Vec<SampleRecord> = (0..30)
            .map(|i| SampleRecord::new(format!("x{i}"), Some(2 + i % 4), Split::Train))
            .collect();
        extra.iter_mut().for_each(|r| r.class_name = Some("other".into()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pools = inject_unseen(&p, &s, &extra, &mut rng).unwrap();
        for (t, pool) in pools.iter().enumerate() {
            let base = pool_at(&p, &s, t + 1).unwrap().len();
            let injected = pool.iter().filter(|r| r.injected).count();
            assert_eq!(injected, 10 * (t + 1));
            assert_eq!(pool.len(), base + injected);
            assert!(pool.iter().filter(|r| r.injected).all(|r| r.label.is_none()));
        }
        let empty = inject_unseen(&p, &s, &[], &mut rng).unwrap();
        for (t, pool) in empty.iter().enumerate() {
            assert_eq!(pool, &pool_at(&p, &s, t + 1).unwrap());
        }
    }

    #[test]
    fn corruption_edges() {
        let names = vec!["normal".to_string(), "tb".to_string()];
        let m = manifest(200, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let same = corrupt_labels(&m, 0.0, &names, &mut rng).unwrap();
        assert!(same.iter().zip(&m).all(|(a, b)| a.label == b.label));
        let flipped = corrupt_labels(&m, 1.0, &names, &mut rng).unwrap();
        assert!(flipped.iter().zip(&m).all(|(a, b)| a.label != b.label && a.id == b.id));
        assert!(flipped.iter().all(|r| r.class_name.as_deref() == Some(names[r.label.unwrap()].as_str())));
        assert!(corrupt_labels(&m, 1.5, &names, &mut rng).is_err());
    }

    #[test]
    fn corruption_rate_is_binomial() {
        let names: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
        let m = manifest(10_000, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let out = corrupt_labels(&m, 0.05, &names, &mut rng).unwrap();
        let flips = out.iter().zip(&m).filter(|(a, b)| a.label != b.label).count() as f64;
        let sigma = (10_000.0f64 * 0.05 * 0.95).sqrt();
        assert!((flips - 500.0).abs() <= 3.0 * sigma, "{flips}");
    }

    #[test]
    fn partition_is_disjoint_and_covers_train() {
        let mut m = manifest(120, 3);
        m.push(SampleRecord::new("val", Some(0), Split::InternalVal));
        let p = make_partition(&m, 0.25, 4, 9).unwrap();
        let mut seen = HashSet::new();
        for r in p.labeled.iter().chain(p.folds.iter().flatten()) {
            assert!(seen.insert(r.id.clone()));
            assert_eq!(r.split, Split::Train);
        }
        assert_eq!(seen.len(), 120);
    }
}
