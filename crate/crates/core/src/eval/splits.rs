//! Stratified train/test fold plans.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::SplitMode;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::Label;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    /// Sorted dataset indices.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub folds: Vec<Fold>,
    pub seed: u64,
    pub stratified: bool,
    pub mode: SplitMode,
    pub grouped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitOptions {
    pub folds: usize,
    pub train_frac: f64,
    pub seed: u64,
    pub mode: SplitMode,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            folds: 5,
            train_frac: 0.8,
            seed: 0,
            mode: SplitMode::Holdout,
        }
    }
}

/// Train counts per class summing to `round(frac · Σ sizes)`, each within
/// one of `frac · size` (largest remainder, ties to the lower class index).
fn allocate(sizes: &[usize], frac: f64) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let target = (frac * total as f64).round() as usize;
    let ideal: Vec<f64> = sizes.iter().map(|&n| frac * n as f64).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = target.saturating_sub(counts.iter().sum());
    for &c in order.iter().cycle().take(sizes.len() * 2) {
        if missing == 0 {
            break;
        }
        if counts[c] < sizes[c] {
            counts[c] += 1;
            missing -= 1;
        }
    }
    counts
}

/// Units to split: single samples, or whole subjects when grouping. Each
/// unit carries the majority label of its members (ties go to Drowsy).
fn units(labels: &[Label], groups: Option<&[String]>) -> Vec<(Label, Vec<usize>)> {
    match groups {
        None => labels.iter().enumerate().map(|(i, &l)| (l, vec![i])).collect(),
        Some(groups) => {
            let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, g) in groups.iter().enumerate() {
                by_group.entry(g.as_str()).or_default().push(i);
            }
            by_group
                .into_values()
                .map(|members| {
                    let drowsy = members.iter().filter(|&&i| labels[i] == Label::Drowsy).count();
                    let label = if 2 * drowsy >= members.len() {
                        Label::Drowsy
                    } else {
                        Label::Alert
                    };
                    (label, members)
                })
                .collect()
        }
    }
}

/// `folds` stratified splits over `labels`. With `groups`, all samples of a
/// group land on the same side of every split.
pub fn make_splits(labels: &[Label], groups: Option<&[String]>, opts: &SplitOptions) -> Result<SplitPlan> {
    if let Some(g) = groups {
        if g.len() != labels.len() {
            return Err(Error::invalid("make_splits", "one group per sample required"));
        }
    }
    if opts.folds < 2 {
        return Err(Error::invalid("make_splits", "at least two folds required"));
    }
    if !(opts.train_frac > 0.0 && opts.train_frac < 1.0) {
        return Err(Error::invalid(
            "make_splits",
            format!("train fraction {}", opts.train_frac),
        ));
    }
    let units = units(labels, groups);
    let classes = [Label::Alert, Label::Drowsy];
    let per_class: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| (0..units.len()).filter(|&u| units[u].0 == c).collect())
        .collect();
    for (c, members) in classes.iter().zip(&per_class) {
        if members.len() < opts.folds {
            let what = if groups.is_some() { "subjects" } else { "samples" };
            return Err(Error::Dataset(format!(
                "class {c} has {} {what}, need at least {} for {} folds",
                members.len(),
                opts.folds,
                opts.folds
            )));
        }
    }

    let finish = |train_units: Vec<usize>, test_units: Vec<usize>| {
        let expand = |us: Vec<usize>| {
            let mut v: Vec<usize> = us.iter().flat_map(|&u| units[u].1.iter().copied()).collect();
            v.sort_unstable();
            v
        };
        Fold {
            train: expand(train_units),
            test: expand(test_units),
        }
    };

    let folds = match opts.mode {
        SplitMode::Holdout => {
            let sizes: Vec<usize> = per_class.iter().map(Vec::len).collect();
            let counts = allocate(&sizes, opts.train_frac);
            (0..opts.folds)
                .map(|f| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, f as u64));
                    let (mut train, mut test) = (Vec::new(), Vec::new());
                    for (members, &n_train) in per_class.iter().zip(&counts) {
                        let mut shuffled = members.clone();
                        shuffled.shuffle(&mut rng);
                        train.extend_from_slice(&shuffled[..n_train]);
                        test.extend_from_slice(&shuffled[n_train..]);
                    }
                    finish(train, test)
                })
                .collect()
        }
        SplitMode::Partition => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, u64::MAX));
            let mut assignment = vec![0usize; units.len()];
            let mut slot = 0;
            for members in &per_class {
                let mut shuffled = members.clone();
                shuffled.shuffle(&mut rng);
                for u in shuffled {
                    assignment[u] = slot % opts.folds;
                    slot += 1;
                }
            }
            (0..opts.folds)
                .map(|f| {
                    let (test, train): (Vec<usize>, Vec<usize>) = (0..units.len()).partition(|&u| assignment[u] == f);
                    finish(train, test)
                })
                .collect()
        }
    };
    Ok(SplitPlan {
        folds,
        seed: opts.seed,
        stratified: true,
        mode: opts.mode,
        grouped: groups.is_some(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(n: usize) -> Vec<Label> {
        (0..n)
            .map(|i| if i < n / 2 { Label::Alert } else { Label::Drowsy })
            .collect()
    }

    #[test]
    fn counts_for_920_balanced() {
        let labels = balanced(920);
        let plan = make_splits(&labels, None, &SplitOptions::default()).unwrap();
        assert_eq!(plan.folds.len(), 5);
        for fold in &plan.folds {
            assert_eq!((fold.train.len(), fold.test.len()), (736, 184));
            let drowsy_test = fold.test.iter().filter(|&&i| labels[i] == Label::Drowsy).count();
            assert_eq!(drowsy_test, 92);
        }
        assert_ne!(plan.folds[0], plan.folds[1]);
    }

    #[test]
    fn deterministic_and_disjoint() {
        let labels = balanced(50);
        let opts = SplitOptions {
            seed: 3,
            ..SplitOptions::default()
        };
        let a = make_splits(&labels, None, &opts).unwrap();
        assert_eq!(a, make_splits(&labels, None, &opts).unwrap());
        for fold in &a.folds {
            assert!(fold.train.iter().all(|i| fold.test.binary_search(i).is_err()));
            assert_eq!(fold.train.len() + fold.test.len(), 50);
        }
    }

    #[test]
    fn too_few_samples_per_class() {
        let mut labels = vec![Label::Alert; 20];
        labels.extend([Label::Drowsy; 4]);
        assert!(matches!(
            make_splits(&labels, None, &SplitOptions::default()),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn partition_covers_every_sample_once() {
        let labels = balanced(23);
        let opts = SplitOptions {
            mode: SplitMode::Partition,
            ..SplitOptions::default()
        };
        let plan = make_splits(&labels, None, &opts).unwrap();
        let mut seen: Vec<usize> = plan.folds.iter().flat_map(|f| f.test.iter().copied()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn grouping_keeps_subjects_together() {
        let labels = balanced(120);
        let groups: Vec<String> = (0..120).map(|i| format!("S{}", i / 10)).collect();
        let plan = make_splits(
            &labels,
            Some(&groups),
            &SplitOptions {
                seed: 1,
                ..SplitOptions::default()
            },
        )
        .unwrap();
        for fold in &plan.folds {
            for &i in &fold.test {
                assert!(fold.train.iter().all(|&j| groups[j] != groups[i]));
            }
        }
    }

    #[test]
    fn allocation_rounds_the_total() {
        assert_eq!(allocate(&[460, 460], 0.8), vec![368, 368]);
        let c = allocate(&[7, 8], 0.8);
        assert_eq!(c.iter().sum::<usize>(), 12);
        assert!(c[0].abs_diff(6) <= 1 && c[1].abs_diff(6) <= 1);
    }
}
