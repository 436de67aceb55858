use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Indices into the original cohort, each list in ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Age-stratified hold-out split.
///
/// Ages are binned in `bin_width`-year bins starting at the youngest subject.
/// Each bin sends `round(test_fraction · size)` subjects to test (at least one
/// when the fraction is positive), chosen by a seeded shuffle within the bin.
pub fn stratified_split(ages: &[f64], test_fraction: f64, bin_width: f64, seed: u64) -> Result<Split> {
    if ages.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(format!("test fraction must be in [0, 1), got {test_fraction}")));
    }
    if !(bin_width > 0.0) {
        return Err(Error::InvalidArgument(format!("bin width must be positive, got {bin_width}")));
    }
    if ages.iter().any(|a| !a.is_finite()) {
        return Err(Error::InvalidArgument("ages must be finite".into()));
    }
    let youngest = ages.iter().copied().fold(f64::INFINITY, f64::min);
    let bin_of = |a: f64| ((a - youngest) / bin_width).floor() as usize;
    let n_bins = ages.iter().map(|&a| bin_of(a)).max().unwrap_or(0) + 1;
    let mut bins = vec![Vec::new(); n_bins];
    for (i, &a) in ages.iter().enumerate() {
        bins[bin_of(a)].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test = Vec::new();
    for bin in bins.iter_mut().filter(|b| !b.is_empty()) {
        bin.shuffle(&mut rng);
        let mut k = (test_fraction * bin.len() as f64).round() as usize;
        if test_fraction > 0.0 {
            k = k.max(1);
        }
        test.extend_from_slice(&bin[..k]);
    }
    test.sort_unstable();
    let mut is_test = vec![false; ages.len()];
    test.iter().for_each(|&i| is_test[i] = true);
    let train = (0..ages.len()).filter(|&i| !is_test[i]).collect();
    Ok(Split { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ten_in_one_bin() {
        let ages = vec![70.0; 10];
        let s = stratified_split(&ages, 0.2, 3.0, 1).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (8, 2));
    }

    #[test]
    fn zero_fraction_keeps_everything() {
        let s = stratified_split(&[65.0], 0.0, 3.0, 1).unwrap();
        assert_eq!(s.train, vec![0]);
        assert!(s.test.is_empty());
        assert!(stratified_split(&[], 0.2, 3.0, 1).is_err());
    }

    #[test]
    fn seed_changes_members_not_counts() {
        let ages: Vec<f64> = (0..60).map(|i| 60.0 + (i as f64 * 0.43) % 26.0).collect();
        let a = stratified_split(&ages, 0.2, 3.0, 1).unwrap();
        assert_eq!(a, stratified_split(&ages, 0.2, 3.0, 1).unwrap());
        let b = stratified_split(&ages, 0.2, 3.0, 2).unwrap();
        assert_ne!(a.test, b.test);
        assert_eq!(a.test.len(), b.test.len());
    }

    proptest! {
        #[test]
        fn partition_with_bounded_bin_share(
            ages in prop::collection::vec(60.0f64..86.0, 1..120),
            seed in 0u64..1000,
        ) {
            let s = stratified_split(&ages, 0.2, 3.0, seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..ages.len()).collect::<Vec<_>>());

            let youngest = ages.iter().copied().fold(f64::INFINITY, f64::min);
            let bin = |a: f64| ((a - youngest) / 3.0).floor() as usize;
            let mut sizes = std::collections::HashMap::<usize, (usize, usize)>::new();
            for (i, &a) in ages.iter().enumerate() {
                let e = sizes.entry(bin(a)).or_default();
                e.0 += 1;
                if s.test.contains(&i) { e.1 += 1; }
            }
            for (total, tested) in sizes.values() {
                let target = 0.2 * *total as f64;
                prop_assert!((*tested as f64 - target).abs() <= 1.0);
            }
        }
    }
}
