//! Species downsampling and species-balanced batches.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

/// Splits `target` across classes in proportion to `counts`, handing the
/// remainder to the largest fractional parts (lowest class first on ties).
pub fn proportional_quotas(counts: &[usize], target: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0; counts.len()];
    }
    let mut quotas: Vec<usize> = counts.iter().map(|&c| c * target / total).collect();
    let mut rem: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (c * target % total, i))
        .collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = target - quotas.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(short) {
        quotas[i] += 1;
    }
    quotas
}

/// Downsamples every species' pool to the size of the smallest one by
/// seeded sampling without replacement, stratified by class. `labels[s][i]`
/// is the class of `pools[s][i]`. Selected items keep their pool order.
pub fn equalize_species(pools: &[Vec<usize>], labels: &[Vec<usize>], seed: u64) -> Result<Vec<Vec<usize>>> {
    if let Some(s) = pools.iter().position(|p| p.is_empty()) {
        return Err(Error::EmptySpecies(s));
    }
    let target = pools.iter().map(Vec::len).min().unwrap_or(0);
    let mut out = Vec::with_capacity(pools.len());
    for (s, (pool, labs)) in pools.iter().zip(labels).enumerate() {
        assert_eq!(pool.len(), labs.len(), "labels must parallel the pool");
        if pool.len() == target {
            out.push(pool.clone());
            continue;
        }
        let k = labs.iter().max().map_or(0, |m| m + 1);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (pos, &l) in labs.iter().enumerate() {
            by_class[l].push(pos);
        }
        let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
        let quotas = proportional_quotas(&counts, target);
        let mut keep = Vec::with_capacity(target);
        for (c, (members, quota)) in by_class.iter_mut().zip(quotas).enumerate() {
            let mut rng = seeded(derive_seed(seed, &[s as u64, c as u64]));
            members.shuffle(&mut rng);
            keep.extend_from_slice(&members[..quota]);
        }
        keep.sort_unstable();
        out.push(keep.into_iter().map(|pos| pool[pos]).collect());
    }
    Ok(out)
}

/// One training batch with the same number of items from every species.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalancedBatch {
    pub per_species: Vec<Vec<usize>>,
}

pub fn check_batch_size(batch_size: usize, species: usize) -> Result<usize> {
    if species == 0 || batch_size < species || batch_size % species != 0 {
        let suggestion = (batch_size / species.max(1)).max(1) * species.max(1);
        return Err(Error::IndivisibleBatch {
            batch_size,
            species,
            suggestion,
        });
    }
    Ok(batch_size / species)
}

/// Batches for one epoch: each pool is shuffled independently and cut into
/// runs of `batch_size / S`; the epoch ends when the shortest pool runs out.
pub fn make_batches(pools: &[Vec<usize>], batch_size: usize, seed: u64) -> Result<Vec<BalancedBatch>> {
    let per = check_batch_size(batch_size, pools.len())?;
    let shuffled: Vec<Vec<usize>> = pools
        .iter()
        .enumerate()
        .map(|(s, p)| {
            let mut p = p.clone();
            p.shuffle(&mut seeded(derive_seed(seed, &[s as u64])));
            p
        })
        .collect();
    let n_batches = shuffled.iter().map(|p| p.len() / per).min().unwrap_or(0);
    Ok((0..n_batches)
        .map(|b| BalancedBatch {
            per_species: shuffled.iter().map(|p| p[b * per..(b + 1) * per].to_vec()).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_dataset_sizes_downsample_to_smallest() {
        let sizes = [87_621usize, 149_725, 10_429];
        let pools: Vec<Vec<usize>> = sizes.iter().map(|&n| (0..n).collect()).collect();
        let labels: Vec<Vec<usize>> = sizes.iter().map(|&n| (0..n).map(|i| i % 5).collect()).collect();
        let eq = equalize_species(&pools, &labels, 3).unwrap();
        assert_eq!(eq.iter().map(Vec::len).collect::<Vec<_>>(), vec![10_429; 3]);
    }

    #[test]
    fn equal_pools_unchanged() {
        let pools = vec![vec![4, 5, 6], vec![1, 2, 3]];
        let labels = vec![vec![0, 1, 0], vec![1, 1, 0]];
        assert_eq!(equalize_species(&pools, &labels, 9).unwrap(), pools);
    }

    #[test]
    fn stratified_downsampling_keeps_proportions() {
        let big: Vec<usize> = (0..500).collect();
        let big_labels: Vec<usize> = (0..500).map(|i| usize::from(i >= 400)).collect();
        let small: Vec<usize> = (1000..1100).collect();
        let eq = equalize_species(&[big, small], &[big_labels, vec![0; 100]], 1).unwrap();
        let class1 = eq[0].iter().filter(|&&i| i >= 400).count();
        assert_eq!(eq[0].len(), 100);
        assert!((19..=21).contains(&class1), "{class1}");
        assert!(equalize_species(&[vec![], vec![1]], &[vec![], vec![0]], 0).is_err());
    }

    #[test]
    fn batches_are_balanced_and_deterministic() {
        let pools: Vec<Vec<usize>> = (0..3).map(|s| (s * 100..s * 100 + 12).collect()).collect();
        let b = make_batches(&pools, 6, 5).unwrap();
        assert_eq!(b.len(), 6);
        assert!(b.iter().all(|x| x.per_species.iter().all(|p| p.len() == 2)));
        assert_eq!(b, make_batches(&pools, 6, 5).unwrap());
        assert_ne!(b, make_batches(&pools, 6, 6).unwrap());
    }

    #[test]
    fn indivisible_batch_suggests_255() {
        let pools = vec![vec![0]; 3];
        match make_batches(&pools, 256, 0) {
            Err(Error::IndivisibleBatch { suggestion, .. }) => assert_eq!(suggestion, 255),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn quotas_sum_to_target() {
        assert_eq!(proportional_quotas(&[50, 30, 20], 10), vec![5, 3, 2]);
        assert_eq!(proportional_quotas(&[1, 1, 1], 2), vec![1, 1, 0]);
        assert_eq!(proportional_quotas(&[7, 3], 5).iter().sum::<usize>(), 5);
    }
}
