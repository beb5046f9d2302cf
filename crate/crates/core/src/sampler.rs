//! Progressive multi-strided random buffer sampling.
//!
//! The replay buffer is filled bucket by bucket. Every speaker seen so far
//! contributes the same number of rows, `n_spk_utt = floor(max_mem / n_tot)`,
//! so the buffer never exceeds `max_mem` once all buckets are included.

use std::collections::BTreeMap;

use ndarray::Axis;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConsentError, Result};
use crate::rng::{self, Stream};
use crate::types::{BucketId, LabeledEmbeddings, ReplayBuffer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub max_mem: usize,
    /// Utterances available per speaker in a shard (row stride of `zy_b`).
    pub n_s_utt: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            max_mem: 120,
            n_s_utt: 10,
        }
    }
}

/// Bucket id -> flattened utterance indices, grouped per speaker.
pub type IndexCollection = BTreeMap<BucketId, Vec<usize>>;

pub fn num_spk_utts(max_mem: usize, n_bkt: &[usize], n_reg_bkt: &[usize]) -> Result<usize> {
    if n_bkt.len() != n_reg_bkt.len() {
        return Err(ConsentError::MismatchedLengths {
            what: "n_bkt vs n_reg_bkt",
            expected: n_bkt.len(),
            actual: n_reg_bkt.len(),
        });
    }
    let n_tot: usize = n_bkt.iter().zip(n_reg_bkt).map(|(n, r)| n + r).sum();
    if n_tot == 0 {
        return Err(ConsentError::EmptyTopology);
    }
    match max_mem / n_tot {
        0 => Err(ConsentError::BudgetTooSmall {
            max_mem,
            total_speakers: n_tot,
        }),
        n => Ok(n),
    }
}

/// Draws `count` indices from `[lo, lo + width)`.
fn rand_sample<R: Rng>(
    rng: &mut R,
    lo: usize,
    width: usize,
    count: usize,
    replace: bool,
) -> Vec<usize> {
    let window: Vec<usize> = (lo..lo + width).collect();
    if replace {
        (0..count)
            .map(|_| *window.choose(rng).expect("non-empty window"))
            .collect()
    } else {
        window.choose_multiple(rng, count).copied().collect()
    }
}

/// Per bucket, `n_spk_utt` indices for each of its `n_b + n_reg_b` speakers,
/// speaker `i` drawing from `[i*n_s_utt, (i+1)*n_s_utt)`.
///
/// Draws are keyed by `(epoch, bucket, speaker)` on the session seed.
#[allow(clippy::too_many_arguments)]
pub fn collection_indx(
    n_s_utt: usize,
    n_spk_utt: usize,
    buckets: &[BucketId],
    n_bkt: &[usize],
    n_reg_bkt: &[usize],
    with_replacement: bool,
    seed: u64,
    epoch: u64,
) -> Result<IndexCollection> {
    if buckets.len() != n_bkt.len() || n_bkt.len() != n_reg_bkt.len() {
        return Err(ConsentError::MismatchedLengths {
            what: "buckets vs n_bkt vs n_reg_bkt",
            expected: buckets.len(),
            actual: n_bkt.len().min(n_reg_bkt.len()),
        });
    }
    if n_s_utt == 0 || (!with_replacement && n_spk_utt > n_s_utt) {
        return Err(ConsentError::SampleExceedsPopulation {
            requested: n_spk_utt,
            available: n_s_utt,
        });
    }
    let mut out = IndexCollection::new();
    for ((&b, &n_b), &n_reg) in buckets.iter().zip(n_bkt).zip(n_reg_bkt) {
        let n_tilde = n_b + n_reg;
        let mut flat = Vec::with_capacity(n_tilde * n_spk_utt);
        for i in 0..n_tilde {
            let mut rng = rng::stream(seed, Stream::Collection, &[epoch, b as u64, i as u64]);
            flat.extend(rand_sample(
                &mut rng,
                i * n_s_utt,
                n_s_utt,
                n_spk_utt,
                with_replacement,
            ));
        }
        out.insert(b, flat);
    }
    Ok(out)
}

/// Appends the selected rows of `zy_b` to the accumulated buffer.
///
/// With `perm`, the index list is shuffled first using the generator keyed by
/// `perm_key`, a stream separate from the one used by [`collection_indx`].
pub fn sample_int_bkt(
    indices: &[usize],
    zy_b: &LabeledEmbeddings,
    accumulated: ReplayBuffer,
    perm: Option<(u64, &[u64])>,
) -> Result<ReplayBuffer> {
    if let Some(&index) = indices.iter().find(|&&i| i >= zy_b.len()) {
        return Err(ConsentError::IndexOutOfRange {
            index,
            len: zy_b.len(),
        });
    }
    if !accumulated.is_empty() && accumulated.dim() != zy_b.dim() {
        return Err(ConsentError::ShapeMismatch(format!(
            "buffer dim {} vs bucket embedding dim {}",
            accumulated.dim(),
            zy_b.dim()
        )));
    }
    let mut order = indices.to_vec();
    if let Some((seed, keys)) = perm {
        let mut rng = rng::stream(seed, Stream::Permutation, keys);
        order.shuffle(&mut rng);
    }
    let rows = zy_b.embeddings.select(Axis(0), &order);
    let labels: Vec<_> = order.iter().map(|&i| zy_b.labels[i]).collect();
    let mut buffer = if accumulated.is_empty() && accumulated.dim() != zy_b.dim() {
        ReplayBuffer::new(zy_b.dim(), accumulated.max_mem())
    } else {
        accumulated
    };
    buffer.append(rows.view(), &labels)?;
    Ok(buffer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    #[test]
    fn budget_examples() {
        assert_eq!(num_spk_utts(120, &[5; 8], &[0; 8]), Ok(3));
        assert_eq!(num_spk_utts(10, &[3], &[1]), Ok(2));
        assert_eq!(num_spk_utts(7, &[2, 2], &[0, 1]), Ok(1));
        assert_eq!(
            num_spk_utts(7, &[0, 0], &[0, 0]),
            Err(ConsentError::EmptyTopology)
        );
        assert!(matches!(
            num_spk_utts(3, &[2, 2], &[0, 0]),
            Err(ConsentError::BudgetTooSmall { .. })
        ));
    }

    #[test]
    fn full_draw_is_a_grouped_permutation() {
        let c = collection_indx(2, 2, &[0], &[2], &[0], false, 1, 0).unwrap();
        let flat = &c[&0];
        let mut first: Vec<_> = flat[..2].to_vec();
        let mut second: Vec<_> = flat[2..].to_vec();
        first.sort();
        second.sort();
        assert_eq!(first, vec![0, 1]);
        assert_eq!(second, vec![2, 3]);
    }

    #[test]
    fn singleton_draw_stays_in_window() {
        for seed in 0..20 {
            let c = collection_indx(3, 1, &[0], &[1], &[0], false, seed, 0).unwrap();
            assert_eq!(c[&0].len(), 1);
            assert!(c[&0][0] < 3);
        }
    }

    #[test]
    fn paper_topology_lengths() {
        let buckets: Vec<BucketId> = (0..8).collect();
        let c = collection_indx(10, 3, &buckets, &[5; 8], &[0; 8], false, 0, 0).unwrap();
        for (b, list) in &c {
            let expected = 5 * 3;
            assert_eq!(list.len(), expected, "bucket {b}");
        }
    }

    #[test]
    fn oversampling_without_replacement_fails() {
        assert!(matches!(
            collection_indx(2, 3, &[0], &[1], &[0], false, 0, 0),
            Err(ConsentError::SampleExceedsPopulation {
                requested: 3,
                available: 2
            })
        ));
        let c = collection_indx(2, 3, &[0], &[1], &[0], true, 0, 0).unwrap();
        assert!(c[&0].iter().all(|&i| i < 2));
    }

    fn bucket_rows(n: usize) -> LabeledEmbeddings {
        let emb = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
        LabeledEmbeddings::new(emb, (0..n as u32).map(|i| 100 + i).collect()).unwrap()
    }

    #[test]
    fn direct_selection() {
        let zy = bucket_rows(4);
        let buf = sample_int_bkt(&[0, 2], &zy, ReplayBuffer::new(2, 10), None).unwrap();
        assert_eq!(buf.labels(), &[100, 102]);
        assert_eq!(buf.rows().row(1).to_vec(), vec![4.0, 5.0]);
    }

    #[test]
    fn concatenation_keeps_prefix() {
        let zy = bucket_rows(4);
        let init = sample_int_bkt(&[1, 2, 3], &zy, ReplayBuffer::new(2, 10), None).unwrap();
        let buf = sample_int_bkt(&[0, 1], &zy, init.clone(), None).unwrap();
        assert_eq!(buf.len(), 5);
        assert_eq!(buf.rows().slice(ndarray::s![..3, ..]), init.rows());
        assert_eq!(&buf.labels()[..3], init.labels());
    }

    #[test]
    fn bad_index_and_overflow() {
        let zy = bucket_rows(4);
        assert!(matches!(
            sample_int_bkt(&[4], &zy, ReplayBuffer::new(2, 10), None),
            Err(ConsentError::IndexOutOfRange { index: 4, len: 4 })
        ));
        assert!(matches!(
            sample_int_bkt(&[0, 1, 2], &zy, ReplayBuffer::new(2, 2), None),
            Err(ConsentError::BufferOverflow { .. })
        ));
    }

    proptest! {
        #[test]
        fn permutation_preserves_multiset(seed in any::<u64>(), idx in proptest::collection::vec(0usize..6, 1..12)) {
            let zy = bucket_rows(6);
            let plain = sample_int_bkt(&idx, &zy, ReplayBuffer::new(2, 64), None).unwrap();
            let keys = [3u64, 4];
            let shuffled = sample_int_bkt(&idx, &zy, ReplayBuffer::new(2, 64), Some((seed, &keys))).unwrap();
            let pairs = |b: &ReplayBuffer| {
                let mut v: Vec<(u32, Vec<u64>)> = b
                    .labels()
                    .iter()
                    .zip(b.rows().rows())
                    .map(|(&l, r)| (l, r.iter().map(|x| x.to_bits()).collect()))
                    .collect();
                v.sort();
                v
            };
            prop_assert_eq!(pairs(&plain), pairs(&shuffled));
        }

        #[test]
        fn strides_map_back_to_speakers(
            n_s in 1usize..6,
            n_spk in 1usize..6,
            n_bkt in proptest::collection::vec(0usize..5, 1..5),
            seed in any::<u64>(),
        ) {
            let buckets: Vec<BucketId> = (0..n_bkt.len() as u16).collect();
            let reg = vec![0; n_bkt.len()];
            let replace = n_spk > n_s;
            let c = collection_indx(n_s, n_spk, &buckets, &n_bkt, &reg, replace, seed, 2).unwrap();
            let again = collection_indx(n_s, n_spk, &buckets, &n_bkt, &reg, replace, seed, 2).unwrap();
            prop_assert_eq!(&c, &again);
            for (k, b) in buckets.iter().enumerate() {
                let list = &c[b];
                prop_assert_eq!(list.len(), n_bkt[k] * n_spk);
                for (pos, &idx) in list.iter().enumerate() {
                    prop_assert_eq!(idx / n_s, pos / n_spk);
                }
            }
        }
    }
}
