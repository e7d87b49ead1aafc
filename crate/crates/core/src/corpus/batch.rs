use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::ExampleRecord;
use super::vocab::PAD;

/// A padded minibatch of examples.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Positions of the examples in the source record slice.
    pub indices: Vec<usize>,
    /// `[B, T_max]`, PAD-filled.
    pub targets: Vec<Vec<usize>>,
    /// `[B, T_max]`, 1.0 exactly where a real target token sits.
    pub mask: Vec<Vec<f64>>,
    pub styles: Vec<usize>,
    /// Per example a `[5, L_max]` PAD-filled matrix.
    pub dense_captions: Vec<Vec<Vec<usize>>>,
    pub dense_lengths: Vec<Vec<usize>>,
}

impl Batch {
    pub fn from_records(records: &[ExampleRecord], indices: Vec<usize>) -> Self {
        let t_max = indices.iter().map(|&i| records[i].target.len()).max().unwrap_or(0);
        let mut targets = Vec::with_capacity(indices.len());
        let mut mask = Vec::with_capacity(indices.len());
        let mut styles = Vec::with_capacity(indices.len());
        let mut dense_captions = Vec::with_capacity(indices.len());
        let mut dense_lengths = Vec::with_capacity(indices.len());
        for &i in &indices {
            let r = &records[i];
            let mut row = r.target.clone();
            row.resize(t_max, PAD);
            let m = (0..t_max).map(|t| if t < r.target.len() { 1.0 } else { 0.0 }).collect();
            targets.push(row);
            mask.push(m);
            styles.push(r.style);
            let l_max = r.dense_captions.iter().map(Vec::len).max().unwrap_or(0);
            dense_captions.push(
                r.dense_captions
                    .iter()
                    .map(|c| {
                        let mut c = c.clone();
                        c.resize(l_max, PAD);
                        c
                    })
                    .collect(),
            );
            dense_lengths.push(r.dense_captions.iter().map(Vec::len).collect());
        }
        Batch {
            indices,
            targets,
            mask,
            styles,
            dense_captions,
            dense_lengths,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn t_max(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    /// Target sequences with padding removed according to the mask.
    pub fn unpadded_targets(&self) -> Vec<Vec<usize>> {
        self.targets
            .iter()
            .zip(&self.mask)
            .map(|(t, m)| t.iter().zip(m).filter(|(_, m)| **m == 1.0).map(|(t, _)| *t).collect())
            .collect()
    }
}

/// Splits `records` into batches of `batch_size` (the last may be smaller),
/// in a seeded shuffled order, or in file order when `shuffle_seed` is `None`.
pub fn batch_iter(
    records: &[ExampleRecord],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> impl Iterator<Item = Batch> + '_ {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut order: Vec<usize> = (0..records.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |idx| Batch::from_records(records, idx))
}
