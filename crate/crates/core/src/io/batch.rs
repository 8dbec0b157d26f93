//! Place-balanced batch sampling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

/// One image of a batch: index into the image list and dense place label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub image: usize,
    pub label: usize,
}

/// Draws batches of `places_per_batch` distinct places with exactly
/// `images_per_place` images each. Within an epoch every place is used at
/// most once.
#[derive(Clone, Debug)]
pub struct PlaceBalancedSampler {
    /// Image indices per usable place, ordered by place label.
    places: Vec<Vec<usize>>,
    places_per_batch: usize,
    images_per_place: usize,
    seed: u64,
}

impl PlaceBalancedSampler {
    /// `labels[i]` is the place of image `i`. Places with fewer than
    /// `images_per_place` images are skipped with a warning.
    pub fn new<L: Ord + Clone + std::fmt::Debug>(
        labels: &[L],
        places_per_batch: usize,
        images_per_place: usize,
        seed: u64,
    ) -> Result<Self> {
        if places_per_batch == 0 || images_per_place == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        let mut by_place: BTreeMap<L, Vec<usize>> = BTreeMap::new();
        for (i, l) in labels.iter().enumerate() {
            by_place.entry(l.clone()).or_default().push(i);
        }
        let mut places = Vec::new();
        for (label, images) in by_place {
            if images.len() < images_per_place {
                log::warn!(
                    "place {label:?} has {} images, fewer than {images_per_place}; skipped",
                    images.len()
                );
                continue;
            }
            places.push(images);
        }
        if places.len() < places_per_batch.max(2) {
            return Err(Error::invalid(format!(
                "only {} places have at least {images_per_place} images; need {}",
                places.len(),
                places_per_batch.max(2)
            )));
        }
        Ok(Self {
            places,
            places_per_batch,
            images_per_place,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.places.len() / self.places_per_batch
    }

    pub fn batch_len(&self) -> usize {
        self.places_per_batch * self.images_per_place
    }

    /// All batches of `epoch`. Labels are dense place indices.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<BatchItem>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.places.len()).collect();
        order.shuffle(&mut rng);
        order
            .chunks_exact(self.places_per_batch)
            .map(|chunk| {
                let mut batch = Vec::with_capacity(self.batch_len());
                for &p in chunk {
                    let mut imgs = self.places[p].clone();
                    imgs.shuffle(&mut rng);
                    batch.extend(
                        imgs[..self.images_per_place]
                            .iter()
                            .map(|&image| BatchItem { image, label: p }),
                    );
                }
                batch
            })
            .collect()
    }
}

/// Sampler over the database entries of `manifest`, keyed by their place labels.
pub fn sample_place_balanced_batches(
    manifest: &DatasetManifest,
    places_per_batch: usize,
    images_per_place: usize,
    seed: u64,
) -> Result<PlaceBalancedSampler> {
    PlaceBalancedSampler::new(&manifest.place_labels()?, places_per_batch, images_per_place, seed)
}
