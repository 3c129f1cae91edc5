//! Seeded synthetic image classification data and stratified splits.
//!
//! Each class has a fixed template image assembled from square motifs, one
//! per patch position. Classes use the same motifs in cyclically shifted
//! positions, so telling them apart requires knowing where a motif sits and
//! not only which motifs are present. Samples are the template plus i.i.d.
//! Gaussian pixel noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub image_side: usize,
    /// Side of the square motifs templates are built from.
    pub patch_side: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            samples_per_class: 500,
            image_side: 8,
            patch_side: 4,
            noise_sigma: 0.3,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.samples_per_class == 0 {
            return Err(Error::Config(
                "dataset needs at least one class and one sample per class".into(),
            ));
        }
        if self.image_side == 0 || self.patch_side == 0 || !self.image_side.is_multiple_of(self.patch_side) {
            return Err(Error::Config(format!(
                "image side {} must be a positive multiple of patch side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "noise sigma {} must be finite and >= 0",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    fn grid(&self) -> usize {
        self.image_side / self.patch_side
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    spec: DatasetSpec,
    templates: Vec<Vec<f64>>,
    images: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.spec.image_side * self.spec.image_side
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn templates(&self) -> &[Vec<f64>] {
        &self.templates
    }

    /// Gathers the images and labels at `indices` into contiguous buffers.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut imgs = Vec::with_capacity(indices.len() * self.pixels());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            imgs.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        (imgs, labels)
    }
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let grid = spec.grid();
    let positions = grid * grid;
    let motif_count = positions.max(spec.classes).max(2);
    let ps = spec.patch_side;
    let motifs: Vec<Vec<f64>> = (0..motif_count)
        .map(|_| {
            (0..ps * ps)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect()
        })
        .collect();

    let side = spec.image_side;
    let templates: Vec<Vec<f64>> = (0..spec.classes)
        .map(|c| {
            let mut img = vec![0.0; side * side];
            for pos in 0..positions {
                let motif = &motifs[(pos + c) % motif_count];
                let (pr, pc) = (pos / grid, pos % grid);
                for i in 0..ps {
                    for j in 0..ps {
                        img[(pr * ps + i) * side + pc * ps + j] = motif[i * ps + j];
                    }
                }
            }
            img
        })
        .collect();

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut images = Vec::with_capacity(spec.classes * spec.samples_per_class * side * side);
    let mut labels = Vec::with_capacity(spec.classes * spec.samples_per_class);
    for (c, t) in templates.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            images.extend(t.iter().map(|&v| v + noise.sample(&mut rng)));
            labels.push(c);
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        templates,
        images,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Val,
    Proxy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub role: SplitRole,
    pub indices: Vec<usize>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn by_class(labels: &[usize], pool: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); classes];
    for &i in pool {
        groups[labels[i]].push(i);
    }
    groups
}

/// Class-stratified subset of `pool` holding `ceil(fraction · |class|)` of
/// each class, chosen by a seeded shuffle. Returned indices are sorted.
fn stratified_take(
    labels: &[usize],
    pool: &[usize],
    classes: usize,
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = Vec::new();
    let mut rest = Vec::new();
    for mut group in by_class(labels, pool, classes) {
        group.shuffle(&mut rng);
        let k = ((group.len() as f64 * fraction).ceil() as usize).min(group.len());
        taken.extend_from_slice(&group[..k]);
        rest.extend_from_slice(&group[k..]);
    }
    taken.sort_unstable();
    rest.sort_unstable();
    (taken, rest)
}

/// Disjoint stratified train/validation split.
pub fn train_val_split(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(DatasetSplit, DatasetSplit)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction {val_fraction} must lie in (0, 1)"
        )));
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    let (val, train) = stratified_take(ds.labels(), &all, ds.spec().classes, val_fraction, seed);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("split leaves an empty partition".into()));
    }
    Ok((
        DatasetSplit {
            role: SplitRole::Train,
            indices: train,
            seed,
        },
        DatasetSplit {
            role: SplitRole::Val,
            indices: val,
            seed,
        },
    ))
}

/// Stratified subset of `parent` with the given fraction of each class.
pub fn proxy_subset(ds: &Dataset, parent: &DatasetSplit, fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("proxy fraction {fraction} must lie in (0, 1]")));
    }
    let (taken, _) = stratified_take(ds.labels(), &parent.indices, ds.spec().classes, fraction, seed);
    Ok(DatasetSplit {
        role: SplitRole::Proxy,
        indices: taken,
        seed,
    })
}
