//! Labelled 2D slices and per-domain dataset splits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::DomainId;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// A 2D image with its integer label map.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledSlice {
    pub domain: DomainId,
    /// Volume of origin; splits never share a volume.
    pub volume: u32,
    pub slice: u16,
    pub size: [usize; 2],
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
}

impl LabelledSlice {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let n = self.size[0] * self.size[1];
        if self.image.len() != n || self.labels.len() != n {
            return Err(Error::Validation(format!(
                "slice {}/{} has {} pixels and {} labels for size {:?}",
                self.volume,
                self.slice,
                self.image.len(),
                self.labels.len(),
                self.size
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Validation(format!(
                "slice {}/{} has label {l} but only {num_classes} classes are declared",
                self.volume, self.slice
            )));
        }
        if self.image.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation(format!("slice {}/{} has negative or non-finite intensities", self.volume, self.slice)));
        }
        Ok(())
    }
}

/// Stacks slices into an `[N, 1, H, W]` batch and their concatenated labels.
pub fn batch_of<T: Scalar>(slices: &[&LabelledSlice]) -> Result<(Tensor<T>, Vec<u8>)> {
    let Some(first) = slices.first() else {
        return Err(Error::Contract("empty batch".into()));
    };
    let [h, w] = first.size;
    let mut data = Vec::with_capacity(slices.len() * h * w);
    let mut labels = Vec::with_capacity(slices.len() * h * w);
    for s in slices {
        if s.size != first.size {
            return Err(Error::shape("batch", format!("slice size {:?} differs from {:?}", s.size, first.size)));
        }
        data.extend(s.image.iter().map(|&v| T::from_f32(v).unwrap()));
        labels.extend_from_slice(&s.labels);
    }
    Ok((Tensor::new(vec![slices.len(), 1, h, w], data)?, labels))
}

/// Groups slices by volume, ordered by `(volume, slice)` regardless of input order.
pub fn by_volume(slices: &[LabelledSlice]) -> Vec<Vec<&LabelledSlice>> {
    let mut sorted: Vec<&LabelledSlice> = slices.iter().collect();
    sorted.sort_by_key(|s| (s.volume, s.slice));
    let mut out: Vec<Vec<&LabelledSlice>> = Vec::new();
    for s in sorted {
        match out.last_mut() {
            Some(group) if group[0].volume == s.volume => group.push(s),
            _ => out.push(vec![s]),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain: DomainId,
    pub image_size: [usize; 2],
    pub num_classes: usize,
    pub train: Vec<LabelledSlice>,
    pub val: Vec<LabelledSlice>,
    pub test: Vec<LabelledSlice>,
}

impl DomainDataset {
    pub fn new(domain: DomainId, image_size: [usize; 2], num_classes: usize) -> Self {
        Self { domain, image_size, num_classes, train: Vec::new(), val: Vec::new(), test: Vec::new() }
    }

    pub fn split(&self, split: Split) -> &[LabelledSlice] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<LabelledSlice> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    pub fn volumes(&self, split: Split) -> Vec<u32> {
        let mut v: Vec<u32> = self.split(split).iter().map(|s| s.volume).collect();
        v.dedup();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Checks shapes, labels, domain tags and that no volume spans two splits.
    pub fn validate(&self) -> Result<()> {
        let mut owner = std::collections::BTreeMap::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for s in self.split(split) {
                if s.domain != self.domain {
                    return Err(Error::Validation(format!("slice tagged domain {} in dataset {}", s.domain, self.domain)));
                }
                if s.size != self.image_size {
                    return Err(Error::Validation(format!("slice size {:?} differs from dataset {:?}", s.size, self.image_size)));
                }
                s.validate(self.num_classes)?;
                if let Some(prev) = owner.insert(s.volume, split) {
                    if prev != split {
                        return Err(Error::Validation(format!("volume {} appears in {prev:?} and {split:?}", s.volume)));
                    }
                }
            }
        }
        Ok(())
    }

    /// Keeps the first `count` training volumes (by volume id) and splits them
    /// into halves: a seed-controlled shuffle decides which half trains.
    pub fn few_shot(&self, count: usize, seed: u64) -> Result<DomainDataset> {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;

        let vols = self.volumes(Split::Train);
        if count < 2 || vols.len() < count {
            return Err(Error::config(
                "few_shot.count",
                format!("need at least 2 and at most {} volumes, asked for {count}", vols.len()),
            ));
        }
        let mut chosen = vols[..count].to_vec();
        chosen.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let (tr, vl) = chosen.split_at(count / 2);
        let mut out = DomainDataset::new(self.domain, self.image_size, self.num_classes);
        out.train = self.train.iter().filter(|s| tr.contains(&s.volume)).cloned().collect();
        out.val = self.train.iter().filter(|s| vl.contains(&s.volume)).cloned().collect();
        out.test = self.test.clone();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slice(volume: u32, slice: u16) -> LabelledSlice {
        LabelledSlice { domain: DomainId(1), volume, slice, size: [2, 2], image: vec![0.5; 4], labels: vec![0, 1, 1, 0] }
    }

    #[test]
    fn grouping_ignores_input_order() {
        let a = vec![slice(2, 1), slice(1, 0), slice(2, 0), slice(1, 1)];
        let groups = by_volume(&a);
        let ids: Vec<Vec<(u32, u16)>> = groups.iter().map(|g| g.iter().map(|s| (s.volume, s.slice)).collect()).collect();
        assert_eq!(ids, vec![vec![(1, 0), (1, 1)], vec![(2, 0), (2, 1)]]);
    }

    #[test]
    fn shared_volume_across_splits_is_rejected() {
        let mut d = DomainDataset::new(DomainId(1), [2, 2], 2);
        d.train.push(slice(1, 0));
        d.test.push(slice(1, 1));
        assert!(matches!(d.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn few_shot_halves_are_disjoint() {
        let mut d = DomainDataset::new(DomainId(1), [2, 2], 2);
        for v in 0..6 {
            d.train.push(slice(v, 0));
            d.train.push(slice(v, 1));
        }
        let f = d.few_shot(4, 3).unwrap();
        assert_eq!(f.volumes(Split::Train).len(), 2);
        assert_eq!(f.volumes(Split::Val).len(), 2);
        let all: Vec<u32> = f.volumes(Split::Train).into_iter().chain(f.volumes(Split::Val)).collect();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        f.validate().unwrap();
        assert_eq!(d.few_shot(4, 3).unwrap(), f);
    }
}
