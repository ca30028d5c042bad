//! Synthetic multi-domain benchmark.
//!
//! Phantom "volumes" of a few correlated 2D slices carry a head-like ellipse
//! with labelled inner structures. Domain transforms remap intensities only
//! (gamma, linear contrast, smooth bias field, noise), standing in for the
//! appearance differences between scanners and protocols.

pub mod io;
pub mod phantom;
pub mod transform;

pub use io::{read_dataset, write_dataset};
pub use phantom::{generate_phantoms, Phantom, PhantomSpec};
pub use transform::{apply_domain, DomainTransform};

use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, LabelledSlice, Split};
use crate::error::Result;
use crate::norm::DomainId;
use crate::preproc::percentile_normalize;

/// Number of volumes per split for one domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// SplitMix64 finalizer; derives independent sub-seeds from a base seed.
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Generates, transforms and percentile-normalizes every volume of a domain.
///
/// Volumes are numbered consecutively across train, val and test so that no
/// volume is shared between splits. Anatomy depends on `(seed, domain, volume)`
/// only; the transform is reseeded per volume.
pub fn generate_domain(
    spec: &PhantomSpec,
    transform: &DomainTransform,
    domain: DomainId,
    counts: SplitCounts,
    seed: u64,
) -> Result<DomainDataset> {
    spec.validate()?;
    transform.validate()?;
    let mut ds = DomainDataset::new(domain, spec.image_size, spec.num_classes());
    let mut volume = 0u32;
    for (split, n) in [(Split::Train, counts.train), (Split::Val, counts.val), (Split::Test, counts.test)] {
        for _ in 0..n {
            let vol_seed = mix_seed(seed, &[domain.0 as u64, volume as u64]);
            let phantoms = phantom::generate_volume(spec, vol_seed)?;
            let images: Vec<Vec<f32>> = phantoms.iter().map(|p| p.image.clone()).collect();
            let t = transform.reseeded(mix_seed(transform.seed, &[domain.0 as u64, volume as u64]));
            let mut shifted = apply_domain(&images, spec.image_size, &t)?;
            {
                let mut views: Vec<&mut [f32]> = shifted.iter_mut().map(|v| v.as_mut_slice()).collect();
                percentile_normalize(&mut views)?;
            }
            for (k, (img, ph)) in shifted.into_iter().zip(phantoms).enumerate() {
                ds.split_mut(split).push(LabelledSlice {
                    domain,
                    volume,
                    slice: k as u16,
                    size: spec.image_size,
                    image: img,
                    labels: ph.labels,
                });
            }
            volume += 1;
        }
    }
    Ok(ds)
}
