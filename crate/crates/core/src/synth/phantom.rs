use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::mix_seed;

/// Geometry and appearance of the base (domain-free) phantoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub image_size: [usize; 2],
    /// Foreground classes; labels run `0..=num_structures`.
    pub num_structures: usize,
    pub slices_per_volume: usize,
    /// Head semi-axes as a fraction of the image size.
    pub head_radius: [f64; 2],
    /// Structure radii as a fraction of the image size.
    pub structure_radius: [f64; 2],
    /// Random displacement of structure centres, fraction of the image size.
    pub jitter: f64,
    pub air_intensity: f64,
    pub tissue_intensity: f64,
    /// Mean intensity per structure class (length `num_structures`).
    pub structure_intensity: Vec<f64>,
    /// Amplitude of the smooth within-class texture.
    pub texture_amplitude: f64,
    /// Standard deviation of the pixel-level texture.
    pub texture_noise: f64,
    pub min_class_pixels: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_size: [64, 64],
            num_structures: 3,
            slices_per_volume: 2,
            head_radius: [0.36, 0.44],
            structure_radius: [0.06, 0.1],
            jitter: 0.03,
            air_intensity: 0.0,
            tissue_intensity: 0.3,
            structure_intensity: vec![1.0, 0.75, 0.55],
            texture_amplitude: 0.04,
            texture_noise: 0.02,
            min_class_pixels: 6,
        }
    }
}

/// One base slice: non-negative intensities and labels in `0..num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
}

impl PhantomSpec {
    pub fn num_classes(&self) -> usize {
        self.num_structures + 1
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        if h < 8 || w < 8 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::param("phantom.image_size", format!("sides must be positive multiples of 8, got {h}x{w}")));
        }
        if self.num_structures == 0 || self.num_structures > 254 {
            return Err(Error::param("phantom.num_structures", "must lie in [1, 254]"));
        }
        if self.structure_intensity.len() != self.num_structures {
            return Err(Error::param("phantom.structure_intensity", "needs one entry per structure"));
        }
        if self.slices_per_volume == 0 {
            return Err(Error::param("phantom.slices_per_volume", "must be positive"));
        }
        let ordered = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1];
        if !ordered(self.head_radius) || !ordered(self.structure_radius) {
            return Err(Error::param("phantom.radius", "ranges must be positive and ordered"));
        }
        let size = h.min(w) as f64;
        if self.structure_radius[0] * size < 1.0 {
            return Err(Error::param("phantom.structure_radius", "structures would be smaller than a pixel"));
        }
        if self.head_radius[1] > 0.5 {
            return Err(Error::param("phantom.head_radius", "head does not fit in the image"));
        }
        // ring of structures must stay inside the smallest head
        let reach = RING + self.structure_radius[1] + self.jitter;
        if reach > self.head_radius[0] {
            return Err(Error::param(
                "phantom.structure_radius",
                format!("structures reach {reach:.3} of the image but the head may be only {:.3}", self.head_radius[0]),
            ));
        }
        let intensities = [self.air_intensity, self.tissue_intensity].into_iter().chain(self.structure_intensity.iter().copied());
        if intensities.into_iter().any(|v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::param("phantom.intensity", "intensities must be finite and non-negative"));
        }
        if self.texture_amplitude < 0.0 || self.texture_noise < 0.0 {
            return Err(Error::param("phantom.texture", "must be non-negative"));
        }
        Ok(())
    }
}

/// Distance of off-centre structures from the head centre, fraction of image size.
const RING: f64 = 0.17;
const MAX_ATTEMPTS: u64 = 64;

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ry;
        let dx = (x - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }

    fn scaled(&self, s: f64) -> Self {
        Self { ry: self.ry * s, rx: self.rx * s, ..*self }
    }
}

struct Anatomy {
    head: Ellipse,
    /// `(class, ellipse)` in drawing order; later entries overwrite earlier ones.
    parts: Vec<(u8, Ellipse)>,
}

fn sample_anatomy(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Anatomy {
    let [h, w] = spec.image_size;
    let (hf, wf) = (h as f64, w as f64);
    let size = hf.min(wf);
    let jit = |rng: &mut ChaCha8Rng| rng.random_range(-spec.jitter..=spec.jitter) * size;
    let head = Ellipse {
        cy: hf / 2.0 + jit(rng) * 0.5,
        cx: wf / 2.0 + jit(rng) * 0.5,
        ry: rng.random_range(spec.head_radius[0]..=spec.head_radius[1]) * hf,
        rx: rng.random_range(spec.head_radius[0]..=spec.head_radius[1]) * wf,
    };
    let mut parts = Vec::new();
    let n = spec.num_structures;
    for s in 0..n {
        let class = (s + 1) as u8;
        let radius = |rng: &mut ChaCha8Rng| rng.random_range(spec.structure_radius[0]..=spec.structure_radius[1]) * size;
        if s == 0 {
            // central, elongated
            let e = Ellipse { cy: head.cy + jit(rng), cx: head.cx + jit(rng), ry: radius(rng) * 1.3, rx: radius(rng) * 0.8 };
            parts.push((class, e));
        } else {
            // mirrored pair on a ring around the centre
            let angle = std::f64::consts::PI * (s as f64 - 0.5) / (n as f64 - 0.5).max(1.0) * 0.9 + 0.15;
            let dy = -(angle.cos()) * RING * size;
            let dx = angle.sin() * RING * size;
            let (ry, rx) = (radius(rng), radius(rng));
            for side in [-1.0, 1.0] {
                let e = Ellipse { cy: head.cy + dy + jit(rng), cx: head.cx + side * dx + jit(rng), ry, rx };
                parts.push((class, e));
            }
        }
    }
    Anatomy { head, parts }
}

/// Smooth field in roughly [-1, 1] from a few random low-frequency waves.
pub(crate) fn smooth_field(rng: &mut ChaCha8Rng, size: [usize; 2], period: f64) -> Vec<f64> {
    let [h, w] = size;
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let k = std::f64::consts::TAU / (period * rng.random_range(0.7..1.3));
            (k * theta.cos(), k * theta.sin(), rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let norm = 1.0 / (waves.len() as f64).sqrt();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64 / h as f64, x as f64 / w as f64);
            let v: f64 = waves.iter().map(|&(ky, kx, ph)| (ky * yf + kx * xf + ph).sin()).sum();
            out.push(v * norm);
        }
    }
    out
}

fn render(spec: &PhantomSpec, anatomy: &Anatomy, z: f64, rng: &mut ChaCha8Rng) -> Phantom {
    let [h, w] = spec.image_size;
    let mut labels = vec![0u8; h * w];
    let mut inside = vec![false; h * w];
    // slices away from the middle of the volume see slightly smaller structures
    let shrink = 1.0 - 0.12 * z.abs();
    let head = anatomy.head.scaled(1.0 - 0.04 * z.abs());
    for y in 0..h {
        for x in 0..w {
            let (yc, xc) = (y as f64 + 0.5, x as f64 + 0.5);
            let i = y * w + x;
            inside[i] = head.contains(yc, xc);
            if !inside[i] {
                continue;
            }
            for (class, e) in &anatomy.parts {
                if e.scaled(shrink).contains(yc, xc) {
                    labels[i] = *class;
                }
            }
        }
    }
    let texture = smooth_field(rng, spec.image_size, 0.35);
    let mut image = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let base = match labels[i] {
            0 if inside[i] => spec.tissue_intensity,
            0 => spec.air_intensity,
            c => spec.structure_intensity[c as usize - 1],
        };
        let noise: f64 = StandardNormal.sample(rng);
        let tex = if inside[i] { spec.texture_amplitude * texture[i] + spec.texture_noise * noise } else { spec.texture_noise * 0.5 * noise.abs() };
        image.push((base + tex).max(0.0) as f32);
    }
    Phantom { image, labels }
}

fn all_classes_present(spec: &PhantomSpec, p: &Phantom) -> bool {
    let mut counts = vec![0usize; spec.num_classes()];
    for &l in &p.labels {
        counts[l as usize] += 1;
    }
    counts.iter().all(|&c| c >= spec.min_class_pixels)
}

/// The slices of one volume; resampled until every slice shows every class.
pub fn generate_volume(spec: &PhantomSpec, seed: u64) -> Result<Vec<Phantom>> {
    spec.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[attempt]));
        let anatomy = sample_anatomy(spec, &mut rng);
        let n = spec.slices_per_volume;
        let slices: Vec<Phantom> = (0..n)
            .map(|k| {
                let z = if n == 1 { 0.0 } else { 2.0 * k as f64 / (n - 1) as f64 - 1.0 };
                render(spec, &anatomy, z, &mut rng)
            })
            .collect();
        if slices.iter().all(|p| all_classes_present(spec, p)) {
            return Ok(slices);
        }
    }
    Err(Error::param("phantom", format!("could not place all structures in {MAX_ATTEMPTS} attempts")))
}

/// `count` independent single phantoms (one slice each, taken from the
/// middle of a volume), deterministic for `spec` and `seed`.
pub fn generate_phantoms(spec: &PhantomSpec, count: usize, seed: u64) -> Result<Vec<Phantom>> {
    (0..count as u64)
        .map(|i| {
            let mut vol = generate_volume(spec, mix_seed(seed, &[i]))?;
            Ok(vol.swap_remove(vol.len() / 2))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_phantoms() {
        let spec = PhantomSpec::default();
        assert_eq!(generate_phantoms(&spec, 3, 42).unwrap(), generate_phantoms(&spec, 3, 42).unwrap());
        assert_ne!(generate_phantoms(&spec, 1, 42).unwrap(), generate_phantoms(&spec, 1, 43).unwrap());
    }

    #[test]
    fn every_class_appears() {
        let spec = PhantomSpec::default();
        for p in generate_phantoms(&spec, 20, 7).unwrap() {
            for c in 0..spec.num_classes() as u8 {
                assert!(p.labels.contains(&c));
            }
            assert!(p.image.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn infeasible_geometry_is_rejected() {
        let spec = PhantomSpec { structure_radius: [0.2, 0.3], ..PhantomSpec::default() };
        assert!(matches!(generate_phantoms(&spec, 1, 0), Err(Error::Parameter { .. })));
        let tiny = PhantomSpec { structure_radius: [0.001, 0.002], ..PhantomSpec::default() };
        assert!(tiny.validate().is_err());
    }
}
