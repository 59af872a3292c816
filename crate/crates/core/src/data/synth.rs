//! Procedural stand-ins for MR sequence images.
//!
//! Each class has its own base intensity, concentric ring frequency and
//! noise-texture grain. A patient adds an intensity offset, every image adds
//! a slightly off-centre disk, its own grain and pixel noise. External domains
//! reuse the T1/T2 recipes with a global intensity shift and a different
//! noise level.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetManifest, Domain, ImageSample};
use crate::augment::gaussian_blur;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::labels::{LabelVector, SequenceLabel};
use crate::rng::rng_for;

struct Recipe {
    base: f64,
    ring_cycles: f64,
    grain_sigma: f64,
}

/// Base intensities form an evenly spaced ladder. Ring periods stay well
/// above the elastic displacement so that class structure survives the
/// pretraining augmentations.
fn recipe(label: SequenceLabel) -> Recipe {
    let (base, ring_cycles, grain_sigma) = match label {
        SequenceLabel::T1 => (0.25, 1.5, 1.0),
        SequenceLabel::T2 => (0.65, 2.0, 2.0),
        SequenceLabel::Cine => (0.45, 3.5, 0.7),
        SequenceLabel::Lge => (0.35, 2.5, 3.0),
        SequenceLabel::Others => (0.55, 4.5, 1.5),
    };
    Recipe {
        base,
        ring_cycles,
        grain_sigma,
    }
}

struct DomainStyle {
    shift: f64,
    noise_std: f64,
}

fn style(domain: Domain) -> DomainStyle {
    let (shift, noise_std) = match domain {
        Domain::Internal => (0.0, 0.03),
        Domain::ExternalA => (0.15, 0.06),
        Domain::ExternalB => (-0.12, 0.015),
    };
    DomainStyle { shift, noise_std }
}

const BACKGROUND: f64 = 0.08;
const RING_AMPLITUDE: f64 = 0.15;
const GRAIN_AMPLITUDE: f64 = 0.08;
const PATIENT_OFFSET_STD: f64 = 0.03;
const DISK_RADIUS: f64 = 0.8;
const DISK_EDGE: f64 = 0.04;
const CENTRE_JITTER: f64 = 0.05;

pub fn image_size_for(domain: Domain) -> usize {
    match domain {
        Domain::Internal => 84,
        Domain::ExternalA | Domain::ExternalB => 80,
    }
}

fn domain_code(domain: Domain) -> u64 {
    domain as u64
}

fn patient_prefix(domain: Domain) -> &'static str {
    match domain {
        Domain::Internal => "int",
        Domain::ExternalA => "extA",
        Domain::ExternalB => "extB",
    }
}

fn render(size: usize, label: SequenceLabel, domain: Domain, patient_offset: f64, seed: u64) -> Result<Tensor> {
    let r = recipe(label);
    let st = style(domain);
    let mut rng = rng_for(seed, &[]);
    let half = size as f64 / 2.0;
    let mid = (size - 1) as f64 / 2.0;
    let cy = mid + rng.random_range(-1.0..=1.0) * CENTRE_JITTER * size as f64;
    let cx = mid + rng.random_range(-1.0..=1.0) * CENTRE_JITTER * size as f64;

    let white: Vec<f64> = (0..size * size)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let mut grain = gaussian_blur(&white, size, size, r.grain_sigma);
    let mean = grain.iter().sum::<f64>() / grain.len() as f64;
    let std = (grain.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / grain.len() as f64).sqrt();
    for g in &mut grain {
        *g = (*g - mean) / std.max(1e-12);
    }

    let noise = Normal::new(0.0, st.noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut pixels = Vec::with_capacity(size * size);
    for row in 0..size {
        for col in 0..size {
            let i = row * size + col;
            let rn = ((row as f64 - cy).powi(2) + (col as f64 - cx).powi(2)).sqrt() / half;
            let disk = 1.0 / (1.0 + ((rn - DISK_RADIUS) / DISK_EDGE).exp());
            let ring = (std::f64::consts::TAU * r.ring_cycles * rn).cos();
            let tissue = r.base + patient_offset + RING_AMPLITUDE * ring + GRAIN_AMPLITUDE * grain[i];
            let v = BACKGROUND + disk * (tissue - BACKGROUND) + st.shift + noise.sample(&mut rng);
            // stored images are f32, so keep values exactly representable
            pixels.push(v.clamp(0.0, 1.0) as f32 as f64);
        }
    }
    Tensor::new(vec![size, size], pixels)
}

/// Generates `n_patients` patients with `images_per_patient` images each.
///
/// Classes are dealt round-robin over the domain's label set and then
/// shuffled, so every class appears once `n_patients` reaches its count
/// and the per-class totals differ by at most one.
pub fn generate_synthetic(
    n_patients: usize,
    images_per_patient: usize,
    domain: Domain,
    seed: u64,
) -> Result<DatasetManifest> {
    if n_patients < SequenceLabel::ALL.len() {
        return Err(Error::InvalidArgument(format!(
            "need at least {} patients, got {n_patients}",
            SequenceLabel::ALL.len()
        )));
    }
    if images_per_patient == 0 {
        return Err(Error::InvalidArgument("images_per_patient must be >= 1".into()));
    }
    let labels = domain.labels();
    let code = domain_code(domain);
    let mut classes: Vec<SequenceLabel> = (0..n_patients).map(|i| labels[i % labels.len()]).collect();
    classes.shuffle(&mut rng_for(seed, &[code, u64::MAX]));

    let size = image_size_for(domain);
    let offset = Normal::new(0.0, PATIENT_OFFSET_STD).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut samples = Vec::with_capacity(n_patients * images_per_patient);
    for (p, &label) in classes.iter().enumerate() {
        let patient = format!("{}-p{p:04}", patient_prefix(domain));
        let study = format!("{patient}-st0");
        let patient_offset = offset.sample(&mut rng_for(seed, &[code, p as u64]));
        for k in 0..images_per_patient {
            let image_seed = crate::rng::derive_seed(seed, &[code, p as u64, k as u64 + 1]);
            let pixels = render(size, label, domain, patient_offset, image_seed)?;
            samples.push(ImageSample::new(
                patient.clone(),
                study.clone(),
                format!("{study}-i{k:03}"),
                pixels,
                LabelVector::one_hot(label),
                domain,
            )?);
        }
    }
    DatasetManifest::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use std::collections::BTreeMap;

    #[test]
    fn minimum_case_covers_every_class() {
        let m = generate_synthetic(5, 1, Domain::Internal, 7).unwrap();
        assert_eq!(m.len(), 5);
        let mut seen: Vec<_> = m.samples().iter().map(|s| s.label().label()).collect();
        seen.sort();
        assert_eq!(seen, SequenceLabel::ALL.to_vec());
        assert!(m.samples().iter().all(|s| s.image_shape() == [84, 84]));
        assert!(generate_synthetic(4, 1, Domain::Internal, 7).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(6, 2, Domain::ExternalA, 9).unwrap();
        let b = generate_synthetic(6, 2, Domain::ExternalA, 9).unwrap();
        for i in 0..a.len() {
            assert_eq!(a.sample(i).sample_id(), b.sample(i).sample_id());
            assert_eq!(a.pixels(i), b.pixels(i));
        }
        let c = generate_synthetic(6, 2, Domain::ExternalA, 10).unwrap();
        assert_ne!(a.pixels(0), c.pixels(0));
    }

    #[test]
    fn class_counts_are_balanced() {
        let m = generate_synthetic(200, 8, Domain::Internal, 1).unwrap();
        assert_eq!(m.len(), 1600);
        let mut counts = BTreeMap::new();
        for (_, l) in m.patient_labels(Split::Unassigned) {
            *counts.entry(l).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 5);
        assert!(counts.values().all(|&c| (30..=50).contains(&c)));
    }

    #[test]
    fn external_domains_have_two_classes_at_80() {
        for d in [Domain::ExternalA, Domain::ExternalB] {
            let m = generate_synthetic(12, 1, d, 4).unwrap();
            assert!(m.samples().iter().all(|s| s.image_shape() == [80, 80]));
            assert!(m
                .samples()
                .iter()
                .all(|s| matches!(s.label().label(), SequenceLabel::T1 | SequenceLabel::T2)));
        }
    }

    #[test]
    fn pixels_are_f32_exact_and_in_range() {
        let m = generate_synthetic(5, 2, Domain::ExternalB, 2).unwrap();
        for i in 0..m.len() {
            for &v in m.pixels(i).data() {
                assert!((0.0..=1.0).contains(&v));
                assert_eq!(v as f32 as f64, v);
            }
        }
    }

    fn best_threshold_accuracy(a: &[f64], b: &[f64]) -> f64 {
        let mut all: Vec<(f64, bool)> = a.iter().map(|&v| (v, true)).chain(b.iter().map(|&v| (v, false))).collect();
        all.sort_by(|x, y| x.0.total_cmp(&y.0));
        let n = all.len() as f64;
        let mut best: f64 = 0.5;
        // predict "a" above the cut, then the mirrored rule
        for cut in 0..=all.len() {
            let correct = all[..cut].iter().filter(|x| !x.1).count() + all[cut..].iter().filter(|x| x.1).count();
            best = best.max(correct as f64 / n).max(1.0 - correct as f64 / n);
        }
        best
    }

    #[test]
    fn mean_intensity_separates_some_class_pair() {
        let m = generate_synthetic(100, 2, Domain::Internal, 3).unwrap();
        let mut means: BTreeMap<SequenceLabel, Vec<f64>> = BTreeMap::new();
        for i in 0..m.len() {
            means.entry(m.sample(i).label().label()).or_default().push(m.pixels(i).mean());
        }
        let mut best: f64 = 0.0;
        let classes: Vec<_> = means.keys().copied().collect();
        for (i, a) in classes.iter().enumerate() {
            for b in &classes[i + 1..] {
                best = best.max(best_threshold_accuracy(&means[a], &means[b]));
            }
        }
        assert!(best > 0.6, "best pairwise accuracy {best}");
        // but not every pair is trivially separable by mean intensity
        let worst = best_threshold_accuracy(&means[&SequenceLabel::Lge], &means[&SequenceLabel::T1]);
        assert!(worst < 0.95, "LGE vs T1 accuracy {worst}");
    }
}
