use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use super::{DatasetManifest, Split};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::labels::SequenceLabel;
use crate::rng::rng_for;

pub const DEFAULT_RATIOS: [f64; 3] = [0.7, 0.1, 0.2];

const SPLIT_STREAM: u64 = 0x5911;
const SUBSAMPLE_STREAM: u64 = 0x5ab5;

/// Shuffles patients with `seed` and assigns contiguous train/val/test
/// blocks of (rounded) sizes `ratios * n_patients`.
pub fn patient_split(manifest: &DatasetManifest, ratios: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut patients: Vec<&str> = manifest
        .samples()
        .iter()
        .map(|s| s.patient_id())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n = patients.len();
    let wanted = ratios.iter().filter(|&&r| r > 0.0).count();
    if n < wanted {
        return Err(Error::InvalidArgument(format!(
            "{n} patients cannot fill {wanted} non-empty splits"
        )));
    }
    patients.shuffle(&mut rng_for(seed, &[SPLIT_STREAM]));

    let cut1 = (n as f64 * ratios[0]).round() as usize;
    let cut2 = (n as f64 * (ratios[0] + ratios[1])).round() as usize;
    let mut counts = [cut1, cut2.saturating_sub(cut1), n.saturating_sub(cut2)];
    // rounding can starve a small non-zero split; borrow from the largest
    for k in 0..3 {
        if ratios[k] > 0.0 && counts[k] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j]).unwrap_or(0);
            counts[donor] -= 1;
            counts[k] += 1;
        }
    }

    let mut assignment = BTreeMap::new();
    let mut offset = 0;
    for (split, count) in [Split::Train, Split::Val, Split::Test].into_iter().zip(counts) {
        for p in &patients[offset..offset + count] {
            assignment.insert(p.to_string(), split);
        }
        offset += count;
    }
    Ok(manifest.with_patient_splits(|p| assignment[p]))
}

/// Keeps `ceil(fraction * n)` training patients, picked round-robin over
/// classes so every class keeps at least one patient when the budget
/// allows. Dropped patients become [`Split::Unassigned`].
pub fn subsample_fraction(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    let patients = manifest.patient_labels(Split::Train);
    if patients.is_empty() {
        return Err(Error::EmptyDataset("train split has no patients".into()));
    }
    let n = patients.len();
    // the epsilon keeps products such as 0.07 * 100 from rounding up a step
    let budget = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);

    let mut rng = rng_for(seed, &[SUBSAMPLE_STREAM]);
    let mut by_class: BTreeMap<SequenceLabel, Vec<&str>> = BTreeMap::new();
    for (p, label) in &patients {
        by_class.entry(*label).or_default().push(p);
    }
    let mut queues: Vec<Vec<&str>> = by_class.into_values().collect();
    for q in &mut queues {
        q.shuffle(&mut rng);
        q.reverse();
    }
    queues.shuffle(&mut rng);

    let mut chosen = BTreeSet::new();
    while chosen.len() < budget {
        for q in &mut queues {
            if chosen.len() == budget {
                break;
            }
            if let Some(p) = q.pop() {
                chosen.insert(p.to_string());
            }
        }
    }

    let mut out = manifest.clone();
    for i in manifest.indices(Split::Train) {
        if !chosen.contains(manifest.sample(i).patient_id()) {
            out.set_split(i, Split::Unassigned);
        }
    }
    Ok(out)
}

/// Bilinear resampling to `target x target` on corner-aligned grids: the
/// first and last output pixels sit exactly on the first and last inputs.
pub fn resample(image: &Tensor, target: usize) -> Result<Tensor> {
    if target < 1 {
        return Err(Error::InvalidArgument("resample target must be >= 1".into()));
    }
    let (h, w) = match image.shape() {
        [h, w] if *h >= 2 && *w >= 2 => (*h, *w),
        other => return Err(Error::shape("resample", other, &[2, 2])),
    };
    if h == target && w == target {
        return Ok(image.clone());
    }
    let coord = |i: usize, n: usize| {
        if target == 1 {
            (n - 1) as f64 / 2.0
        } else {
            i as f64 * (n - 1) as f64 / (target - 1) as f64
        }
    };
    let src = image.data();
    let mut out = Vec::with_capacity(target * target);
    for r in 0..target {
        let y = coord(r, h);
        let y0 = (y.floor() as usize).min(h - 2);
        let fy = y - y0 as f64;
        for c in 0..target {
            let x = coord(c, w);
            let x0 = (x.floor() as usize).min(w - 2);
            let fx = x - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x0 + 1] * fx;
            let bot = src[(y0 + 1) * w + x0] * (1.0 - fx) + src[(y0 + 1) * w + x0 + 1] * fx;
            out.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![target, target], out)
}
