//! Labelled image collections, patient-level splits and the synthetic
//! MR-sequence generator.

mod io;
mod split;
mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::labels::{LabelVector, SequenceLabel};

pub use io::{load_manifest, read_image, save_manifest, write_image, IMAGE_MAGIC};
pub use split::{patient_split, resample, subsample_fraction, DEFAULT_RATIOS};
pub use synth::{generate_synthetic, image_size_for};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Internal,
    ExternalA,
    ExternalB,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Internal, Domain::ExternalA, Domain::ExternalB];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Internal => "internal",
            Domain::ExternalA => "external_A",
            Domain::ExternalB => "external_B",
        }
    }

    /// Classes that occur in this domain.
    pub fn labels(self) -> &'static [SequenceLabel] {
        match self {
            Domain::Internal => &SequenceLabel::ALL,
            Domain::ExternalA | Domain::ExternalB => &[SequenceLabel::T1, SequenceLabel::T2],
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Domain::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse {
                what: "domain",
                detail: format!("{s:?} is not one of internal|external_A|external_B"),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Unassigned];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parse {
                what: "split",
                detail: format!("{s:?} is not one of train|val|test|unassigned"),
            })
    }
}

/// One labelled 2-D image. Pixels are only reachable through the owning
/// [`DatasetManifest`], which counts every read.
#[derive(Clone, Debug)]
pub struct ImageSample {
    patient_id: String,
    study_id: String,
    sample_id: String,
    pixels: Arc<Tensor>,
    label: LabelVector,
    domain: Domain,
}

impl ImageSample {
    pub fn new(
        patient_id: impl Into<String>,
        study_id: impl Into<String>,
        sample_id: impl Into<String>,
        pixels: Tensor,
        label: LabelVector,
        domain: Domain,
    ) -> Result<Self> {
        if pixels.shape().len() != 2 {
            return Err(Error::shape("ImageSample", pixels.shape(), &[0, 0]));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "pixel values must be finite and inside [0, 1]".into(),
            ));
        }
        let (patient_id, study_id, sample_id) = (patient_id.into(), study_id.into(), sample_id.into());
        for id in [&patient_id, &study_id, &sample_id] {
            if id.is_empty() || id.contains([',', '\n', '"', '/', '\\']) {
                return Err(Error::InvalidArgument(format!("unusable identifier {id:?}")));
            }
        }
        Ok(Self {
            patient_id,
            study_id,
            sample_id,
            pixels: Arc::new(pixels),
            label,
            domain,
        })
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn study_id(&self) -> &str {
        &self.study_id
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn label(&self) -> LabelVector {
        self.label
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn image_shape(&self) -> &[usize] {
        self.pixels.shape()
    }
}

/// Pixel-read counters per split, shared by every manifest derived from
/// the same source.
#[derive(Debug, Default)]
pub struct AccessAudit {
    reads: [AtomicU64; 4],
}

impl AccessAudit {
    pub fn reads(&self, split: Split) -> u64 {
        self.reads[split.slot()].load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        for r in &self.reads {
            r.store(0, Ordering::Relaxed);
        }
    }

    fn record(&self, split: Split) {
        self.reads[split.slot()].fetch_add(1, Ordering::Relaxed);
    }
}

/// Curation steps that apply to real volumes. Synthetic images are emitted
/// already "kept", so these are carried as metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Curation {
    pub central_slice_fraction: f64,
    pub corrupt_filtered: bool,
}

impl Default for Curation {
    fn default() -> Self {
        Self {
            central_slice_fraction: 0.2,
            corrupt_filtered: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    samples: Vec<ImageSample>,
    splits: Vec<Split>,
    curation: Curation,
    audit: Arc<AccessAudit>,
}

impl DatasetManifest {
    /// Wraps samples with every split unassigned.
    pub fn new(samples: Vec<ImageSample>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for s in &samples {
            if !ids.insert(s.sample_id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate sample id {}",
                    s.sample_id
                )));
            }
        }
        let n = samples.len();
        Ok(Self {
            samples,
            splits: vec![Split::Unassigned; n],
            curation: Curation::default(),
            audit: Arc::new(AccessAudit::default()),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &ImageSample {
        &self.samples[i]
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn curation(&self) -> &Curation {
        &self.curation
    }

    pub fn set_curation(&mut self, curation: Curation) {
        self.curation = curation;
    }

    pub fn audit(&self) -> &AccessAudit {
        &self.audit
    }

    /// Sample indices in `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn patients(&self, split: Split) -> BTreeSet<&str> {
        self.indices(split)
            .into_iter()
            .map(|i| self.samples[i].patient_id.as_str())
            .collect()
    }

    /// Reads the pixels of sample `i`, recording the access against its split.
    pub fn pixels(&self, i: usize) -> &Tensor {
        self.audit.record(self.splits[i]);
        &self.samples[i].pixels
    }

    /// Label-free access to one split.
    pub fn unlabeled(&self, split: Split) -> UnlabeledView<'_> {
        UnlabeledView {
            manifest: self,
            indices: self.indices(split),
        }
    }

    /// Assigns every sample of each patient to `assign(patient_id)`.
    pub(crate) fn with_patient_splits(&self, assign: impl Fn(&str) -> Split) -> Self {
        let mut out = self.clone();
        for (s, split) in out.samples.iter().zip(out.splits.iter_mut()) {
            *split = assign(&s.patient_id);
        }
        out
    }

    pub(crate) fn set_split(&mut self, i: usize, split: Split) {
        self.splits[i] = split;
    }

    /// Keeps only samples matching `keep`, preserving splits. The result
    /// shares this manifest's access audit.
    pub fn filter(&self, keep: impl Fn(&ImageSample, Split) -> bool) -> Self {
        let (samples, splits) = self
            .samples
            .iter()
            .zip(&self.splits)
            .filter(|(s, sp)| keep(s, **sp))
            .map(|(s, sp)| (s.clone(), *sp))
            .unzip();
        Self {
            samples,
            splits,
            curation: self.curation.clone(),
            audit: Arc::clone(&self.audit),
        }
    }

    /// Label of the first sample of each patient, in patient-id order.
    pub fn patient_labels(&self, split: Split) -> Vec<(String, SequenceLabel)> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for i in self.indices(split) {
            let s = &self.samples[i];
            if seen.insert(s.patient_id.as_str()) {
                out.push((s.patient_id.clone(), s.label.label()));
            }
        }
        out.sort();
        out
    }
}

/// Pixels of one split with no route to the labels.
pub struct UnlabeledView<'a> {
    manifest: &'a DatasetManifest,
    indices: Vec<usize>,
}

impl UnlabeledView<'_> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn pixels(&self, j: usize) -> &Tensor {
        self.manifest.pixels(self.indices[j])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, patient: &str) -> ImageSample {
        ImageSample::new(
            patient,
            format!("{patient}-st0"),
            id,
            Tensor::full(&[4, 4], 0.5),
            LabelVector::one_hot(SequenceLabel::T1),
            Domain::Internal,
        )
        .unwrap()
    }

    #[test]
    fn names_round_trip() {
        for d in Domain::ALL {
            assert_eq!(d.as_str().parse::<Domain>().unwrap(), d);
        }
        for s in Split::ALL {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
        assert!("external_C".parse::<Domain>().is_err());
    }

    #[test]
    fn sample_rejects_out_of_range_pixels() {
        let bad = Tensor::full(&[2, 2], 1.5);
        let y = LabelVector::one_hot(SequenceLabel::T2);
        assert!(ImageSample::new("p", "s", "i", bad, y, Domain::Internal).is_err());
        let nan = Tensor::full(&[2, 2], f64::NAN);
        assert!(ImageSample::new("p", "s", "i", nan, y, Domain::Internal).is_err());
        let ok = Tensor::zeros(&[2, 2]);
        assert!(ImageSample::new("p,q", "s", "i", ok, y, Domain::Internal).is_err());
    }

    #[test]
    fn duplicate_sample_ids_are_rejected() {
        assert!(DatasetManifest::new(vec![sample("a", "p1"), sample("a", "p2")]).is_err());
    }

    #[test]
    fn audit_counts_reads_per_split() {
        let m = DatasetManifest::new(vec![sample("a", "p1"), sample("b", "p2")]).unwrap();
        let m = m.with_patient_splits(|p| if p == "p1" { Split::Train } else { Split::Test });
        let view = m.unlabeled(Split::Train);
        assert_eq!(view.len(), 1);
        view.pixels(0);
        view.pixels(0);
        assert_eq!(m.audit().reads(Split::Train), 2);
        assert_eq!(m.audit().reads(Split::Test), 0);
        let derived = m.filter(|_, _| true);
        derived.pixels(1);
        assert_eq!(m.audit().reads(Split::Test), 1);
        m.audit().reset();
        assert_eq!(m.audit().reads(Split::Train), 0);
    }
}
