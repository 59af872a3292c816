use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const NUM_LABELS: usize = 5;

/// MR sequence class. The discriminant is the label-vector position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SequenceLabel {
    T1 = 0,
    T2 = 1,
    Cine = 2,
    Lge = 3,
    Others = 4,
}

impl SequenceLabel {
    pub const ALL: [SequenceLabel; NUM_LABELS] = [
        SequenceLabel::T1,
        SequenceLabel::T2,
        SequenceLabel::Cine,
        SequenceLabel::Lge,
        SequenceLabel::Others,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("label index {i} out of range")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SequenceLabel::T1 => "T1",
            SequenceLabel::T2 => "T2",
            SequenceLabel::Cine => "CINE",
            SequenceLabel::Lge => "LGE",
            SequenceLabel::Others => "OTHERS",
        }
    }

    /// Parses a comma-separated list such as `T1,T2`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let labels = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        if labels.is_empty() {
            return Err(Error::InvalidArgument("empty label list".into()));
        }
        Ok(labels)
    }
}

impl fmt::Display for SequenceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SequenceLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "T1" => Ok(SequenceLabel::T1),
            "T2" => Ok(SequenceLabel::T2),
            "CINE" => Ok(SequenceLabel::Cine),
            "LGE" => Ok(SequenceLabel::Lge),
            "OTHERS" => Ok(SequenceLabel::Others),
            _ => Err(Error::Parse {
                what: "label",
                detail: format!("{s:?} is not one of T1|T2|CINE|LGE|OTHERS"),
            }),
        }
    }
}

/// One-hot target over the five sequence classes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelVector([f64; NUM_LABELS]);

impl LabelVector {
    pub fn one_hot(label: SequenceLabel) -> Self {
        let mut y = [0.0; NUM_LABELS];
        y[label.index()] = 1.0;
        Self(y)
    }

    /// Accepts only vectors with exactly one entry equal to 1 and the rest 0.
    pub fn from_values(values: [f64; NUM_LABELS]) -> Result<Self> {
        let ones = values.iter().filter(|&&v| v == 1.0).count();
        let zeros = values.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != NUM_LABELS - 1 {
            return Err(Error::InvalidArgument(format!(
                "label vector must be one-hot, got {values:?}"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64; NUM_LABELS] {
        &self.0
    }

    pub fn label(&self) -> SequenceLabel {
        let i = self.0.iter().position(|&v| v == 1.0).expect("one-hot");
        SequenceLabel::ALL[i]
    }
}

/// Lower clamp applied to sigmoid outputs.
pub const PREDICTION_CLAMP: f64 = 1e-7;

/// Per-label sigmoid scores, clamped into `[1e-7, 1 - 1e-7]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionVector([f64; NUM_LABELS]);

impl PredictionVector {
    pub fn new(values: [f64; NUM_LABELS]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prediction"));
        }
        Ok(Self(values.map(|v| v.clamp(PREDICTION_CLAMP, 1.0 - PREDICTION_CLAMP))))
    }

    pub fn values(&self) -> &[f64; NUM_LABELS] {
        &self.0
    }

    pub fn get(&self, label: SequenceLabel) -> f64 {
        self.0[label.index()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip_through_strings() {
        for l in SequenceLabel::ALL {
            assert_eq!(l.as_str().parse::<SequenceLabel>().unwrap(), l);
            assert_eq!(SequenceLabel::from_index(l.index()).unwrap(), l);
        }
        assert!("FLAIR".parse::<SequenceLabel>().is_err());
        assert_eq!(
            SequenceLabel::parse_list("T1, T2").unwrap(),
            vec![SequenceLabel::T1, SequenceLabel::T2]
        );
    }

    #[test]
    fn label_vector_is_one_hot() {
        let y = LabelVector::one_hot(SequenceLabel::Lge);
        assert_eq!(y.values(), &[0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(y.label(), SequenceLabel::Lge);
        assert!(LabelVector::from_values([1.0, 1.0, 0.0, 0.0, 0.0]).is_err());
        assert!(LabelVector::from_values([0.0, 0.5, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn predictions_are_clamped_inside_unit_interval() {
        let p = PredictionVector::new([0.0, 1.0, 0.5, 1e-9, 0.3]).unwrap();
        assert!(p.values().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p.get(SequenceLabel::T1), PREDICTION_CLAMP);
        assert_eq!(p.get(SequenceLabel::Cine), 0.5);
    }
}
