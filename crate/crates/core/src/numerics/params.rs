use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};

/// A named extent inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameter storage with a shape map.
///
/// The segments partition `values` exactly, in order, with no gaps.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamVector {
    values: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, segments: Vec<Segment>) -> Result<Self> {
        let mut cursor = 0;
        for seg in &segments {
            if seg.offset != cursor {
                return Err(shape_err!("segment `{}` starts at {} but expected {}", seg.name, seg.offset, cursor));
            }
            cursor += seg.len;
        }
        if cursor != values.len() {
            return Err(shape_err!("segments cover {} values but vector holds {}", cursor, values.len()));
        }
        if !crate::math::all_finite(&values) {
            return Err(crate::Error::Numeric("parameter vector contains non-finite values".into()));
        }
        Ok(Self { values, segments })
    }

    /// Builds a zero vector whose segments have the given `(name, len)` extents.
    pub fn zeros(extents: impl IntoIterator<Item = (String, usize)>) -> Self {
        let mut segments = Vec::new();
        let mut offset = 0;
        for (name, len) in extents {
            segments.push(Segment { name, offset, len });
            offset += len;
        }
        Self { values: alloc::vec![0.0; offset], segments }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn rejects_gaps_and_overruns() {
        let seg = |n: &str, o, l| Segment { name: n.into(), offset: o, len: l };
        assert!(ParamVector::new(vec![0.0; 3], vec![seg("a", 0, 1), seg("b", 1, 2)]).is_ok());
        assert!(ParamVector::new(vec![0.0; 3], vec![seg("a", 0, 1), seg("b", 2, 1)]).is_err());
        assert!(ParamVector::new(vec![0.0; 4], vec![seg("a", 0, 1), seg("b", 1, 2)]).is_err());
        assert!(ParamVector::new(vec![f64::NAN], vec![seg("a", 0, 1)]).is_err());
    }

    #[test]
    fn segment_lookup() {
        let mut p = ParamVector::zeros([("w".into(), 2), ("b".into(), 1)]);
        p.values_mut()[2] = 5.0;
        assert_eq!(p.segment("b"), Some(&[5.0][..]));
        assert_eq!(p.segment("w").unwrap().len(), 2);
        assert!(p.segment("x").is_none());
    }
}
