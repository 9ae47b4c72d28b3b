//! Frame-level acoustic features and their binary file format.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "SVSFEAT\0" | version u32 = 1 | frames u64
//! 4 × block: name_len u32 | name (utf-8) | width u32 | frames·width f64
//! ```
//!
//! Blocks appear in the order `mgc` (60), `bap` (5), `logf0` (1), `vuv` (1).

use std::fs;
use std::io;
use std::path::Path;

use crate::binio::{write_atomic, Reader};

pub const MGC_DIM: usize = 60;
pub const BAP_DIM: usize = 5;
/// MGC + BAP + logF0 + V/UV.
pub const FEATURE_DIM: usize = MGC_DIM + BAP_DIM + 1 + 1;
pub const VUV_THRESHOLD: f64 = 0.5;

const MAGIC: &[u8; 8] = b"SVSFEAT\0";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("feature shape: {0}")]
    Shape(String),
    #[error("feature file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Per-frame MGC, BAP, logF0 and V/UV at a fixed 15 ms shift.
///
/// `logf0` is the natural log of F0 in Hz on voiced frames; consumers ignore
/// it where `vuv` is below 0.5. Ground truth carries hard 0/1 V/UV values,
/// model output carries probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticFeatureSequence {
    mgc: Vec<f64>,
    bap: Vec<f64>,
    logf0: Vec<f64>,
    vuv: Vec<f64>,
}

impl AcousticFeatureSequence {
    pub fn new(mgc: Vec<f64>, bap: Vec<f64>, logf0: Vec<f64>, vuv: Vec<f64>) -> Result<Self, FeatureError> {
        let frames = logf0.len();
        if frames == 0 {
            return Err(FeatureError::Shape("no frames".into()));
        }
        if mgc.len() != frames * MGC_DIM || bap.len() != frames * BAP_DIM || vuv.len() != frames {
            return Err(FeatureError::Shape(format!(
                "row counts disagree: mgc {}, bap {}, logf0 {}, vuv {}",
                mgc.len() / MGC_DIM,
                bap.len() / BAP_DIM,
                frames,
                vuv.len()
            )));
        }
        if let Some(v) = vuv.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(FeatureError::Shape(format!("vuv value {v} outside [0, 1]")));
        }
        Ok(Self { mgc, bap, logf0, vuv })
    }

    pub fn frames(&self) -> usize {
        self.logf0.len()
    }

    pub fn frame_shift_s(&self) -> f64 {
        crate::FRAME_SHIFT_S
    }

    /// Row-major `T×60`.
    pub fn mgc(&self) -> &[f64] {
        &self.mgc
    }

    pub fn mgc_row(&self, t: usize) -> &[f64] {
        &self.mgc[t * MGC_DIM..(t + 1) * MGC_DIM]
    }

    /// Row-major `T×5`, in dB.
    pub fn bap(&self) -> &[f64] {
        &self.bap
    }

    pub fn logf0(&self) -> &[f64] {
        &self.logf0
    }

    pub fn vuv(&self) -> &[f64] {
        &self.vuv
    }

    pub fn is_voiced(&self, t: usize) -> bool {
        self.vuv[t] >= VUV_THRESHOLD
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.frames() * FEATURE_DIM * 8 + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames() as u64).to_le_bytes());
        for (name, width, data) in self.blocks() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(width as u32).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatureError> {
        let fmt = |m: String| FeatureError::Format(m);
        let mut r = Reader::new(bytes);
        if r.take(8).map_err(fmt)? != MAGIC {
            return Err(fmt("bad magic".into()));
        }
        let version = r.u32().map_err(fmt)?;
        if version != VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let frames = r.u64().map_err(fmt)? as usize;
        let mut blocks = Vec::with_capacity(4);
        for (expected, expected_width) in [("mgc", MGC_DIM), ("bap", BAP_DIM), ("logf0", 1), ("vuv", 1)] {
            let name_len = r.u32().map_err(fmt)? as usize;
            let name = r.take(name_len).map_err(fmt)?;
            if name != expected.as_bytes() {
                return Err(fmt(format!(
                    "expected block '{expected}', found '{}'",
                    String::from_utf8_lossy(name)
                )));
            }
            let width = r.u32().map_err(fmt)? as usize;
            if width != expected_width {
                return Err(fmt(format!("block '{expected}' has width {width}, expected {expected_width}")));
            }
            blocks.push(r.f64s(frames * width).map_err(fmt)?);
        }
        if !r.is_empty() {
            return Err(fmt("trailing bytes".into()));
        }
        let vuv = blocks.pop().unwrap();
        let logf0 = blocks.pop().unwrap();
        let bap = blocks.pop().unwrap();
        let mgc = blocks.pop().unwrap();
        Self::new(mgc, bap, logf0, vuv)
    }

    /// Writes via a temporary file and rename.
    pub fn write(&self, path: &Path) -> Result<(), FeatureError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, FeatureError> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn blocks(&self) -> [(&'static str, usize, &[f64]); 4] {
        [
            ("mgc", MGC_DIM, &self.mgc),
            ("bap", BAP_DIM, &self.bap),
            ("logf0", 1, &self.logf0),
            ("vuv", 1, &self.vuv),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(frames: usize) -> AcousticFeatureSequence {
        let mgc = (0..frames * MGC_DIM).map(|i| (i as f64).sin()).collect();
        let bap = (0..frames * BAP_DIM).map(|i| -(i as f64)).collect();
        let logf0 = (0..frames).map(|i| 5.0 + i as f64 * 0.01).collect();
        let vuv = (0..frames).map(|i| (i % 2) as f64).collect();
        AcousticFeatureSequence::new(mgc, bap, logf0, vuv).unwrap()
    }

    #[test]
    fn rejects_inconsistent_rows() {
        assert!(AcousticFeatureSequence::new(vec![0.0; 120], vec![0.0; 10], vec![0.0; 2], vec![0.0; 3]).is_err());
        assert!(AcousticFeatureSequence::new(vec![], vec![], vec![], vec![]).is_err());
        assert!(AcousticFeatureSequence::new(vec![0.0; 60], vec![0.0; 5], vec![0.0], vec![2.0]).is_err());
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = sample(3).to_bytes();
        assert!(AcousticFeatureSequence::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(AcousticFeatureSequence::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(AcousticFeatureSequence::from_bytes(&extra).is_err());
    }

    proptest! {
        #[test]
        fn binary_round_trip(frames in 1usize..20) {
            let f = sample(frames);
            let bytes = f.to_bytes();
            let back = AcousticFeatureSequence::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &f);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
