//! Utterances, per-utterance normalization and fixed-length framing.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};

/// Class label; the discriminant is the network's output index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Genuine = 0,
    Ss = 1,
    Vc = 2,
    Re = 3,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Genuine, Label::Ss, Label::Vc, Label::Re];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_genuine(self) -> bool {
        self == Label::Genuine
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Genuine => "GENUINE",
            Label::Ss => "SS",
            Label::Vc => "VC",
            Label::Re => "RE",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "GENUINE" => Ok(Label::Genuine),
            "SS" => Ok(Label::Ss),
            "VC" => Ok(Label::Vc),
            "RE" => Ok(Label::Re),
            _ => Err(format!("unknown label '{s}' (expected GENUINE, SS, VC or RE)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "eval" => Ok(Split::Eval),
            _ => Err(format!("unknown split '{s}' (expected train, dev or eval)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub label: Label,
    /// Attack category such as `RE-PH2-PH3`; empty for genuine speech.
    pub category: String,
    pub split: Split,
}

impl Utterance {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate != crate::wav::SAMPLE_RATE {
            return Err(Error::Data(format!(
                "{}: sample rate {} != 16000",
                self.id, self.sample_rate
            )));
        }
        if self.samples.is_empty() {
            return Err(Error::Data(format!("{}: no samples", self.id)));
        }
        if self.label.is_genuine() != self.category.is_empty() {
            return Err(Error::Data(format!(
                "{}: genuine utterances have no category and attacks need one",
                self.id
            )));
        }
        Ok(())
    }
}

/// `S × N` block of consecutive normalized waveform pieces, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    data: Vec<f64>,
    frame_len: usize,
    pub utterance_id: String,
}

impl FrameSequence {
    pub fn from_frames(frames: &[Vec<f64>], utterance_id: impl Into<String>) -> Result<Self> {
        let frame_len = frames
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Data("utterance shorter than one frame".into()))?;
        if frame_len == 0 || frames.iter().any(|f| f.len() != frame_len) {
            return Err(Error::InvalidArgument("frames of unequal length".into()));
        }
        Ok(Self {
            data: frames.concat(),
            frame_len,
            utterance_id: utterance_id.into(),
        })
    }

    /// Number of frames `S`.
    pub fn len(&self) -> usize {
        self.data.len() / self.frame_len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.frame_len..(t + 1) * self.frame_len]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Below this standard deviation an utterance is treated as silence and
/// only mean-subtracted.
pub const MIN_STD: f64 = 1e-8;

/// Zero-mean, unit (population) variance over the whole utterance.
pub fn normalize(samples: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Data("cannot normalize an empty signal".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let centered: Vec<f64> = samples.iter().map(|s| s - mean).collect();
    let std = (centered.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    if std < MIN_STD {
        return Ok(centered);
    }
    Ok(centered.into_iter().map(|v| v / std).collect())
}

/// Cuts `samples` into pieces of `frame_len` taken every `hop` samples.
/// A trailing piece shorter than `frame_len` is dropped; no voice activity
/// detection is ever applied.
pub fn frame(samples: &[f64], frame_len: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    if frame_len == 0 || hop == 0 {
        return Err(Error::InvalidArgument(
            "frame length and hop must be >= 1".into(),
        ));
    }
    if samples.len() < frame_len {
        return Ok(Vec::new());
    }
    let count = (samples.len() - frame_len) / hop + 1;
    Ok((0..count)
        .map(|i| samples[i * hop..i * hop + frame_len].to_vec())
        .collect())
}

/// Normalizes then frames an utterance's samples.
pub fn prepare_frames(samples: &[f64], frame_len: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    frame(&normalize(samples)?, frame_len, hop)
}

/// A random window of `seq_len` consecutive frames. Utterances with fewer
/// frames are cycled (`a b c a b c a …`) rather than zero padded.
pub fn make_training_sequence(
    frames: &[Vec<f64>],
    seq_len: usize,
    utterance_id: &str,
    rng: &mut dyn RngCore,
) -> Result<FrameSequence> {
    if frames.is_empty() {
        return Err(Error::Data(format!(
            "{utterance_id}: utterance shorter than one frame"
        )));
    }
    if seq_len == 0 {
        return Err(Error::InvalidArgument("sequence length must be >= 1".into()));
    }
    if frames.len() >= seq_len {
        let start = rng.random_range(0..=frames.len() - seq_len);
        FrameSequence::from_frames(&frames[start..start + seq_len], utterance_id)
    } else {
        let cycled: Vec<Vec<f64>> = frames.iter().cycle().take(seq_len).cloned().collect();
        FrameSequence::from_frames(&cycled, utterance_id)
    }
}

/// The whole utterance as one variable-length sequence.
pub fn make_eval_sequence(frames: &[Vec<f64>], utterance_id: &str) -> Result<FrameSequence> {
    if frames.is_empty() {
        return Err(Error::Data(format!(
            "{utterance_id}: utterance shorter than one frame"
        )));
    }
    FrameSequence::from_frames(frames, utterance_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn moments(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
        (m, s)
    }

    #[test]
    fn normalize_two_points() {
        assert_eq!(normalize(&[1.0, 3.0]).unwrap(), vec![-1.0, 1.0]);
    }

    #[test]
    fn normalize_constant_is_zero() {
        assert_eq!(normalize(&[5.0, 5.0, 5.0]).unwrap(), vec![0.0; 3]);
        assert!(normalize(&[]).is_err());
    }

    #[test]
    fn normalize_random_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..1000).map(|_| rng.random_range(-0.3..0.9)).collect();
        let (m, s) = moments(&normalize(&x).unwrap());
        assert!(m.abs() < 1e-10 && (s - 1.0).abs() < 1e-10);
    }

    #[test]
    fn frame_counts() {
        let x: Vec<f64> = (0..1200).map(f64::from).collect();
        let f = frame(&x, 560, 560).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f[0][0], 0.0);
        assert_eq!(f[1][0], 560.0);
        assert_eq!(f[1][559], 1119.0);
        assert_eq!(frame(&x[..560], 560, 560).unwrap().len(), 1);
        assert!(frame(&x[..559], 560, 560).unwrap().is_empty());
    }

    #[test]
    fn training_window_identity_and_cycling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let frames: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64; 2]).collect();
        let s = make_training_sequence(&frames, 10, "u", &mut rng).unwrap();
        assert_eq!(s.data(), frames.concat().as_slice());

        let abc: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64]).collect();
        let s = make_training_sequence(&abc, 7, "u", &mut rng).unwrap();
        assert_eq!(s.data(), &[0., 1., 2., 0., 1., 2., 0.]);

        let err = make_training_sequence(&[], 7, "u", &mut rng).unwrap_err();
        assert!(err.to_string().contains("shorter than one frame"));
    }

    #[test]
    fn training_window_reproducible_with_seed() {
        let frames: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64]).collect();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            make_training_sequence(&frames, 25, "u", &mut rng).unwrap()
        };
        assert_eq!(draw(42), draw(42));
        let s = draw(42);
        let start = s.frame(0)[0];
        assert!((0.0..=75.0).contains(&start));
        // contiguous window
        assert!((0..25).all(|t| s.frame(t)[0] == start + t as f64));
    }

    #[test]
    fn eval_sequence_takes_everything() {
        let x = vec![0.25; 44_800];
        let frames = frame(&x, 560, 560).unwrap();
        assert_eq!(make_eval_sequence(&frames, "u").unwrap().len(), 80);
        assert_eq!(make_eval_sequence(&frames[..1], "u").unwrap().len(), 1);
        assert!(make_eval_sequence(&[], "u").is_err());
    }

    #[test]
    fn label_tokens() {
        assert_eq!("re".parse::<Label>().unwrap(), Label::Re);
        assert!("XX".parse::<Label>().is_err());
        assert_eq!(Label::Genuine.index(), 0);
    }

    proptest! {
        #[test]
        fn frame_count_is_floor_division(len in 0usize..5000, n in 1usize..700) {
            let x = vec![0.0; len];
            prop_assert_eq!(frame(&x, n, n).unwrap().len(), len / n);
        }

        #[test]
        fn normalized_moments(x in prop::collection::vec(-1.0f64..1.0, 2..400)) {
            let (_, s_in) = moments(&x);
            prop_assume!(s_in >= MIN_STD);
            let (m, s) = moments(&normalize(&x).unwrap());
            prop_assert!(m.abs() <= 1e-8);
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn cycling_adds_no_new_values(count in 1usize..8, seq_len in 1usize..30, seed in 0u64..1000) {
            let frames: Vec<Vec<f64>> = (0..count).map(|i| vec![i as f64 * 1.5, -(i as f64)]).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = make_training_sequence(&frames, seq_len, "u", &mut rng).unwrap();
            prop_assert_eq!(s.len(), seq_len);
            for t in 0..s.len() {
                prop_assert!(frames.iter().any(|f| f.as_slice() == s.frame(t)));
            }
        }

        #[test]
        fn framing_is_deterministic(x in prop::collection::vec(-1.0f64..1.0, 560..3000)) {
            let a = prepare_frames(&x, 560, 560).unwrap();
            let b = prepare_frames(&x, 560, 560).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
