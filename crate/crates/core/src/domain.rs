//! Value types shared by the data pipeline, the models and the trainer.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary occurrence flags, one per action unit.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AuLabels(Vec<bool>);

impl AuLabels {
    pub fn new(values: Vec<bool>) -> Self {
        Self(values)
    }

    pub fn zeros(num_aus: usize) -> Self {
        Self(vec![false; num_aus])
    }

    /// Builds a label vector from 0/1 integers, rejecting anything else.
    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        bits.iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::data(format!("label entry {other} is not binary"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    /// Thresholds probabilities at 0.5; a tie counts as present.
    pub fn from_probabilities(probs: &[f64]) -> Self {
        Self(probs.iter().map(|&p| p >= 0.5).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, au: usize) -> bool {
        self.0[au]
    }

    pub fn set(&mut self, au: usize, value: bool) {
        self.0[au] = value;
    }

    pub fn values(&self) -> &[bool] {
        &self.0
    }

    pub fn as_f32(&self) -> impl Iterator<Item = f32> + '_ {
        self.0.iter().map(|&v| if v { 1.0 } else { 0.0 })
    }

    pub fn count_active(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }
}

impl fmt::Debug for AuLabels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &v in &self.0 {
            f.write_str(if v { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// One video frame: pixels in `[0, 1]`, stored row-major as `H x W x C`.
#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub image: Vec<f32>,
    /// Trainer-visible label. `None` for every frame whose annotation is withheld.
    pub label: Option<AuLabels>,
    /// Position in the source sequence.
    pub frame_index: usize,
}

/// An `n`-frame window whose only visible label sits at `key_pos`.
#[derive(Clone, Debug)]
pub struct ClipSample {
    pub clip_id: usize,
    pub sequence: usize,
    pub key_pos: usize,
    pub frames: Vec<FrameRecord>,
    /// Ground truth for every frame of the window. Only used for auditing
    /// pseudo labels; the trainer never reads it for supervision.
    pub audit: Vec<AuLabels>,
}

impl ClipSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn key_label(&self) -> Option<&AuLabels> {
        self.frames.get(self.key_pos).and_then(|f| f.label.as_ref())
    }
}

/// Mutable bookkeeping owned by the trainer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    /// 1-based epoch currently being trained (0 before the first epoch).
    pub epoch: usize,
    /// Global training-batch counter; drives the key-frame rotation.
    pub batch_counter: u64,
    pub rng_seed: u64,
    pub positive_weights: Vec<f64>,
}

/// Per-AU weight for the positive term of the BCE, from the labeled subset:
/// `clamp(neg / max(pos, 1), 0.1, 10)`.
pub fn positive_class_weights<'a, I>(labels: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a AuLabels>,
{
    let mut iter = labels.into_iter().peekable();
    let num_aus = match iter.peek() {
        Some(first) => first.len(),
        None => {
            return Err(Error::config(
                "cannot derive class weights from an empty label set",
            ))
        }
    };
    let mut pos = vec![0usize; num_aus];
    let mut total = 0usize;
    for labels in iter {
        if labels.len() != num_aus {
            return Err(Error::shape(format!(
                "label vector of length {} in a collection of length {num_aus}",
                labels.len()
            )));
        }
        for (count, &v) in pos.iter_mut().zip(labels.values()) {
            *count += usize::from(v);
        }
        total += 1;
    }
    Ok(pos
        .iter()
        .map(|&p| {
            let neg = (total - p) as f64;
            (neg / p.max(1) as f64).clamp(0.1, 10.0)
        })
        .collect())
}

/// The clip position that carries the label in batch `batch`: `batch mod n`.
pub fn key_frame_position(batch: u64, clip_len: usize) -> Result<usize> {
    if clip_len == 0 {
        return Err(Error::config("clip length must be positive"));
    }
    Ok((batch % clip_len as u64) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(rows: &[&[u8]]) -> Vec<AuLabels> {
        rows.iter().map(|r| AuLabels::from_bits(r).unwrap()).collect()
    }

    #[test]
    fn balanced_labels_give_unit_weights() {
        let set = labels(&[&[1, 0, 1], &[0, 1, 0], &[1, 1, 0], &[0, 0, 1]]);
        assert_eq!(positive_class_weights(&set).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn weights_follow_inverse_frequency() {
        // AU0: 1 positive / 9 negative, AU1: 4 / 6.
        let mut set = Vec::new();
        for i in 0..10 {
            set.push(AuLabels::new(vec![i == 0, i < 4]));
        }
        assert_eq!(positive_class_weights(&set).unwrap(), vec![9.0, 1.5]);
    }

    #[test]
    fn missing_positives_are_clamped() {
        let five = vec![AuLabels::new(vec![false, true]); 5];
        // neg/max(pos,1) = 5/1 for AU0, 0/5 -> clamped up to 0.1 for AU1.
        assert_eq!(positive_class_weights(&five).unwrap(), vec![5.0, 0.1]);
        let twenty = vec![AuLabels::new(vec![false]); 20];
        assert_eq!(positive_class_weights(&twenty).unwrap(), vec![10.0]);
    }

    #[test]
    fn empty_collection_is_a_config_error() {
        let empty: Vec<AuLabels> = Vec::new();
        assert!(matches!(
            positive_class_weights(&empty),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn key_position_is_batch_mod_len() {
        assert_eq!(key_frame_position(0, 5).unwrap(), 0);
        assert_eq!(key_frame_position(7, 5).unwrap(), 2);
        let mut seen = [0usize; 5];
        for b in 0..10 {
            seen[key_frame_position(b, 5).unwrap()] += 1;
        }
        assert_eq!(seen, [2; 5]);
        assert!(key_frame_position(3, 0).is_err());
    }

    #[test]
    fn tie_probability_maps_to_present() {
        let l = AuLabels::from_probabilities(&[0.5, 0.49, 0.9]);
        assert_eq!(l.values(), &[true, false, true]);
        assert!(AuLabels::from_bits(&[0, 2]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn rotation_covers_every_position(start in 0u64..10_000, n in 1usize..12) {
            let mut seen = vec![0usize; n];
            for b in start..start + n as u64 {
                seen[key_frame_position(b, n).unwrap()] += 1;
            }
            proptest::prop_assert!(seen.iter().all(|&c| c == 1));
        }

        #[test]
        fn weights_ignore_order(
            rows in proptest::collection::vec(proptest::collection::vec(proptest::bool::ANY, 4), 1..40),
            seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let set: Vec<AuLabels> = rows.into_iter().map(AuLabels::new).collect();
            let mut shuffled = set.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = positive_class_weights(&set).unwrap();
            let b = positive_class_weights(&shuffled).unwrap();
            proptest::prop_assert_eq!(&a, &b);
            proptest::prop_assert!(a.iter().all(|w| w.is_finite() && *w > 0.0));
        }
    }
}
