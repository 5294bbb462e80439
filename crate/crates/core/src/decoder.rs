//! Online per-class thresholding of chunk probabilities into action
//! instances. Each class keeps at most one open instance; instances of
//! different classes may overlap freely.

use crate::error::{Error, Result};
use crate::model::ActionProbabilities;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionInstance {
    pub start_chunk: usize,
    /// Inclusive.
    pub end_chunk: usize,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct OpenInstance {
    start: usize,
    sum: f64,
    len: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderState {
    threshold: f64,
    open: Vec<Option<OpenInstance>>,
    next_t: usize,
}

impl DecoderState {
    pub fn new(classes: usize, threshold: f64) -> Self {
        DecoderState {
            threshold,
            open: vec![None; classes],
            next_t: 0,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Index of the next chunk the decoder expects.
    pub fn next_chunk(&self) -> usize {
        self.next_t
    }

    pub fn open_count(&self) -> usize {
        self.open.iter().filter(|o| o.is_some()).count()
    }

    /// Consumes one chunk and returns the instances that ended just before it.
    pub fn decode_step(&mut self, c: &ActionProbabilities) -> Result<Vec<ActionInstance>> {
        if c.t != self.next_t {
            return Err(Error::Protocol(format!(
                "decoder expected chunk {}, got {}",
                self.next_t, c.t
            )));
        }
        if c.probs.len() != self.open.len() {
            return Err(Error::Contract(format!(
                "decoder has {} classes, got {} probabilities",
                self.open.len(),
                c.probs.len()
            )));
        }
        let mut done = Vec::new();
        for (class_id, (&p, slot)) in c.probs.iter().zip(self.open.iter_mut()).enumerate() {
            if p >= self.threshold {
                let o = slot.get_or_insert(OpenInstance {
                    start: c.t,
                    sum: 0.0,
                    len: 0,
                });
                o.sum += p;
                o.len += 1;
            } else if let Some(o) = slot.take() {
                done.push(close(o, class_id, c.t - 1));
            }
        }
        self.next_t += 1;
        Ok(done)
    }

    /// Closes every open instance at the last consumed chunk.
    pub fn finalize(&mut self) -> Vec<ActionInstance> {
        let end = self.next_t.saturating_sub(1);
        self.open
            .iter_mut()
            .enumerate()
            .filter_map(|(class_id, slot)| slot.take().map(|o| close(o, class_id, end)))
            .collect()
    }
}

fn close(o: OpenInstance, class_id: usize, end: usize) -> ActionInstance {
    ActionInstance {
        start_chunk: o.start,
        end_chunk: end,
        class_id,
        score: o.sum / o.len as f64,
    }
}

/// Mean class probability over an instance's span.
pub fn instance_score(span: &[f64]) -> Result<f64> {
    if span.is_empty() {
        return Err(Error::Contract("instance score of an empty span".into()));
    }
    Ok(span.iter().sum::<f64>() / span.len() as f64)
}

/// Decodes a whole probability sequence at once.
pub fn decode_stream(probs: &[ActionProbabilities], classes: usize, threshold: f64) -> Result<Vec<ActionInstance>> {
    let mut dec = DecoderState::new(classes, threshold);
    let mut out = Vec::new();
    for c in probs {
        out.extend(dec.decode_step(c)?);
    }
    out.extend(dec.finalize());
    Ok(out)
}

/// Maximal runs of `row[class] ≥ threshold`, scanning one class at a time.
pub fn maximal_runs(rows: &[Vec<f64>], threshold: f64) -> Vec<ActionInstance> {
    let classes = rows.first().map_or(0, Vec::len);
    let mut out = Vec::new();
    for class_id in 0..classes {
        let mut t = 0;
        while t < rows.len() {
            if rows[t][class_id] < threshold {
                t += 1;
                continue;
            }
            let start = t;
            while t < rows.len() && rows[t][class_id] >= threshold {
                t += 1;
            }
            let span: Vec<f64> = rows[start..t].iter().map(|r| r[class_id]).collect();
            out.push(ActionInstance {
                start_chunk: start,
                end_chunk: t - 1,
                class_id,
                score: span.iter().sum::<f64>() / span.len() as f64,
            });
        }
    }
    out
}
