//! Speech input: scripted utterances for the simulator, and the adapter
//! boundary for real STT/TTS front-ends.

use serde::{Deserialize, Serialize};

use crate::ledger::Millis;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub start_ms: Millis,
    pub end_ms: Millis,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum UtteranceError {
    #[error("utterance {index} ends at {end} but does not start before it ({start})")]
    Empty { index: usize, start: Millis, end: Millis },
    #[error("utterance {index} starts before utterance {} ends", index - 1)]
    Overlap { index: usize },
}

/// Checks that utterances are non-empty in time, sorted and non-overlapping.
pub fn validate_utterances(utterances: &[Utterance]) -> Result<(), UtteranceError> {
    for (index, u) in utterances.iter().enumerate() {
        if u.start_ms >= u.end_ms {
            return Err(UtteranceError::Empty {
                index,
                start: u.start_ms,
                end: u.end_ms,
            });
        }
        if index > 0 && u.start_ms < utterances[index - 1].end_ms {
            return Err(UtteranceError::Overlap { index });
        }
    }
    Ok(())
}

/// Callbacks a speech recognizer produces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpeechSignal {
    Start,
    Partial(String),
    End(String),
}

/// A speech-to-text front-end, polled by the session owner.
pub trait SpeechInput: Send {
    fn poll(&mut self) -> Vec<SpeechSignal>;
}

/// A text-to-speech back-end. `position` and `stop` report characters of the
/// submitted text actually spoken.
pub trait SpeechOutput: Send {
    fn submit(&mut self, segment: &str);
    fn position(&self) -> usize;
    fn stop(&mut self) -> usize;
}

/// Voice activity from a volume threshold with a hangover, so short pauses
/// inside an utterance do not end it.
#[derive(Debug, Clone)]
pub struct VolumeVad {
    threshold: f32,
    hangover_ms: Millis,
    speaking: bool,
    last_loud: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VadEdge {
    Start,
    End,
}

impl VolumeVad {
    pub fn new(threshold: f32, hangover_ms: Millis) -> Self {
        Self {
            threshold,
            hangover_ms,
            speaking: false,
            last_loud: 0,
        }
    }

    pub fn is_speaking(&self) -> bool {
        self.speaking
    }

    /// Feeds the RMS level of one audio frame captured at `now`.
    pub fn observe(&mut self, level: f32, now: Millis) -> Option<VadEdge> {
        if level >= self.threshold {
            self.last_loud = now;
            if !self.speaking {
                self.speaking = true;
                return Some(VadEdge::Start);
            }
        } else if self.speaking && now.saturating_sub(self.last_loud) >= self.hangover_ms {
            self.speaking = false;
            return Some(VadEdge::End);
        }
        None
    }
}
