//! Clock, paced output emitter and speech input.

mod clock;
mod emitter;
mod speech;

pub use clock::{time_passage_text, Clock, ClockError, ClockMode, DEFAULT_TICK_INTERVAL_MS};
pub use emitter::{
    split_sentences, ChatKey, EmissionRate, Emitter, EmitterSignal, HaltReport, HaltedChat,
    SentenceAggregator, DEFAULT_CHARS_PER_SECOND,
};
pub use speech::{
    validate_utterances, SpeechInput, SpeechOutput, SpeechSignal, Utterance, UtteranceError,
    VadEdge, VolumeVad,
};
