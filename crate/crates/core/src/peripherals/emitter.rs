//! Paced output of assistant chat, one sentence at a time.

use std::collections::{BTreeMap, VecDeque};

use crate::ledger::Millis;

pub const DEFAULT_CHARS_PER_SECOND: u32 = 50;

/// Cuts streamed chat into sentences. A sentence ends after `.`, `!` or `?`
/// followed by whitespace; whatever is left is flushed when the chat closes.
#[derive(Debug, Clone, Default)]
pub struct SentenceAggregator {
    pos: usize,
}

impl SentenceAggregator {
    /// Byte ranges of the sentences completed since the last call. Ranges
    /// exclude surrounding whitespace.
    pub fn scan(&mut self, text: &str, flush: bool) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        loop {
            let rest = &text[self.pos..];
            let Some(lead) = rest.find(|c: char| !c.is_whitespace()) else {
                return out;
            };
            let start = self.pos + lead;
            let mut end = None;
            let mut chars = text[start..].char_indices().peekable();
            while let Some((i, c)) = chars.next() {
                if matches!(c, '.' | '!' | '?') {
                    if let Some((_, next)) = chars.peek() {
                        if next.is_whitespace() {
                            end = Some(start + i + c.len_utf8());
                            break;
                        }
                    }
                }
            }
            match end {
                Some(end) => {
                    out.push((start, end));
                    self.pos = end;
                }
                None if flush => {
                    out.push((start, start + text[start..].trim_end().len()));
                    self.pos = text.len();
                    return out;
                }
                None => return out,
            }
        }
    }
}

/// Sentences of a complete chat text.
pub fn split_sentences(text: &str) -> Vec<&str> {
    SentenceAggregator::default()
        .scan(text, true)
        .into_iter()
        .map(|(a, b)| &text[a..b])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmissionRate {
    /// Everything is emitted the moment it is queued.
    Instant,
    CharsPerSecond(u32),
}

impl EmissionRate {
    /// Time to emit `chars` characters, rounded up to whole milliseconds.
    pub fn duration_ms(self, chars: usize) -> Millis {
        match self {
            EmissionRate::Instant => 0,
            EmissionRate::CharsPerSecond(cps) => {
                let cps = Millis::from(cps.max(1));
                (chars as Millis * 1000).div_ceil(cps)
            }
        }
    }
}

/// Generation key used to keep chats of different generations apart.
pub type ChatKey = u64;

#[derive(Debug, Clone, PartialEq)]
pub enum EmitterSignal {
    /// The emitter went from inactive to active.
    Activated,
    SegmentStarted { chat: ChatKey, text: String },
    /// A word boundary is due at `at`; call [`Emitter::on_word_due`] then.
    WordDue { at: Millis, epoch: u64 },
    SegmentFinished { chat: ChatKey, text: String },
    /// Nothing left to emit and no chat open.
    Drained,
}

/// What one chat had emitted when the emitter was halted.
#[derive(Debug, Clone, PartialEq)]
pub struct HaltedChat {
    pub chat: ChatKey,
    pub generated: String,
    pub emitted: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HaltReport {
    pub was_active: bool,
    pub chats: Vec<HaltedChat>,
}

impl HaltReport {
    pub fn emitted_for(&self, chat: ChatKey) -> Option<&str> {
        self.chats
            .iter()
            .find(|c| c.chat == chat)
            .map(|c| c.emitted.as_str())
    }

    /// Everything emitted across chats, in chat order.
    pub fn emitted_text(&self) -> String {
        self.chats
            .iter()
            .map(|c| c.emitted.as_str())
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, Default)]
struct ChatBuffer {
    text: String,
    emitted: usize,
    open: bool,
    retired: bool,
    sentences: SentenceAggregator,
}

impl ChatBuffer {
    fn fully_emitted(&self) -> bool {
        self.emitted >= self.text.trim_end().len()
    }
}

#[derive(Debug, Clone)]
struct Segment {
    chat: ChatKey,
    start: usize,
    end: usize,
}

#[derive(Debug, Clone)]
struct Speaking {
    segment: Segment,
    started_at: Millis,
    // (byte offset in the chat text, chars from segment start) per word end.
    word_ends: Vec<(usize, usize)>,
    next: usize,
}

#[derive(Debug, Clone)]
pub struct Emitter {
    rate: EmissionRate,
    chats: BTreeMap<ChatKey, ChatBuffer>,
    pending: VecDeque<Segment>,
    speaking: Option<Speaking>,
    active: bool,
    epoch: u64,
}

impl Emitter {
    pub fn new(rate: EmissionRate) -> Self {
        Self {
            rate,
            chats: BTreeMap::new(),
            pending: VecDeque::new(),
            speaking: None,
            active: false,
            epoch: 0,
        }
    }

    pub fn rate(&self) -> EmissionRate {
        self.rate
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Text emitted so far for `chat`.
    pub fn emitted(&self, chat: ChatKey) -> Option<&str> {
        self.chats.get(&chat).map(|c| &c.text[..c.emitted])
    }

    pub fn generated(&self, chat: ChatKey) -> Option<&str> {
        self.chats.get(&chat).map(|c| c.text.as_str())
    }

    pub fn open_chat(&mut self, chat: ChatKey) {
        self.chats.entry(chat).or_default().open = true;
    }

    pub fn push_chat(&mut self, chat: ChatKey, delta: &str, now: Millis) -> Vec<EmitterSignal> {
        let buf = self.chats.entry(chat).or_default();
        buf.text.push_str(delta);
        let ranges = buf.sentences.scan(&buf.text, false);
        self.queue(chat, ranges);
        self.pump(now)
    }

    pub fn close_chat(&mut self, chat: ChatKey, now: Millis) -> Vec<EmitterSignal> {
        let Some(buf) = self.chats.get_mut(&chat) else {
            return Vec::new();
        };
        buf.open = false;
        let ranges = buf.sentences.scan(&buf.text, true);
        self.queue(chat, ranges);
        self.pump(now)
    }

    /// The generation owning `chat` has finished; its buffer can go once it
    /// has been emitted.
    pub fn retire(&mut self, chat: ChatKey) {
        if let Some(buf) = self.chats.get_mut(&chat) {
            buf.retired = true;
        }
        self.cleanup(chat);
    }

    pub fn on_word_due(&mut self, epoch: u64, now: Millis) -> Vec<EmitterSignal> {
        if epoch != self.epoch {
            return Vec::new();
        }
        let mut out = Vec::new();
        if let Some(speaking) = self.speaking.as_mut() {
            let (offset, _) = speaking.word_ends[speaking.next];
            speaking.next += 1;
            if let Some(buf) = self.chats.get_mut(&speaking.segment.chat) {
                buf.emitted = offset;
            }
            if speaking.next < speaking.word_ends.len() {
                let (_, chars) = speaking.word_ends[speaking.next];
                out.push(EmitterSignal::WordDue {
                    at: speaking.started_at + self.rate.duration_ms(chars),
                    epoch: self.epoch,
                });
                return out;
            }
            let done = self.speaking.take().expect("speaking").segment;
            out.push(self.finished(&done));
        }
        out.extend(self.pump(now));
        out
    }

    /// Stops at the last completed word and clears everything queued.
    pub fn halt(&mut self) -> HaltReport {
        let report = HaltReport {
            was_active: self.active,
            chats: self
                .chats
                .iter()
                .map(|(&chat, buf)| HaltedChat {
                    chat,
                    generated: buf.text.clone(),
                    emitted: buf.text[..buf.emitted].to_string(),
                })
                .collect(),
        };
        self.chats.clear();
        self.pending.clear();
        self.speaking = None;
        self.active = false;
        self.epoch += 1;
        report
    }

    fn queue(&mut self, chat: ChatKey, ranges: Vec<(usize, usize)>) {
        self.pending.extend(
            ranges
                .into_iter()
                .map(|(start, end)| Segment { chat, start, end }),
        );
    }

    fn finished(&mut self, segment: &Segment) -> EmitterSignal {
        let text = match self.chats.get_mut(&segment.chat) {
            Some(buf) => {
                buf.emitted = buf.emitted.max(segment.end);
                buf.text[segment.start..segment.end].to_string()
            }
            None => String::new(),
        };
        self.cleanup(segment.chat);
        EmitterSignal::SegmentFinished {
            chat: segment.chat,
            text,
        }
    }

    fn cleanup(&mut self, chat: ChatKey) {
        let busy = self.pending.iter().any(|s| s.chat == chat)
            || self.speaking.as_ref().is_some_and(|s| s.segment.chat == chat);
        if let Some(buf) = self.chats.get(&chat) {
            if buf.retired && !buf.open && !busy && buf.fully_emitted() {
                self.chats.remove(&chat);
            }
        }
    }

    fn pump(&mut self, now: Millis) -> Vec<EmitterSignal> {
        let mut out = Vec::new();
        while self.speaking.is_none() {
            let Some(segment) = self.pending.pop_front() else {
                if self.active && !self.chats.values().any(|c| c.open) {
                    self.active = false;
                    out.push(EmitterSignal::Drained);
                }
                break;
            };
            if !self.active {
                self.active = true;
                out.push(EmitterSignal::Activated);
            }
            let text = self.chats[&segment.chat].text[segment.start..segment.end].to_string();
            out.push(EmitterSignal::SegmentStarted {
                chat: segment.chat,
                text: text.clone(),
            });
            let word_ends = word_ends(&text, segment.start);
            if self.rate == EmissionRate::Instant || word_ends.is_empty() {
                out.push(self.finished(&segment));
                continue;
            }
            let first = self.rate.duration_ms(word_ends[0].1);
            self.speaking = Some(Speaking {
                segment,
                started_at: now,
                word_ends,
                next: 0,
            });
            out.push(EmitterSignal::WordDue {
                at: now + first,
                epoch: self.epoch,
            });
        }
        out
    }
}

/// Word ends of `text` as (absolute byte offset, chars from segment start).
fn word_ends(text: &str, base: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut chars = 0;
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        chars += 1;
        let at_end = match iter.peek() {
            Some((_, next)) => next.is_whitespace(),
            None => true,
        };
        if !c.is_whitespace() && at_end {
            out.push((base + i + c.len_utf8(), chars));
        }
    }
    out
}
