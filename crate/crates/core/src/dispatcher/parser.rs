//! Incremental parser for the marker-delimited assistant stream.
//!
//! ```text
//! <|chat|>Ok, one moment.<|function|>{"name":"search","query":"x"}<|thought|>wait
//! ```
//!
//! Chat and thought text is released as soon as it cannot be the start of a
//! marker. A function payload is released only once its JSON object closes.

use crate::ledger::{FunctionCall, SegmentKind};

#[derive(Debug, Clone, PartialEq)]
pub enum ParseEvent {
    Open(SegmentKind),
    Thought(String),
    Chat(String),
    Function(FunctionCall),
    Close(SegmentKind),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("malformed assistant stream: {0}")]
pub struct ParseError(pub String);

#[derive(Debug, Default)]
struct JsonScan {
    body: String,
    depth: usize,
    in_string: bool,
    escape: bool,
    complete: bool,
}

#[derive(Debug, Default)]
pub struct StreamParser {
    buf: String,
    current: Option<SegmentKind>,
    json: JsonScan,
    failed: bool,
}

fn find_marker(text: &str) -> Option<(usize, SegmentKind)> {
    SegmentKind::ALL
        .iter()
        .filter_map(|k| text.find(k.marker()).map(|pos| (pos, *k)))
        .min_by_key(|(pos, _)| *pos)
}

/// Length of the longest suffix of `text` that could begin a marker.
fn partial_marker_len(text: &str) -> usize {
    let mut best = 0;
    for kind in SegmentKind::ALL {
        let marker = kind.marker();
        for len in 1..marker.len() {
            if len > text.len() || len <= best {
                continue;
            }
            if text.is_char_boundary(text.len() - len) && text.ends_with(&marker[..len]) {
                best = len;
            }
        }
    }
    best
}

impl StreamParser {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn current(&self) -> Option<SegmentKind> {
        self.current
    }

    pub fn feed(&mut self, token: &str) -> Result<Vec<ParseEvent>, ParseError> {
        let mut out = Vec::new();
        self.guard()?;
        self.buf.push_str(token);
        self.drain(&mut out, false).map_err(|e| self.poison(e))?;
        Ok(out)
    }

    /// End of stream: flushes held-back text and closes the open segment. An
    /// unfinished function payload is an error.
    pub fn finish(&mut self) -> Result<Vec<ParseEvent>, ParseError> {
        let mut out = Vec::new();
        self.guard()?;
        self.drain(&mut out, true).map_err(|e| self.poison(e))?;
        if self.current == Some(SegmentKind::Function) && !self.json.complete {
            return Err(self.poison(ParseError("function payload truncated at end of stream".into())));
        }
        if let Some(kind) = self.current.take() {
            out.push(ParseEvent::Close(kind));
        }
        Ok(out)
    }

    /// Stops parsing. Held-back text and any partial function payload are
    /// dropped; the open segment is closed.
    pub fn cancel(&mut self) -> Vec<ParseEvent> {
        self.failed = true;
        self.buf.clear();
        self.json = JsonScan::default();
        self.current.take().map(ParseEvent::Close).into_iter().collect()
    }

    fn guard(&self) -> Result<(), ParseError> {
        if self.failed {
            Err(ParseError("parser already stopped".into()))
        } else {
            Ok(())
        }
    }

    fn poison(&mut self, e: ParseError) -> ParseError {
        self.failed = true;
        e
    }

    fn drain(&mut self, out: &mut Vec<ParseEvent>, at_end: bool) -> Result<(), ParseError> {
        loop {
            if self.current == Some(SegmentKind::Function) && !self.json.complete {
                if !self.scan_json()? {
                    return Ok(());
                }
                let value: serde_json::Value = serde_json::from_str(&self.json.body)
                    .map_err(|e| ParseError(format!("function payload is not valid JSON: {e}")))?;
                let call = FunctionCall::new(value).map_err(|e| ParseError(e.to_string()))?;
                out.push(ParseEvent::Function(call));
                continue;
            }
            match find_marker(&self.buf) {
                Some((pos, kind)) => {
                    let text: String = self.buf.drain(..pos).collect();
                    self.emit_text(&text, out)?;
                    self.buf.drain(..kind.marker().len());
                    if let Some(prev) = self.current.take() {
                        out.push(ParseEvent::Close(prev));
                    }
                    self.current = Some(kind);
                    self.json = JsonScan::default();
                    out.push(ParseEvent::Open(kind));
                }
                None => {
                    let keep = if at_end { 0 } else { partial_marker_len(&self.buf) };
                    let text: String = self.buf.drain(..self.buf.len() - keep).collect();
                    self.emit_text(&text, out)?;
                    return Ok(());
                }
            }
        }
    }

    /// Moves function-body characters from the buffer into the JSON scanner.
    /// Returns true once the object has closed.
    fn scan_json(&mut self) -> Result<bool, ParseError> {
        let mut consumed = 0;
        let scan = &mut self.json;
        for (i, c) in self.buf.char_indices() {
            let next = i + c.len_utf8();
            if scan.depth == 0 {
                if c.is_whitespace() {
                    consumed = next;
                    continue;
                }
                if c != '{' {
                    return Err(ParseError(
                        "function segment does not start with a JSON object".into(),
                    ));
                }
            }
            scan.body.push(c);
            consumed = next;
            if scan.in_string {
                if scan.escape {
                    scan.escape = false;
                } else if c == '\\' {
                    scan.escape = true;
                } else if c == '"' {
                    scan.in_string = false;
                }
                continue;
            }
            match c {
                '"' => scan.in_string = true,
                '{' | '[' => scan.depth += 1,
                '}' | ']' => {
                    scan.depth -= 1;
                    if scan.depth == 0 {
                        scan.complete = true;
                        break;
                    }
                }
                _ => {}
            }
        }
        self.buf.drain(..consumed);
        Ok(self.json.complete)
    }

    fn emit_text(&mut self, text: &str, out: &mut Vec<ParseEvent>) -> Result<(), ParseError> {
        if text.is_empty() {
            return Ok(());
        }
        match self.current {
            None if text.trim().is_empty() => Ok(()),
            None => Err(ParseError("text before the first segment marker".into())),
            Some(SegmentKind::Thought) => {
                out.push(ParseEvent::Thought(text.to_string()));
                Ok(())
            }
            Some(SegmentKind::Chat) => {
                out.push(ParseEvent::Chat(text.to_string()));
                Ok(())
            }
            Some(SegmentKind::Function) if text.trim().is_empty() => Ok(()),
            Some(SegmentKind::Function) => {
                Err(ParseError("unexpected text after function payload".into()))
            }
        }
    }
}

/// Parses a complete stream in one go.
pub fn parse_all(tokens: &[&str]) -> Result<Vec<ParseEvent>, ParseError> {
    let mut parser = StreamParser::new();
    let mut out = Vec::new();
    for token in tokens {
        out.extend(parser.feed(token)?);
    }
    out.extend(parser.finish()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn texts(events: &[ParseEvent]) -> Vec<String> {
        events
            .iter()
            .filter_map(|e| match e {
                ParseEvent::Chat(t) => Some(format!("chat:{t}")),
                ParseEvent::Thought(t) => Some(format!("thought:{t}")),
                ParseEvent::Function(f) => Some(format!("function:{}", f.tool_name())),
                _ => None,
            })
            .collect()
    }

    fn merged(events: &[ParseEvent]) -> Vec<String> {
        // Adjacent text pieces of the same kind joined for readability.
        let mut out: Vec<String> = Vec::new();
        for t in texts(events) {
            if let Some(last) = out.last_mut() {
                let (lk, _) = last.split_once(':').unwrap();
                let (k, v) = t.split_once(':').unwrap();
                if lk == k && k != "function" {
                    last.push_str(v);
                    continue;
                }
            }
            out.push(t);
        }
        out
    }

    #[test]
    fn single_chat_segment() {
        let events = parse_all(&["<|chat|>Hi there."]).unwrap();
        assert_eq!(
            events,
            vec![
                ParseEvent::Open(SegmentKind::Chat),
                ParseEvent::Chat("Hi there.".into()),
                ParseEvent::Close(SegmentKind::Chat),
            ]
        );
    }

    #[test]
    fn order_preserved_across_kinds() {
        let events =
            parse_all(&["<|chat|>Ok!", "<|thought|>plan...", "<|function|>{\"name\":\"search\"}"])
                .unwrap();
        assert_eq!(
            merged(&events),
            vec!["chat:Ok!", "thought:plan...", "function:search"]
        );
    }

    #[test]
    fn markers_split_across_tokens() {
        let tokens = ["<|ch", "at|>Hello", " world.<", "|thou", "ght|>hmm"];
        let events = parse_all(&tokens).unwrap();
        assert_eq!(merged(&events), vec!["chat:Hello world.", "thought:hmm"]);
    }

    #[test]
    fn chat_released_incrementally() {
        let mut p = StreamParser::new();
        let first = p.feed("<|chat|>Hello").unwrap();
        assert!(first.contains(&ParseEvent::Chat("Hello".into())));
        // A lone '<' is held back until it can be decided.
        let held = p.feed(" <").unwrap();
        assert_eq!(held, vec![ParseEvent::Chat(" ".into())]);
        let later = p.feed("3").unwrap();
        assert_eq!(later, vec![ParseEvent::Chat("<3".into())]);
    }

    #[test]
    fn function_emitted_when_object_closes() {
        let mut p = StreamParser::new();
        assert!(texts(&p.feed("<|function|>{\"name\":").unwrap()).is_empty());
        assert!(texts(&p.feed("\"search\",\"q\":\"a}b<|chat|>\"").unwrap()).is_empty());
        let events = p.feed("}").unwrap();
        match &events[..] {
            [ParseEvent::Function(call)] => {
                assert_eq!(call.payload()["q"], json!("a}b<|chat|>"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_function_dropped_on_cancel() {
        let mut p = StreamParser::new();
        p.feed("<|chat|>Sure.<|function|>{\"name\":\"sea").unwrap();
        let events = p.cancel();
        assert_eq!(events, vec![ParseEvent::Close(SegmentKind::Function)]);
    }

    #[test]
    fn truncated_function_at_end_is_error() {
        assert!(parse_all(&["<|function|>{\"name\":\"x\""]).is_err());
    }

    #[test]
    fn malformed_streams() {
        assert!(parse_all(&["hello <|chat|>x"]).is_err());
        assert!(parse_all(&["<|function|>not json"]).is_err());
        assert!(parse_all(&["<|function|>{\"name\":\"a\"} trailing"]).is_err());
        assert!(parse_all(&["<|function|>{\"q\":1}"]).is_err());
        assert!(parse_all(&["  \n<|chat|>fine"]).is_ok());
        assert!(parse_all(&[]).unwrap().is_empty());
    }

    #[test]
    fn two_functions() {
        let events = parse_all(&[
            "<|function|>{\"name\":\"a\"}",
            "<|function|> {\"name\":\"b\",\"x\":[1,{\"y\":2}]}",
        ])
        .unwrap();
        assert_eq!(merged(&events), vec!["function:a", "function:b"]);
    }
}
