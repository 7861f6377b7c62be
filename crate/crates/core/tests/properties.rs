mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use serde_json::{json, Value};

use asyncagent_core::events::{Event, EventKind, Priority, SchedulingQueue};
use asyncagent_core::fsm::{gate_allows, DialogSystem, FsmState};
use asyncagent_core::harness::RunResult;
use asyncagent_core::ledger::{Content, Ledger, NotificationContent, INTERRUPT_TOKEN};
use asyncagent_core::processes::{Pid, ROOT_PID};
use asyncagent_core::trace::{diff_traces, EmissionPhase, RecordBody, Trace};

use common::*;

fn note() -> Content {
    Content::Notification(NotificationContent::system(0, "n"))
}

fn rank(p: Priority) -> i128 {
    match p {
        Priority::Min => i128::MIN,
        Priority::Level(v) => v as i128,
    }
}

fn priority() -> impl Strategy<Value = Priority> {
    prop_oneof![Just(Priority::Min), (-3i64..4).prop_map(Priority::Level)]
}

/// Rebuilds every process ledger from its append and rewrite records.
fn replay(r: &RunResult) -> BTreeMap<Pid, Vec<Value>> {
    let mut out: BTreeMap<Pid, Vec<Value>> = BTreeMap::new();
    for rec in &r.trace.records {
        match &rec.body {
            RecordBody::LedgerAppend { message } => {
                let msgs = out.entry(rec.pid).or_default();
                assert_eq!(message["seq"], json!(msgs.len()), "append out of sequence");
                msgs.push(message.clone());
            }
            RecordBody::LedgerRewrite { seq, message, .. } => {
                out.get_mut(&rec.pid).expect("rewrite of unknown ledger")[*seq as usize] =
                    message.clone();
            }
            _ => {}
        }
    }
    out
}

fn check_run(r: &RunResult) -> Result<(), TestCaseError> {
    prop_assert!(r.runtime.faults().is_empty(), "{:?}", r.runtime.faults());
    for pair in r.trace.records.windows(2) {
        prop_assert!(pair[0].time <= pair[1].time, "trace time went backwards");
    }
    for (pid, msgs) in replay(r) {
        let ledger = r.ledger_of(pid).expect("ledger for recorded pid");
        let want: Vec<Value> = ledger.messages().iter().map(|m| m.to_json()).collect();
        prop_assert_eq!(msgs, want, "pid {}", pid);
    }
    let round = Trace::from_jsonl(&r.trace.to_jsonl()).expect("trace parses");
    prop_assert!(diff_traces(&round, &r.trace).is_empty());
    Ok(())
}

fn interruption_doc(words: usize, delay: u64, cps: u32, gap: u64, len: u64) -> Value {
    let mut tokens = vec!["<|chat|>".to_string()];
    for i in 0..words {
        tokens.push(if i == 0 { "Word".into() } else { " word".into() });
    }
    let mut d = doc(
        json!([
            {"trigger": "Talk.", "tokens": tokens, "token_delay_ms": delay},
            {"trigger": "Stop.", "reply": "<|chat|>Stopped."}
        ]),
        json!([
            {"start_ms": 0, "end_ms": 200, "text": "Talk."},
            {"start_ms": 200 + gap, "end_ms": 200 + gap + len, "text": "Stop."}
        ]),
    );
    d["config"] = json!({"chars_per_second": cps});
    d
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ledger_round_trips(l in ledger_strategy()) {
        let text = l.serialize();
        let back = Ledger::deserialize(&text).unwrap();
        prop_assert_eq!(&back, &l);
        prop_assert_eq!(back.serialize(), text);
    }

    #[test]
    fn queue_pops_in_priority_then_arrival_order(ps in proptest::collection::vec(priority(), 0..1000)) {
        let mut q = SchedulingQueue::new();
        for (t, p) in ps.iter().enumerate() {
            q.push(Event::tool_response(*p, note()), t as u64);
        }
        let mut want: Vec<(usize, Priority)> = ps.iter().copied().enumerate().collect();
        want.sort_by_key(|(_, p)| rank(*p));
        let got: Vec<u64> = std::iter::from_fn(|| q.pop().ok()).map(|e| e.enqueue_seq).collect();
        prop_assert_eq!(got, want.into_iter().map(|(i, _)| i as u64).collect::<Vec<_>>());
    }

    #[test]
    fn step_runs_exactly_when_the_gate_allows(
        state in proptest::sample::select(FsmState::ALL.to_vec()),
        ps in proptest::collection::vec(priority(), 1..20),
    ) {
        let mut ds = DialogSystem::new(Ledger::new());
        ds.state = state;
        for p in &ps {
            ds.push(Event::tool_response(*p, note()), 0);
        }
        let top = ds.queue.top().unwrap().priority;
        let before = ds.queue.len();
        let out = ds.step();
        prop_assert_eq!(out.ran, gate_allows(state, top));
        prop_assert_eq!(ds.queue.len(), before - out.ran as usize);
        prop_assert_eq!(ds.ledger.len(), out.ran as usize);
    }

    #[test]
    fn coalescing_keeps_only_the_newest_tick(kinds in proptest::collection::vec(any::<bool>(), 0..50)) {
        let mut q = SchedulingQueue::new();
        let mut newest = None;
        for (t, tick) in kinds.iter().enumerate() {
            let seq = if *tick {
                q.push(Event::with_message(EventKind::TimePassage, note()).unwrap(), t as u64)
            } else {
                q.push(Event::tool_response(Priority::Level(1), note()), t as u64)
            };
            if *tick {
                newest = Some(seq);
            }
        }
        let others = kinds.iter().filter(|t| !**t).count();
        q.coalesce_time_passage();
        prop_assert_eq!(q.count(EventKind::TimePassage), newest.is_some() as usize);
        prop_assert_eq!(q.len(), others + newest.is_some() as usize);
        if let Some(seq) = newest {
            prop_assert!(q.iter().any(|e| e.enqueue_seq == seq));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interrupted_chat_matches_what_was_heard(
        words in 1usize..8,
        delay in 5u64..60,
        cps in 10u32..120,
        gap in 0u64..1500,
        len in 50u64..800,
    ) {
        let r = run(&from_value(interruption_doc(words, delay, cps, gap, len)));
        check_run(&r)?;
        let full: String = (0..words).map(|i| if i == 0 { "Word" } else { " word" }).collect();
        let halted: Vec<&str> = r.trace.records.iter().filter_map(|rec| match &rec.body {
            RecordBody::Emission { phase: EmissionPhase::Halted, text } => Some(text.as_str()),
            _ => None,
        }).collect();
        for m in r.ledger().messages() {
            let Some(a) = m.assistant() else { continue };
            if a.interrupted {
                let heard = a.chat.strip_suffix(INTERRUPT_TOKEN).expect("interrupt token at the end");
                prop_assert!(full.starts_with(heard.trim_end()), "{:?} not a prefix of {:?}", heard, full);
                // Nothing is halted when speech starts before the first word.
                prop_assert!(halted.len() <= 1);
                prop_assert_eq!(heard.trim_end(), halted.first().map_or("", |h| h.trim_end()));
                let next = r.ledger().get(m.seq + 1).and_then(|n| n.notification());
                prop_assert!(next.is_some_and(|n| n.data == "Assistant interrupted due to user speaking"));
            } else {
                prop_assert!(!a.chat.contains(INTERRUPT_TOKEN));
            }
        }
        prop_assert_eq!(r.runtime.state(ROOT_PID), Some(FsmState::Idle));
    }
}

#[test]
fn scenario_runs_replay_to_their_ledgers() {
    for name in ["concierge.json", "interruption.json", "tool_lifecycle.json", "fork_and_kill.json", "idle_clock.json"] {
        let r = run(&load(name));
        check_run(&r).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn diff_reports_the_first_divergent_field() {
    let r = run(&load("tool_lifecycle.json"));
    let mut other = r.trace.clone();
    other.records[3].time += 1;
    let d = diff_traces(&r.trace, &other);
    assert_eq!(d.len(), 1);
    assert_eq!(d[0].line, 4);
    assert_eq!(d[0].field, "time");
}
