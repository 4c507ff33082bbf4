//! Terminal chat against a loaded engine.

use std::fs::OpenOptions;
use std::io::{self, BufRead, Write};
use std::path::PathBuf;

use pref_teach::domain::{write_corpus, ActionKind, Dialogue};
use pref_teach::kb::{KbFilter, PreferenceRecord};
use pref_teach::manager::{AgentStep, Phase, SessionState};

use crate::config::Engine;

#[derive(Debug, Clone, Default)]
pub struct ChatOptions {
    /// Print every step with its probability, not only agent text.
    pub trace: bool,
    /// Corpus file that finished sessions are appended to.
    pub transcript: Option<PathBuf>,
    /// Session id; random when absent.
    pub session_id: Option<String>,
}

const HELP: &str = "commands: /prefs shows stored preferences, /new starts a new session, /save FILE writes the transcript, /quit exits";

/// One line per record, as `/prefs` prints it.
pub fn format_preference(r: &PreferenceRecord) -> String {
    format!("{} / {}: {}", r.domain, r.entity_type, r.describe())
}

pub fn format_step(s: &AgentStep) -> String {
    let p = s.n_best.first().filter(|(n, _)| n == &s.name).map(|(_, p)| format!(" p={p:.2}")).unwrap_or_default();
    let kind = match s.kind {
        ActionKind::Api => "api",
        ActionKind::Nlg => "nlg",
        ActionKind::Sys => "sys",
    };
    let refs = s.result_ref.as_deref().map(|r| format!(" -> {r}")).unwrap_or_default();
    format!("  [{kind}] {}{p}{refs}", s.name)
}

fn open(user_id: &str, options: &ChatOptions) -> SessionState {
    match &options.session_id {
        Some(id) => SessionState::open(id.clone(), user_id),
        None => SessionState::new(user_id),
    }
}

fn append_transcript(options: &ChatOptions, d: &Dialogue) -> io::Result<()> {
    if let Some(path) = &options.transcript {
        if !d.turns.is_empty() {
            let file = OpenOptions::new().create(true).append(true).open(path)?;
            write_corpus(file, std::slice::from_ref(d))?;
        }
    }
    Ok(())
}

/// Reads seeker lines from `input` until `/quit` or end of input. Returns
/// every session's transcript in order.
pub fn run_chat(engine: &Engine, user_id: &str, input: impl BufRead, mut out: impl Write, options: &ChatOptions) -> io::Result<Vec<Dialogue>> {
    let mut state = open(user_id, options);
    let mut done = Vec::new();
    writeln!(out, "chatting as {user_id}; {HELP}")?;
    for line in input.lines() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        match text.split_once(' ').map_or((text, ""), |(a, b)| (a, b.trim())) {
            ("/quit", _) => break,
            ("/help", _) => writeln!(out, "{HELP}")?,
            ("/prefs", _) => match engine.store.retrieve_kb(user_id, &KbFilter::default()) {
                Ok(recs) if recs.is_empty() => writeln!(out, "no stored preferences")?,
                Ok(recs) => {
                    for r in &recs {
                        writeln!(out, "{}", format_preference(r))?;
                    }
                }
                Err(e) => writeln!(out, "error: {e}")?,
            },
            ("/save", path) if !path.is_empty() => {
                let file = std::fs::File::create(path)?;
                write_corpus(file, &[state.transcript()])?;
                writeln!(out, "saved transcript to {path}")?;
            }
            ("/new", _) => {
                let d = state.transcript();
                append_transcript(options, &d)?;
                done.push(d);
                state = SessionState::new(user_id);
                writeln!(out, "new session")?;
            }
            _ if text.starts_with('/') => writeln!(out, "unknown command; {HELP}")?,
            _ if state.phase == Phase::Ended => writeln!(out, "session ended; /new starts another")?,
            _ => match engine.turn(&mut state, text) {
                Ok(steps) => {
                    for s in &steps {
                        if options.trace {
                            writeln!(out, "{}", format_step(s))?;
                        }
                        if let Some(t) = &s.text {
                            writeln!(out, "agent: {t}")?;
                        }
                    }
                    if state.phase == Phase::Ended {
                        writeln!(out, "(session ended)")?;
                    }
                }
                Err(e) => writeln!(out, "error: {e}")?,
            },
        }
    }
    let d = state.transcript();
    append_transcript(options, &d)?;
    done.push(d);
    Ok(done)
}
