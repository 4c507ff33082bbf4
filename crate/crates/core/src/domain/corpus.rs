use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dialogue::{ActionKind, Dialogue};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("corpus I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Dataset statistics in the `#API | #dialogues | #actions | #turns` layout.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_api: usize,
    pub n_dialogues: usize,
    pub n_actions: usize,
    pub n_turns: usize,
}

impl CorpusStats {
    pub fn of(dialogues: &[Dialogue]) -> Self {
        let apis: BTreeSet<&str> = dialogues
            .iter()
            .flat_map(|d| d.turns.iter().flat_map(|t| t.actions.iter()))
            .filter(|a| a.kind == ActionKind::Api)
            .map(|a| a.name.as_str())
            .collect();
        CorpusStats {
            n_api: apis.len(),
            n_dialogues: dialogues.len(),
            n_actions: dialogues.iter().map(Dialogue::n_actions).sum(),
            n_turns: dialogues.iter().map(|d| d.turns.len()).sum(),
        }
    }

    pub fn mean_turns(&self) -> f64 {
        if self.n_dialogues == 0 {
            0.0
        } else {
            self.n_turns as f64 / self.n_dialogues as f64
        }
    }

    pub fn table(rows: &[(&str, CorpusStats)]) -> String {
        let mut out = format!("{:<16} {:>6} {:>11} {:>10} {:>9}\n", "dataset", "#API", "#dialogues", "#actions", "#turns");
        for (name, s) in rows {
            out.push_str(&format!(
                "{:<16} {:>6} {:>11} {:>10} {:>9}\n",
                name, s.n_api, s.n_dialogues, s.n_actions, s.n_turns
            ));
        }
        out
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&Self::table(&[("corpus", *self)]))
    }
}

/// One JSON record per line.
pub fn write_corpus<W: Write>(mut out: W, dialogues: &[Dialogue]) -> std::io::Result<()> {
    for d in dialogues {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_corpus(path: impl AsRef<Path>, dialogues: &[Dialogue]) -> std::io::Result<()> {
    let file = std::fs::File::create(path)?;
    write_corpus(std::io::BufWriter::new(file), dialogues)
}

pub fn read_corpus<R: BufRead>(input: R) -> Result<Vec<Dialogue>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Dialogue =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse { line: i + 1, message: e.to_string() })?;
        out.push(d);
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Dialogue>, CorpusError> {
    read_corpus(BufReader::new(std::fs::File::open(path)?))
}
