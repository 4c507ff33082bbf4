use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::{KbError, KbFilter, PrefDelta, PreferenceRecord, UserKb};

#[derive(Debug, Clone)]
pub struct KbOptions {
    /// fsync the log after every update.
    pub fsync: bool,
    /// Fold the log into a snapshot after this many entries.
    pub compact_every: usize,
    /// Accepted entity types; `None` accepts any.
    pub entity_types: Option<BTreeSet<String>>,
}

impl Default for KbOptions {
    fn default() -> Self {
        KbOptions { fsync: true, compact_every: 64, entity_types: None }
    }
}

#[derive(Serialize, Deserialize)]
struct LogEntry {
    seq: u64,
    ts: u64,
    deltas: Vec<PrefDelta>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    seq: u64,
    clock: u64,
    records: Vec<PreferenceRecord>,
}

struct UserSlot {
    kb: UserKb,
    seq: u64,
    log_entries: usize,
}

/// Thread-safe store. Different users never contend; updates for one user
/// are serialized by that user's lock.
pub struct PreferenceStore {
    dir: Option<PathBuf>,
    options: KbOptions,
    users: RwLock<HashMap<String, Arc<Mutex<UserSlot>>>>,
}

impl PreferenceStore {
    pub fn in_memory() -> Self {
        Self::in_memory_with(KbOptions::default())
    }

    pub fn in_memory_with(options: KbOptions) -> Self {
        PreferenceStore { dir: None, options, users: RwLock::new(HashMap::new()) }
    }

    /// Opens (creating if needed) a store rooted at `dir`.
    pub fn open(dir: impl AsRef<Path>, options: KbOptions) -> Result<Self, KbError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        Ok(PreferenceStore { dir: Some(dir), options, users: RwLock::new(HashMap::new()) })
    }

    pub fn is_persistent(&self) -> bool {
        self.dir.is_some()
    }

    fn paths(&self, user_id: &str) -> Option<(PathBuf, PathBuf)> {
        let dir = self.dir.as_ref()?;
        let stem = hex::encode(user_id.as_bytes());
        Some((dir.join(format!("{stem}.log")), dir.join(format!("{stem}.snapshot.json"))))
    }

    fn slot(&self, user_id: &str) -> Result<Arc<Mutex<UserSlot>>, KbError> {
        if let Some(slot) = self.users.read().get(user_id) {
            return Ok(slot.clone());
        }
        let mut users = self.users.write();
        if let Some(slot) = users.get(user_id) {
            return Ok(slot.clone());
        }
        let slot = Arc::new(Mutex::new(self.recover(user_id)?));
        users.insert(user_id.to_string(), slot.clone());
        Ok(slot)
    }

    fn recover(&self, user_id: &str) -> Result<UserSlot, KbError> {
        let Some((log_path, snap_path)) = self.paths(user_id) else {
            return Ok(UserSlot { kb: UserKb::default(), seq: 0, log_entries: 0 });
        };
        let (mut kb, mut seq) = match fs::read_to_string(&snap_path) {
            Ok(text) => {
                let snap: Snapshot = serde_json::from_str(&text).map_err(|e| KbError::Corrupt {
                    path: snap_path.display().to_string(),
                    line: e.line(),
                    message: e.to_string(),
                })?;
                (UserKb::from_records(snap.records, snap.clock), snap.seq)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => (UserKb::default(), 0),
            Err(e) => return Err(e.into()),
        };
        let mut log_entries = 0;
        if log_path.exists() {
            let reader = BufReader::new(File::open(&log_path)?);
            let mut good_bytes = 0u64;
            let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
            let n = lines.len();
            for (i, line) in lines.iter().enumerate() {
                match serde_json::from_str::<LogEntry>(line) {
                    Ok(entry) => {
                        if entry.seq > seq {
                            kb.apply(user_id, &entry.deltas, entry.ts);
                            seq = entry.seq;
                        }
                        log_entries += 1;
                        good_bytes += line.len() as u64 + 1;
                    }
                    // A torn final write: drop it.
                    Err(_) if i + 1 == n => {
                        OpenOptions::new().write(true).open(&log_path)?.set_len(good_bytes)?;
                    }
                    Err(e) => {
                        return Err(KbError::Corrupt {
                            path: log_path.display().to_string(),
                            line: i + 1,
                            message: e.to_string(),
                        })
                    }
                }
            }
        }
        Ok(UserSlot { kb, seq, log_entries })
    }

    /// Applies `deltas` atomically and durably; returns the applied count.
    pub fn update_kb(&self, user_id: &str, deltas: &[PrefDelta]) -> Result<usize, KbError> {
        if let Some(types) = &self.options.entity_types {
            for t in deltas.iter().filter_map(PrefDelta::entity_type) {
                if !types.contains(t) {
                    return Err(KbError::UnknownEntityType(t.to_string()));
                }
            }
        }
        let slot = self.slot(user_id)?;
        let mut slot = slot.lock();
        let ts = slot.kb.clock() + 1;
        let seq = slot.seq + 1;
        let mut next = slot.kb.clone();
        let applied = next.apply(user_id, deltas, ts);
        if let Some((log_path, snap_path)) = self.paths(user_id) {
            let mut line = serde_json::to_vec(&LogEntry { seq, ts, deltas: deltas.to_vec() }).expect("serializable");
            line.push(b'\n');
            let mut file = OpenOptions::new().create(true).append(true).open(&log_path)?;
            file.write_all(&line)?;
            if self.options.fsync {
                file.sync_data()?;
            }
            slot.log_entries += 1;
            if slot.log_entries >= self.options.compact_every {
                write_snapshot(&snap_path, seq, &next, self.options.fsync)?;
                File::create(&log_path)?;
                slot.log_entries = 0;
            }
        }
        slot.kb = next;
        slot.seq = seq;
        Ok(applied)
    }

    /// Records sorted by (domain, entity_type, updated_at); empty for
    /// unknown users.
    pub fn retrieve_kb(&self, user_id: &str, filter: &KbFilter) -> Result<Vec<PreferenceRecord>, KbError> {
        Ok(self.slot(user_id)?.lock().kb.retrieve(filter))
    }

    /// Forces a snapshot of `user_id` and truncates its log.
    pub fn compact(&self, user_id: &str) -> Result<(), KbError> {
        let slot = self.slot(user_id)?;
        let mut slot = slot.lock();
        if let Some((log_path, snap_path)) = self.paths(user_id) {
            write_snapshot(&snap_path, slot.seq, &slot.kb, self.options.fsync)?;
            File::create(&log_path)?;
            slot.log_entries = 0;
        }
        Ok(())
    }

    /// User ids with data on disk or in memory.
    pub fn users(&self) -> Result<Vec<String>, KbError> {
        let mut out: BTreeSet<String> = self.users.read().keys().cloned().collect();
        if let Some(dir) = &self.dir {
            for entry in fs::read_dir(dir)? {
                let name = entry?.file_name().to_string_lossy().to_string();
                let stem = name.split('.').next().unwrap_or_default();
                if let Some(user) = hex::decode(stem).ok().and_then(|b| String::from_utf8(b).ok()) {
                    out.insert(user);
                }
            }
        }
        Ok(out.into_iter().collect())
    }
}

fn write_snapshot(path: &Path, seq: u64, kb: &UserKb, fsync: bool) -> Result<(), KbError> {
    let snap = Snapshot { seq, clock: kb.clock(), records: kb.retrieve(&KbFilter::default()) };
    let tmp = path.with_extension("json.tmp");
    let mut file = File::create(&tmp)?;
    file.write_all(&serde_json::to_vec_pretty(&snap).expect("serializable"))?;
    if fsync {
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
