//! Append-only JSONL stage logs keyed by clip identity.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Deserialize)]
struct Line<T> {
    key: String,
    value: T,
}

#[derive(Serialize)]
struct LineRef<'a, T> {
    key: &'a str,
    value: &'a T,
}

pub(crate) struct StageLog<T> {
    path: Option<PathBuf>,
    done: BTreeMap<String, T>,
}

impl<T: Serialize + DeserializeOwned> StageLog<T> {
    /// Opens (and replays) `<dir>/<name>.jsonl`; purely in-memory without a
    /// directory. A torn final line from an interrupted write is ignored.
    pub fn open(dir: Option<&Path>, name: &str) -> io::Result<Self> {
        let mut done = BTreeMap::new();
        let path = dir.map(|d| d.join(format!("{name}.jsonl")));
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            let text = fs::read_to_string(p)?;
            let mut good_len = 0;
            let mut offset = 0;
            let lines: Vec<&str> = text.split_inclusive('\n').collect();
            for (i, line) in lines.iter().enumerate() {
                offset += line.len();
                if line.trim().is_empty() {
                    good_len = offset;
                    continue;
                }
                match serde_json::from_str::<Line<T>>(line) {
                    Ok(l) if line.ends_with('\n') => {
                        done.insert(l.key, l.value);
                        good_len = offset;
                    }
                    _ if i + 1 == lines.len() => {
                        log::warn!("{}: dropping torn last line", p.display());
                    }
                    Ok(_) => unreachable!("only the last piece can lack a newline"),
                    Err(e) => {
                        return Err(io::Error::new(
                            io::ErrorKind::InvalidData,
                            format!("{} line {}: {e}", p.display(), i + 1),
                        ))
                    }
                }
            }
            if good_len < text.len() {
                OpenOptions::new().write(true).open(p)?.set_len(good_len as u64)?;
            }
        }
        Ok(Self { path, done })
    }

    pub fn get(&self, key: &str) -> Option<&T> {
        self.done.get(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.done.contains_key(key)
    }

    pub fn append(&mut self, entries: Vec<(String, T)>) -> io::Result<()> {
        if entries.is_empty() {
            return Ok(());
        }
        if let Some(p) = &self.path {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            let mut buf = Vec::new();
            for (key, value) in &entries {
                serde_json::to_writer(&mut buf, &LineRef { key, value })?;
                buf.push(b'\n');
            }
            let mut f = OpenOptions::new().create(true).append(true).open(p)?;
            f.write_all(&buf)?;
            f.sync_data()?;
        }
        self.done.extend(entries);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replays_appended_entries() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = StageLog::<u32>::open(Some(dir.path()), "s").unwrap();
        log.append(vec![("a".into(), 1), ("b".into(), 2)]).unwrap();
        log.append(vec![("c".into(), 3)]).unwrap();
        let again = StageLog::<u32>::open(Some(dir.path()), "s").unwrap();
        assert_eq!(again.get("b"), Some(&2));
        assert!(again.contains("c"));
    }

    #[test]
    fn torn_tail_is_tolerated_but_corruption_is_not() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        fs::write(&p, "{\"key\":\"a\",\"value\":1}\n{\"key\":\"b\",\"val").unwrap();
        let log = StageLog::<u32>::open(Some(dir.path()), "s").unwrap();
        assert!(log.contains("a") && !log.contains("b"));
        let mut log = log;
        log.append(vec![("b".into(), 2)]).unwrap();
        assert_eq!(StageLog::<u32>::open(Some(dir.path()), "s").unwrap().get("b"), Some(&2));
        fs::write(&p, "garbage\n{\"key\":\"a\",\"value\":1}\n").unwrap();
        assert!(StageLog::<u32>::open(Some(dir.path()), "s").is_err());
    }
}
