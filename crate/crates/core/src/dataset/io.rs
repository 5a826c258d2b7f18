use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::split::{DataSplit, SplitMember};
use super::{kl_divergence_uniform, Dataset, IdMap, Interaction};
use crate::error::{Error, Result};

/// Field separator for interaction files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Delimiter {
    Char(char),
    /// Any run of ASCII whitespace.
    Whitespace,
}

impl Default for Delimiter {
    fn default() -> Self {
        Delimiter::Char('\t')
    }
}

impl Delimiter {
    /// `"tab"`, `"space"`, `"whitespace"`, `"comma"`, or a single character.
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "tab" | "\\t" => Delimiter::Char('\t'),
            "space" => Delimiter::Char(' '),
            "comma" => Delimiter::Char(','),
            "whitespace" | "ws" => Delimiter::Whitespace,
            _ => {
                let mut chars = s.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) => Delimiter::Char(c),
                    _ => return Err(Error::Config(format!("unrecognized delimiter {s:?}"))),
                }
            }
        })
    }

    fn split<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self {
            Delimiter::Char(c) => line.split(*c).map(str::trim).collect(),
            Delimiter::Whitespace => line.split_ascii_whitespace().collect(),
        }
    }

    fn as_char(&self) -> char {
        match self {
            Delimiter::Char(c) => *c,
            Delimiter::Whitespace => '\t',
        }
    }
}

struct Record<'a> {
    line: usize,
    user: &'a str,
    item: &'a str,
    timestamp: Option<i64>,
}

fn parse_line(line_no: usize, line: &str, delim: Delimiter) -> Result<Option<Record<'_>>> {
    let trimmed = line.trim_end_matches(['\r', '\n']);
    if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
        return Ok(None);
    }
    let fields = delim.split(trimmed);
    if fields.len() < 2 || fields.len() > 3 || fields[0].is_empty() || fields[1].is_empty() {
        return Err(Error::Parse {
            line: line_no,
            message: format!("expected `user item [timestamp]`, got {trimmed:?}"),
        });
    }
    let timestamp = match fields.get(2) {
        Some(t) => Some(t.parse::<i64>().map_err(|e| Error::Parse {
            line: line_no,
            message: format!("bad timestamp {t:?}: {e}"),
        })?),
        None => None,
    };
    Ok(Some(Record {
        line: line_no,
        user: fields[0],
        item: fields[1],
        timestamp,
    }))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}

/// Merges a new record into `out`, deduplicating `(user, item)` pairs while
/// keeping the earliest timestamp.
fn push_dedup(
    out: &mut Vec<Interaction>,
    seen: &mut HashMap<(usize, usize), usize>,
    it: Interaction,
) {
    match seen.get(&(it.user, it.item)) {
        Some(&pos) => {
            let prev = &mut out[pos];
            prev.timestamp = match (prev.timestamp, it.timestamp) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            };
        }
        None => {
            seen.insert((it.user, it.item), out.len());
            out.push(it);
        }
    }
}

/// Reads an interaction log, assigning dense ids in first-seen order.
pub fn load_interactions(path: impl AsRef<Path>, delim: Delimiter) -> Result<Dataset> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    let mut users = IdMap::new();
    let mut items = IdMap::new();
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for (k, line) in lines.iter().enumerate() {
        if let Some(rec) = parse_line(k + 1, line, delim)? {
            let it = Interaction {
                user: users.intern(rec.user),
                item: items.intern(rec.item),
                timestamp: rec.timestamp,
            };
            push_dedup(&mut out, &mut seen, it);
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Dataset::new(out, Arc::new(users), Arc::new(items))
}

/// Reads an interaction log against fixed id maps; unknown ids are errors.
/// An empty file yields an empty dataset.
pub fn load_interactions_with_ids(
    path: impl AsRef<Path>,
    delim: Delimiter,
    users: Arc<IdMap>,
    items: Arc<IdMap>,
) -> Result<Dataset> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for (k, line) in lines.iter().enumerate() {
        if let Some(rec) = parse_line(k + 1, line, delim)? {
            let lookup = |map: &IdMap, name: &str, what: &str| {
                map.get(name).ok_or_else(|| Error::Parse {
                    line: rec.line,
                    message: format!("unknown {what} id {name:?}"),
                })
            };
            let it = Interaction {
                user: lookup(&users, rec.user, "user")?,
                item: lookup(&items, rec.item, "item")?,
                timestamp: rec.timestamp,
            };
            push_dedup(&mut out, &mut seen, it);
        }
    }
    Dataset::new(out, users, items)
}

/// Writes interactions with their raw ids, one per line.
pub fn write_interactions(ds: &Dataset, path: impl AsRef<Path>, delim: Delimiter) -> Result<()> {
    let path = path.as_ref();
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let sep = delim.as_char();
    for it in ds.interactions() {
        let res = match it.timestamp {
            Some(ts) => writeln!(
                w,
                "{}{sep}{}{sep}{ts}",
                ds.user_ids().name(it.user),
                ds.item_ids().name(it.item)
            ),
            None => writeln!(
                w,
                "{}{sep}{}",
                ds.user_ids().name(it.user),
                ds.item_ids().name(it.item)
            ),
        };
        res.map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_names(path: &Path, names: &[String]) -> Result<()> {
    let mut body = names.join("\n");
    body.push('\n');
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn read_names(path: &Path) -> Result<IdMap> {
    let names = read_lines(path)?
        .into_iter()
        .filter(|l| !l.is_empty())
        .collect();
    IdMap::from_names(names)
}

/// Per-member entry in a split manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberEntry {
    pub member: SplitMember,
    pub file: String,
    pub interactions: usize,
    pub active_users: usize,
    pub active_items: usize,
    /// KL divergence of the member's item distribution to uniform, in nats.
    pub item_kl_to_uniform: Option<f64>,
}

/// JSON manifest written next to the split files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub schema_version: u32,
    pub strategy: String,
    pub seed: Option<u64>,
    pub parameters: serde_json::Value,
    pub num_users: usize,
    pub num_items: usize,
    pub kl_unit: String,
    pub members: Vec<MemberEntry>,
    pub files: Vec<String>,
}

pub const USERS_FILE: &str = "users.txt";
pub const ITEMS_FILE: &str = "items.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes every split member as `<member>.tsv`, the shared id maps, and a
/// `manifest.json`.
pub fn write_split(
    split: &DataSplit,
    dir: impl AsRef<Path>,
    strategy: &str,
    seed: Option<u64>,
    parameters: serde_json::Value,
) -> Result<SplitManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_names(&dir.join(USERS_FILE), split.train.user_ids().names())?;
    write_names(&dir.join(ITEMS_FILE), split.train.item_ids().names())?;
    let mut members = Vec::new();
    let mut files = vec![USERS_FILE.to_string(), ITEMS_FILE.to_string()];
    for (m, ds) in split.members() {
        let file = format!("{}.tsv", m.as_str());
        write_interactions(ds, dir.join(&file), Delimiter::default())?;
        members.push(MemberEntry {
            member: m,
            file: file.clone(),
            interactions: ds.len(),
            active_users: ds.user_pop().iter().filter(|&&c| c > 0).count(),
            active_items: ds.item_pop().iter().filter(|&&c| c > 0).count(),
            item_kl_to_uniform: kl_divergence_uniform(ds.item_pop()).ok(),
        });
        files.push(file);
    }
    files.push(MANIFEST_FILE.to_string());
    let manifest = SplitManifest {
        schema_version: 1,
        strategy: strategy.to_string(),
        seed,
        parameters,
        num_users: split.train.num_users(),
        num_items: split.train.num_items(),
        kl_unit: "nats".into(),
        members,
        files,
    };
    let path = dir.join(MANIFEST_FILE);
    let body = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, body + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a directory produced by [`write_split`].
pub fn read_split(dir: impl AsRef<Path>) -> Result<(DataSplit, SplitManifest)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: SplitManifest = serde_json::from_str(&body)?;
    let users = Arc::new(read_names(&dir.join(USERS_FILE))?);
    let items = Arc::new(read_names(&dir.join(ITEMS_FILE))?);
    let mut loaded: HashMap<SplitMember, Dataset> = HashMap::new();
    for entry in &manifest.members {
        let ds = load_interactions_with_ids(
            dir.join(&entry.file),
            Delimiter::default(),
            users.clone(),
            items.clone(),
        )?;
        loaded.insert(entry.member, ds);
    }
    let empty = || Dataset::new(Vec::new(), users.clone(), items.clone());
    let split = DataSplit {
        train: match loaded.remove(&SplitMember::Train) {
            Some(d) => d,
            None => return Err(Error::Config(format!("{} lists no train member", path.display()))),
        },
        validation: match loaded.remove(&SplitMember::Validation) {
            Some(d) => d,
            None => empty()?,
        },
        test_imbalanced: loaded.remove(&SplitMember::TestImbalanced),
        test_balanced: loaded.remove(&SplitMember::TestBalanced),
        test_temporal: loaded.remove(&SplitMember::TestTemporal),
    };
    Ok((split, manifest))
}
