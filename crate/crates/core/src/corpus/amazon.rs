//! Ingestion of Amazon-style interaction logs.
//!
//! Input: one event per line, tab-separated
//! `user  item  timestamp  title  feature`, where `feature` is a
//! comma-separated list of floats (empty when the image is missing).
//! Blank lines and lines starting with `#` are skipped.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::catalog::{Catalog, Item};
use super::sequences::{Example, InteractionSequence};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub min_item_inter: usize,
    /// Minimum session length, counting the held-out last item.
    pub min_seq_len: usize,
    /// Events further apart than this (seconds) start a new session.
    pub session_gap: i64,
    /// Keep only the most recent `max_history` items of longer histories.
    pub max_history: Option<usize>,
    pub title_len: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            min_item_inter: 8,
            min_seq_len: 9,
            session_gap: 86_400,
            max_history: None,
            title_len: 20,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub catalog: Catalog,
    pub examples: Vec<Example>,
    /// Title words in id order.
    pub words: Vec<String>,
    /// Original item keys in id order.
    pub item_keys: Vec<String>,
}

struct Event {
    user: String,
    item: String,
    ts: i64,
}

struct RawItem {
    title: Vec<String>,
    feature: Vec<f64>,
}

pub fn ingest_amazon(path: impl AsRef<Path>, cfg: &IngestConfig) -> Result<Ingested> {
    let f = std::fs::File::open(path)?;
    ingest_reader(std::io::BufReader::new(f), cfg)
}

pub fn ingest_reader<R: BufRead>(reader: R, cfg: &IngestConfig) -> Result<Ingested> {
    let mut events = Vec::new();
    let mut items: HashMap<String, Option<RawItem>> = HashMap::new();
    let mut dim: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 5 tab-separated columns, found {}", cols.len()),
            });
        }
        let ts: i64 = cols[2].trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad timestamp `{}`", cols[2]),
        })?;
        let (user, item) = (cols[0].trim(), cols[1].trim());
        if user.is_empty() || item.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "empty user or item".into(),
            });
        }
        let feature: Vec<f64> = if cols[4].trim().is_empty() {
            Vec::new()
        } else {
            cols[4]
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Parse {
                    line: line_no,
                    msg: "bad feature vector".into(),
                })?
        };
        let title: Vec<String> = cols[3].split_whitespace().map(str::to_lowercase).collect();
        let valid = !title.is_empty() && !feature.is_empty() && feature.iter().all(|x| x.is_finite());
        if valid {
            match dim {
                None => dim = Some(feature.len()),
                Some(d) if d != feature.len() => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("feature dim {} ≠ {d}", feature.len()),
                    })
                }
                _ => {}
            }
        }
        // First valid description of an item wins; an item never seen with
        // valid text and image is excluded.
        let slot = items.entry(item.to_string()).or_insert(None);
        if slot.is_none() && valid {
            *slot = Some(RawItem { title, feature });
        }
        events.push(Event {
            user: user.to_string(),
            item: item.to_string(),
            ts,
        });
    }

    let mut counts: HashMap<&str, usize> = HashMap::new();
    for e in &events {
        if matches!(items.get(&e.item), Some(Some(_))) {
            *counts.entry(e.item.as_str()).or_default() += 1;
        }
    }
    let kept: BTreeSet<&str> = counts
        .iter()
        .filter(|(_, c)| **c >= cfg.min_item_inter)
        .map(|(k, _)| *k)
        .collect();

    let mut by_user: BTreeMap<&str, Vec<&Event>> = BTreeMap::new();
    for e in events.iter().filter(|e| kept.contains(e.item.as_str())) {
        by_user.entry(e.user.as_str()).or_default().push(e);
    }
    let mut sessions: Vec<(&str, Vec<&Event>)> = Vec::new();
    for (user, mut evs) in by_user {
        evs.sort_by_key(|e| e.ts);
        let mut cur: Vec<&Event> = Vec::new();
        for e in evs {
            if let Some(last) = cur.last() {
                if e.ts - last.ts > cfg.session_gap {
                    sessions.push((user, std::mem::take(&mut cur)));
                }
            }
            cur.push(e);
        }
        if !cur.is_empty() {
            sessions.push((user, cur));
        }
    }
    sessions.retain(|(_, s)| {
        s.len() >= cfg.min_seq_len && s[..s.len() - 1].iter().map(|e| &e.item).collect::<BTreeSet<_>>().len() >= 3
    });
    if sessions.is_empty() {
        return Err(invalid("no sequences survive filtering"));
    }

    // Dense ids in order of first appearance in the surviving sessions.
    let mut ids: BTreeMap<&str, u32> = BTreeMap::new();
    let mut item_keys = Vec::new();
    for (_, s) in &sessions {
        for e in s {
            if !ids.contains_key(e.item.as_str()) {
                ids.insert(e.item.as_str(), item_keys.len() as u32);
                item_keys.push(e.item.clone());
            }
        }
    }
    let mut word_ids: BTreeMap<String, u32> = BTreeMap::new();
    let mut words = Vec::new();
    let mut catalog_items = Vec::with_capacity(item_keys.len());
    for (id, key) in item_keys.iter().enumerate() {
        let raw = items[key].as_ref().expect("kept items are valid");
        let title_tokens = raw
            .title
            .iter()
            .take(cfg.title_len)
            .map(|w| {
                *word_ids.entry(w.clone()).or_insert_with(|| {
                    words.push(w.clone());
                    words.len() as u32 - 1
                })
            })
            .collect();
        catalog_items.push(Item {
            item_id: id as u32,
            title_tokens,
            vision_feature: raw.feature.clone(),
            latent_attr: Vec::new(),
            color: None,
        });
    }
    let mut user_ids: BTreeMap<&str, u32> = BTreeMap::new();
    let examples = sessions
        .iter()
        .map(|(user, s)| {
            let next = user_ids.len() as u32;
            let user_id = *user_ids.entry(user).or_insert(next);
            let (hist, last) = s.split_at(s.len() - 1);
            let start = cfg.max_history.map_or(0, |m| hist.len().saturating_sub(m));
            let hist = &hist[start..];
            Example {
                sequence: InteractionSequence {
                    user_id,
                    items: hist.iter().map(|e| ids[e.item.as_str()]).collect(),
                    timestamps: Some(hist.iter().map(|e| e.ts).collect()),
                },
                next_item: ids[last[0].item.as_str()],
            }
        })
        .collect();
    let catalog = Catalog::new(catalog_items, words.len(), dim.unwrap_or(0))?;
    Ok(Ingested {
        catalog,
        examples,
        words,
        item_keys,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const DAY: i64 = 86_400;

    fn line(user: &str, item: &str, ts: i64) -> String {
        format!("{user}\t{item}\t{ts}\tred canvas shoe {item}\t0.5,1.0,{ts}\n")
    }

    /// `users` users each touching items i0..i{len-1} once, an hour apart.
    fn log(users: usize, len: usize) -> String {
        let mut s = String::new();
        for u in 0..users {
            for i in 0..len {
                s += &line(&format!("u{u}"), &format!("i{i}"), (i as i64) * 3600);
            }
        }
        s
    }

    #[test]
    fn items_with_seven_interactions_are_excluded() {
        let mut s = log(8, 10);
        // i_rare appears for 7 users only.
        for u in 0..7 {
            s += &line(&format!("u{u}"), "i_rare", 9 * 3600 + 60);
        }
        let out = ingest_reader(s.as_bytes(), &IngestConfig::default()).unwrap();
        assert!(!out.item_keys.contains(&"i_rare".to_string()));
        assert_eq!(out.catalog.len(), 10);
        assert_eq!(out.examples.len(), 8);
    }

    #[test]
    fn sessions_of_eight_are_excluded() {
        let out = ingest_reader(log(8, 9).as_bytes(), &IngestConfig::default()).unwrap();
        assert_eq!(out.examples.len(), 8);
        assert_eq!(out.examples[0].sequence.items.len(), 8);
        assert!(ingest_reader(log(8, 8).as_bytes(), &IngestConfig::default()).is_err());
    }

    #[test]
    fn gap_of_25_hours_splits_sessions() {
        let mut s = String::new();
        for u in 0..8 {
            for i in 0..9 {
                s += &line(&format!("u{u}"), &format!("i{i}"), i * 3600);
            }
            for i in 0..9 {
                s += &line(&format!("u{u}"), &format!("i{i}"), 8 * 3600 + 25 * 3600 + i * 3600);
            }
        }
        let out = ingest_reader(s.as_bytes(), &IngestConfig::default()).unwrap();
        assert_eq!(out.examples.len(), 16);
        // Exactly one day apart stays in one session.
        let mut s = String::new();
        for u in 0..8 {
            for i in 0..9 {
                s += &line(&format!("u{u}"), &format!("i{i}"), i * DAY);
            }
        }
        let out = ingest_reader(s.as_bytes(), &IngestConfig::default()).unwrap();
        assert_eq!(out.examples.len(), 8);
    }

    #[test]
    fn missing_image_or_title_drops_item() {
        let mut s = log(8, 10);
        for u in 0..8 {
            s += &format!("u{u}\tnoimg\t{}\tsome title\t\n", 10 * 3600);
            s += &format!("u{u}\tnotitle\t{}\t \t1,2,3\n", 10 * 3600 + 1);
        }
        let out = ingest_reader(s.as_bytes(), &IngestConfig::default()).unwrap();
        assert_eq!(out.catalog.len(), 10);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let s = format!("{}u1\ti1\tnot-a-time\tt\t1,2,3\n", line("u0", "i0", 0));
        match ingest_reader(s.as_bytes(), &IngestConfig::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match ingest_reader("a\tb\n".as_bytes(), &IngestConfig::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn chronological_order_and_truncation() {
        let mut s = String::new();
        for u in 0..8 {
            for i in (0..12).rev() {
                s += &line(&format!("u{u}"), &format!("i{i}"), i * 60);
            }
        }
        let cfg = IngestConfig {
            max_history: Some(10),
            ..Default::default()
        };
        let out = ingest_reader(s.as_bytes(), &cfg).unwrap();
        let ex = &out.examples[0];
        assert_eq!(ex.sequence.items.len(), 10);
        let ts = ex.sequence.timestamps.as_ref().unwrap();
        assert!(ts.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(out.item_keys[ex.next_item as usize], "i11");
    }
}
