use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::StabilityConfig;
use crate::telemetry::TagId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Latch {
    present: bool,
    hits: u32,
    misses: u32,
}

impl Latch {
    /// Returns true when the latch flips.
    fn scan(&mut self, hit: bool, cfg: &StabilityConfig) -> bool {
        let was = self.present;
        if hit {
            self.hits = self.hits.saturating_add(1);
            self.misses = 0;
            if self.hits >= cfg.tag_present_scans {
                self.present = true;
            }
        } else {
            self.misses = self.misses.saturating_add(1);
            self.hits = 0;
            if self.misses >= cfg.tag_absent_scans {
                self.present = false;
            }
        }
        was != self.present
    }

    fn idle(&self) -> bool {
        !self.present && self.hits == 0
    }
}

/// Streaming presence latch for RFID tags: a tag becomes present after
/// `tag_present_scans` consecutive hits and absent after `tag_absent_scans`
/// consecutive misses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TagDebouncer {
    latches: BTreeMap<TagId, Latch>,
}

impl TagDebouncer {
    /// Feeds one scan; returns true if the present set changed.
    pub fn observe<'a>(&mut self, scan: impl IntoIterator<Item = &'a TagId>, cfg: &StabilityConfig) -> bool {
        let seen: BTreeSet<&TagId> = scan.into_iter().collect();
        let mut changed = false;
        for (tag, latch) in self.latches.iter_mut() {
            if !seen.contains(tag) {
                changed |= latch.scan(false, cfg);
            }
        }
        for tag in seen {
            changed |= self.latches.entry(tag.clone()).or_default().scan(true, cfg);
        }
        self.latches.retain(|_, l| !l.idle());
        changed
    }

    pub fn present(&self) -> BTreeSet<TagId> {
        self.latches
            .iter()
            .filter(|(_, l)| l.present)
            .map(|(t, _)| t.clone())
            .collect()
    }

    pub fn is_present(&self, tag: &TagId) -> bool {
        self.latches.get(tag).is_some_and(|l| l.present)
    }

    /// Marks `tags` present without waiting for scans.
    pub fn seed(&mut self, tags: impl IntoIterator<Item = TagId>) {
        for t in tags {
            self.latches.insert(
                t,
                Latch {
                    present: true,
                    hits: 0,
                    misses: 0,
                },
            );
        }
    }
}

/// Present set implied by per-tag scan histories (oldest scan first).
pub fn debounce(history: &BTreeMap<TagId, Vec<bool>>, cfg: &StabilityConfig) -> BTreeSet<TagId> {
    history
        .iter()
        .filter(|(_, scans)| {
            let mut latch = Latch::default();
            for &hit in scans.iter() {
                latch.scan(hit, cfg);
            }
            latch.present
        })
        .map(|(t, _)| t.clone())
        .collect()
}
