use std::collections::{BTreeMap, BTreeSet};

use super::{
    AnomalyReason, CandidateRole, EventKind, GrossLookup, OperationEvent, PendingWindow,
    StabilityConfig,
};
use crate::telemetry::TagId;

/// Per-container slack when explaining a multi-tag change by last-known
/// grosses.
pub const MULTI_TAG_TOLERANCE_G: f64 = 0.5;

/// State of the tray once the weight has settled again.
#[derive(Clone, Debug, PartialEq)]
pub struct Settled {
    pub w1: f64,
    pub t_end_ms: i64,
    pub tags_after: BTreeSet<TagId>,
}

/// Turns a closed pending window into zero or more events.
///
/// An empty result means nothing happened that the ledger should see: either
/// no tag changed and the weight moved by at most `trigger_delta_g`, or tags
/// flickered without a weight change to back them.
pub fn classify(
    pending: &PendingWindow,
    settled: &Settled,
    registry: &dyn GrossLookup,
    cfg: &StabilityConfig,
) -> Vec<OperationEvent> {
    let delta = settled.w1 - pending.w0;
    let before: BTreeSet<&TagId> = pending.tags_before.iter().filter(|t| t.is_container()).collect();
    let after: BTreeSet<&TagId> = settled.tags_after.iter().filter(|t| t.is_container()).collect();
    let removed: Vec<&TagId> = before.difference(&after).copied().collect();
    let returned: Vec<&TagId> = after.difference(&before).copied().collect();

    // Containers that latched present mid-window but are gone at both ends
    // mean more than one operation happened; the net delta cannot say which.
    let transient: Vec<&TagId> = pending
        .tags_latched
        .iter()
        .filter(|t| t.is_container() && !before.contains(t) && !after.contains(t))
        .collect();

    if transient.is_empty() && delta.abs() <= cfg.trigger_delta_g {
        return Vec::new();
    }

    let event = |kind, tag: Option<&TagId>, delta_g| OperationEvent {
        tray_id: pending.tray_id.clone(),
        tray_event_seq: 0,
        kind,
        tag_id: tag.cloned(),
        delta_g,
        candidates: BTreeMap::new(),
        user_badge: pending.badge_seen.clone(),
        t_start_ms: pending.started_at_ms,
        t_end_ms: settled.t_end_ms,
        unregistered: tag.is_some_and(|t| registry.last_known_gross(t).is_none()),
        anomaly: None,
    };
    let anomaly = |tag: Option<&TagId>, reason| OperationEvent {
        anomaly: Some(reason),
        ..event(EventKind::Anomaly, tag, delta)
    };
    let ambiguous = |candidates: BTreeMap<TagId, CandidateRole>| OperationEvent {
        candidates,
        unregistered: false,
        ..event(EventKind::Ambiguous, None, delta)
    };

    // Two or more separate weight steps with at most one tag change: a
    // single-tag attribution would silently fold unrelated operations
    // together.
    let stepped = pending.steps >= 2 && removed.len() + returned.len() <= 1;
    if !transient.is_empty() || stepped {
        let roles = removed
            .iter()
            .map(|t| ((*t).clone(), CandidateRole::Removed))
            .chain(returned.iter().map(|t| ((*t).clone(), CandidateRole::Returned)))
            .chain(before.intersection(&after).map(|t| ((*t).clone(), CandidateRole::Present)))
            .chain(transient.iter().map(|t| ((*t).clone(), CandidateRole::Present)))
            .collect();
        return vec![ambiguous(roles)];
    }

    match (removed.as_slice(), returned.as_slice()) {
        ([], []) => match after.iter().collect::<Vec<_>>().as_slice() {
            [] => vec![anomaly(None, AnomalyReason::NoContainer)],
            [only] => vec![event(EventKind::Adjust, Some(only), delta)],
            many => vec![ambiguous(
                many.iter().map(|t| ((**t).clone(), CandidateRole::Present)).collect(),
            )],
        },
        ([tag], []) if delta < 0.0 => vec![event(EventKind::Remove, Some(tag), delta)],
        ([tag], []) => vec![anomaly(Some(tag), AnomalyReason::SignContradiction)],
        ([], [tag]) if delta > 0.0 => vec![event(EventKind::Return, Some(tag), delta)],
        ([], [tag]) => vec![anomaly(Some(tag), AnomalyReason::SignContradiction)],
        _ => {
            let slack = if pending.lost_frames > 0 {
                MULTI_TAG_TOLERANCE_G + cfg.stable_range_g
            } else {
                MULTI_TAG_TOLERANCE_G
            };
            match explain(&removed, &returned, delta, registry, slack) {
                Some(parts) => parts
                    .into_iter()
                    .map(|(tag, kind, d)| event(kind, Some(tag), d))
                    .collect(),
                None => {
                    let roles = removed
                        .iter()
                        .map(|t| ((*t).clone(), CandidateRole::Removed))
                        .chain(returned.iter().map(|t| ((*t).clone(), CandidateRole::Returned)))
                        .collect();
                    vec![ambiguous(roles)]
                }
            }
        }
    }
}

/// Splits `delta` over the changed tags when their last-known grosses account
/// for it within `slack_per_tag` per tag. The residual is spread in
/// proportion to gross so the parts sum to `delta` exactly.
fn explain<'a>(
    removed: &[&'a TagId],
    returned: &[&'a TagId],
    delta: f64,
    registry: &dyn GrossLookup,
    slack_per_tag: f64,
) -> Option<Vec<(&'a TagId, EventKind, f64)>> {
    let mut parts = Vec::with_capacity(removed.len() + returned.len());
    for &t in removed {
        parts.push((t, EventKind::Remove, -registry.last_known_gross(t)?));
    }
    for &t in returned {
        parts.push((t, EventKind::Return, registry.last_known_gross(t)?));
    }
    let predicted: f64 = parts.iter().map(|p| p.2).sum();
    let residual = delta - predicted;
    if residual.abs() > slack_per_tag * parts.len() as f64 {
        return None;
    }
    let mass: f64 = parts.iter().map(|p| p.2.abs()).sum();
    if mass <= 0.0 {
        return None;
    }
    for p in parts.iter_mut() {
        p.2 += residual * p.2.abs() / mass;
    }
    let ok = parts.iter().all(|(_, kind, d)| match kind {
        EventKind::Remove => *d < 0.0,
        _ => *d > 0.0,
    });
    ok.then_some(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::NoRegistry;
    use crate::telemetry::TrayId;

    fn tags(names: &[&str]) -> BTreeSet<TagId> {
        names.iter().map(|n| TagId::container(n)).collect()
    }

    fn pending(before: &[&str]) -> PendingWindow {
        PendingWindow {
            tray_id: TrayId::new("T1").unwrap(),
            started_at_ms: 1_000,
            w0: 500.0,
            tags_before: tags(before),
            tags_seen: tags(before),
            badge_seen: None,
            tags_latched: BTreeSet::new(),
            lost_frames: 0,
            level_g: 500.0,
            steps: 1,
        }
    }

    fn settled(delta: f64, after: &[&str]) -> Settled {
        Settled {
            w1: 500.0 + delta,
            t_end_ms: 3_000,
            tags_after: tags(after),
        }
    }

    fn registry() -> BTreeMap<TagId, f64> {
        BTreeMap::from([(TagId::container("A"), 150.0), (TagId::container("B"), 140.0)])
    }

    fn summary(evs: &[OperationEvent]) -> Vec<(EventKind, Option<String>, f64)> {
        evs.iter()
            .map(|e| (e.kind, e.tag_id.as_ref().map(|t| t.to_string()), e.delta_g))
            .collect()
    }

    #[test]
    fn single_removal() {
        let cfg = StabilityConfig::default();
        let evs = classify(&pending(&["A", "B"]), &settled(-150.0, &["B"]), &registry(), &cfg);
        assert_eq!(summary(&evs), vec![(EventKind::Remove, Some("C:A".into()), -150.0)]);
        assert!(!evs[0].unregistered);
    }

    #[test]
    fn single_return() {
        let cfg = StabilityConfig::default();
        let evs = classify(&pending(&["B"]), &settled(140.0, &["A", "B"]), &registry(), &cfg);
        assert_eq!(summary(&evs), vec![(EventKind::Return, Some("C:A".into()), 140.0)]);
    }

    #[test]
    fn sub_threshold_change_is_silent() {
        let cfg = StabilityConfig::default();
        assert!(classify(&pending(&["A"]), &settled(0.1, &["A"]), &registry(), &cfg).is_empty());
    }

    #[test]
    fn tag_flicker_without_weight_change_is_silent() {
        let cfg = StabilityConfig::default();
        assert!(classify(&pending(&["A", "B"]), &settled(-0.3, &["B"]), &registry(), &cfg).is_empty());
    }

    #[test]
    fn two_removals_explained_by_grosses() {
        let cfg = StabilityConfig::default();
        let evs = classify(&pending(&["A", "B"]), &settled(-290.0, &[]), &registry(), &cfg);
        assert_eq!(
            summary(&evs),
            vec![
                (EventKind::Remove, Some("C:A".into()), -150.0),
                (EventKind::Remove, Some("C:B".into()), -140.0),
            ]
        );
    }

    #[test]
    fn decomposition_spreads_residual_exactly() {
        let cfg = StabilityConfig::default();
        let evs = classify(&pending(&["A", "B"]), &settled(-290.6, &[]), &registry(), &cfg);
        assert_eq!(evs.len(), 2);
        let sum: f64 = evs.iter().map(|e| e.delta_g).sum();
        assert!((sum - (-290.6)).abs() < 1e-9);
    }

    #[test]
    fn unexplained_multi_change_is_ambiguous() {
        let cfg = StabilityConfig::default();
        let evs = classify(&pending(&["A", "B"]), &settled(-200.0, &[]), &registry(), &cfg);
        assert_eq!(evs.len(), 1);
        assert_eq!(evs[0].kind, EventKind::Ambiguous);
        assert_eq!(evs[0].tag_id, None);
        assert_eq!(evs[0].delta_g, -200.0);
        assert_eq!(
            evs[0].candidates,
            BTreeMap::from([
                (TagId::container("A"), CandidateRole::Removed),
                (TagId::container("B"), CandidateRole::Removed),
            ])
        );
    }

    #[test]
    fn lost_frames_widen_the_explanation_tolerance() {
        let cfg = StabilityConfig::default();
        let mut p = pending(&["A", "B"]);
        // residual 1.4 g: over 2 x 0.5, within 2 x (0.5 + 0.5)
        assert_eq!(
            classify(&p, &settled(-291.4, &[]), &registry(), &cfg)[0].kind,
            EventKind::Ambiguous
        );
        p.lost_frames = 3;
        let evs = classify(&p, &settled(-291.4, &[]), &registry(), &cfg);
        assert_eq!(evs.len(), 2);
        assert!(evs.iter().all(|e| e.kind == EventKind::Remove));
    }

    #[test]
    fn swap_with_unknown_gross_is_ambiguous() {
        let cfg = StabilityConfig::default();
        let evs = classify(&pending(&["A"]), &settled(-10.0, &["Z"]), &registry(), &cfg);
        assert_eq!(evs[0].kind, EventKind::Ambiguous);
        assert_eq!(evs[0].candidates[&TagId::container("Z")], CandidateRole::Returned);
    }

    #[test]
    fn adjust_on_single_container() {
        let cfg = StabilityConfig::default();
        let evs = classify(&pending(&["A"]), &settled(-10.0, &["A"]), &registry(), &cfg);
        assert_eq!(summary(&evs), vec![(EventKind::Adjust, Some("C:A".into()), -10.0)]);
    }

    #[test]
    fn adjust_with_several_containers_is_ambiguous() {
        let cfg = StabilityConfig::default();
        let evs = classify(&pending(&["A", "B"]), &settled(-10.0, &["A", "B"]), &registry(), &cfg);
        assert_eq!(evs[0].kind, EventKind::Ambiguous);
        assert!(evs[0].candidates.values().all(|r| *r == CandidateRole::Present));
    }

    #[test]
    fn weight_change_on_empty_tray_is_anomaly() {
        let cfg = StabilityConfig::default();
        let evs = classify(&pending(&[]), &settled(25.0, &[]), &registry(), &cfg);
        assert_eq!(evs[0].kind, EventKind::Anomaly);
        assert_eq!(evs[0].anomaly, Some(AnomalyReason::NoContainer));
    }

    #[test]
    fn sign_contradictions_are_anomalies() {
        let cfg = StabilityConfig::default();
        let evs = classify(&pending(&["A"]), &settled(30.0, &[]), &registry(), &cfg);
        assert_eq!(evs[0].kind, EventKind::Anomaly);
        assert_eq!(evs[0].anomaly, Some(AnomalyReason::SignContradiction));
        assert_eq!(evs[0].tag_id, Some(TagId::container("A")));
        let evs = classify(&pending(&[]), &settled(-30.0, &["A"]), &registry(), &cfg);
        assert_eq!(evs[0].kind, EventKind::Anomaly);
    }

    #[test]
    fn unregistered_tags_are_flagged() {
        let cfg = StabilityConfig::default();
        let evs = classify(&pending(&["Z"]), &settled(-40.0, &[]), &NoRegistry, &cfg);
        assert_eq!(evs[0].kind, EventKind::Remove);
        assert!(evs[0].unregistered);
    }

    #[test]
    fn badges_are_attached_and_ignored_for_matching() {
        let cfg = StabilityConfig::default();
        let mut p = pending(&["A"]);
        p.badge_seen = Some(TagId::badge("alice"));
        let mut s = settled(-150.0, &[]);
        s.tags_after.insert(TagId::badge("alice"));
        let evs = classify(&p, &s, &registry(), &cfg);
        assert_eq!(evs[0].kind, EventKind::Remove);
        assert_eq!(evs[0].user_badge, Some(TagId::badge("alice")));
    }
}
