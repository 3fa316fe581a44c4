//! Traverse metrics, multi-run comparison and plot-data export.

use std::fmt::Write as _;

use serde::Serialize;

use crate::repeat::{Mode, TraverseLog, TraverseRecord};

/// Frames with fewer map matches than this are counted as localization
/// failures in the match statistics.
pub const LOCALIZATION_FAILURE_MATCHES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct MatchStats {
    pub mean: f64,
    pub min: usize,
    pub max: usize,
    /// Frames below [`LOCALIZATION_FAILURE_MATCHES`].
    pub below_threshold: usize,
}

impl MatchStats {
    fn of(values: impl Iterator<Item = usize> + Clone) -> Self {
        let n = values.clone().count();
        if n == 0 {
            return Self::default();
        }
        Self {
            mean: values.clone().sum::<usize>() as f64 / n as f64,
            min: values.clone().min().unwrap_or(0),
            max: values.clone().max().unwrap_or(0),
            below_threshold: values.filter(|&v| v < LOCALIZATION_FAILURE_MATCHES).count(),
        }
    }
}

/// A maximal run of frames that were not LOCALIZED.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FailureEpisode {
    /// First and last row of the run, inclusive.
    pub start_row: usize,
    pub end_row: usize,
    pub start_t: f64,
    pub end_t: f64,
    /// Distance travelled from the first row to the row after the run.
    pub distance: f64,
    /// Worst mode reached.
    pub worst_mode: Mode,
    pub recovered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub frames: usize,
    pub duration: f64,
    /// Planar distance driven, metres.
    pub distance: f64,
    pub lateral_rms: f64,
    pub lateral_max: f64,
    /// RMS of estimated minus true lateral error over LOCALIZED frames.
    pub lateral_gap_rms: f64,
    /// Percentage of distance driven outside SEARCH and HALTED.
    pub autonomy: f64,
    /// Distance the operator drove, reported separately.
    pub intervention_distance: f64,
    pub vo_matches: MatchStats,
    pub map_matches: MatchStats,
    pub episodes: Vec<FailureEpisode>,
    pub final_mode: Option<Mode>,
}

fn step_distance(a: &TraverseRecord, b: &TraverseRecord) -> f64 {
    (b.true_position.xy() - a.true_position.xy()).norm()
}

fn counts_against(r: &TraverseRecord) -> bool {
    r.intervention || matches!(r.mode, Mode::Search | Mode::Halted)
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// The segment from row i to row i + 1 is attributed to row i's mode.
pub fn evaluate(log: &TraverseLog) -> EvalReport {
    let r = &log.records;
    let mut distance = 0.0;
    let mut against = 0.0;
    let mut intervention_distance = 0.0;
    for w in r.windows(2) {
        let d = step_distance(&w[0], &w[1]);
        distance += d;
        if counts_against(&w[0]) {
            against += d;
        }
        if w[0].intervention {
            intervention_distance += d;
        }
    }
    let autonomy = if distance > 0.0 {
        (100.0 * (1.0 - against / distance)).clamp(0.0, 100.0)
    } else {
        100.0
    };

    EvalReport {
        frames: r.len(),
        duration: match (r.first(), r.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        },
        distance,
        lateral_rms: rms(r.iter().map(|x| x.true_lateral)),
        lateral_max: r.iter().map(|x| x.true_lateral.abs()).fold(0.0, f64::max),
        lateral_gap_rms: rms(
            r.iter()
                .filter(|x| x.mode == Mode::Localized)
                .map(|x| x.est_lateral - x.true_lateral),
        ),
        autonomy,
        intervention_distance,
        vo_matches: MatchStats::of(r.iter().map(|x| x.vo_matches)),
        map_matches: MatchStats::of(r.iter().map(|x| x.map_matches)),
        episodes: failure_episodes(log),
        final_mode: r.last().map(|x| x.mode),
    }
}

fn severity(m: Mode) -> u8 {
    match m {
        Mode::Localized => 0,
        Mode::VoOnly => 1,
        Mode::Search => 2,
        Mode::Halted => 3,
    }
}

pub fn failure_episodes(log: &TraverseLog) -> Vec<FailureEpisode> {
    let r = &log.records;
    let mut out = Vec::new();
    let mut i = 0;
    while i < r.len() {
        if r[i].mode == Mode::Localized {
            i += 1;
            continue;
        }
        let start = i;
        let mut worst = r[i].mode;
        while i < r.len() && r[i].mode != Mode::Localized {
            if severity(r[i].mode) > severity(worst) {
                worst = r[i].mode;
            }
            i += 1;
        }
        let end = i - 1;
        let stop = i.min(r.len() - 1);
        let distance = r[start..=stop].windows(2).map(|w| step_distance(&w[0], &w[1])).sum();
        out.push(FailureEpisode {
            start_row: start,
            end_row: end,
            start_t: r[start].t,
            end_t: r[end].t,
            distance,
            worst_mode: worst,
            recovered: i < r.len(),
        });
    }
    out
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frames              {}", self.frames);
        let _ = writeln!(s, "duration            {:.1} s", self.duration);
        let _ = writeln!(s, "distance            {:.2} m", self.distance);
        let _ = writeln!(s, "autonomy            {:.2} %", self.autonomy);
        let _ = writeln!(s, "operator distance   {:.2} m", self.intervention_distance);
        let _ = writeln!(s, "lateral rms         {:.4} m", self.lateral_rms);
        let _ = writeln!(s, "lateral max         {:.4} m", self.lateral_max);
        let _ = writeln!(s, "est-true gap rms    {:.4} m", self.lateral_gap_rms);
        for (name, m) in [("vo matches", &self.vo_matches), ("map matches", &self.map_matches)] {
            let _ = writeln!(
                s,
                "{name:<20}mean {:.1}  min {}  max {}  frames<{} {}",
                m.mean, m.min, m.max, LOCALIZATION_FAILURE_MATCHES, m.below_threshold
            );
        }
        let _ = writeln!(s, "failure episodes    {}", self.episodes.len());
        for e in &self.episodes {
            let _ = writeln!(
                s,
                "  t {:.2}-{:.2} s  rows {}-{}  {:.2} m  worst {}{}",
                e.start_t,
                e.end_t,
                e.start_row,
                e.end_row,
                e.distance,
                e.worst_mode,
                if e.recovered { "" } else { "  (not recovered)" }
            );
        }
        if let Some(m) = self.final_mode {
            let _ = writeln!(s, "final mode          {m}");
        }
        s
    }
}

const COMPARISON_COLUMNS: [&str; 11] = [
    "run",
    "distance_m",
    "autonomy_pct",
    "intervention_m",
    "lateral_rms_m",
    "lateral_max_m",
    "lateral_gap_rms_m",
    "vo_matches_mean",
    "map_matches_mean",
    "failure_episodes",
    "final_mode",
];

/// One row per run.
pub fn comparison_csv(runs: &[(String, EvalReport)]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COMPARISON_COLUMNS).expect("write to vec");
    for (name, r) in runs {
        w.write_record([
            name.clone(),
            format!("{:.4}", r.distance),
            format!("{:.4}", r.autonomy),
            format!("{:.4}", r.intervention_distance),
            format!("{:.6}", r.lateral_rms),
            format!("{:.6}", r.lateral_max),
            format!("{:.6}", r.lateral_gap_rms),
            format!("{:.2}", r.vo_matches.mean),
            format!("{:.2}", r.map_matches.mean),
            r.episodes.len().to_string(),
            r.final_mode.map(|m| m.to_string()).unwrap_or_default(),
        ])
        .expect("write to vec");
    }
    w.into_inner().expect("flush to vec")
}

/// Side-by-side text table.
pub fn comparison_text(runs: &[(String, EvalReport)]) -> String {
    let mut s = String::new();
    let width = runs.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(8);
    let _ = writeln!(
        s,
        "{:<width$}  {:>9}  {:>10}  {:>11}  {:>11}  {:>9}  {:>9}",
        "run", "dist m", "autonomy %", "lat rms m", "lat max m", "vo mean", "map mean"
    );
    for (name, r) in runs {
        let _ = writeln!(
            s,
            "{:<width$}  {:>9.2}  {:>10.2}  {:>11.4}  {:>11.4}  {:>9.1}  {:>9.1}",
            name, r.distance, r.autonomy, r.lateral_rms, r.lateral_max, r.vo_matches.mean, r.map_matches.mean
        );
    }
    s
}

/// Centred moving average. Near the ends the mean covers only the samples
/// that exist.
pub fn sliding_mean(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let before = (w - 1) / 2;
    let after = w - 1 - before;
    let mut prefix = Vec::with_capacity(values.len() + 1);
    prefix.push(0.0);
    for v in values {
        prefix.push(prefix.last().copied().unwrap_or(0.0) + v);
    }
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(before);
            let hi = (i + after).min(values.len() - 1);
            (prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64
        })
        .collect()
}

/// Cumulative planar distance at each row.
pub fn cumulative_distance(log: &TraverseLog) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(log.records.len());
    for (i, r) in log.records.iter().enumerate() {
        if i > 0 {
            acc += step_distance(&log.records[i - 1], r);
        }
        out.push(acc);
    }
    out
}

/// Lateral error against distance travelled.
pub fn lateral_series_csv(log: &TraverseLog, window: usize) -> Vec<u8> {
    let d = cumulative_distance(log);
    let est: Vec<f64> = log.records.iter().map(|r| r.est_lateral).collect();
    let truth: Vec<f64> = log.records.iter().map(|r| r.true_lateral).collect();
    let est_f = sliding_mean(&est, window);
    let truth_f = sliding_mean(&truth, window);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "distance_m",
        "t",
        "true_lateral_m",
        "est_lateral_m",
        "true_lateral_filtered_m",
        "est_lateral_filtered_m",
        "mode",
    ])
    .expect("write to vec");
    for (i, r) in log.records.iter().enumerate() {
        w.write_record([
            d[i].to_string(),
            r.t.to_string(),
            truth[i].to_string(),
            est[i].to_string(),
            truth_f[i].to_string(),
            est_f[i].to_string(),
            r.mode.to_string(),
        ])
        .expect("write to vec");
    }
    w.into_inner().expect("flush to vec")
}

/// Match counts against distance travelled, raw and filtered.
pub fn match_series_csv(log: &TraverseLog, window: usize) -> Vec<u8> {
    let d = cumulative_distance(log);
    let vo: Vec<f64> = log.records.iter().map(|r| r.vo_matches as f64).collect();
    let map: Vec<f64> = log.records.iter().map(|r| r.map_matches as f64).collect();
    let vo_f = sliding_mean(&vo, window);
    let map_f = sliding_mean(&map, window);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "distance_m",
        "t",
        "vo_matches",
        "map_matches",
        "vo_matches_filtered",
        "map_matches_filtered",
        "mode",
    ])
    .expect("write to vec");
    for (i, r) in log.records.iter().enumerate() {
        w.write_record([
            d[i].to_string(),
            r.t.to_string(),
            r.vo_matches.to_string(),
            r.map_matches.to_string(),
            vo_f[i].to_string(),
            map_f[i].to_string(),
            r.mode.to_string(),
        ])
        .expect("write to vec");
    }
    w.into_inner().expect("flush to vec")
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    pub(crate) fn row(t: f64, x: f64, mode: Mode) -> TraverseRecord {
        TraverseRecord {
            t,
            mode,
            true_position: Vector3::new(x, 0.0, 0.0),
            est_lateral: 0.0,
            true_lateral: 0.0,
            vo_matches: 100,
            map_matches: 100,
            nearest_id: 0,
            est_position: Vector3::new(x, 0.0, 0.0),
            est_yaw: 0.0,
            true_yaw: 0.0,
            intervention: false,
        }
    }

    #[test]
    fn no_failures_is_full_autonomy() {
        let log = TraverseLog {
            records: (0..20).map(|i| row(i as f64, i as f64 * 0.1, Mode::Localized)).collect(),
        };
        let r = evaluate(&log);
        assert_eq!(r.autonomy, 100.0);
        assert!(r.episodes.is_empty());
        assert!((r.distance - 1.9).abs() < 1e-12);
    }

    #[test]
    fn search_span_of_ten_percent() {
        let log = TraverseLog {
            records: vec![
                row(0.0, 0.0, Mode::Localized),
                row(1.0, 9.0, Mode::Search),
                row(2.0, 10.0, Mode::Localized),
            ],
        };
        let r = evaluate(&log);
        assert!((r.autonomy - 90.0).abs() < 1e-12);
        assert_eq!(r.episodes.len(), 1);
        let e = r.episodes[0];
        assert_eq!((e.start_row, e.end_row), (1, 1));
        assert!((e.distance - 1.0).abs() < 1e-12);
        assert_eq!(e.worst_mode, Mode::Search);
        assert!(e.recovered);
    }

    #[test]
    fn vo_only_counts_as_autonomous() {
        let mut records: Vec<_> = (0..10).map(|i| row(i as f64, i as f64, Mode::VoOnly)).collect();
        records[3].intervention = true;
        let r = evaluate(&TraverseLog { records });
        assert!((r.autonomy - 100.0 * 8.0 / 9.0).abs() < 1e-9);
        assert!((r.intervention_distance - 1.0).abs() < 1e-12);
        assert_eq!(r.episodes.len(), 1);
        assert!(!r.episodes[0].recovered);
    }

    #[test]
    fn empty_log() {
        let r = evaluate(&TraverseLog::default());
        assert_eq!(r.frames, 0);
        assert_eq!(r.autonomy, 100.0);
        assert!(r.final_mode.is_none());
    }

    #[test]
    fn lateral_statistics() {
        let mut records: Vec<_> = (0..4).map(|i| row(i as f64, i as f64, Mode::Localized)).collect();
        for (r, e) in records.iter_mut().zip([0.1, -0.1, 0.1, -0.3]) {
            r.true_lateral = e;
        }
        records[3].mode = Mode::VoOnly;
        records[3].est_lateral = 5.0;
        let r = evaluate(&TraverseLog { records });
        assert!((r.lateral_rms - (0.12f64 / 4.0).sqrt()).abs() < 1e-12);
        assert!((r.lateral_max - 0.3).abs() < 1e-12);
        assert!((r.lateral_gap_rms - 0.1).abs() < 1e-12);
    }

    #[test]
    fn constant_series_is_unchanged() {
        let v = vec![7.0; 30];
        assert_eq!(sliding_mean(&v, 5), v);
        assert_eq!(sliding_mean(&v, 20), v);
    }

    #[test]
    fn impulse_is_spread_over_window() {
        let mut v = vec![0.0; 100];
        v[50] = 400.0;
        let f = sliding_mean(&v, 20);
        let peak = f.iter().cloned().fold(0.0, f64::max);
        assert!((peak - 20.0).abs() < 1e-12);
        assert!((f.iter().sum::<f64>() - 400.0).abs() < 1e-9);
        assert_eq!(sliding_mean(&v, 1), v);
    }

    #[test]
    fn series_have_one_row_per_frame() {
        let log = TraverseLog {
            records: (0..12).map(|i| row(i as f64, i as f64 * 0.5, Mode::Localized)).collect(),
        };
        let text = String::from_utf8(match_series_csv(&log, 5)).unwrap();
        assert_eq!(text.lines().count(), 13);
        let text = String::from_utf8(lateral_series_csv(&log, 5)).unwrap();
        let d: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert!(d.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn comparison_outputs() {
        let log = TraverseLog {
            records: (0..5).map(|i| row(i as f64, i as f64, Mode::Localized)).collect(),
        };
        let runs = vec![("mono".to_string(), evaluate(&log)), ("baseline".to_string(), evaluate(&log))];
        let csv = String::from_utf8(comparison_csv(&runs)).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(comparison_text(&runs).contains("baseline"));
    }
}
