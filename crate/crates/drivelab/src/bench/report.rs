//! Report tables: per-(condition, traffic level) success rate mean +- std
//! over repetitions, CSV and pretty text output, and episode-log IO.

use super::{score_carla_old, score_nocrash, score_traffic_light, score_traffic_school, EpisodeResult, SuiteName};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: String,
    pub traffic_level: String,
    /// Per-repetition success rates (percent); `None` marks a degenerate
    /// traffic-light cell with zero crossings.
    pub per_repetition: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub suite: String,
    pub method: String,
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
    pub overall_mean: Option<f64>,
}

const CONDITION_ORDER: [&str; 4] = ["training", "new_weather", "new_town", "new_town_weather"];
const LEVEL_ORDER: [&str; 3] = ["empty", "regular", "dense"];

/// Population standard deviation.
fn pop_std(vals: &[f64], mean: f64) -> f64 {
    if vals.is_empty() {
        return 0.0;
    }
    (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64).sqrt()
}

pub fn aggregate(results: &[EpisodeResult], suite: SuiteName) -> ReportTable {
    let method = results.first().map(|r| r.method.clone()).unwrap_or_default();
    let config_hash = results.first().map(|r| r.config_hash.clone()).unwrap_or_default();
    let mut rows = Vec::new();
    let mut cell_means = Vec::new();

    for cond in CONDITION_ORDER {
        for level in LEVEL_ORDER {
            let cell: Vec<&EpisodeResult> = results
                .iter()
                .filter(|r| r.condition == cond && r.traffic_level == level)
                .collect();
            if cell.is_empty() {
                continue;
            }
            let reps = cell.iter().map(|r| r.repetition).max().unwrap() + 1;
            let mut per_rep: Vec<Option<f64>> = Vec::with_capacity(reps);
            for rep in 0..reps {
                let rep_eps: Vec<&EpisodeResult> =
                    cell.iter().filter(|r| r.repetition == rep).cloned().collect();
                let v = match suite {
                    SuiteName::TrafficLight => score_traffic_light(&rep_eps),
                    SuiteName::CarlaOld => Some(percent(&rep_eps, score_carla_old)),
                    SuiteName::Nocrash => Some(percent(&rep_eps, score_nocrash)),
                    SuiteName::TrafficSchool => Some(percent(&rep_eps, score_traffic_school)),
                };
                per_rep.push(v);
            }
            let present: Vec<f64> = per_rep.iter().flatten().cloned().collect();
            let (mean, std) = if present.is_empty() {
                (None, None)
            } else {
                let m = present.iter().sum::<f64>() / present.len() as f64;
                (Some(m), Some(pop_std(&present, m)))
            };
            if let Some(m) = mean {
                cell_means.push(m);
            }
            rows.push(ReportRow {
                condition: cond.into(),
                traffic_level: level.into(),
                per_repetition: per_rep,
                mean,
                std,
            });
        }
    }
    let overall_mean = if cell_means.is_empty() {
        None
    } else {
        Some(cell_means.iter().sum::<f64>() / cell_means.len() as f64)
    };
    ReportTable { suite: suite.name().into(), method, config_hash, rows, overall_mean }
}

fn percent(eps: &[&EpisodeResult], f: impl Fn(&EpisodeResult) -> bool) -> f64 {
    if eps.is_empty() {
        return 0.0;
    }
    100.0 * eps.iter().filter(|r| f(r)).count() as f64 / eps.len() as f64
}

impl ReportTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("suite,method,condition,traffic_level,mean,std,repetitions\n");
        for r in &self.rows {
            let mean = r.mean.map(|v| format!("{v:.2}")).unwrap_or_else(|| "absent".into());
            let std = r.std.map(|v| format!("{v:.2}")).unwrap_or_else(|| "absent".into());
            let reps = r
                .per_repetition
                .iter()
                .map(|v| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "absent".into()))
                .collect::<Vec<_>>()
                .join(";");
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.suite, self.method, r.condition, r.traffic_level, mean, std, reps
            ));
        }
        if let Some(m) = self.overall_mean {
            out.push_str(&format!("{},{},overall,,{m:.2},,\n", self.suite, self.method));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("suite: {}  method: {}\n", self.suite, self.method);
        out.push_str(&format!("{:<18}{:<10}{:>14}\n", "condition", "traffic", "success"));
        for r in &self.rows {
            let cell = match (r.mean, r.std) {
                (Some(m), Some(s)) => format!("{m:.0} +- {s:.1}"),
                _ => "absent".into(),
            };
            out.push_str(&format!("{:<18}{:<10}{:>14}\n", r.condition, r.traffic_level, cell));
        }
        if let Some(m) = self.overall_mean {
            out.push_str(&format!("{:<28}{:>14}\n", "mean", format!("{m:.1}")));
        }
        out
    }

    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("report_{}_{}.csv", self.suite, self.method)), self.to_csv())?;
        std::fs::write(dir.join(format!("report_{}_{}.txt", self.suite, self.method)), self.to_text())
    }
}

/// One JSON file per episode, named by its cell coordinates.
pub fn write_episode_logs(results: &[EpisodeResult], dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for r in results {
        let name = format!(
            "ep_{}_{}_{}_r{:02}_{:03}.json",
            r.suite, r.condition, r.traffic_level, r.repetition, r.route_id
        );
        std::fs::write(dir.join(name), serde_json::to_string_pretty(r).unwrap())?;
    }
    Ok(())
}

/// Load every episode JSON under a directory (sorted by file name).
pub fn load_episode_logs(dir: &Path) -> std::io::Result<Vec<EpisodeResult>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("ep_")))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let raw = std::fs::read_to_string(&p)?;
        let r: EpisodeResult = serde_json::from_str(&raw)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::Verdicts;

    fn ep(cond: &str, level: &str, rep: usize, route: usize, reached: bool) -> EpisodeResult {
        EpisodeResult {
            suite: "nocrash".into(),
            condition: cond.into(),
            traffic_level: level.into(),
            repetition: rep,
            route_id: route,
            weather: "Clear Noon".into(),
            method: "oracle".into(),
            reached,
            elapsed: 1.0,
            infractions: Vec::new(),
            lights_crossed_green: 0,
            lights_crossed_red: 0,
            verdicts: Verdicts { carla_old: reached, nocrash: reached, traffic_school: reached },
            diagnostic: None,
            config_hash: "h".into(),
        }
    }

    #[test]
    fn aggregate_mean_and_population_std() {
        // Repetition success rates 90, 94, 92 out of 50 routes each.
        let mut results = Vec::new();
        for (rep, successes) in [(0usize, 45usize), (1, 47), (2, 46)] {
            for route in 0..50 {
                results.push(ep("training", "empty", rep, route, route < successes));
            }
        }
        let table = aggregate(&results, SuiteName::Nocrash);
        assert_eq!(table.rows.len(), 1);
        let row = &table.rows[0];
        assert!((row.mean.unwrap() - 92.0).abs() < 1e-9);
        assert!((row.std.unwrap() - 1.632_993_161_855_452).abs() < 1e-9);
    }

    #[test]
    fn single_repetition_has_zero_std() {
        let results: Vec<EpisodeResult> = (0..10).map(|r| ep("training", "empty", 0, r, r % 2 == 0)).collect();
        let table = aggregate(&results, SuiteName::Nocrash);
        assert_eq!(table.rows[0].std, Some(0.0));
    }

    #[test]
    fn rows_sorted_by_condition_then_level() {
        let mut results = Vec::new();
        for cond in ["new_town", "training"] {
            for level in ["dense", "empty"] {
                results.push(ep(cond, level, 0, 0, true));
            }
        }
        let table = aggregate(&results, SuiteName::Nocrash);
        let order: Vec<(String, String)> =
            table.rows.iter().map(|r| (r.condition.clone(), r.traffic_level.clone())).collect();
        assert_eq!(
            order,
            vec![
                ("training".to_string(), "empty".to_string()),
                ("training".to_string(), "dense".to_string()),
                ("new_town".to_string(), "empty".to_string()),
                ("new_town".to_string(), "dense".to_string()),
            ]
        );
    }

    #[test]
    fn csv_roundtrip_stability() {
        let results: Vec<EpisodeResult> = (0..4).map(|r| ep("training", "empty", 0, r, true)).collect();
        let t1 = aggregate(&results, SuiteName::Nocrash).to_csv();
        let t2 = aggregate(&results, SuiteName::Nocrash).to_csv();
        assert_eq!(t1, t2);
    }
}
