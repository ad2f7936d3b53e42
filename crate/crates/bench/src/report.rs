use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::BenchError;

pub const CSV_HEADER: [&str; 6] = ["image_id", "attempted", "success", "queries", "final_loss", "wall_ms"];

/// Outcome for one image. `attempted` is false when the model already
/// misclassified the clean input; such images carry no queries or loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub attempted: bool,
    pub success: bool,
    /// Includes the initial classification query.
    pub queries: Option<usize>,
    pub final_loss: Option<f64>,
    pub wall_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub queries: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub note: String,
    pub records: Vec<ImageRecord>,
    pub attempted: usize,
    pub skipped: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Over successful attacks only.
    pub mean_queries: Option<f64>,
    pub median_queries: Option<f64>,
    pub curve: Vec<CurvePoint>,
}

impl BenchmarkReport {
    /// Aggregates records (sorted here by id) with `curve_points` evenly
    /// spaced query levels up to `budget`.
    pub fn from_records(mut records: Vec<ImageRecord>, budget: usize, curve_points: usize) -> Self {
        records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let attempted = records.iter().filter(|r| r.attempted).count();
        let skipped = records.len() - attempted;
        let mut success_queries: Vec<usize> = records
            .iter()
            .filter(|r| r.attempted && r.success)
            .filter_map(|r| r.queries)
            .collect();
        success_queries.sort_unstable();
        let successes = success_queries.len();
        let rate = |count: usize| if attempted == 0 { 0.0 } else { count as f64 / attempted as f64 };

        let mean_queries = (successes > 0).then(|| success_queries.iter().sum::<usize>() as f64 / successes as f64);
        let median_queries = (successes > 0).then(|| {
            let mid = successes / 2;
            if successes % 2 == 1 {
                success_queries[mid] as f64
            } else {
                (success_queries[mid - 1] + success_queries[mid]) as f64 / 2.0
            }
        });
        let points = curve_points.max(1);
        let curve = (1..=points)
            .map(|p| {
                let level = (budget * p).div_ceil(points);
                CurvePoint {
                    queries: level,
                    success_rate: rate(success_queries.partition_point(|&q| q <= level)),
                }
            })
            .collect();
        Self {
            note: "success rate over attempted images; mean and median queries over successful attacks, counting the initial classification query".into(),
            records,
            attempted,
            skipped,
            successes,
            success_rate: rate(successes),
            mean_queries,
            median_queries,
            curve,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), BenchError> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| BenchError::Io(std::io::Error::other(e));
        w.write_record(CSV_HEADER).map_err(io)?;
        for r in &self.records {
            w.write_record([
                r.image_id.clone(),
                r.attempted.to_string(),
                r.success.to_string(),
                r.queries.map(|q| q.to_string()).unwrap_or_default(),
                r.final_loss.map(|l| format!("{l:.17e}")).unwrap_or_default(),
                r.wall_ms.map(|t| t.to_string()).unwrap_or_default(),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `results.csv` and `report.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), BenchError> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join("results.csv"))?)?;
        std::fs::write(dir.join("report.json"), self.to_json())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, attempted: bool, success: bool, q: Option<usize>) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            attempted,
            success,
            queries: q,
            final_loss: q.map(|_| 0.0),
            wall_ms: None,
        }
    }

    #[test]
    fn aggregates_over_successes_only() {
        let r = BenchmarkReport::from_records(
            vec![
                rec("c", true, true, Some(30)),
                rec("a", true, true, Some(10)),
                rec("b", true, false, Some(100)),
                rec("d", false, false, None),
                rec("e", true, true, Some(20)),
            ],
            100,
            4,
        );
        assert_eq!(r.records[0].image_id, "a");
        assert_eq!((r.attempted, r.skipped, r.successes), (4, 1, 3));
        assert_eq!(r.success_rate, 0.75);
        assert_eq!(r.mean_queries, Some(20.0));
        assert_eq!(r.median_queries, Some(20.0));
        let levels: Vec<usize> = r.curve.iter().map(|c| c.queries).collect();
        assert_eq!(levels, vec![25, 50, 75, 100]);
        assert_eq!(r.curve[0].success_rate, 0.5);
        assert!(r.curve.windows(2).all(|w| w[0].success_rate <= w[1].success_rate));
        assert_eq!(r.curve.last().unwrap().success_rate, r.success_rate);
    }

    #[test]
    fn no_successes_leaves_query_stats_empty() {
        let r = BenchmarkReport::from_records(vec![rec("a", true, false, Some(1))], 1, 3);
        assert_eq!(r.success_rate, 0.0);
        assert_eq!(r.mean_queries, None);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "image_id,attempted,success,queries,final_loss,wall_ms");
        assert!(text.lines().nth(1).unwrap().ends_with(','));
        let empty = BenchmarkReport::from_records(vec![rec("z", false, false, None)], 10, 2);
        assert_eq!((empty.attempted, empty.success_rate), (0, 0.0));
    }
}
