use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;

/// 17 significant digits in scientific notation; round-trips every finite
/// `f64`.
fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format(path, format!("{other:?}")),
    }
}

pub fn write_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(MetricsRecord::HEADER)
        .map_err(|e| csv_error(path, e))?;
    for r in records {
        let mut row = vec![r.iteration.to_string(), r.setup.clone(), r.seed.to_string()];
        row.extend(r.values().iter().map(|&v| fmt_real(v)));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().ne(MetricsRecord::HEADER) {
        return Err(Error::format(path, "unexpected metrics header"));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let field = |i: usize| row.get(i).unwrap_or_default();
        let real = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| Error::format(path, format!("bad number `{}`", field(i))))
        };
        let int = |i: usize| -> Result<u64> {
            field(i)
                .parse()
                .map_err(|_| Error::format(path, format!("bad integer `{}`", field(i))))
        };
        out.push(MetricsRecord {
            iteration: int(0)? as usize,
            setup: field(1).to_string(),
            seed: int(2)?,
            accuracy: real(3)?,
            loss: real(4)?,
            avg_entropy: real(5)?,
            avg_convergence: real(6)?,
            jaccard: real(7)?,
            match_rate: real(8)?,
            unique_proportion: real(9)?,
            unique_messages: real(10)?,
            topo_sim: real(11)?,
        });
    }
    Ok(out)
}

/// Mean and sample standard deviation across seeds of one metric column.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub iteration: usize,
    pub setup: String,
    pub seeds: usize,
    pub mean: [f64; 9],
    pub std: [f64; 9],
}

/// Groups records by (setup, iteration) in order of first appearance of
/// the setup.
pub fn aggregate(records: &[MetricsRecord]) -> Vec<AggregateRow> {
    let mut setups: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<(usize, usize), Vec<[f64; 9]>> = BTreeMap::new();
    for r in records {
        let s = match setups.iter().position(|&s| s == r.setup) {
            Some(i) => i,
            None => {
                setups.push(&r.setup);
                setups.len() - 1
            }
        };
        groups.entry((s, r.iteration)).or_default().push(r.values());
    }
    groups
        .into_iter()
        .map(|((s, iteration), rows)| {
            let n = rows.len() as f64;
            let mut mean = [0.0; 9];
            let mut std = [0.0; 9];
            for c in 0..9 {
                mean[c] = rows.iter().map(|r| r[c]).sum::<f64>() / n;
                if rows.len() > 1 {
                    let ss: f64 = rows.iter().map(|r| (r[c] - mean[c]).powi(2)).sum();
                    std[c] = (ss / (n - 1.0)).sqrt();
                }
            }
            AggregateRow {
                iteration,
                setup: setups[s].to_string(),
                seeds: rows.len(),
                mean,
                std,
            }
        })
        .collect()
}

pub fn write_aggregate_csv(rows: &[AggregateRow], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["iteration".to_string(), "setup".into(), "seeds".into()];
    for name in &MetricsRecord::HEADER[3..] {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_std"));
    }
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        let mut row = vec![r.iteration.to_string(), r.setup.clone(), r.seeds.to_string()];
        for c in 0..9 {
            row.push(fmt_real(r.mean[c]));
            row.push(fmt_real(r.std[c]));
        }
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(iteration: usize, seed: u64, x: f64) -> MetricsRecord {
        MetricsRecord {
            iteration,
            setup: "cu-best".into(),
            seed,
            accuracy: x,
            loss: 1.0 / 3.0,
            avg_entropy: 1e-300,
            avg_convergence: -0.0,
            jaccard: 0.1,
            match_rate: 1.0,
            unique_proportion: 0.25,
            unique_messages: 162.0,
            topo_sim: -0.12345678901234568,
        }
    }

    #[test]
    fn empty_file_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_metrics_csv(&[], &p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "iteration,setup,seed,accuracy,loss,avg_entropy,avg_convergence,jaccard,match_rate,unique_proportion,unique_messages,topo_sim\n"
        );
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let recs = vec![record(100, 0, 0.7), record(200, 1, std::f64::consts::PI)];
        write_metrics_csv(&recs, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(!text.contains('\r'));
        assert!(text.lines().all(|l| l.split(',').count() == 12));
        let back = read_metrics_csv(&p).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(a.iteration, b.iteration);
            assert_eq!(a.setup, b.setup);
            assert_eq!(a.seed, b.seed);
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn aggregate_mean_and_std() {
        let recs = vec![record(10, 0, 1.0), record(10, 1, 3.0), record(20, 0, 5.0)];
        let agg = aggregate(&recs);
        assert_eq!(agg.len(), 2);
        assert_eq!((agg[0].iteration, agg[0].seeds), (10, 2));
        assert_eq!(agg[0].mean[0], 2.0);
        assert!((agg[0].std[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(agg[1].std[0], 0.0);
    }
}
