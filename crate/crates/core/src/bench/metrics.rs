use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const METRICS_COLUMNS: [&str; 15] = [
    "run_id",
    "seed",
    "experiment",
    "head_kind",
    "fusion_strategy",
    "denoise_steps",
    "chunk_h",
    "perturbation_kind",
    "perturbation_magnitude",
    "success_rate",
    "final_loss",
    "probe_rmse",
    "probe_absrel",
    "gate_mean_clean",
    "gate_mean_corrupted",
];

/// One metrics CSV row. Columns that do not apply to a row are empty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub experiment: String,
    pub head_kind: String,
    pub fusion_strategy: String,
    pub denoise_steps: Option<usize>,
    pub chunk_h: Option<usize>,
    pub perturbation_kind: String,
    pub perturbation_magnitude: Option<f64>,
    pub success_rate: Option<f64>,
    pub final_loss: Option<f64>,
    pub probe_rmse: Option<f64>,
    pub probe_absrel: Option<f64>,
    pub gate_mean_clean: Option<f64>,
    pub gate_mean_corrupted: Option<f64>,
}

fn opt<X: ToString>(x: &Option<X>) -> String {
    x.as_ref().map(|v| v.to_string()).unwrap_or_default()
}

fn parse_opt<X: std::str::FromStr>(s: &str, col: &str) -> Result<Option<X>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Format(format!("bad value `{s}` in column {col}")))
}

impl MetricsRow {
    pub fn fields(&self) -> [String; 15] {
        [
            self.run_id.clone(),
            self.seed.to_string(),
            self.experiment.clone(),
            self.head_kind.clone(),
            self.fusion_strategy.clone(),
            opt(&self.denoise_steps),
            opt(&self.chunk_h),
            self.perturbation_kind.clone(),
            opt(&self.perturbation_magnitude),
            opt(&self.success_rate),
            opt(&self.final_loss),
            opt(&self.probe_rmse),
            opt(&self.probe_absrel),
            opt(&self.gate_mean_clean),
            opt(&self.gate_mean_corrupted),
        ]
    }

    pub fn from_fields(f: &[&str]) -> Result<Self> {
        if f.len() != METRICS_COLUMNS.len() {
            return Err(Error::Format(format!("metrics row has {} fields, expected 15", f.len())));
        }
        let c = &METRICS_COLUMNS;
        Ok(Self {
            run_id: f[0].to_string(),
            seed: f[1].parse().map_err(|_| Error::Format(format!("bad seed `{}`", f[1])))?,
            experiment: f[2].to_string(),
            head_kind: f[3].to_string(),
            fusion_strategy: f[4].to_string(),
            denoise_steps: parse_opt(f[5], c[5])?,
            chunk_h: parse_opt(f[6], c[6])?,
            perturbation_kind: f[7].to_string(),
            perturbation_magnitude: parse_opt(f[8], c[8])?,
            success_rate: parse_opt(f[9], c[9])?,
            final_loss: parse_opt(f[10], c[10])?,
            probe_rmse: parse_opt(f[11], c[11])?,
            probe_absrel: parse_opt(f[12], c[12])?,
            gate_mean_clean: parse_opt(f[13], c[13])?,
            gate_mean_corrupted: parse_opt(f[14], c[14])?,
        })
    }
}

pub fn write_metrics(rows: &[MetricsRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_COLUMNS)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(input: impl Read) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != METRICS_COLUMNS {
        return Err(Error::Format(format!("unexpected metrics header {header:?}")));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            MetricsRow::from_fields(&rec.iter().collect::<Vec<_>>())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            MetricsRow {
                run_id: "a".into(),
                seed: 3,
                experiment: "ablate".into(),
                head_kind: "action".into(),
                denoise_steps: Some(4),
                chunk_h: Some(10),
                success_rate: Some(0.625),
                final_loss: Some(1.0 / 3.0),
                ..Default::default()
            },
            MetricsRow {
                run_id: "b, quoted".into(),
                gate_mean_clean: Some(0.7),
                gate_mean_corrupted: Some(0.2),
                ..Default::default()
            },
        ];
        let mut buf = Vec::new();
        write_metrics(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("run_id,seed,experiment,head_kind,fusion_strategy,denoise_steps,chunk_h,"));
        assert_eq!(read_metrics(buf.as_slice()).unwrap(), rows);
    }
}
