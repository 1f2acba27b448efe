use serde::{Deserialize, Serialize};

/// One defense in one repetition. Missing values render as "n/a".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub defense: String,
    pub repetition: usize,
    pub iterations_to_collapse: Option<f64>,
    pub modes: Option<f64>,
    pub gc: Option<f64>,
    pub wer: Option<f64>,
    pub sla: Option<f64>,
    pub seg_snr: Option<f64>,
    pub stoi: Option<f64>,
}

impl ReportRow {
    pub fn empty(defense: &str, repetition: usize) -> Self {
        Self {
            defense: defense.to_string(),
            repetition,
            iterations_to_collapse: None,
            modes: None,
            gc: None,
            wer: None,
            sla: None,
            seg_snr: None,
            stoi: None,
        }
    }

    fn values(&self) -> [Option<f64>; 7] {
        [
            self.iterations_to_collapse,
            self.modes,
            self.gc,
            self.wer,
            self.sla,
            self.seg_snr,
            self.stoi,
        ]
    }
}

pub const COLUMNS: [&str; 7] = ["Iteration", "Modes", "GC", "WER", "SLA", "segSNR", "STOI"];

const NA: &str = "n/a";

fn fmt_value(col: usize, v: f64) -> String {
    if COLUMNS[col] == "GC" && v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.2}")
    }
}

/// Mean and sample standard deviation of the present values; a value that
/// is missing in any repetition makes the column "n/a" for that defense.
fn summarise(vals: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let Some(v) = vals.iter().copied().collect::<Option<Vec<f64>>>() else {
        return (None, None);
    };
    if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.len() > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

/// Aggregated cells for one defense: (mean, std) strings per column.
pub fn aggregate(rows: &[ReportRow]) -> Vec<(String, Vec<(String, String)>)> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.defense.as_str()) {
            order.push(&r.defense);
        }
    }
    order
        .into_iter()
        .map(|name| {
            let group: Vec<&ReportRow> = rows.iter().filter(|r| r.defense == name).collect();
            let cells = (0..COLUMNS.len())
                .map(|c| {
                    let vals: Vec<Option<f64>> = group.iter().map(|r| r.values()[c]).collect();
                    let (m, s) = summarise(&vals);
                    (
                        m.map_or(NA.to_string(), |m| fmt_value(c, m)),
                        s.map_or(NA.to_string(), |s| format!("{s:.2}")),
                    )
                })
                .collect();
            (name.to_string(), cells)
        })
        .collect()
}

/// CSV (mean and std column per metric) and an aligned text table.
pub fn render_report(rows: &[ReportRow]) -> (String, String) {
    let agg = aggregate(rows);
    let mut csv = String::from("defense");
    for c in COLUMNS {
        csv.push_str(&format!(",{c}_mean,{c}_std"));
    }
    csv.push('\n');
    for (name, cells) in &agg {
        csv.push_str(name);
        for (m, s) in cells {
            csv.push_str(&format!(",{m},{s}"));
        }
        csv.push('\n');
    }

    let mut table: Vec<Vec<String>> = vec![std::iter::once("Defense".to_string())
        .chain(COLUMNS.iter().map(|c| c.to_string()))
        .collect()];
    for (name, cells) in &agg {
        let mut line = vec![name.clone()];
        line.extend(cells.iter().map(|(m, s)| if s == NA { m.clone() } else { format!("{m} ± {s}") }));
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for (i, r) in table.iter().enumerate() {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, v)| {
                let pad = widths[c] - v.chars().count();
                if c == 0 {
                    format!("{v}{}", " ".repeat(pad))
                } else {
                    format!("{}{v}", " ".repeat(pad))
                }
            })
            .collect();
        text.push_str(cells.join("  ").trim_end());
        text.push('\n');
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            text.push_str(&"-".repeat(total));
            text.push('\n');
        }
    }
    (csv, text)
}
