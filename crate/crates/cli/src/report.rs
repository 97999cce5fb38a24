//! CSV v1 result rows, per-(mode, budget) summaries and plot data.
//!
//! Numbers go through [`format_value`] (9 significant digits, `inf`/`nan`
//! spelled out), so files are byte-stable across runs and platforms.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use shadowstorm::attack::AttackMode;
use shadowstorm::metrics::{format_value, PerturbationNorms, RegionScores};

use crate::error::CliError;

pub const CSV_TAG: &str = "# shadowstorm-csv v1";

pub const COLUMNS: [&str; 21] = [
    "image_id",
    "mode",
    "epsilon_nominal",
    "epsilon_effective",
    "gt_psnr_all",
    "gt_psnr_shadow",
    "gt_psnr_nonshadow",
    "gt_ssim_all",
    "gt_ssim_shadow",
    "gt_ssim_nonshadow",
    "clean_psnr_all",
    "clean_psnr_shadow",
    "clean_psnr_nonshadow",
    "clean_ssim_all",
    "clean_ssim_shadow",
    "clean_ssim_nonshadow",
    "l1_mean",
    "linf",
    "linf_normalized",
    "iterations",
    "runtime_ms",
];

/// One attacked (image, mode, budget) cell.
///
/// `truth` scores compare the attacked output with the ground-truth shadow-free
/// image; `clean` scores compare it with the model's output on the clean input.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub image_id: String,
    pub mode: AttackMode,
    pub epsilon_nominal: f64,
    pub epsilon_effective: f64,
    pub truth: Option<RegionScores>,
    pub clean: RegionScores,
    pub norms: PerturbationNorms,
    pub iterations: usize,
    pub runtime_ms: Option<f64>,
}

fn scores_fields(s: Option<&RegionScores>) -> [String; 6] {
    match s {
        Some(s) => [
            s.psnr_all,
            s.psnr_shadow,
            s.psnr_nonshadow,
            s.ssim_all,
            s.ssim_shadow,
            s.ssim_nonshadow,
        ]
        .map(format_value),
        None => std::array::from_fn(|_| "nan".to_string()),
    }
}

impl ResultRow {
    pub fn fields(&self) -> Vec<String> {
        let mut out = vec![
            self.image_id.clone(),
            self.mode.to_string(),
            format_value(self.epsilon_nominal),
            format_value(self.epsilon_effective),
        ];
        out.extend(scores_fields(self.truth.as_ref()));
        out.extend(scores_fields(Some(&self.clean)));
        out.extend([self.norms.l1_mean, self.norms.linf, self.norms.linf_normalized].map(format_value));
        out.push(self.iterations.to_string());
        out.push(self.runtime_ms.map_or_else(|| "-".to_string(), format_value));
        out
    }

    fn sort_key(&self) -> (&str, AttackMode, f64) {
        (&self.image_id, self.mode, self.epsilon_nominal)
    }
}

/// Orders rows by `(image_id, mode, epsilon_nominal)`.
pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        let (ia, ma, ea) = a.sort_key();
        let (ib, mb, eb) = b.sort_key();
        ia.cmp(ib).then(ma.cmp(&mb)).then(ea.total_cmp(&eb))
    });
}

fn write_csv(
    path: &Path,
    comments: &[String],
    header: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<(), CliError> {
    let mut buf = Vec::new();
    for c in comments {
        buf.extend_from_slice(c.as_bytes());
        buf.push(b'\n');
    }
    {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
    }
    fs::write(path, buf).map_err(|e| CliError::io(path, e))
}

pub fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<(), CliError> {
    write_csv(
        path,
        &[CSV_TAG.to_string()],
        &COLUMNS,
        rows.iter().map(ResultRow::fields),
    )
}

/// Reads a v1 results file back into header and raw records.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    if !text.starts_with(CSV_TAG) {
        return Err(CliError::Io(format!("{}: missing {CSV_TAG:?} header", path.display())));
    }
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

/// `dir/stem<suffix>` next to `path`, e.g. `out.csv` -> `out.summary.csv`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

pub const SUMMARY_COLUMNS: [&str; 19] = [
    "mode",
    "epsilon_nominal",
    "images",
    "gt_psnr_all",
    "gt_psnr_shadow",
    "gt_psnr_nonshadow",
    "gt_ssim_all",
    "gt_ssim_shadow",
    "gt_ssim_nonshadow",
    "clean_psnr_all",
    "clean_psnr_shadow",
    "clean_psnr_nonshadow",
    "clean_ssim_all",
    "clean_ssim_shadow",
    "clean_ssim_nonshadow",
    "l1_mean",
    "linf",
    "linf_normalized",
    "epsilon_effective",
];

/// Arithmetic means over images for one `(mode, budget)` cell. Mode `clean`
/// (budget 0) holds the unattacked model's scores against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub mode: String,
    pub epsilon_nominal: f64,
    pub images: usize,
    /// Same order as the metric columns of [`SUMMARY_COLUMNS`] from
    /// `gt_psnr_all` to `epsilon_effective`.
    pub means: [f64; 16],
}

impl SummaryRow {
    pub fn gt_psnr(&self) -> [f64; 3] {
        [self.means[0], self.means[1], self.means[2]]
    }

    pub fn gt_ssim(&self) -> [f64; 3] {
        [self.means[3], self.means[4], self.means[5]]
    }

    fn fields(&self) -> Vec<String> {
        let mut out = vec![
            self.mode.clone(),
            format_value(self.epsilon_nominal),
            self.images.to_string(),
        ];
        out.extend(self.means.iter().map(|&v| format_value(v)));
        out
    }
}

fn row_values(r: &ResultRow) -> [f64; 16] {
    let t = r.truth.map_or([f64::NAN; 6], |s| {
        [
            s.psnr_all,
            s.psnr_shadow,
            s.psnr_nonshadow,
            s.ssim_all,
            s.ssim_shadow,
            s.ssim_nonshadow,
        ]
    });
    let c = &r.clean;
    [
        t[0],
        t[1],
        t[2],
        t[3],
        t[4],
        t[5],
        c.psnr_all,
        c.psnr_shadow,
        c.psnr_nonshadow,
        c.ssim_all,
        c.ssim_shadow,
        c.ssim_nonshadow,
        r.norms.l1_mean,
        r.norms.linf,
        r.norms.linf_normalized,
        r.epsilon_effective,
    ]
}

fn mean_of(values: &[[f64; 16]]) -> [f64; 16] {
    let n = values.len() as f64;
    std::array::from_fn(|k| values.iter().map(|v| v[k]).sum::<f64>() / n)
}

/// Clean-model rows first, then one row per `(mode, budget)` in sorted order.
pub fn summarize(rows: &[ResultRow], clean: &[RegionScores]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    if !clean.is_empty() {
        let vals: Vec<[f64; 16]> = clean
            .iter()
            .map(|s| {
                let inf = f64::INFINITY;
                [
                    s.psnr_all,
                    s.psnr_shadow,
                    s.psnr_nonshadow,
                    s.ssim_all,
                    s.ssim_shadow,
                    s.ssim_nonshadow,
                    inf,
                    inf,
                    inf,
                    1.0,
                    1.0,
                    1.0,
                    0.0,
                    0.0,
                    0.0,
                    0.0,
                ]
            })
            .collect();
        out.push(SummaryRow {
            mode: "clean".into(),
            epsilon_nominal: 0.0,
            images: clean.len(),
            means: mean_of(&vals),
        });
    }
    let mut groups: BTreeMap<(AttackMode, u64), Vec<[f64; 16]>> = BTreeMap::new();
    for r in rows {
        // non-negative floats order like their bit patterns
        groups
            .entry((r.mode, r.epsilon_nominal.to_bits()))
            .or_default()
            .push(row_values(r));
    }
    for ((mode, bits), vals) in groups {
        out.push(SummaryRow {
            mode: mode.to_string(),
            epsilon_nominal: f64::from_bits(bits),
            images: vals.len(),
            means: mean_of(&vals),
        });
    }
    out
}

pub fn write_summary(path: &Path, summary: &[SummaryRow], failures: &[String]) -> Result<(), CliError> {
    let mut comments = vec![
        CSV_TAG.to_string(),
        "# summary: arithmetic mean of per-image metrics for each (mode, epsilon_nominal)".to_string(),
    ];
    comments.extend(failures.iter().map(|f| format!("# failed: {f}")));
    write_csv(
        path,
        &comments,
        &SUMMARY_COLUMNS,
        summary.iter().map(SummaryRow::fields),
    )
}

/// Whitespace-separated budget-vs-quality columns against ground truth, one
/// block per mode (blocks separated by two blank lines), clean baseline first.
pub fn plot_text(summary: &[SummaryRow]) -> String {
    let mut s = String::from(
        "# shadowstorm-plot v1\n# epsilon psnr_all psnr_shadow psnr_nonshadow ssim_all ssim_shadow ssim_nonshadow\n",
    );
    let mut current: Option<&str> = None;
    for row in summary {
        if current != Some(row.mode.as_str()) {
            if current.is_some() {
                s.push_str("\n\n");
            }
            let _ = writeln!(s, "# mode {}", row.mode);
            current = Some(&row.mode);
        }
        let cols: Vec<String> = std::iter::once(row.epsilon_nominal)
            .chain(row.gt_psnr())
            .chain(row.gt_ssim())
            .map(format_value)
            .collect();
        let _ = writeln!(s, "{}", cols.join(" "));
    }
    s
}
