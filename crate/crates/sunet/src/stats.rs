//! Rater-agreement statistics: Williams' index with jackknife confidence
//! intervals, paired t-tests, and the median [IQR] report tables.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("need at least {need} samples, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("degenerate: identical offset")]
    IdenticalOffset,
    #[error("mean computer-to-observer disagreement is zero but raters disagree")]
    ZeroDenominator,
    #[error("unknown stage tag '{0}'")]
    UnknownStage(String),
    #[error("mismatched lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("malformed metric row: {0}")]
    BadRow(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Whether larger metric values mean more agreement (dice, jaccard) or more
/// disagreement (distances, fpd, fnd).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Agreement,
    Disagreement,
}

/// Per-image pairwise metric values: computer vs each of the 3 observers, and
/// the 3 observer pairs (1,2), (1,3), (2,3).
#[derive(Debug, Clone)]
pub struct AgreementTable {
    pub metric: String,
    pub direction: Direction,
    pub computer: Vec<[f64; 3]>,
    pub inter: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilliamsResult {
    pub index: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_images: usize,
}

/// Plain ratio on a subset of image indices; `None` when both means are zero.
fn wi_point(table: &AgreementTable, skip: Option<usize>) -> Option<f64> {
    let mut inter_sum = 0.0;
    let mut comp_sum = 0.0;
    let mut n = 0usize;
    for i in 0..table.computer.len() {
        if Some(i) == skip {
            continue;
        }
        let conv = |v: f64| match table.direction {
            Direction::Agreement => 1.0 - v,
            Direction::Disagreement => v,
        };
        inter_sum += table.inter[i].iter().map(|&v| conv(v)).sum::<f64>();
        comp_sum += table.computer[i].iter().map(|&v| conv(v)).sum::<f64>();
        n += 1;
    }
    // per-pair means share the same 1/(3n) factor, so the ratio of sums is
    // already [2/(n(n-1)) Σ D(j,j')] / [(1/n) Σ D(0,j)] for n = 3 raters
    let _ = n;
    if comp_sum == 0.0 {
        if inter_sum == 0.0 {
            return None; // all-zero disagreement: defined as perfect agreement
        }
        return Some(f64::INFINITY);
    }
    Some(inter_sum / comp_sum)
}

/// Williams' index: mean interobserver disagreement over mean
/// computer-to-observer disagreement, with a leave-one-image-out jackknife
/// 95% CI. All-zero disagreements read as WI = 1 with a point CI.
pub fn williams_index(table: &AgreementTable) -> Result<WilliamsResult, StatsError> {
    let n = table.computer.len();
    if table.inter.len() != n {
        return Err(StatsError::LengthMismatch(n, table.inter.len()));
    }
    if n < 2 {
        return Err(StatsError::TooFew { need: 2, got: n });
    }
    let full = match wi_point(table, None) {
        None => {
            return Ok(WilliamsResult { index: 1.0, ci_low: 1.0, ci_high: 1.0, n_images: n })
        }
        Some(v) if v.is_infinite() => return Err(StatsError::ZeroDenominator),
        Some(v) => v,
    };
    let mut pseudo = Vec::with_capacity(n);
    for i in 0..n {
        let loo = match wi_point(table, Some(i)) {
            None => 1.0,
            Some(v) if v.is_infinite() => return Err(StatsError::ZeroDenominator),
            Some(v) => v,
        };
        pseudo.push(n as f64 * full - (n - 1) as f64 * loo);
    }
    let mean = pseudo.iter().sum::<f64>() / n as f64;
    let var = pseudo.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    Ok(WilliamsResult {
        index: full,
        ci_low: full - 1.96 * se,
        ci_high: full + 1.96 * se,
        n_images: n,
    })
}

/// Two-sided paired Student's t-test on per-image values.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64), StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(StatsError::TooFew { need: 2, got: n });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::BadRow("non-finite value in paired t-test input".into()));
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        if mean == 0.0 {
            return Ok((0.0, 1.0));
        }
        return Err(StatsError::IdenticalOffset);
    }
    let t = mean * (n as f64).sqrt() / var.sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("df >= 1");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok((t, p))
}

/// Type-7 (linear interpolation) quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp); // NaNs (undefined distances) sort last
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn median_iqr(values: &[f64]) -> (f64, f64) {
    (quantile(values, 0.5), quantile(values, 0.75) - quantile(values, 0.25))
}

// ── metric rows (the crossval CSV schema) ───────────────────────────

pub const METRIC_HEADER: &str = "patient,image,stage,rater_a,rater_b,dice,jaccard,\
hausdorff_mm,mad_mm,smad_mm,fpd,fnd,area_a_cm2,area_b_cm2";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub patient: String,
    pub image: String,
    pub stage: String,
    pub rater_a: String,
    pub rater_b: String,
    pub dice: f64,
    pub jaccard: f64,
    pub hausdorff_mm: f64,
    pub mad_mm: f64,
    pub smad_mm: f64,
    pub fpd: f64,
    pub fnd: f64,
    pub area_a_cm2: f64,
    pub area_b_cm2: f64,
}

/// Format with 6 significant digits, plain decimal where reasonable.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0.00000".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-4..6).contains(&mag) {
        return format!("{:.5e}", x);
    }
    let decimals = (5 - mag).max(0) as usize;
    format!("{:.*}", decimals, x)
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        let nums = [
            self.dice,
            self.jaccard,
            self.hausdorff_mm,
            self.mad_mm,
            self.smad_mm,
            self.fpd,
            self.fnd,
            self.area_a_cm2,
            self.area_b_cm2,
        ];
        let mut line = format!(
            "{},{},{},{},{}",
            self.patient, self.image, self.stage, self.rater_a, self.rater_b
        );
        for v in nums {
            line.push(',');
            line.push_str(&fmt_sig6(v));
        }
        line
    }

    pub fn from_csv(line: &str) -> Result<MetricRow, StatsError> {
        let parts: Vec<&str> = line.trim_end().split(',').collect();
        if parts.len() != 14 {
            return Err(StatsError::BadRow(format!("{} fields in '{line}'", parts.len())));
        }
        let num = |i: usize| -> Result<f64, StatsError> {
            parts[i].parse().map_err(|e| StatsError::BadRow(format!("field {i}: {e}")))
        };
        Ok(MetricRow {
            patient: parts[0].into(),
            image: parts[1].into(),
            stage: parts[2].into(),
            rater_a: parts[3].into(),
            rater_b: parts[4].into(),
            dice: num(5)?,
            jaccard: num(6)?,
            hausdorff_mm: num(7)?,
            mad_mm: num(8)?,
            smad_mm: num(9)?,
            fpd: num(10)?,
            fnd: num(11)?,
            area_a_cm2: num(12)?,
            area_b_cm2: num(13)?,
        })
    }

    pub fn is_computer(&self) -> bool {
        self.rater_a == "computer"
    }

    fn image_key(&self) -> (String, String) {
        (self.patient.clone(), self.image.clone())
    }
}

pub fn write_metric_csv(path: &Path, rows: &[MetricRow]) -> Result<(), StatsError> {
    let mut out = String::from(METRIC_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_metric_csv(path: &Path) -> Result<Vec<MetricRow>, StatsError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRIC_HEADER => {}
        other => return Err(StatsError::BadRow(format!("bad header: {other:?}"))),
    }
    lines.map(MetricRow::from_csv).collect()
}

pub const METRIC_NAMES: [&str; 7] =
    ["dice", "jaccard", "hausdorff_mm", "mad_mm", "smad_mm", "fpd", "fnd"];

fn metric_value(row: &MetricRow, name: &str) -> f64 {
    match name {
        "dice" => row.dice,
        "jaccard" => row.jaccard,
        "hausdorff_mm" => row.hausdorff_mm,
        "mad_mm" => row.mad_mm,
        "smad_mm" => row.smad_mm,
        "fpd" => row.fpd,
        "fnd" => row.fnd,
        _ => unreachable!("unknown metric {name}"),
    }
}

pub fn metric_direction(name: &str) -> Direction {
    match name {
        "dice" | "jaccard" => Direction::Agreement,
        _ => Direction::Disagreement,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportLine {
    pub metric: String,
    pub group: String, // "computer" or "interobserver"
    pub median: f64,
    pub iqr: f64,
}

impl ReportLine {
    pub fn formatted(&self) -> String {
        format!("{} [{}]", fmt_sig6(self.median), fmt_sig6(self.iqr))
    }
}

/// Median [IQR] per metric for the computer-to-observer rows and the
/// interobserver rows.
pub fn aggregate_report(rows: &[MetricRow]) -> Vec<ReportLine> {
    let mut out = Vec::new();
    for (group, keep) in [
        ("computer", true),
        ("interobserver", false),
    ] {
        let sel: Vec<&MetricRow> = rows.iter().filter(|r| r.is_computer() == keep).collect();
        if sel.is_empty() {
            continue;
        }
        for name in METRIC_NAMES {
            let vals: Vec<f64> = sel.iter().map(|r| metric_value(r, name)).collect();
            let (median, iqr) = median_iqr(&vals);
            out.push(ReportLine { metric: name.into(), group: group.into(), median, iqr });
        }
    }
    out
}

/// Collect per-image (computer triple, interobserver triple) values for a
/// metric; images missing either triple are skipped.
pub fn build_agreement_table(rows: &[MetricRow], metric: &str) -> AgreementTable {
    let mut by_image: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let entry = by_image.entry(r.image_key()).or_default();
        let v = metric_value(r, metric);
        if r.is_computer() {
            entry.0.push(v);
        } else {
            entry.1.push(v);
        }
    }
    let mut computer = Vec::new();
    let mut inter = Vec::new();
    for (comp, int) in by_image.values() {
        if comp.len() == 3 && int.len() == 3 {
            computer.push([comp[0], comp[1], comp[2]]);
            inter.push([int[0], int[1], int[2]]);
        }
    }
    AgreementTable {
        metric: metric.into(),
        direction: metric_direction(metric),
        computer,
        inter,
    }
}

/// Same layout, but the disagreement is the absolute area difference in cm².
fn area_agreement_table(rows: &[MetricRow]) -> AgreementTable {
    let mut by_image: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let entry = by_image.entry(r.image_key()).or_default();
        let d = (r.area_a_cm2 - r.area_b_cm2).abs();
        if r.is_computer() {
            entry.0.push(d);
        } else {
            entry.1.push(d);
        }
    }
    let mut computer = Vec::new();
    let mut inter = Vec::new();
    for (comp, int) in by_image.values() {
        if comp.len() == 3 && int.len() == 3 {
            computer.push([comp[0], comp[1], comp[2]]);
            inter.push([int[0], int[1], int[2]]);
        }
    }
    AgreementTable {
        metric: "area_diff_cm2".into(),
        direction: Direction::Disagreement,
        computer,
        inter,
    }
}

pub const STAGES: [&str; 3] = ["rest", "valsalva", "contraction"];

#[derive(Debug, Clone)]
pub struct StageAreaRow {
    pub stage: String,
    pub c2o_mean: f64,
    pub c2o_sd: f64,
    pub inter_mean: f64,
    pub inter_sd: f64,
    pub williams: Option<WilliamsResult>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Per-stage mean ± SD of absolute area differences, with a Williams' index
/// over the per-stage images (None when a stage has < 2 images).
pub fn stage_area_analysis(rows: &[MetricRow]) -> Result<Vec<StageAreaRow>, StatsError> {
    for r in rows {
        if !STAGES.contains(&r.stage.as_str()) {
            return Err(StatsError::UnknownStage(r.stage.clone()));
        }
    }
    let mut out = Vec::new();
    for stage in STAGES {
        let sel: Vec<MetricRow> =
            rows.iter().filter(|r| r.stage == stage).cloned().collect();
        if sel.is_empty() {
            continue;
        }
        let c2o: Vec<f64> = sel
            .iter()
            .filter(|r| r.is_computer())
            .map(|r| (r.area_a_cm2 - r.area_b_cm2).abs())
            .collect();
        let inter: Vec<f64> = sel
            .iter()
            .filter(|r| !r.is_computer())
            .map(|r| (r.area_a_cm2 - r.area_b_cm2).abs())
            .collect();
        if c2o.is_empty() || inter.is_empty() {
            continue;
        }
        let (cm, cs) = mean_sd(&c2o);
        let (im, is) = mean_sd(&inter);
        let williams = williams_index(&area_agreement_table(&sel)).ok();
        out.push(StageAreaRow {
            stage: stage.into(),
            c2o_mean: cm,
            c2o_sd: cs,
            inter_mean: im,
            inter_sd: is,
            williams,
        })
    }
    Ok(out)
}

/// Per-image mean of a metric over the computer-to-observer rows, keyed and
/// ordered by (patient, image); used for paired method comparisons.
pub fn per_image_means(rows: &[MetricRow], metric: &str) -> BTreeMap<(String, String), f64> {
    let mut by_image: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.is_computer()) {
        by_image.entry(r.image_key()).or_default().push(metric_value(r, metric));
    }
    by_image
        .into_iter()
        .map(|(k, v)| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (k, m)
        })
        .collect()
}

/// Emit table1..table4 (and ttests.csv when two methods are given) into
/// `out_dir`.
pub fn write_tables(
    out_dir: &Path,
    methods: &[(String, Vec<MetricRow>)],
) -> Result<(), StatsError> {
    fs::create_dir_all(out_dir)?;

    // table1: computer-to-observer median [IQR] per method
    let mut t1 = fs::File::create(out_dir.join("table1.csv"))?;
    writeln!(t1, "method,metric,median,iqr,formatted")?;
    for (method, rows) in methods {
        for line in aggregate_report(rows).iter().filter(|l| l.group == "computer") {
            writeln!(
                t1,
                "{method},{},{},{},{}",
                line.metric,
                fmt_sig6(line.median),
                fmt_sig6(line.iqr),
                line.formatted()
            )?;
        }
    }

    // table2: interobserver agreement (identical across methods; use the first)
    let mut t2 = fs::File::create(out_dir.join("table2.csv"))?;
    writeln!(t2, "metric,median,iqr,formatted")?;
    if let Some((_, rows)) = methods.first() {
        for line in aggregate_report(rows).iter().filter(|l| l.group == "interobserver") {
            writeln!(
                t2,
                "{},{},{},{}",
                line.metric,
                fmt_sig6(line.median),
                fmt_sig6(line.iqr),
                line.formatted()
            )?;
        }
    }

    // table3: Williams' index with 95% CI per metric per method
    let mut t3 = fs::File::create(out_dir.join("table3.csv"))?;
    writeln!(t3, "method,metric,williams_index,ci_low,ci_high,n_images,contains_one")?;
    for (method, rows) in methods {
        for name in METRIC_NAMES {
            let table = build_agreement_table(rows, name);
            match williams_index(&table) {
                Ok(w) => writeln!(
                    t3,
                    "{method},{name},{},{},{},{},{}",
                    fmt_sig6(w.index),
                    fmt_sig6(w.ci_low),
                    fmt_sig6(w.ci_high),
                    w.n_images,
                    w.ci_low <= 1.0 && 1.0 <= w.ci_high
                )?,
                Err(e) => writeln!(t3, "{method},{name},error: {e},,,,")?,
            }
        }
    }

    // table4: per-stage area differences
    let mut t4 = fs::File::create(out_dir.join("table4.csv"))?;
    writeln!(
        t4,
        "method,stage,c2o_mean_cm2,c2o_sd_cm2,inter_mean_cm2,inter_sd_cm2,\
williams_index,ci_low,ci_high"
    )?;
    for (method, rows) in methods {
        for s in stage_area_analysis(rows)? {
            let (wi, lo, hi) = match s.williams {
                Some(w) => (fmt_sig6(w.index), fmt_sig6(w.ci_low), fmt_sig6(w.ci_high)),
                None => (String::new(), String::new(), String::new()),
            };
            writeln!(
                t4,
                "{method},{},{},{},{},{},{wi},{lo},{hi}",
                s.stage,
                fmt_sig6(s.c2o_mean),
                fmt_sig6(s.c2o_sd),
                fmt_sig6(s.inter_mean),
                fmt_sig6(s.inter_sd)
            )?;
        }
    }

    // paired t-tests on per-image means between the first two methods
    if methods.len() >= 2 {
        let (name_a, rows_a) = &methods[0];
        let (name_b, rows_b) = &methods[1];
        let mut tt = fs::File::create(out_dir.join("ttests.csv"))?;
        writeln!(tt, "method_a,method_b,metric,t,p,n_images")?;
        for metric in METRIC_NAMES {
            let ma = per_image_means(rows_a, metric);
            let mb = per_image_means(rows_b, metric);
            let mut a = Vec::new();
            let mut b = Vec::new();
            for (k, va) in &ma {
                if let Some(vb) = mb.get(k) {
                    a.push(*va);
                    b.push(*vb);
                }
            }
            match paired_t_test(&a, &b) {
                Ok((t, p)) => writeln!(
                    tt,
                    "{name_a},{name_b},{metric},{},{},{}",
                    fmt_sig6(t),
                    fmt_sig6(p),
                    a.len()
                )?,
                Err(e) => writeln!(tt, "{name_a},{name_b},{metric},error: {e},,{}", a.len())?,
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(computer: Vec<[f64; 3]>, inter: Vec<[f64; 3]>) -> AgreementTable {
        AgreementTable {
            metric: "test".into(),
            direction: Direction::Disagreement,
            computer,
            inter,
        }
    }

    /// Independent re-aggregation straight from the definition.
    fn brute_force_wi(t: &AgreementTable) -> f64 {
        let n = t.computer.len() as f64;
        let conv = |v: f64| match t.direction {
            Direction::Agreement => 1.0 - v,
            Direction::Disagreement => v,
        };
        let mut d_inter = [0.0; 3];
        let mut d_comp = [0.0; 3];
        for i in 0..t.computer.len() {
            for j in 0..3 {
                d_inter[j] += conv(t.inter[i][j]) / n;
                d_comp[j] += conv(t.computer[i][j]) / n;
            }
        }
        let num = 2.0 / (3.0 * 2.0) * d_inter.iter().sum::<f64>();
        let den = d_comp.iter().sum::<f64>() / 3.0;
        num / den
    }

    #[test]
    fn williams_symmetric_is_one() {
        let rows = vec![[2.0; 3]; 5];
        let w = williams_index(&table(rows.clone(), rows)).unwrap();
        assert!((w.index - 1.0).abs() < 1e-15);
        assert!((w.ci_low - 1.0).abs() < 1e-12);
        assert!((w.ci_high - 1.0).abs() < 1e-12);
    }

    #[test]
    fn williams_two_to_one_ratio() {
        let comp = vec![[4.0; 3]; 6];
        let inter = vec![[2.0; 3]; 6];
        let t = table(comp, inter);
        let w = williams_index(&t).unwrap();
        assert!((w.index - 0.5).abs() < 1e-15);
        assert!((w.index - brute_force_wi(&t)).abs() < 1e-12);
    }

    #[test]
    fn williams_matches_brute_force_on_random_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(2..12);
            let gen = |rng: &mut ChaCha8Rng| {
                (0..n)
                    .map(|_| [rng.gen_range(0.1..3.0), rng.gen_range(0.1..3.0), rng.gen_range(0.1..3.0)])
                    .collect::<Vec<_>>()
            };
            let t = table(gen(&mut rng), gen(&mut rng));
            let w = williams_index(&t).unwrap();
            assert!((w.index - brute_force_wi(&t)).abs() < 1e-12);
            assert!(w.ci_low <= w.index && w.index <= w.ci_high);
        }
    }

    #[test]
    fn williams_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gen = |rng: &mut ChaCha8Rng| {
            (0..7)
                .map(|_| [rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0)])
                .collect::<Vec<[f64; 3]>>()
        };
        let comp = gen(&mut rng);
        let inter = gen(&mut rng);
        let base = williams_index(&table(comp.clone(), inter.clone())).unwrap();
        let scale = |v: &[[f64; 3]]| {
            v.iter().map(|r| [r[0] * 7.5, r[1] * 7.5, r[2] * 7.5]).collect::<Vec<_>>()
        };
        let scaled = williams_index(&table(scale(&comp), scale(&inter))).unwrap();
        assert_eq!(base.index, scaled.index);
    }

    #[test]
    fn williams_degenerate_and_errors() {
        let zero = vec![[0.0; 3]; 4];
        let w = williams_index(&table(zero.clone(), zero.clone())).unwrap();
        assert_eq!((w.index, w.ci_low, w.ci_high), (1.0, 1.0, 1.0));

        // raters disagree but the computer matches everyone exactly: undefined
        let r = williams_index(&table(zero, vec![[1.0; 3]; 4]));
        assert!(matches!(r, Err(StatsError::ZeroDenominator)));

        let one = vec![[1.0; 3]; 1];
        assert!(matches!(
            williams_index(&table(one.clone(), one)),
            Err(StatsError::TooFew { .. })
        ));
    }

    #[test]
    fn williams_agreement_direction_converts() {
        // dice 0.9 computer vs 0.8 inter → disagreements 0.1 vs 0.2 → WI 2.0
        let t = AgreementTable {
            metric: "dice".into(),
            direction: Direction::Agreement,
            computer: vec![[0.9; 3]; 4],
            inter: vec![[0.8; 3]; 4],
        };
        let w = williams_index(&t).unwrap();
        assert!((w.index - 2.0).abs() < 1e-12);
    }

    #[test]
    fn jackknife_se_shrinks_with_replication() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let base: Vec<([f64; 3], [f64; 3])> = (0..4)
            .map(|_| {
                (
                    [rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5)],
                    [rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5)],
                )
            })
            .collect();
        let se_at = |reps: usize| {
            let comp: Vec<[f64; 3]> =
                base.iter().cycle().take(4 * reps).map(|(c, _)| *c).collect();
            let inter: Vec<[f64; 3]> =
                base.iter().cycle().take(4 * reps).map(|(_, i)| *i).collect();
            let w = williams_index(&table(comp, inter)).unwrap();
            (w.ci_high - w.index) / 1.96
        };
        let (s4, s16, s64) = (se_at(1), se_at(4), se_at(16));
        // SE should follow ~1/sqrt(n) on replicated data
        assert!((s4 / s16 - 2.0).abs() < 0.6, "s4/s16 = {}", s4 / s16);
        assert!((s16 / s64 - 2.0).abs() < 0.6, "s16/s64 = {}", s16 / s64);
    }

    #[test]
    fn t_test_examples() {
        // differences [1,2,3]: t = 2*sqrt(3), df 2, p ≈ 0.0742
        let a = [1.0, 2.0, 3.0];
        let b = [0.0, 0.0, 0.0];
        let (t, p) = paired_t_test(&a, &b).unwrap();
        assert!((t - 2.0 * 3.0_f64.sqrt()).abs() < 1e-12);
        let exact = 2.0 * (0.5 - t / (2.0 * (2.0 + t * t).sqrt()));
        assert!((p - exact).abs() < 5e-4, "p = {p}, exact = {exact}");
        assert!((p - 0.0742).abs() < 5e-4);

        // differences [1, -1]: t = 0, p = 1
        let (t, p) = paired_t_test(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(t, 0.0);
        assert!((p - 1.0).abs() < 1e-12);

        // identical inputs: convention p = 1
        let (t, p) = paired_t_test(&[0.3, 0.4, 0.5], &[0.3, 0.4, 0.5]).unwrap();
        assert_eq!((t, p), (0.0, 1.0));

        // constant nonzero offset is degenerate
        assert!(matches!(
            paired_t_test(&[1.0, 2.0], &[0.0, 1.0]),
            Err(StatsError::IdenticalOffset)
        ));
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn t_test_antisymmetry() {
        let a = [0.91, 0.85, 0.88, 0.95, 0.79];
        let b = [0.89, 0.88, 0.83, 0.92, 0.84];
        let (t1, p1) = paired_t_test(&a, &b).unwrap();
        let (t2, p2) = paired_t_test(&b, &a).unwrap();
        assert!((t1 + t2).abs() < 1e-12);
        assert!((p1 - p2).abs() < 1e-12);
    }

    #[test]
    fn quantiles_type7() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (m, iqr) = median_iqr(&v);
        assert_eq!(m, 3.0);
        assert_eq!(iqr, 2.0);
        assert_eq!(median_iqr(&[7.0]), (7.0, 0.0));
        assert_eq!(median_iqr(&[2.5; 9]), (2.5, 0.0));
        // interpolated case: {1,2,3,4} → q1 = 1.75, q3 = 3.25
        let (m, iqr) = median_iqr(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!(m, 2.5);
        assert!((iqr - 1.5).abs() < 1e-12);
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(fmt_sig6(0.0), "0.00000");
        assert_eq!(fmt_sig6(0.123456789), "0.123457");
        assert_eq!(fmt_sig6(1.0), "1.00000");
        assert_eq!(fmt_sig6(-3.14159265), "-3.14159");
        assert_eq!(fmt_sig6(123456.7), "123457");
        assert_eq!(fmt_sig6(0.000123456), "0.000123456");
    }

    fn row(patient: &str, image: &str, stage: &str, a: &str, b: &str, dice: f64) -> MetricRow {
        MetricRow {
            patient: patient.into(),
            image: image.into(),
            stage: stage.into(),
            rater_a: a.into(),
            rater_b: b.into(),
            dice,
            jaccard: dice / (2.0 - dice),
            hausdorff_mm: 3.0 * (1.0 - dice),
            mad_mm: 1.5 * (1.0 - dice),
            smad_mm: 1.0 * (1.0 - dice),
            fpd: 1.0 - dice,
            fnd: 1.0 - dice,
            area_a_cm2: 10.0,
            area_b_cm2: 10.0 + (1.0 - dice),
        }
    }

    fn image_rows(patient: &str, image: &str, stage: &str, c_dice: f64, i_dice: f64) -> Vec<MetricRow> {
        vec![
            row(patient, image, stage, "computer", "op1", c_dice),
            row(patient, image, stage, "computer", "op2", c_dice),
            row(patient, image, stage, "computer", "op3", c_dice),
            row(patient, image, stage, "op1", "op2", i_dice),
            row(patient, image, stage, "op1", "op3", i_dice),
            row(patient, image, stage, "op2", "op3", i_dice),
        ]
    }

    #[test]
    fn csv_round_trip() {
        let rows = image_rows("p1", "img0", "rest", 0.9, 0.92);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metric_csv(&path, &rows).unwrap();
        let back = read_metric_csv(&path).unwrap();
        assert_eq!(back.len(), rows.len());
        assert_eq!(back[0].patient, "p1");
        assert!((back[0].dice - 0.9).abs() < 1e-5);
        assert!(MetricRow::from_csv("a,b,c").is_err());
    }

    #[test]
    fn aggregate_report_groups_and_medians() {
        let mut rows = image_rows("p1", "i0", "rest", 0.8, 0.9);
        rows.extend(image_rows("p1", "i1", "rest", 0.9, 0.9));
        rows.extend(image_rows("p2", "i2", "valsalva", 1.0, 0.9));
        let report = aggregate_report(&rows);
        let dice_c = report
            .iter()
            .find(|l| l.metric == "dice" && l.group == "computer")
            .unwrap();
        assert!((dice_c.median - 0.9).abs() < 1e-12);
        let dice_i = report
            .iter()
            .find(|l| l.metric == "dice" && l.group == "interobserver")
            .unwrap();
        assert!((dice_i.median - 0.9).abs() < 1e-12);
        assert_eq!(dice_i.iqr, 0.0);
        assert_eq!(report.len(), 14);
    }

    #[test]
    fn stage_analysis_hand_check() {
        // two rest images with c2o area diffs {0.5, 1.5} per operator pair
        let mut rows = Vec::new();
        for (img, diff) in [("i0", 0.5), ("i1", 1.5)] {
            for op in ["op1", "op2", "op3"] {
                let mut r = row("p1", img, "rest", "computer", op, 0.9);
                r.area_b_cm2 = r.area_a_cm2 + diff;
                rows.push(r);
            }
            for (a, b) in [("op1", "op2"), ("op1", "op3"), ("op2", "op3")] {
                let mut r = row("p1", img, "rest", a, b, 0.92);
                r.area_b_cm2 = r.area_a_cm2 + diff;
                rows.push(r);
            }
        }
        let out = stage_area_analysis(&rows).unwrap();
        assert_eq!(out.len(), 1);
        let s = &out[0];
        assert_eq!(s.stage, "rest");
        assert!((s.c2o_mean - 1.0).abs() < 1e-12);
        // six values {0.5 x3, 1.5 x3}: sd = sqrt(6*0.25/5)
        assert!((s.c2o_sd - (1.5f64 / 5.0).sqrt()).abs() < 1e-12);
        let w = s.williams.unwrap();
        assert!((w.index - 1.0).abs() < 1e-12);

        let bad = vec![row("p", "i", "sitting", "computer", "op1", 0.9)];
        assert!(matches!(stage_area_analysis(&bad), Err(StatsError::UnknownStage(_))));
    }

    #[test]
    fn computer_copy_of_operator_one() {
        // computer == op1: d(0,1) = 0, d(0,2) = d(1,2), d(0,3) = d(1,3)
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 10;
        let inter: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0)])
            .collect();
        let comp: Vec<[f64; 3]> = inter.iter().map(|i| [0.0, i[0], i[1]]).collect();
        let t = table(comp, inter);
        let w = williams_index(&t).unwrap();
        assert!((w.index - brute_force_wi(&t)).abs() < 1e-12);
    }

    #[test]
    fn tables_written_and_parse() {
        let mut rows = image_rows("p1", "i0", "rest", 0.8, 0.9);
        rows.extend(image_rows("p1", "i1", "valsalva", 0.85, 0.9));
        rows.extend(image_rows("p2", "i2", "contraction", 0.9, 0.88));
        let mut rows_b = rows.clone();
        for r in &mut rows_b {
            r.dice = (r.dice - 0.05).max(0.0);
        }
        let dir = tempfile::tempdir().unwrap();
        write_tables(dir.path(), &[("sunet".into(), rows), ("unet".into(), rows_b)]).unwrap();
        for name in ["table1.csv", "table2.csv", "table3.csv", "table4.csv", "ttests.csv"] {
            let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
            assert!(text.lines().count() >= 2, "{name} empty");
        }
        let t1 = std::fs::read_to_string(dir.path().join("table1.csv")).unwrap();
        assert_eq!(t1.lines().count(), 1 + 2 * 7);
        let tt = std::fs::read_to_string(dir.path().join("ttests.csv")).unwrap();
        assert!(tt.contains("sunet,unet,dice,"));
    }
}
