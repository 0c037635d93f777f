//! Overlap and surface-distance metrics, coefficient of variation and report
//! assembly.
//!
//! Surfaces are 6-connected: a foreground voxel belongs to the surface when
//! at least one face neighbour is background or outside the grid. HD95 and
//! ASD both work on the pooled multiset of directed surface distances
//! (A to B and B to A) measured in millimetres.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::saliency::squared_distance_transform;
use crate::volume::Mask3;

/// Dice similarity coefficient. Two empty masks score 1, an empty mask
/// against a non-empty one scores 0.
pub fn dsc(a: &Mask3, b: &Mask3) -> Result<f64> {
    a.geometry().ensure_same(b.geometry(), "dsc")?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x != 0, y != 0);
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

const FACE_NEIGHBORS: [[i64; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

/// Foreground voxels with at least one background (or out-of-grid) face
/// neighbour, in scan order.
pub fn surface_voxels(m: &Mask3) -> Vec<[usize; 3]> {
    let g = m.geometry();
    let mut out = Vec::new();
    for i in 0..g.len() {
        if !m.get_flat(i) {
            continue;
        }
        let c = g.coords(i);
        let on_surface = FACE_NEIGHBORS.iter().any(|o| {
            let p = [c[0] as i64 + o[0], c[1] as i64 + o[1], c[2] as i64 + o[2]];
            !g.contains(p) || !m.get(p[0] as usize, p[1] as usize, p[2] as usize)
        });
        if on_surface {
            out.push(c);
        }
    }
    out
}

/// Distance (mm) from each voxel of `from` to the nearest voxel of `to`.
fn directed(from: &[[usize; 3]], to: &[[usize; 3]], m: &Mask3) -> Result<Vec<f64>> {
    let g = m.geometry();
    let mut sites = vec![false; g.len()];
    for &[x, y, z] in to {
        sites[g.index(x, y, z)] = true;
    }
    let d2 = squared_distance_transform(&sites, g.dims, g.spacing)?;
    Ok(from.iter().map(|&[x, y, z]| d2[g.index(x, y, z)].sqrt()).collect())
}

/// Pooled symmetric surface distances in mm, sorted ascending.
pub fn surface_distances(a: &Mask3, b: &Mask3) -> Result<Vec<f64>> {
    a.geometry().ensure_same(b.geometry(), "surface distance")?;
    if a.is_empty_mask() || b.is_empty_mask() {
        return Err(Error::Empty("surface distance needs two non-empty masks".into()));
    }
    let (sa, sb) = (surface_voxels(a), surface_voxels(b));
    let mut d = directed(&sa, &sb, a)?;
    d.extend(directed(&sb, &sa, a)?);
    d.sort_by(f64::total_cmp);
    Ok(d)
}

/// Nearest-rank percentile (`ceil(q * n)`-th order statistic) of sorted data.
pub fn nearest_rank(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Empty("percentile of an empty set".into()));
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

/// 95th percentile Hausdorff distance in mm.
pub fn hd95(a: &Mask3, b: &Mask3) -> Result<f64> {
    nearest_rank(&surface_distances(a, b)?, 0.95)
}

/// Average symmetric surface distance in mm.
pub fn asd(a: &Mask3, b: &Mask3) -> Result<f64> {
    let d = surface_distances(a, b)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample (n - 1) standard deviation; 0 for a single value.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// `100 * sample_std / mean`, in percent.
pub fn coefficient_of_variation(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("coefficient of variation of no values".into()));
    }
    let m = mean(values);
    if m == 0.0 || !m.is_finite() {
        return Err(Error::InvalidArgument(format!("coefficient of variation needs a finite non-zero mean, got {m}")));
    }
    Ok(100.0 * sample_std(values) / m)
}

/// DSC, HD95 and ASD of one prediction. Distances are `None` when either
/// mask is empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseMetrics {
    pub dsc: f64,
    pub hd95_mm: Option<f64>,
    pub asd_mm: Option<f64>,
}

pub fn evaluate(pred: &Mask3, truth: &Mask3) -> Result<CaseMetrics> {
    let d = dsc(pred, truth)?;
    match surface_distances(pred, truth) {
        Ok(dist) => Ok(CaseMetrics {
            dsc: d,
            hd95_mm: Some(nearest_rank(&dist, 0.95)?),
            asd_mm: Some(mean(&dist)),
        }),
        Err(Error::Empty(_)) => Ok(CaseMetrics {
            dsc: d,
            hd95_mm: None,
            asd_mm: None,
        }),
        Err(e) => Err(e),
    }
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub case: String,
    pub fraction: String,
    pub method: String,
    pub dsc: f64,
    pub hd95_mm: Option<f64>,
    pub asd_mm: Option<f64>,
}

impl MetricRecord {
    pub fn new(case: &str, fraction: &str, method: &str, m: CaseMetrics) -> Self {
        MetricRecord {
            case: case.to_string(),
            fraction: fraction.to_string(),
            method: method.to_string(),
            dsc: m.dsc,
            hd95_mm: m.hd95_mm,
            asd_mm: m.asd_mm,
        }
    }
}

/// Mean and sample standard deviation. `degenerate` marks n = 1, where the
/// standard deviation is reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub degenerate: bool,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Aggregate> {
        if values.is_empty() {
            return None;
        }
        Some(Aggregate {
            n: values.len(),
            mean: mean(values),
            std: sample_std(values),
            degenerate: values.len() == 1,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub dsc: Option<Aggregate>,
    pub hd95_mm: Option<Aggregate>,
    pub asd_mm: Option<Aggregate>,
    /// CV of the DSC across the case's fractions, in percent.
    pub cv_percent: Option<f64>,
    /// Records whose distance metrics are undefined (an empty mask).
    pub undefined_distances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case: String,
    pub records: Vec<MetricRecord>,
    pub methods: Vec<MethodSummary>,
}

/// Per-case reports plus an overall summary per method computed over the
/// per-case means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub cases: Vec<CaseReport>,
    pub overall: Vec<MethodSummary>,
}

const DECIMALS: usize = 6;

/// The value as it appears in the CSV.
pub fn emitted(v: f64) -> f64 {
    format!("{v:.DECIMALS$}").parse().expect("formatted float parses")
}

fn emitted_record(r: &MetricRecord) -> MetricRecord {
    MetricRecord {
        dsc: emitted(r.dsc),
        hd95_mm: r.hd95_mm.map(emitted),
        asd_mm: r.asd_mm.map(emitted),
        ..r.clone()
    }
}

fn summarize(method: &str, rows: &[&MetricRecord]) -> MethodSummary {
    let dsc: Vec<f64> = rows.iter().map(|r| r.dsc).collect();
    let hd: Vec<f64> = rows.iter().filter_map(|r| r.hd95_mm).collect();
    let asd: Vec<f64> = rows.iter().filter_map(|r| r.asd_mm).collect();
    MethodSummary {
        method: method.to_string(),
        dsc: Aggregate::of(&dsc),
        hd95_mm: Aggregate::of(&hd),
        asd_mm: Aggregate::of(&asd),
        cv_percent: coefficient_of_variation(&dsc).ok(),
        undefined_distances: rows.iter().filter(|r| r.hd95_mm.is_none() || r.asd_mm.is_none()).count(),
    }
}

fn methods_in_order<'a>(records: impl Iterator<Item = &'a MetricRecord>) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    for r in records {
        if !seen.contains(&r.method) {
            seen.push(r.method.clone());
        }
    }
    seen
}

/// Groups records by case (sorted by case id) and method (first-seen
/// order). Aggregates are computed from the values as emitted to CSV, so
/// they can be recomputed exactly from the CSV.
pub fn build_report(records: &[MetricRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::Empty("report with no records".into()));
    }
    for r in records {
        if [&r.case, &r.fraction, &r.method].iter().any(|s| s.contains([',', '"', '\n'])) {
            return Err(Error::InvalidArgument(format!("identifier with a separator in record {r:?}")));
        }
        if !(0.0..=1.0).contains(&r.dsc) {
            return Err(Error::InvalidArgument(format!("dsc {} outside [0, 1]", r.dsc)));
        }
        if [r.hd95_mm, r.asd_mm].iter().flatten().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::InvalidArgument(format!("bad distance in record {r:?}")));
        }
    }
    let records: Vec<MetricRecord> = records.iter().map(emitted_record).collect();
    let methods = methods_in_order(records.iter());
    let mut by_case: BTreeMap<&str, Vec<&MetricRecord>> = BTreeMap::new();
    for r in &records {
        by_case.entry(r.case.as_str()).or_default().push(r);
    }
    let mut cases = Vec::new();
    for (case, rows) in &by_case {
        let summaries = methods
            .iter()
            .filter_map(|m| {
                let sel: Vec<&MetricRecord> = rows.iter().copied().filter(|r| &r.method == m).collect();
                (!sel.is_empty()).then(|| summarize(m, &sel))
            })
            .collect();
        cases.push(CaseReport {
            case: case.to_string(),
            records: rows.iter().map(|r| (*r).clone()).collect(),
            methods: summaries,
        });
    }
    let overall = methods
        .iter()
        .map(|m| {
            let per_case: Vec<&MethodSummary> = cases
                .iter()
                .filter_map(|c| c.methods.iter().find(|s| &s.method == m))
                .collect();
            let means = |f: fn(&MethodSummary) -> Option<Aggregate>| -> Vec<f64> {
                per_case.iter().filter_map(|s| f(s)).map(|a| a.mean).collect()
            };
            let cvs: Vec<f64> = per_case.iter().filter_map(|s| s.cv_percent).collect();
            MethodSummary {
                method: m.clone(),
                dsc: Aggregate::of(&means(|s| s.dsc)),
                hd95_mm: Aggregate::of(&means(|s| s.hd95_mm)),
                asd_mm: Aggregate::of(&means(|s| s.asd_mm)),
                cv_percent: (!cvs.is_empty()).then(|| mean(&cvs)),
                undefined_distances: per_case.iter().map(|s| s.undefined_distances).sum(),
            }
        })
        .collect();
    Ok(Report { cases, overall })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.DECIMALS$}")).unwrap_or_default()
}

impl Report {
    pub fn records(&self) -> impl Iterator<Item = &MetricRecord> {
        self.cases.iter().flat_map(|c| c.records.iter())
    }

    /// CSV with columns `case,fraction,method,dsc,hd95_mm,asd_mm`. Undefined
    /// distances are empty cells.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| Error::Format(format!("csv: {e}"));
        w.write_record(["case", "fraction", "method", "dsc", "hd95_mm", "asd_mm"])
            .map_err(fail)?;
        for r in self.records() {
            w.write_record([
                r.case.clone(),
                r.fraction.clone(),
                r.method.clone(),
                format!("{:.DECIMALS$}", r.dsc),
                fmt_opt(r.hd95_mm),
                fmt_opt(r.asd_mm),
            ])
            .map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(format!("report json: {e}")))
    }

    /// Text table with rows metric x method and one column per case plus
    /// the mean over cases, entries `mean ± std`.
    pub fn table(&self) -> String {
        let mut out = String::from("metric,method");
        for c in &self.cases {
            out.push(',');
            out.push_str(&c.case);
        }
        out.push_str(",mean\n");
        let metrics: [(&str, fn(&MethodSummary) -> Option<Aggregate>); 3] = [
            ("DSC", |s| s.dsc),
            ("HD95_mm", |s| s.hd95_mm),
            ("ASD_mm", |s| s.asd_mm),
        ];
        let cell = |a: Option<Aggregate>| a.map(|a| format!("{:.3} ± {:.3}", a.mean, a.std)).unwrap_or("n/a".into());
        for (name, get) in metrics {
            for s in &self.overall {
                out.push_str(&format!("{name},{}", s.method));
                for c in &self.cases {
                    let a = c.methods.iter().find(|m| m.method == s.method).and_then(get);
                    out.push(',');
                    out.push_str(&cell(a));
                }
                out.push(',');
                out.push_str(&cell(get(s)));
                out.push('\n');
            }
        }
        out
    }

    /// Writes `metrics.csv`, `report.json` and `table.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("metrics.csv", self.to_csv()?),
            ("report.json", self.to_json()?),
            ("table.csv", self.table()),
        ] {
            let path = dir.join(name);
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(body.as_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Parses the CSV written by [`Report::to_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let fail = |e: csv::Error| Error::Format(format!("csv: {e}"));
    let header = r.headers().map_err(fail)?.clone();
    if header.iter().collect::<Vec<_>>() != ["case", "fraction", "method", "dsc", "hd95_mm", "asd_mm"] {
        return Err(Error::Format(format!("unexpected csv header {header:?}")));
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            return Ok(None);
        }
        s.parse().map(Some).map_err(|_| Error::Format(format!("bad number {s:?}")))
    };
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(fail)?;
        out.push(MetricRecord {
            case: row[0].to_string(),
            fraction: row[1].to_string(),
            method: row[2].to_string(),
            dsc: num(&row[3])?.ok_or_else(|| Error::Format("missing dsc".into()))?,
            hd95_mm: num(&row[4])?,
            asd_mm: num(&row[5])?,
        });
    }
    Ok(out)
}

/// Brute-force references used by the tests and the acceptance suite.
pub mod oracle {
    use crate::volume::Mask3;

    pub fn dsc(a: &Mask3, b: &Mask3) -> f64 {
        let na = a.count();
        let nb = b.count();
        if na + nb == 0 {
            return 1.0;
        }
        let both = (0..a.geometry().len()).filter(|&i| a.get_flat(i) && b.get_flat(i)).count();
        2.0 * both as f64 / (na + nb) as f64
    }

    fn surface(m: &Mask3) -> Vec<[usize; 3]> {
        let [nx, ny, nz] = m.dims();
        let mut out = Vec::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if !m.get(x, y, z) {
                        continue;
                    }
                    let bg = |dx: i64, dy: i64, dz: i64| {
                        let (px, py, pz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        px < 0
                            || py < 0
                            || pz < 0
                            || px >= nx as i64
                            || py >= ny as i64
                            || pz >= nz as i64
                            || !m.get(px as usize, py as usize, pz as usize)
                    };
                    if bg(-1, 0, 0) || bg(1, 0, 0) || bg(0, -1, 0) || bg(0, 1, 0) || bg(0, 0, -1) || bg(0, 0, 1) {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }

    /// All-pairs pooled surface distances, sorted.
    pub fn surface_distances(a: &Mask3, b: &Mask3) -> Vec<f64> {
        let s = a.geometry().spacing;
        let dist = |p: &[usize; 3], q: &[usize; 3]| {
            (0..3)
                .map(|k| {
                    let d = (p[k] as f64 - q[k] as f64) * s[k];
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        };
        let (sa, sb) = (surface(a), surface(b));
        let mut d: Vec<f64> = sa
            .iter()
            .map(|p| sb.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .collect();
        d.extend(sb.iter().map(|q| sa.iter().map(|p| dist(q, p)).fold(f64::INFINITY, f64::min)));
        d.sort_by(f64::total_cmp);
        d
    }

    pub fn hd95(a: &Mask3, b: &Mask3) -> f64 {
        let d = surface_distances(a, b);
        let rank = ((0.95 * d.len() as f64).ceil() as usize).max(1);
        d[rank - 1]
    }

    pub fn asd(a: &Mask3, b: &Mask3) -> f64 {
        let d = surface_distances(a, b);
        d.iter().sum::<f64>() / d.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;
    use proptest::prelude::*;

    fn mask(dims: [usize; 3], spacing: f64, vox: &[[usize; 3]]) -> Mask3 {
        Mask3::from_voxels(Geometry::new(dims, [spacing; 3], [0.0; 3]).unwrap(), vox).unwrap()
    }

    fn cube(dims: [usize; 3], lo: usize, n: usize) -> Mask3 {
        let g = Geometry::unit(dims).unwrap();
        Mask3::from_fn(g, |x, y, z| [x, y, z].iter().all(|&c| c >= lo && c < lo + n)).unwrap()
    }

    #[test]
    fn dsc_fixtures() {
        let a = cube([8; 3], 1, 3);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &cube([8; 3], 5, 3)).unwrap(), 0.0);
        let e = Mask3::zeros(*a.geometry()).unwrap();
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert_eq!(dsc(&a, &e).unwrap(), 0.0);
        // |A| = |B| = 100, overlap 50
        let g = Geometry::unit([10, 10, 2]).unwrap();
        let a = Mask3::from_fn(g, |_, y, _| y < 5).unwrap();
        let b = Mask3::from_fn(g, |_, y, z| (y < 5 && z == 0) || (y >= 5 && z == 1)).unwrap();
        assert_eq!((a.count(), b.count()), (100, 100));
        assert_eq!(dsc(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn surface_counts() {
        assert_eq!(surface_voxels(&mask([5; 3], 1.0, &[[2, 2, 2]])), vec![[2, 2, 2]]);
        assert_eq!(surface_voxels(&cube([7; 3], 2, 3)).len(), 26);
        assert_eq!(surface_voxels(&cube([7; 3], 1, 5)).len(), 98);
        // touching the grid boundary still counts as surface
        assert_eq!(surface_voxels(&cube([3; 3], 0, 3)).len(), 26);
    }

    #[test]
    fn distance_fixtures() {
        let a = mask([8, 3, 3], 2.0, &[[1, 1, 1]]);
        let b = mask([8, 3, 3], 2.0, &[[4, 1, 1]]);
        assert_eq!(hd95(&a, &b).unwrap(), 6.0);
        let a4 = mask([8, 3, 3], 4.0, &[[1, 1, 1]]);
        let b4 = mask([8, 3, 3], 4.0, &[[2, 1, 1]]);
        assert_eq!(asd(&a4, &b4).unwrap(), 4.0);
        let c = cube([8; 3], 2, 3);
        assert_eq!(hd95(&c, &c).unwrap(), 0.0);
        assert_eq!(asd(&c, &c).unwrap(), 0.0);
    }

    #[test]
    fn empty_masks_are_undefined_for_distances() {
        let a = cube([6; 3], 1, 2);
        let e = Mask3::zeros(*a.geometry()).unwrap();
        assert!(matches!(hd95(&a, &e), Err(Error::Empty(_))));
        let m = evaluate(&e, &a).unwrap();
        assert_eq!((m.dsc, m.hd95_mm, m.asd_mm), (0.0, None, None));
    }

    #[test]
    fn geometry_mismatch_is_an_error() {
        let a = cube([6; 3], 1, 2);
        let b = cube([7; 3], 1, 2);
        assert!(matches!(dsc(&a, &b), Err(Error::Geometry(_))));
    }

    #[test]
    fn cv_fixtures() {
        assert!(coefficient_of_variation(&[0.8, 0.8, 0.8]).unwrap() < 1e-9);
        let cv = coefficient_of_variation(&[1.0, 3.0]).unwrap();
        assert!((cv - 70.710678118654755).abs() < 1e-9, "{cv}");
        assert!(coefficient_of_variation(&[]).is_err());
        assert!(coefficient_of_variation(&[-1.0, 1.0]).is_err());
    }

    fn rec(case: &str, frac: &str, method: &str, dsc: f64) -> MetricRecord {
        MetricRecord {
            case: case.into(),
            fraction: frac.into(),
            method: method.into(),
            dsc,
            hd95_mm: Some(2.0 * dsc),
            asd_mm: None,
        }
    }

    #[test]
    fn single_record_is_degenerate() {
        let r = build_report(&[rec("P1", "F0", "sdl", 0.75)]).unwrap();
        let s = &r.cases[0].methods[0];
        let a = s.dsc.unwrap();
        assert_eq!((a.n, a.mean, a.std, a.degenerate), (1, 0.75, 0.0, true));
        assert_eq!(s.undefined_distances, 1);
    }

    #[test]
    fn table_shape() {
        let mut recs = Vec::new();
        for c in 1..=5 {
            for f in 0..5 {
                for m in ["sdl", "baseline"] {
                    recs.push(rec(&format!("P{c}"), &format!("F{f}"), m, 0.1 * c as f64 + 0.01 * f as f64));
                }
            }
        }
        let r = build_report(&recs).unwrap();
        let t = r.table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 1 + 3 * 2);
        assert_eq!(lines[0], "metric,method,P1,P2,P3,P4,P5,mean");
        assert!(lines[1].starts_with("DSC,sdl,"));
        assert!(lines[2].starts_with("DSC,baseline,"));
        assert!(lines[6].ends_with("n/a"));
    }

    proptest! {
        #[test]
        fn csv_round_trip_reproduces_aggregates(vals in proptest::collection::vec((0.0f64..1.0, 0.0f64..40.0), 1..12)) {
            let recs: Vec<MetricRecord> = vals
                .iter()
                .enumerate()
                .map(|(i, &(d, h))| MetricRecord {
                    case: format!("P{}", i % 3),
                    fraction: format!("F{i}"),
                    method: "sdl".into(),
                    dsc: d,
                    hd95_mm: Some(h),
                    asd_mm: Some(h / 3.0),
                })
                .collect();
            let r = build_report(&recs).unwrap();
            let parsed = parse_csv(&r.to_csv().unwrap()).unwrap();
            let r2 = build_report(&parsed).unwrap();
            prop_assert_eq!(r2.to_json().unwrap(), r.to_json().unwrap());
        }

        #[test]
        fn cv_scale_invariant(vals in proptest::collection::vec(0.1f64..10.0, 2..8), c in 0.1f64..100.0) {
            let a = coefficient_of_variation(&vals).unwrap();
            let scaled: Vec<f64> = vals.iter().map(|v| v * c).collect();
            let b = coefficient_of_variation(&scaled).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }
}
