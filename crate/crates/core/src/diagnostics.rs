//! Alignment and training-curve diagnostics, with CSV and SVG writers.
//!
//! Files are named `<run-id>.<diagnostic>.<ext>`:
//!
//! * `alignment.csv`: `i,j,cosine` for every entry; `alignment.svg` heatmap.
//! * `perplexity.csv`: `step,stage,stage_step,recal_mixed_ce,recal_teacher_ce,student_ce,teacher_ce`;
//!   `perplexity.svg` line plot.
//! * `drift.csv`: `checkpoint,post_distance,student_pre_drift,student_post_drift,teacher_post_drift`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::{MetricLine, Series};
use crate::tensor::Tensor;
use crate::training::{Models, StudentFeatures, TeacherFeatures, TrainExample};

/// Cross-pair cosine similarities: row `i` is the student path of pair `i`,
/// column `j` the teacher path of pair `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMatrix {
    pub values: Vec<Vec<f64>>,
    pub n_pairs: usize,
    pub source: String,
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("pooled feature vector has zero norm".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine matrix between two equally long lists of vectors.
pub fn cosine_matrix(student: &[Vec<f64>], teacher: &[Vec<f64>], source: &str) -> Result<AlignmentMatrix> {
    let n = student.len();
    if n < 2 || teacher.len() != n {
        return Err(Error::contract(format!(
            "alignment needs at least two matched pairs, got {} and {}",
            n,
            teacher.len()
        )));
    }
    let values = student
        .iter()
        .map(|s| teacher.iter().map(|t| cosine(s, t)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignmentMatrix {
        values,
        n_pairs: n,
        source: source.into(),
    })
}

fn mean_rows(t: &Tensor) -> Vec<f64> {
    t.mean_row()
}

/// Pooled recalibrator outputs of each pair along both paths.
pub fn pooled_paths(models: &Models, pairs: &[TrainExample], answer_only: bool) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut student = Vec::with_capacity(pairs.len());
    let mut teacher = Vec::with_capacity(pairs.len());
    for ex in pairs {
        let t = TeacherFeatures::compute(&models.teacher, ex)?;
        let s = StudentFeatures::compute(&models.student, ex)?;
        let mixed = models.recal.mixed(&s.z_q, &t.z_a)?;
        let tonly = models.recal.teacher_only(&t.z_q, &t.z_a)?;
        if answer_only {
            student.push(mean_rows(&mixed.r_a));
            teacher.push(mean_rows(&tonly.r_a));
        } else {
            student.push(mean_rows(&mixed.all_rows()));
            teacher.push(mean_rows(&tonly.all_rows()));
        }
    }
    Ok((student, teacher))
}

pub fn cosine_alignment(models: &Models, pairs: &[TrainExample], answer_only: bool, source: &str) -> Result<AlignmentMatrix> {
    if pairs.len() < 2 {
        return Err(Error::contract("alignment needs at least two pairs"));
    }
    let (s, t) = pooled_paths(models, pairs, answer_only)?;
    cosine_matrix(&s, &t, source)
}

/// Mean diagonal minus mean off-diagonal.
pub fn diagonal_dominance(m: &AlignmentMatrix) -> f64 {
    let n = m.n_pairs;
    let mut diag = 0.0;
    let mut off = 0.0;
    for (i, row) in m.values.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i == j {
                diag += v;
            } else {
                off += v;
            }
        }
    }
    diag / n as f64 - off / (n * (n - 1)) as f64
}

/// One held-out evaluation point of the four curves.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub stage: String,
    pub stage_step: usize,
    pub values: [f64; 4],
}

/// Extracts the held-out curves in stream order; every evaluation line must
/// carry all four series.
pub fn perplexity_series(lines: &[MetricLine]) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::new();
    for l in lines.iter().filter(|l| l.split.is_some()) {
        let mut values = [0.0; 4];
        for (slot, s) in values.iter_mut().zip(Series::ALL) {
            *slot = *l.series.get(s.key()).ok_or_else(|| {
                Error::Schema(format!("evaluation line at step {} lacks `{}`", l.step, s.key()))
            })?;
        }
        out.push(CurvePoint {
            step: l.step,
            stage: l.stage.clone(),
            stage_step: l.stage_step,
            values,
        });
    }
    if out.is_empty() {
        return Err(Error::Schema("no evaluation lines in the metric stream".into()));
    }
    Ok(out)
}

/// Centroids of the three feature families at one checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Centroids {
    pub student_pre: Vec<f64>,
    pub student_post: Vec<f64>,
    pub teacher_post: Vec<f64>,
}

pub fn centroid(vectors: &[Vec<f64>]) -> Vec<f64> {
    let n = vectors.len().max(1) as f64;
    let d = vectors.first().map_or(0, Vec::len);
    let mut c = vec![0.0; d];
    for v in vectors {
        for (a, b) in c.iter_mut().zip(v) {
            *a += b / n;
        }
    }
    c
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn centroids(models: &Models, pairs: &[TrainExample]) -> Result<Centroids> {
    let mut pre = Vec::with_capacity(pairs.len());
    for ex in pairs {
        let s = StudentFeatures::compute(&models.student, ex)?;
        pre.push(s.z_q.mean_row());
    }
    let (post_s, post_t) = pooled_paths(models, pairs, false)?;
    Ok(Centroids {
        student_pre: centroid(&pre),
        student_post: centroid(&post_s),
        teacher_post: centroid(&post_t),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftRow {
    pub checkpoint: String,
    /// Distance between the student-post and teacher-post centroids.
    pub post_distance: f64,
    /// Each family's centroid distance from its position at the first
    /// checkpoint. The pre-recalibrator family has the student's width, so
    /// it is only compared with itself.
    pub student_pre_drift: f64,
    pub student_post_drift: f64,
    pub teacher_post_drift: f64,
}

pub fn centroid_drift(checkpoints: &[(String, Models)], pairs: &[TrainExample]) -> Result<Vec<DriftRow>> {
    if checkpoints.len() < 2 {
        return Err(Error::contract("centroid drift needs at least two checkpoints"));
    }
    let cents = checkpoints
        .iter()
        .map(|(_, m)| centroids(m, pairs))
        .collect::<Result<Vec<_>>>()?;
    Ok(drift_table(checkpoints.iter().map(|(n, _)| n.clone()).zip(cents).collect()))
}

pub fn drift_table(rows: Vec<(String, Centroids)>) -> Vec<DriftRow> {
    let first = rows.first().map(|(_, c)| c.clone());
    rows.into_iter()
        .map(|(name, c)| {
            let f = first.as_ref().expect("non-empty");
            DriftRow {
                checkpoint: name,
                post_distance: distance(&c.student_post, &c.teacher_post),
                student_pre_drift: distance(&c.student_pre, &f.student_pre),
                student_post_drift: distance(&c.student_post, &f.student_post),
                teacher_post_drift: distance(&c.teacher_post, &f.teacher_post),
            }
        })
        .collect()
}

/// `<dir>/<run_id>.<diag>.<ext>`
pub fn artifact_path(dir: &Path, run_id: &str, diag: &str, ext: &str) -> PathBuf {
    dir.join(format!("{run_id}.{diag}.{ext}"))
}

pub fn alignment_csv(m: &AlignmentMatrix) -> String {
    let mut s = String::from("i,j,cosine\n");
    for (i, row) in m.values.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let _ = writeln!(s, "{i},{j},{v}");
        }
    }
    s
}

pub fn perplexity_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("step,stage,stage_step");
    for k in Series::ALL {
        let _ = write!(s, ",{}", k.key());
    }
    s.push('\n');
    for p in points {
        let _ = write!(s, "{},{},{}", p.step, p.stage, p.stage_step);
        for v in p.values {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn drift_csv(rows: &[DriftRow]) -> String {
    let mut s = String::from("checkpoint,post_distance,student_pre_drift,student_post_drift,teacher_post_drift\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.checkpoint, r.post_distance, r.student_pre_drift, r.student_post_drift, r.teacher_post_drift
        );
    }
    s
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        xml_escape(title)
    )
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line plot of labelled `(x, y)` series.
pub fn line_plot_svg(title: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = svg_open(title);
    let _ = writeln!(
        s,
        "<line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/><line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>",
        b = H - PAD,
        r = W - PAD
    );
    let _ = writeln!(
        s,
        "<text x=\"{PAD}\" y=\"{}\" font-size=\"10\" font-family=\"sans-serif\">{x0}</text><text x=\"{}\" y=\"{}\" font-size=\"10\" font-family=\"sans-serif\" text-anchor=\"end\">{x1}</text>",
        H - PAD + 14.0,
        W - PAD,
        H - PAD + 14.0
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-size=\"10\" font-family=\"sans-serif\" text-anchor=\"end\">{y0:.3}</text><text x=\"{}\" y=\"{PAD}\" font-size=\"10\" font-family=\"sans-serif\" text-anchor=\"end\">{y1:.3}</text>",
        PAD - 4.0,
        H - PAD,
        PAD - 4.0
    );
    for (k, (label, points)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            path.join(" ")
        );
        let ly = PAD + 14.0 * k as f64;
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{ly}\" font-size=\"11\" font-family=\"sans-serif\" fill=\"{color}\" text-anchor=\"end\">{}</text>",
            W - PAD,
            xml_escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Heatmap of a square matrix with values in `[-1, 1]`.
pub fn heatmap_svg(title: &str, values: &[Vec<f64>]) -> String {
    let n = values.len().max(1);
    let side = (H - 2.0 * PAD).min(W - 2.0 * PAD);
    let cell = side / n as f64;
    let left = (W - side) / 2.0;
    let mut s = svg_open(title);
    for (i, row) in values.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            // Blue for negative, red for positive.
            let t = v.clamp(-1.0, 1.0);
            let (r, g, b) = if t >= 0.0 {
                (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
            } else {
                (255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0)
            };
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{cell:.2}\" height=\"{cell:.2}\" fill=\"rgb({},{},{})\"><title>{i},{j}: {v:.4}</title></rect>",
                left + j as f64 * cell,
                PAD + i as f64 * cell,
                r as u8,
                g as u8,
                b as u8
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

pub fn perplexity_svg(title: &str, points: &[CurvePoint]) -> String {
    let series: Vec<(&str, Vec<(f64, f64)>)> = Series::ALL
        .iter()
        .enumerate()
        .map(|(k, s)| (s.key(), points.iter().map(|p| (p.step as f64, p.values[k])).collect()))
        .collect();
    line_plot_svg(title, &series)
}

/// Writes `<run_id>.<diag>.csv` and, when given, `<run_id>.<diag>.svg`.
pub fn write_artifacts(dir: &Path, run_id: &str, diag: &str, csv: &str, svg: Option<&str>) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut out = vec![artifact_path(dir, run_id, diag, "csv")];
    std::fs::write(&out[0], csv)?;
    if let Some(svg) = svg {
        let p = artifact_path(dir, run_id, diag, "svg");
        std::fs::write(&p, svg)?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn m(values: Vec<Vec<f64>>) -> AlignmentMatrix {
        AlignmentMatrix {
            n_pairs: values.len(),
            values,
            source: "t".into(),
        }
    }

    #[test]
    fn identical_paths_have_unit_diagonal() {
        let v = vec![vec![1.0, 2.0, 0.5], vec![-1.0, 0.0, 3.0]];
        let a = cosine_matrix(&v, &v, "x").unwrap();
        for i in 0..2 {
            assert!((a.values[i][i] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn orthogonal_features_have_zero_off_diagonal() {
        let s = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 2.0]];
        let a = cosine_matrix(&s, &s, "x").unwrap();
        assert_eq!(diagonal_dominance(&a), 1.0);
        assert_eq!(a.values[0][1], 0.0);
        assert_eq!(a.values[2][1], 0.0);
    }

    #[test]
    fn zero_vector_is_degenerate() {
        let s = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        assert!(matches!(cosine_matrix(&s, &s, "x"), Err(Error::Degenerate(_))));
        assert!(cosine_matrix(&s[..1], &s[..1], "x").is_err());
    }

    #[test]
    fn dominance_on_hand_matrices() {
        let id = m(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(diagonal_dominance(&id), 1.0);
        approx::assert_abs_diff_eq!(diagonal_dominance(&m(vec![vec![0.3; 4]; 4])), 0.0, epsilon = 1e-15);
        assert_eq!(diagonal_dominance(&m(vec![vec![1.0, 0.5], vec![0.5, 1.0]])), 0.5);
    }

    proptest! {
        #[test]
        fn cosine_ignores_positive_rescaling(
            a in proptest::collection::vec(-3.0f64..3.0, 4),
            b in proptest::collection::vec(-3.0f64..3.0, 4),
            k in 0.1f64..10.0,
        ) {
            prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
            let scaled: Vec<f64> = a.iter().map(|v| v * k).collect();
            let x = cosine_matrix(&[a.clone(), b.clone()], &[b.clone(), a.clone()], "p").unwrap();
            let y = cosine_matrix(&[scaled, b.clone()], &[b, a], "p").unwrap();
            for (r1, r2) in x.values.iter().zip(&y.values) {
                for (u, v) in r1.iter().zip(r2) {
                    prop_assert!((u - v).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn dominance_survives_joint_permutation(
            vals in proptest::collection::vec(-1.0f64..1.0, 16),
            perm_seed in 0usize..24,
        ) {
            let n = 4;
            let mat: Vec<Vec<f64>> = vals.chunks(n).map(<[f64]>::to_vec).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut s = perm_seed;
            for i in (1..n).rev() {
                perm.swap(i, s % (i + 1));
                s /= i + 1;
            }
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| perm.iter().map(|&j| mat[i][j]).collect()).collect();
            let d1 = diagonal_dominance(&m(mat));
            let d2 = diagonal_dominance(&m(permuted));
            prop_assert!((d1 - d2).abs() < 1e-12);
        }
    }

    fn eval_line(step: usize, stage: &str, vals: [f64; 4]) -> MetricLine {
        MetricLine {
            step,
            stage: stage.into(),
            stage_step: step,
            split: Some("held-out".into()),
            series: Series::ALL.iter().zip(vals).map(|(s, v)| (s.key().to_string(), v)).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn perplexity_series_passes_values_through() {
        let lines = vec![
            eval_line(0, "stage1", [3.0, 2.5, 2.9, 0.1]),
            MetricLine {
                step: 1,
                stage: "stage1".into(),
                series: BTreeMap::new(),
                ..Default::default()
            },
            eval_line(10, "stage1", [1.0, 0.5, 2.9, 0.1]),
        ];
        let pts = perplexity_series(&lines).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[1].values, [1.0, 0.5, 2.9, 0.1]);
        let csv = perplexity_csv(&pts);
        assert!(csv.starts_with("step,stage,stage_step,recal_mixed_ce,recal_teacher_ce,student_ce,teacher_ce\n"));
        assert!(csv.contains("10,stage1,10,1,0.5,2.9,0.1"));
    }

    #[test]
    fn missing_series_is_a_schema_error() {
        let mut l = eval_line(0, "stage1", [1.0; 4]);
        l.series.remove("student_ce");
        assert!(matches!(perplexity_series(&[l]), Err(Error::Schema(_))));
        assert!(matches!(perplexity_series(&[]), Err(Error::Schema(_))));
    }

    #[test]
    fn identical_families_have_zero_distance_and_translation_is_isometric() {
        let v = vec![vec![1.0, 2.0], vec![3.0, -1.0]];
        let c = centroid(&v);
        assert_eq!(c, vec![2.0, 0.5]);
        let shifted: Vec<Vec<f64>> = v.iter().map(|r| vec![r[0] + 3.0, r[1] + 4.0]).collect();
        assert!((distance(&centroid(&shifted), &c) - 5.0).abs() < 1e-12);
        let cents = Centroids {
            student_pre: vec![1.0],
            student_post: c.clone(),
            teacher_post: c.clone(),
        };
        let rows = drift_table(vec![("a".into(), cents.clone()), ("b".into(), cents)]);
        assert!(rows.iter().all(|r| r.post_distance == 0.0 && r.student_post_drift == 0.0));
    }

    #[test]
    fn artifacts_are_named_by_run_and_diagnostic() {
        let dir = tempfile::tempdir().unwrap();
        let a = m(vec![vec![1.0, 0.2], vec![0.1, 1.0]]);
        let files = write_artifacts(dir.path(), "run7", "alignment", &alignment_csv(&a), Some(&heatmap_svg("a", &a.values))).unwrap();
        assert_eq!(files[0].file_name().unwrap(), "run7.alignment.csv");
        assert_eq!(files[1].file_name().unwrap(), "run7.alignment.svg");
        let svg = std::fs::read_to_string(&files[1]).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("<rect"));
        let plot = line_plot_svg("p", &[("a", vec![(0.0, 1.0), (1.0, 0.5)])]);
        assert!(plot.contains("<polyline"));
    }

    #[test]
    fn alignment_on_models_is_bounded() {
        let f = crate::training::tests::fixture("reverse", false);
        let a = cosine_alignment(&f.models, &f.probe[..4], false, "fixture").unwrap();
        assert_eq!(a.n_pairs, 4);
        assert!(a.values.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
        let b = cosine_alignment(&f.models, &f.probe[..4], true, "fixture").unwrap();
        assert_ne!(a, b);
        let cks = vec![("x".to_string(), f.models.clone()), ("y".to_string(), f.models.clone())];
        let rows = centroid_drift(&cks, &f.probe[..3]).unwrap();
        assert_eq!(rows[1].student_pre_drift, 0.0);
        assert!(rows[0].post_distance > 0.0);
    }
}
