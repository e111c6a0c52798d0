//! Two-component PCA scatter plots as SVG.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Result;
use btc_anomaly::{AnomalyRanking, Error, FeatureMatrix};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 40.0;
const POWER_ITERATIONS: usize = 100;

/// Leading eigenvector of a symmetric matrix by power iteration from a
/// fixed start.
fn power_iteration(cov: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let n = cov.len();
    // not parallel to any axis, so it is rarely orthogonal to the answer
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 / n as f64).collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let w: Vec<f64> = cov
            .iter()
            .map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        lambda = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        v = w.into_iter().map(|x| x / norm).collect();
    }
    (v, lambda)
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v {
        *x /= norm;
    }
}

/// Projects the rows onto the first two principal components.
pub fn project(fm: &FeatureMatrix) -> btc_anomaly::Result<Vec<[f64; 2]>> {
    let (m, n) = (fm.rows(), fm.cols());
    let varying = (0..n)
        .filter(|&j| {
            let first = fm.values.get(0, j);
            (0..m).any(|i| fm.values.get(i, j) != first)
        })
        .count();
    if m == 0 || varying < 2 {
        return Err(Error::DegenerateProjection(format!(
            "{varying} non-constant feature columns; need 2"
        )));
    }
    let mean: Vec<f64> = (0..n)
        .map(|j| fm.values.column(j).iter().sum::<f64>() / m as f64)
        .collect();
    let mut cov = vec![vec![0.0; n]; n];
    for row in fm.values.iter_rows() {
        for a in 0..n {
            let da = row[a] - mean[a];
            for b in 0..n {
                cov[a][b] += da * (row[b] - mean[b]);
            }
        }
    }
    for row in &mut cov {
        for c in row.iter_mut() {
            *c /= m as f64;
        }
    }
    let (pc1, l1) = power_iteration(&cov);
    // deflate
    for a in 0..n {
        for b in 0..n {
            cov[a][b] -= l1 * pc1[a] * pc1[b];
        }
    }
    let (pc2, l2) = power_iteration(&cov);
    if l1.is_nan() || l1 <= 0.0 || l2 <= 1e-10 * l1 {
        return Err(Error::DegenerateProjection("data has rank 1".into()));
    }
    Ok(fm
        .values
        .iter_rows()
        .map(|r| {
            let d: Vec<f64> = r.iter().zip(&mean).map(|(x, mu)| x - mu).collect();
            [
                d.iter().zip(&pc1).map(|(a, b)| a * b).sum(),
                d.iter().zip(&pc2).map(|(a, b)| a * b).sum(),
            ]
        })
        .collect())
}

/// SVG scatter with one `<circle>` per row. Flagged rows get the classes
/// `point anomaly`, the rest `point`; flagged points are drawn last.
pub fn scatter_svg(fm: &FeatureMatrix, ranking: &AnomalyRanking, title: &str) -> btc_anomaly::Result<String> {
    let pts = project(fm)?;
    let flagged: HashSet<&str> = ranking.flagged().collect();
    let bounds = |k: usize| {
        pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p[k]), hi.max(p[k]))
        })
    };
    let (x0, x1) = bounds(0);
    let (y0, y1) = bounds(1);
    let sx = (WIDTH - 2.0 * MARGIN) / (x1 - x0).max(1e-12);
    let sy = (HEIGHT - 2.0 * MARGIN) / (y1 - y0).max(1e-12);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    svg.push_str(
        "<style>.point{fill:#4a78b0;fill-opacity:0.5}.anomaly{fill:#d62728;fill-opacity:1}</style>\n",
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">PC1</text>"#,
        WIDTH / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="12" y="{}" font-family="sans-serif" font-size="11" transform="rotate(-90 12 {})">PC2</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for pass in [false, true] {
        for (p, id) in pts.iter().zip(&fm.entity_ids) {
            let is_anomaly = flagged.contains(id.as_str());
            if is_anomaly != pass {
                continue;
            }
            let cx = MARGIN + (p[0] - x0) * sx;
            let cy = HEIGHT - MARGIN - (p[1] - y0) * sy;
            let (class, r) = if is_anomaly { ("point anomaly", 4) } else { ("point", 2) };
            let _ = writeln!(
                svg,
                r#"<circle class="{class}" cx="{cx:.2}" cy="{cy:.2}" r="{r}"><title>{}</title></circle>"#,
                escape(id)
            );
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render_scatter(fm: &FeatureMatrix, ranking: &AnomalyRanking, path: &Path, title: &str) -> Result<()> {
    fs::write(path, scatter_svg(fm, ranking, title)?)?;
    Ok(())
}
