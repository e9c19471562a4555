//! `plot`: masked PSNR against NFE as a standalone SVG.
//!
//! Each (method, K) cell of a results CSV becomes one marker at its mean PSNR.
//! Data coordinates map to the SVG canvas by the affine transform
//!
//! ```text
//! px = LEFT + (nfe  - nfe_lo)  / (nfe_hi  - nfe_lo)  * (RIGHT - LEFT)
//! py = BOTTOM - (psnr - psnr_lo) / (psnr_hi - psnr_lo) * (BOTTOM - TOP)
//! ```
//!
//! with `nfe_lo = 0`, `nfe_hi = 1.1 max nfe`, and the PSNR range padded by
//! 1 dB on each side of the data (0 to 40 dB and 0 to 40 NFE when empty).
//! The bounds are recorded on the root element as `data-nfe-range` and
//! `data-psnr-range`, and every marker carries its data values.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use aid_core::Error;
use anyhow::{Context, Result};

use crate::write_file;

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 480.0;
pub const LEFT: f64 = 70.0;
pub const RIGHT: f64 = 610.0;
pub const TOP: f64 = 30.0;
pub const BOTTOM: f64 = 420.0;
pub const PLOT_SVG: &str = "frontier.svg";

/// Mean masked PSNR of one (method, K) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub method: String,
    pub k: usize,
    pub nfe: usize,
    pub psnr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axes {
    pub nfe_lo: f64,
    pub nfe_hi: f64,
    pub psnr_lo: f64,
    pub psnr_hi: f64,
}

impl Axes {
    pub fn fit(points: &[Point]) -> Self {
        if points.is_empty() {
            return Self { nfe_lo: 0.0, nfe_hi: 40.0, psnr_lo: 0.0, psnr_hi: 40.0 };
        }
        let max_nfe = points.iter().map(|p| p.nfe).max().unwrap_or(1).max(1) as f64;
        let lo = points.iter().map(|p| p.psnr).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p.psnr).fold(f64::NEG_INFINITY, f64::max);
        Self { nfe_lo: 0.0, nfe_hi: 1.1 * max_nfe, psnr_lo: lo.floor() - 1.0, psnr_hi: hi.ceil() + 1.0 }
    }

    pub fn to_px(&self, nfe: f64, psnr: f64) -> (f64, f64) {
        let px = LEFT + (nfe - self.nfe_lo) / (self.nfe_hi - self.nfe_lo) * (RIGHT - LEFT);
        let py = BOTTOM - (psnr - self.psnr_lo) / (self.psnr_hi - self.psnr_lo) * (BOTTOM - TOP);
        (px, py)
    }
}

/// Reads `method`, `K`, `nfe` and `masked_psnr` columns of a results CSV and
/// averages per (method, K) in order of first appearance.
pub fn read_points(text: &str) -> Result<Vec<Point>> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse { line: 1, msg: format!("missing column '{name}'") })
    };
    let (cm, ck, cn, cp) = (col("method")?, col("K")?, col("nfe")?, col("masked_psnr")?);
    let mut sums: Vec<(String, usize, usize, f64, usize)> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        let get = |c: usize| rec.get(c).unwrap_or("");
        let bad = |what: &str| Error::Parse { line, msg: format!("invalid {what} '{}'", rec.iter().collect::<Vec<_>>().join(",")) };
        let k: usize = get(ck).parse().map_err(|_| bad("K"))?;
        let nfe: usize = get(cn).parse().map_err(|_| bad("nfe"))?;
        let psnr: f64 = get(cp).parse().map_err(|_| bad("masked_psnr"))?;
        if !psnr.is_finite() {
            return Err(bad("masked_psnr").into());
        }
        let method = get(cm).to_string();
        match sums.iter_mut().find(|s| s.0 == method && s.1 == k) {
            Some(s) if s.2 != nfe => return Err(bad("nfe").into()),
            Some(s) => {
                s.3 += psnr;
                s.4 += 1;
            }
            None => sums.push((method, k, nfe, psnr, 1)),
        }
    }
    Ok(sums.into_iter().map(|(method, k, nfe, s, n)| Point { method, k, nfe, psnr: s / n as f64 }).collect())
}

const COLORS: [&str; 6] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"];

pub fn render_svg(points: &[Point]) -> String {
    let axes = Axes::fit(points);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" data-nfe-range="{} {}" data-psnr-range="{} {}" font-family="sans-serif" font-size="12">"#,
        axes.nfe_lo, axes.nfe_hi, axes.psnr_lo, axes.psnr_hi
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{BOTTOM}" x2="{RIGHT}" y2="{BOTTOM}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{BOTTOM}" x2="{LEFT}" y2="{TOP}" stroke="black"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let nfe = axes.nfe_lo + f * (axes.nfe_hi - axes.nfe_lo);
        let psnr = axes.psnr_lo + f * (axes.psnr_hi - axes.psnr_lo);
        let (x, _) = axes.to_px(nfe, axes.psnr_lo);
        let (_, y) = axes.to_px(axes.nfe_lo, psnr);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{nfe:.1}</text>"#, BOTTOM + 18.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{y:.2}" text-anchor="end">{psnr:.1}</text>"#, LEFT - 6.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">NFE</text>"#, 0.5 * (LEFT + RIGHT), HEIGHT - 20.0);
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">masked PSNR (dB)</text>"#,
        0.5 * (TOP + BOTTOM),
        0.5 * (TOP + BOTTOM)
    );
    let mut methods: Vec<&str> = Vec::new();
    for p in points {
        if !methods.contains(&p.method.as_str()) {
            methods.push(&p.method);
        }
    }
    for p in points {
        let color = COLORS[methods.iter().position(|m| *m == p.method).unwrap_or(0) % COLORS.len()];
        let (x, y) = axes.to_px(p.nfe as f64, p.psnr);
        let _ = writeln!(
            s,
            r#"<circle class="marker" cx="{x:.3}" cy="{y:.3}" r="5" fill="{color}" data-method="{}" data-k="{}" data-nfe="{}" data-psnr="{:.6}"/>"#,
            p.method, p.k, p.nfe, p.psnr
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{} K={} {:.2} dB</text>"#, x + 7.0, y - 7.0, p.method, p.k, p.psnr);
    }
    s.push_str("</svg>\n");
    s
}

/// Renders `input` into `out_dir/frontier.svg`.
pub fn cmd_plot(input: &Path, out_dir: &Path) -> Result<PathBuf> {
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let points = read_points(&text).with_context(|| format!("in {}", input.display()))?;
    let path = out_dir.join(PLOT_SVG);
    write_file(&path, render_svg(&points).as_bytes())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "task_id,mask_family,method,K,nfe,masked_mse,masked_psnr,seed,config_hash";

    fn markers(svg: &str) -> Vec<(f64, f64, String)> {
        svg.lines()
            .filter(|l| l.contains("class=\"marker\""))
            .map(|l| {
                let attr = |name: &str| {
                    let start = l.find(&format!(" {name}=\"")).unwrap() + name.len() + 3;
                    l[start..].split('"').next().unwrap().to_string()
                };
                (attr("cx").parse().unwrap(), attr("cy").parse().unwrap(), attr("data-method"))
            })
            .collect()
    }

    #[test]
    fn empty_data_gives_axes_only() {
        let svg = render_svg(&read_points(&format!("{HEADER}\n")).unwrap());
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("<line"));
        assert!(markers(&svg).is_empty());
    }

    #[test]
    fn same_nfe_gives_two_markers_at_one_abscissa() {
        let csv = format!("{HEADER}\n0,freeform,aid,18,35,0.1,20.0,0,h\n0,freeform,dps_lite,18,35,0.2,17.0,0,h\n");
        let m = markers(&render_svg(&read_points(&csv).unwrap()));
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].0, m[1].0);
        assert_ne!(m[0].1, m[1].1);
    }

    #[test]
    fn markers_parse_back_to_data() {
        let csv = format!(
            "{HEADER}\n0,f,aid,18,35,0.1,21.5,0,h\n1,f,aid,18,35,0.1,22.5,0,h\n0,f,aid,12,23,0.1,19.0,0,h\n0,f,unguided,18,35,0.5,12.25,0,h\n"
        );
        let points = read_points(&csv).unwrap();
        assert_eq!(points[0].psnr, 22.0);
        let svg = render_svg(&points);
        let axes = Axes::fit(&points);
        for ((cx, cy, method), p) in markers(&svg).iter().zip(&points) {
            assert_eq!(*method, p.method);
            // Invert the documented transform.
            let nfe = axes.nfe_lo + (cx - LEFT) / (RIGHT - LEFT) * (axes.nfe_hi - axes.nfe_lo);
            let psnr = axes.psnr_lo + (BOTTOM - cy) / (BOTTOM - TOP) * (axes.psnr_hi - axes.psnr_lo);
            let (ex, ey) = axes.to_px(p.nfe as f64, p.psnr);
            assert!((cx - ex).abs() <= 0.5 && (cy - ey).abs() <= 0.5);
            assert!((nfe - p.nfe as f64).abs() * (RIGHT - LEFT) / (axes.nfe_hi - axes.nfe_lo) <= 0.5);
            assert!((psnr - p.psnr).abs() * (BOTTOM - TOP) / (axes.psnr_hi - axes.psnr_lo) <= 0.5);
        }
    }

    #[test]
    fn malformed_rows_report_their_line() {
        let csv = format!("{HEADER}\n0,f,aid,18,35,0.1,20.0,0,h\n0,f,aid,18,thirty,0.1,20.0,0,h\n");
        let err = read_points(&csv).unwrap_err();
        match err.downcast_ref::<Error>() {
            Some(Error::Parse { line, .. }) => assert_eq!(*line, 3),
            other => panic!("expected a parse error, got {other:?}"),
        }
        let short = format!("{HEADER}\n0,f,aid\n");
        assert!(matches!(read_points(&short).unwrap_err().downcast_ref::<Error>(), Some(Error::Parse { line: 2, .. })));
        assert!(matches!(
            read_points("a,b\n1,2\n").unwrap_err().downcast_ref::<Error>(),
            Some(Error::Parse { line: 1, .. })
        ));
    }
}
