use std::fmt::Write as _;
use std::str::FromStr;

use super::{CeilingPlan, FeatureMapInventory};
use crate::error::{Error, Result};
use crate::network::StorageClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Svg,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(Error::Parameter(format!("unknown report format '{other}' (csv|svg)"))),
        }
    }
}

/// One site in a before/after chart.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bar {
    pub label: String,
    pub original: u64,
    pub compressed: u64,
}

/// Per-site report of an inventory under a plan.
pub fn compression_report(
    inv: &FeatureMapInventory,
    plan: &CeilingPlan,
    format: ReportFormat,
) -> Result<String> {
    match format {
        ReportFormat::Csv => {
            let mut s =
                String::from("site,c,m,n,elements,storage_class,assigned_k,compressed_elements\n");
            for e in &inv.entries {
                let k = plan.rank_of(&e.site);
                let class = match e.storage_class {
                    StorageClass::Stored => "stored",
                    StorageClass::Fused => "fused",
                };
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{class},{},{}",
                    e.site,
                    e.c,
                    e.m,
                    e.n,
                    e.elements(),
                    k.map_or(String::new(), |k| k.to_string()),
                    k.map_or(e.elements(), |k| k as u64 * e.spatial()),
                );
            }
            Ok(s)
        }
        ReportFormat::Svg => {
            let bars: Vec<Bar> = inv
                .entries
                .iter()
                .map(|e| Bar {
                    label: e.site.clone(),
                    original: e.elements(),
                    compressed: plan
                        .rank_of(&e.site)
                        .map_or(e.elements(), |k| k as u64 * e.spatial()),
                })
                .collect();
            let title = format!(
                "{}: ceiling {} elements ({:.2}x), overall {:.2}x",
                inv.arch, plan.ceiling_elements, plan.ceiling_factor, plan.overall_compression
            );
            Ok(render_svg(&title, &bars, Some(plan.ceiling_elements)))
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const ORIGINAL: &str = "#f4a6c0";
const COMPRESSED: &str = "#5b8bd9";

/// Grouped bar chart: original size (pink) beside compressed size (blue)
/// per site, with an optional dashed ceiling line.
pub fn render_svg(title: &str, bars: &[Bar], ceiling: Option<u64>) -> String {
    let (left, top, plot_h, bottom) = (80.0, 40.0, 300.0, 110.0);
    let slot = 28.0;
    let plot_w = (bars.len().max(1) as f64) * slot;
    let width = left + plot_w + 20.0;
    let height = top + plot_h + bottom;
    let max = bars
        .iter()
        .map(|b| b.original.max(b.compressed))
        .chain(ceiling)
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let y = |v: u64| top + plot_h * (1.0 - v as f64 / max);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="12">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    for i in 0..=4 {
        let v = (max * i as f64 / 4.0).round() as u64;
        let yy = y(v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v}</text>"##,
            left + plot_w,
            left - 4.0,
            yy + 3.0
        );
    }
    for (i, b) in bars.iter().enumerate() {
        let x = left + i as f64 * slot + 3.0;
        for (dx, v, color, kind) in [
            (0.0, b.original, ORIGINAL, "original"),
            (11.0, b.compressed, COMPRESSED, "compressed"),
        ] {
            let yy = y(v);
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{yy:.1}" width="11" height="{:.1}" fill="{color}"><title>{} {kind}: {v}</title></rect>"#,
                x + dx,
                top + plot_h - yy,
                escape(&b.label)
            );
        }
        let lx = x + 11.0;
        let ly = top + plot_h + 8.0;
        let _ = writeln!(
            s,
            r#"<text x="{lx:.1}" y="{ly:.1}" transform="rotate(60 {lx:.1} {ly:.1})">{}</text>"#,
            escape(&b.label)
        );
    }
    if let Some(c) = ceiling {
        let yy = y(c);
        let _ = writeln!(
            s,
            r#"<line class="ceiling" x1="{left}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="black" stroke-dasharray="4 3"/>"#,
            left + plot_w
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}" stroke="black"/>"#,
        top + plot_h
    );
    let legend_y = height - 14.0;
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{:.1}" width="10" height="10" fill="{ORIGINAL}"/><text x="{:.1}" y="{legend_y}">original</text><rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{COMPRESSED}"/><text x="{:.1}" y="{legend_y}">compressed</text>"#,
        legend_y - 9.0,
        left + 14.0,
        left + 80.0,
        legend_y - 9.0,
        left + 94.0
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::catalog;
    use crate::planner::{plan_ceiling, profile, Ceiling};

    fn bar_tops(svg: &str, color: &str) -> Vec<f64> {
        svg.lines()
            .filter(|l| l.contains(&format!("fill=\"{color}\"><title>")))
            .map(|l| {
                let y = l.split("y=\"").nth(1).unwrap();
                y[..y.find('"').unwrap()].parse().unwrap()
            })
            .collect()
    }

    #[test]
    fn csv_rows_match_inventory() {
        let inv = profile(&catalog::load("vgg16").unwrap()).unwrap();
        let plan = plan_ceiling(&inv, Ceiling::Factor(6.0)).unwrap();
        let csv = compression_report(&inv, &plan, ReportFormat::Csv).unwrap();
        assert_eq!(csv.lines().count(), inv.entries.len() + 1);
        assert!(csv.contains("\nconv1_1,64,224,224,3211264,stored,10,501760\n"));
    }

    #[test]
    fn noop_plan_keeps_sizes() {
        let inv = profile(&catalog::load("mnist_convnet").unwrap()).unwrap();
        let plan = plan_ceiling(&inv, Ceiling::Factor(1.0)).unwrap();
        let csv = compression_report(&inv, &plan, ReportFormat::Csv).unwrap();
        for row in csv.lines().skip(1) {
            let f: Vec<&str> = row.split(',').collect();
            assert_eq!(f[4], f[7]);
            assert_eq!(f[6], "");
        }
    }

    #[test]
    fn svg_blue_bars_under_ceiling() {
        let inv = profile(&catalog::load("vgg16").unwrap()).unwrap();
        let plan = plan_ceiling(&inv, Ceiling::Factor(6.0)).unwrap();
        let svg = compression_report(&inv, &plan, ReportFormat::Svg).unwrap();
        let line = svg.lines().find(|l| l.contains("class=\"ceiling\"")).unwrap();
        let y = line.split("y1=\"").nth(1).unwrap();
        let ceiling_y: f64 = y[..y.find('"').unwrap()].parse().unwrap();
        let blue = bar_tops(&svg, COMPRESSED);
        assert_eq!(blue.len(), inv.entries.len());
        assert!(blue.iter().all(|&b| b >= ceiling_y - 0.05));
        assert!(bar_tops(&svg, ORIGINAL).iter().any(|&p| p < ceiling_y));
    }

    #[test]
    fn unknown_format() {
        assert!(matches!("pdf".parse::<ReportFormat>(), Err(Error::Parameter(_))));
    }
}
