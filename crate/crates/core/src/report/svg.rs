//! Hand-written SVG figures. Each figure is rendered only from the numbers in
//! its paired CSV, so re-parsing the CSV and re-rendering reproduces the SVG
//! byte for byte.
//!
//! Heatmap colour map: linear ramp from grey `#3c3c3c` (minimum) to warm
//! `#ffa028` (maximum) over the finite cell range; NaN cells are hatched.

use std::fmt::Write as _;

use crate::error::{Error, Result};

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const RAMP_LO: [f64; 3] = [60.0, 60.0, 60.0];
const RAMP_HI: [f64; 3] = [255.0, 160.0, 40.0];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

fn parse_num(s: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::InvalidConfig(format!("row {line}: `{s}` is not a number")))
}

fn finite_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo <= 1e-12 * lo.abs().max(1.0) {
        let pad = lo.abs().max(1.0) * 0.5;
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

pub fn ramp(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let c: Vec<u8> = (0..3)
        .map(|i| (RAMP_LO[i] + (RAMP_HI[i] - RAMP_LO[i]) * t).round() as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn header(w: f64, h: f64, title: &str) -> String {
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w:.2} {h:.2}" width="{w:.2}" height="{h:.2}" font-family="sans-serif">"#).unwrap();
    writeln!(
        s,
        r##"<rect x="0" y="0" width="{w:.2}" height="{h:.2}" fill="#ffffff"/>"##
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{:.2}" y="18.00" font-size="13" text-anchor="middle">{}</text>"#,
        w / 2.0,
        esc(title)
    )
    .unwrap();
    s
}

fn read_rows(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let head: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for r in rdr.records() {
        rows.push(r?.iter().map(str::to_string).collect());
    }
    Ok((head, rows))
}

fn write_rows(head: &[String], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(head)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io("<csv>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("utf-8 csv"))
}

/// Lead × channel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub leads: Vec<u32>,
    pub channels: Vec<String>,
    /// Row-major, `leads.len() × channels.len()`; NaN marks a failed cell.
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn to_csv(&self) -> Result<String> {
        let mut head = vec!["lead_hours".to_string()];
        head.extend(self.channels.iter().cloned());
        let rows: Vec<Vec<String>> = self
            .leads
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let mut r = vec![l.to_string()];
                r.extend(
                    self.values[i * self.channels.len()..(i + 1) * self.channels.len()]
                        .iter()
                        .map(|&v| fmt_num(v)),
                );
                r
            })
            .collect();
        write_rows(&head, &rows)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (head, rows) = read_rows(text)?;
        if head.first().map(String::as_str) != Some("lead_hours") {
            return Err(Error::InvalidConfig(
                "heatmap csv must start with `lead_hours`".into(),
            ));
        }
        let channels = head[1..].to_vec();
        let mut leads = Vec::with_capacity(rows.len());
        let mut values = Vec::with_capacity(rows.len() * channels.len());
        for (i, r) in rows.iter().enumerate() {
            leads.push(r[0].parse::<u32>().map_err(|_| {
                Error::InvalidConfig(format!("row {}: bad lead `{}`", i + 2, r[0]))
            })?);
            for v in &r[1..] {
                values.push(parse_num(v, i + 2)?);
            }
        }
        Ok(Heatmap {
            leads,
            channels,
            values,
        })
    }

    pub fn render(&self, title: &str) -> String {
        let (cw, ch) = (16.0, 10.0);
        let (left, top) = (60.0, 110.0);
        let nc = self.channels.len() as f64;
        let nr = self.leads.len() as f64;
        let w = left + nc * cw + 110.0;
        let h = top + nr * ch + 40.0;
        let (lo, hi) = finite_range(self.values.iter().copied());
        let mut s = header(w, h, title);
        s.push_str(r##"<defs><pattern id="hatch" patternUnits="userSpaceOnUse" width="4" height="4"><rect width="4" height="4" fill="#ffffff"/><path d="M0,4 L4,0" stroke="#888888" stroke-width="1"/></pattern></defs>"##);
        s.push('\n');
        for (j, name) in self.channels.iter().enumerate() {
            let x = left + (j as f64 + 0.5) * cw;
            writeln!(s, r#"<text x="{x:.2}" y="{:.2}" font-size="8" transform="rotate(-60 {x:.2} {:.2})">{}</text>"#, top - 4.0, top - 4.0, esc(name)).unwrap();
        }
        for (i, lead) in self.leads.iter().enumerate() {
            let y = top + i as f64 * ch;
            writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-size="8" text-anchor="end">{lead} h</text>"#,
                left - 4.0,
                y + ch * 0.8
            )
            .unwrap();
            for j in 0..self.channels.len() {
                let v = self.values[i * self.channels.len() + j];
                let fill = if v.is_finite() {
                    ramp((v - lo) / (hi - lo))
                } else {
                    "url(#hatch)".to_string()
                };
                writeln!(s, r#"<rect x="{:.2}" y="{y:.2}" width="{cw:.2}" height="{ch:.2}" fill="{fill}"/>"#, left + j as f64 * cw).unwrap();
            }
        }
        let lx = left + nc * cw + 20.0;
        for k in 0..=10 {
            let t = 1.0 - k as f64 / 10.0;
            writeln!(
                s,
                r#"<rect x="{lx:.2}" y="{:.2}" width="14.00" height="10.00" fill="{}"/>"#,
                top + k as f64 * 10.0,
                ramp(t)
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="8">{:.4}</text>"#,
            lx + 18.0,
            top + 8.0,
            hi
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="8">{:.4}</text>"#,
            lx + 18.0,
            top + 108.0,
            lo
        )
        .unwrap();
        writeln!(
            s,
            r#"<rect x="{lx:.2}" y="{:.2}" width="14.00" height="10.00" fill="url(#hatch)"/>"#,
            top + 120.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="8">failed</text>"#,
            lx + 18.0,
            top + 128.0
        )
        .unwrap();
        s.push_str("</svg>\n");
        s
    }
}

/// Several series sharing a lead axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LineChart {
    pub leads: Vec<u32>,
    pub series: Vec<String>,
    /// Row-major, `leads.len() × series.len()`.
    pub values: Vec<f64>,
}

struct Axes {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    lead_lo: f64,
    lead_hi: f64,
    lo: f64,
    hi: f64,
}

impl Axes {
    fn x(&self, lead: f64) -> f64 {
        self.x0 + (lead - self.lead_lo) / (self.lead_hi - self.lead_lo).max(1.0) * self.w
    }

    fn y(&self, v: f64) -> f64 {
        self.y0 + self.h - (v - self.lo) / (self.hi - self.lo) * self.h
    }

    fn draw(&self, s: &mut String, label: &str) {
        writeln!(s, r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#000000"/>"##, self.x0, self.y0, self.w, self.h).unwrap();
        for k in 0..=4 {
            let v = self.lo + (self.hi - self.lo) * k as f64 / 4.0;
            let y = self.y(v);
            writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-size="9" text-anchor="end">{:.4}</text>"#,
                self.x0 - 4.0,
                y + 3.0,
                v
            )
            .unwrap();
            let l = self.lead_lo + (self.lead_hi - self.lead_lo) * k as f64 / 4.0;
            writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-size="9" text-anchor="middle">{:.0}</text>"#,
                self.x(l),
                self.y0 + self.h + 12.0,
                l
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">lead (h)</text>"#,
            self.x0 + self.w / 2.0,
            self.y0 + self.h + 26.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10">{}</text>"#,
            self.x0,
            self.y0 - 6.0,
            esc(label)
        )
        .unwrap();
    }

    fn polyline(&self, s: &mut String, pts: &[(f64, f64)], color: &str) {
        // NaN points break the line into segments
        for seg in pts.split(|p| !p.1.is_finite()) {
            if seg.is_empty() {
                continue;
            }
            let d: Vec<String> = seg
                .iter()
                .map(|&(l, v)| format!("{:.2},{:.2}", self.x(l), self.y(v)))
                .collect();
            writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                d.join(" ")
            )
            .unwrap();
        }
    }
}

impl LineChart {
    pub fn to_csv(&self) -> Result<String> {
        let heat = Heatmap {
            leads: self.leads.clone(),
            channels: self.series.clone(),
            values: self.values.clone(),
        };
        heat.to_csv()
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let h = Heatmap::from_csv(text)?;
        Ok(LineChart {
            leads: h.leads,
            series: h.channels,
            values: h.values,
        })
    }

    pub fn render(&self, title: &str) -> String {
        let (w, h) = (640.0, 400.0);
        let (lo, hi) = finite_range(self.values.iter().copied());
        let axes = Axes {
            x0: 70.0,
            y0: 40.0,
            w: 430.0,
            h: 310.0,
            lead_lo: self.leads.first().copied().unwrap_or(0) as f64,
            lead_hi: self.leads.last().copied().unwrap_or(1) as f64,
            lo,
            hi,
        };
        let mut s = header(w, h, title);
        axes.draw(&mut s, "");
        let ns = self.series.len();
        for (j, name) in self.series.iter().enumerate() {
            let color = PALETTE[j % PALETTE.len()];
            let pts: Vec<(f64, f64)> = self
                .leads
                .iter()
                .enumerate()
                .map(|(i, &l)| (l as f64, self.values[i * ns + j]))
                .collect();
            axes.polyline(&mut s, &pts, color);
            let ly = 50.0 + j as f64 * 14.0;
            writeln!(s, r#"<line x1="515.00" y1="{ly:.2}" x2="535.00" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#).unwrap();
            writeln!(
                s,
                r#"<text x="540.00" y="{:.2}" font-size="10">{}</text>"#,
                ly + 3.0,
                esc(name)
            )
            .unwrap();
        }
        s.push_str("</svg>\n");
        s
    }
}

/// One curve per channel, channels grouped into panels by unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Panels {
    /// `(channel, unit, lead, value)` in plotting order.
    pub rows: Vec<(String, String, u32, f64)>,
}

impl Panels {
    pub fn to_csv(&self) -> Result<String> {
        let head: Vec<String> = ["channel", "unit", "lead_hours", "value"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(c, u, l, v)| vec![c.clone(), u.clone(), l.to_string(), fmt_num(*v)])
            .collect();
        write_rows(&head, &rows)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (head, rows) = read_rows(text)?;
        if head != ["channel", "unit", "lead_hours", "value"] {
            return Err(Error::InvalidConfig(
                "panel csv header must be `channel,unit,lead_hours,value`".into(),
            ));
        }
        let rows = rows
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let lead = r[2].parse::<u32>().map_err(|_| {
                    Error::InvalidConfig(format!("row {}: bad lead `{}`", i + 2, r[2]))
                })?;
                Ok((r[0].clone(), r[1].clone(), lead, parse_num(&r[3], i + 2)?))
            })
            .collect::<Result<_>>()?;
        Ok(Panels { rows })
    }

    /// Units in first-appearance order, each with its channels.
    fn groups(&self) -> Vec<(String, Vec<String>)> {
        let mut out: Vec<(String, Vec<String>)> = Vec::new();
        for (c, u, _, _) in &self.rows {
            let g = match out.iter_mut().find(|g| &g.0 == u) {
                Some(g) => g,
                None => {
                    out.push((u.clone(), Vec::new()));
                    out.last_mut().expect("just pushed")
                }
            };
            if !g.1.contains(c) {
                g.1.push(c.clone());
            }
        }
        out
    }

    pub fn render(&self, title: &str) -> String {
        let groups = self.groups();
        let (pw, ph) = (640.0, 220.0);
        let w = pw;
        let h = 30.0 + groups.len() as f64 * ph;
        let mut s = header(w, h, title);
        for (gi, (unit, channels)) in groups.iter().enumerate() {
            let rows: Vec<&(String, String, u32, f64)> =
                self.rows.iter().filter(|r| &r.1 == unit).collect();
            let (lo, hi) = finite_range(rows.iter().map(|r| r.3));
            let lead_lo = rows.iter().map(|r| r.2).min().unwrap_or(0) as f64;
            let lead_hi = rows.iter().map(|r| r.2).max().unwrap_or(1) as f64;
            let axes = Axes {
                x0: 70.0,
                y0: 50.0 + gi as f64 * ph,
                w: 430.0,
                h: ph - 70.0,
                lead_lo,
                lead_hi,
                lo,
                hi,
            };
            axes.draw(&mut s, &format!("unit: {unit}"));
            for (j, ch) in channels.iter().enumerate() {
                let color = PALETTE[j % PALETTE.len()];
                let pts: Vec<(f64, f64)> = rows
                    .iter()
                    .filter(|r| &r.0 == ch)
                    .map(|r| (r.2 as f64, r.3))
                    .collect();
                axes.polyline(&mut s, &pts, color);
                if j < 12 {
                    let ly = axes.y0 + 8.0 + j as f64 * 12.0;
                    writeln!(s, r#"<line x1="515.00" y1="{ly:.2}" x2="535.00" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#).unwrap();
                    writeln!(
                        s,
                        r#"<text x="540.00" y="{:.2}" font-size="9">{}</text>"#,
                        ly + 3.0,
                        esc(ch)
                    )
                    .unwrap();
                }
            }
            if channels.len() > 12 {
                writeln!(
                    s,
                    r#"<text x="540.00" y="{:.2}" font-size="9">+{} more</text>"#,
                    axes.y0 + 8.0 + 12.0 * 12.0 + 3.0,
                    channels.len() - 12
                )
                .unwrap();
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Figure kinds, keyed by file-name prefix.
#[derive(Debug, Clone, PartialEq)]
pub enum Figure {
    Heatmap(Heatmap),
    Lines(LineChart),
    Panels(Panels),
}

impl Figure {
    pub fn prefix(&self) -> &'static str {
        match self {
            Figure::Heatmap(_) => "heatmap_",
            Figure::Lines(_) => "curve_",
            Figure::Panels(_) => "panels_",
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        match self {
            Figure::Heatmap(f) => f.to_csv(),
            Figure::Lines(f) => f.to_csv(),
            Figure::Panels(f) => f.to_csv(),
        }
    }

    /// Title shown on the figure, derived from the file stem.
    pub fn title_for(stem: &str) -> String {
        stem.split('_')
            .filter(|p| !p.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn render(&self, stem: &str) -> String {
        let title = Self::title_for(stem);
        match self {
            Figure::Heatmap(f) => f.render(&title),
            Figure::Lines(f) => f.render(&title),
            Figure::Panels(f) => f.render(&title),
        }
    }

    /// Parses the CSV of the figure whose stem is `stem`.
    pub fn from_csv(stem: &str, text: &str) -> Result<Self> {
        if stem.starts_with("heatmap_") {
            Ok(Figure::Heatmap(Heatmap::from_csv(text)?))
        } else if stem.starts_with("curve_") {
            Ok(Figure::Lines(LineChart::from_csv(text)?))
        } else if stem.starts_with("panels_") {
            Ok(Figure::Panels(Panels::from_csv(text)?))
        } else {
            Err(Error::InvalidConfig(format!(
                "`{stem}` has no known figure prefix"
            )))
        }
    }
}
