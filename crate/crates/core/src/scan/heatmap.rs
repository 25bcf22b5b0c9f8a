// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::LatScan;
use crate::artifact::{format_g9, write_atomic};
use crate::error::{Error, Result};

/// Diverging palette `[negative, zero, positive]` (red, near-white, blue).
pub const PALETTE: [[u8; 3]; 3] = [[0xb2, 0x18, 0x2b], [0xf7, 0xf7, 0xf7], [0x21, 0x66, 0xac]];

const CELL_W: usize = 28;
const CELL_H: usize = 20;
const MARGIN_LEFT: usize = 70;
const MARGIN_RIGHT: usize = 20;
const MARGIN_TOP: usize = 20;
const MARGIN_BOTTOM: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapFormat {
    Svg,
    Csv,
}

/// Colour of `score` on a symmetric scale where `±max_abs` hit the palette
/// extremes. A zero scale maps everything to the midpoint.
pub fn heatmap_color(score: f64, max_abs: f64) -> String {
    let t = if max_abs > 0.0 {
        (score / max_abs).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let (end, f) = if t >= 0.0 {
        (PALETTE[2], t)
    } else {
        (PALETTE[0], -t)
    };
    let mid = PALETTE[1];
    let mut s = String::from("#");
    for c in 0..3 {
        let v = mid[c] as f64 + (end[c] as f64 - mid[c] as f64) * f;
        let _ = write!(s, "{:02x}", v.round() as u8);
    }
    s
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

/// Tokens on x, layers on y with the first layer at the bottom.
pub fn render_svg(scan: &LatScan, provenance: Option<&Value>) -> Result<String> {
    let l = scan.layers.len();
    let t = scan.token_count();
    if l == 0 || t == 0 {
        return Err(Error::InvalidArgument("cannot render an empty scan".into()));
    }
    let m = scan.max_abs();
    let width = MARGIN_LEFT + t * CELL_W + MARGIN_RIGHT;
    let height = MARGIN_TOP + l * CELL_H + MARGIN_BOTTOM;
    let grid_bottom = MARGIN_TOP + l * CELL_H;

    let mut meta = json!({
        "color_scale": {"kind": "symmetric", "max_abs": m},
        "palette": {
            "negative": heatmap_color(-1.0, 1.0),
            "zero": heatmap_color(0.0, 1.0),
            "positive": heatmap_color(1.0, 1.0),
        },
        "normalization": scan.normalization,
        "layers": scan.layers,
    });
    if let Some(p) = provenance {
        meta["provenance"] = p.clone();
    }

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, "<metadata>{}</metadata>", xml_escape(&meta.to_string()));
    for (i, (&layer, row)) in scan.layers.iter().zip(&scan.scores).enumerate() {
        let y = MARGIN_TOP + (l - 1 - i) * CELL_H;
        for (j, &score) in row.iter().enumerate() {
            let x = MARGIN_LEFT + j * CELL_W;
            let _ = writeln!(
                s,
                r#"<rect class="cell" x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{}"><title>layer {layer}, token {j} {}: {}</title></rect>"#,
                heatmap_color(score, m),
                xml_escape(&format!("{:?}", scan.token_texts[j])),
                format_g9(score),
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{layer}</text>"#,
            MARGIN_LEFT - 6,
            y + CELL_H / 2 + 4
        );
    }
    let tick_every = t.div_ceil(25).max(1);
    for j in (0..t).step_by(tick_every) {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{j}</text>"#,
            MARGIN_LEFT + j * CELL_W + CELL_W / 2,
            grid_bottom + 14
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">token position</text>"#,
        MARGIN_LEFT + t * CELL_W / 2,
        grid_bottom + 40
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{cy}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {cy})">layer</text>"#,
        cy = MARGIN_TOP + l * CELL_H / 2
    );
    s.push_str("</svg>\n");
    Ok(s)
}

/// `layer,token_index,token_text,score`, layers ascending as stored.
pub fn render_csv(scan: &LatScan) -> Result<String> {
    if scan.layers.is_empty() || scan.token_count() == 0 {
        return Err(Error::InvalidArgument("cannot render an empty scan".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "token_index", "token_text", "score"])?;
    for (&layer, row) in scan.layers.iter().zip(&scan.scores) {
        for (j, &score) in row.iter().enumerate() {
            w.write_record([
                layer.to_string(),
                j.to_string(),
                scan.token_texts[j].clone(),
                format_g9(score),
            ])?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields is UTF-8"))
}

pub fn render_heatmap(
    scan: &LatScan,
    format: HeatmapFormat,
    out: &Path,
    provenance: Option<&Value>,
) -> Result<()> {
    let text = match format {
        HeatmapFormat::Svg => render_svg(scan, provenance)?,
        HeatmapFormat::Csv => render_csv(scan)?,
    };
    write_atomic(out, text.as_bytes())
}
