//! SVG rendering of matches and epipolar band overlays.

use std::fmt::Write as _;

use nalgebra::Point2;

use crate::geometry::{band_mask, epipolar_band, pixel_to_cell, CameraModel, RelativePose};
use crate::io::MatchRow;

const GAP: f64 = 16.0;
const GRID: usize = 8;

/// Band overlay for one query pixel: the query and the source cells `(x, y)` it covers.
pub type BandOverlay = ((f64, f64), Vec<(usize, usize)>);

/// Source-grid cells inside the band of a reference pixel.
pub fn band_cells(
    cam_ref: &CameraModel,
    cam_src: &CameraModel,
    pose: &RelativePose,
    query: Point2<f64>,
    s0: f64,
) -> Vec<(usize, usize)> {
    let (gref, gsrc) = (cam_ref.to_grid(GRID), cam_src.to_grid(GRID));
    let (qx, qy) = pixel_to_cell(&query, GRID, gref.width, gref.height);
    let band = epipolar_band(&gref, &gsrc, pose, &Point2::new(qx as f64, qy as f64), s0);
    band_mask(&band, gsrc.width, gsrc.height)
        .into_iter()
        .enumerate()
        .filter(|(_, b)| *b)
        .map(|(i, _)| (i % gsrc.width, i / gsrc.width))
        .collect()
}

/// Side-by-side panels, band cells as rects, one `line` per match colored
/// from red (low confidence) to green.
pub fn render_svg(cam_ref: &CameraModel, cam_src: &CameraModel, rows: &[MatchRow], bands: &[BandOverlay]) -> String {
    let (wr, hr) = (cam_ref.width as f64, cam_ref.height as f64);
    let (ws, hs) = (cam_src.width as f64, cam_src.height as f64);
    let off = wr + GAP;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        off + ws,
        hr.max(hs),
        off + ws,
        hr.max(hs)
    );
    let _ = writeln!(
        s,
        r##"<rect class="panel" x="0" y="0" width="{wr}" height="{hr}" fill="#eeeeee" stroke="#333333"/>"##
    );
    let _ = writeln!(
        s,
        r##"<rect class="panel" x="{off}" y="0" width="{ws}" height="{hs}" fill="#eeeeee" stroke="#333333"/>"##
    );
    for ((qx, qy), cells) in bands {
        for (cx, cy) in cells {
            let _ = writeln!(
                s,
                r##"<rect class="band" x="{}" y="{}" width="{GRID}" height="{GRID}" fill="#3366cc" fill-opacity="0.25"/>"##,
                off + (cx * GRID) as f64,
                cy * GRID
            );
        }
        let _ = writeln!(
            s,
            r##"<circle class="query" cx="{qx:.2}" cy="{qy:.2}" r="3" fill="#3366cc"/>"##
        );
    }
    for r in rows {
        let hue = 120.0 * r.confidence.clamp(0.0, 1.0);
        let _ = writeln!(
            s,
            r#"<line class="match" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="hsl({hue:.0},80%,40%)" stroke-width="1"/>"#,
            r.ref_pt.x,
            r.ref_pt.y,
            off + r.src_pt.x,
            r.src_pt.y
        );
    }
    s.push_str("</svg>\n");
    s
}
