//! Stick-figure SVG panels: a front view (x right, y up) with bones as lines
//! and joints as circles.

use std::fmt::Write as _;

use gloss2pose::data::PoseSequence;
use gloss2pose::skeleton::SkeletonTopology;

const PANEL: f64 = 320.0;
const MARGIN: f64 = 20.0;
const COLOURS: [&str; 2] = ["#1f4e9c", "#b8431f"];

/// Shared x/y bounds over every frame of every sequence, so panels of one
/// render use the same scale.
fn bounds(seqs: &[&PoseSequence]) -> (f64, f64, f64) {
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in seqs.iter().flat_map(|s| s.frames.iter().flatten()) {
        lo_x = lo_x.min(p[0]);
        hi_x = hi_x.max(p[0]);
        lo_y = lo_y.min(p[1]);
        hi_y = hi_y.max(p[1]);
    }
    let span = (hi_x - lo_x).max(hi_y - lo_y).max(1e-9);
    (lo_x, hi_y, (PANEL - 2.0 * MARGIN) / span)
}

/// One SVG for frame `frame` of each sequence, drawn side by side.
pub fn render_frame(seqs: &[&PoseSequence], frame: usize, topology: &SkeletonTopology) -> String {
    let (x0, y0, scale) = bounds(seqs);
    let width = PANEL * seqs.len() as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{PANEL:.0}" viewBox="0 0 {width:.0} {PANEL:.0}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (k, seq) in seqs.iter().enumerate() {
        let colour = COLOURS[k % COLOURS.len()];
        let offset = PANEL * k as f64;
        let at = |p: [f64; 3]| {
            (
                offset + MARGIN + (p[0] - x0) * scale,
                MARGIN + (y0 - p[1]) * scale,
            )
        };
        let pose = &seq.frames[frame];
        let _ = writeln!(svg, r#"<g stroke="{colour}" fill="{colour}">"#);
        for c in (0..topology.num_joints()).filter(|&c| c != topology.root()) {
            let (a, b) = (at(pose[topology.parents()[c]]), at(pose[c]));
            let _ = writeln!(
                svg,
                r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke-width="3"/>"#,
                a.0, a.1, b.0, b.1
            );
        }
        for &p in pose {
            let (x, y) = at(p);
            let _ = writeln!(svg, r#"<circle cx="{x:.3}" cy="{y:.3}" r="3"/>"#);
        }
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    svg
}
