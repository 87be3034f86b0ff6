//! SVG overlays of a scene and its predictions.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::metrics::Trajectory;
use crate::scene::SceneSequence;

pub const TRUTH_COLOR: &str = "#7b2cbf";
pub const BASELINE_COLOR: &str = "#2a9d3f";
pub const ML_COLOR: &str = "#1f5fbf";
pub const SAMPLE_COLOR: &str = "#9a9a9a";

const MARGIN: f64 = 10.0;
const PX_PER_M: f64 = 8.0;

/// Traces drawn over a scene. Any of them may be absent.
#[derive(Clone, Debug, Default)]
pub struct RenderSet {
    pub truth: Option<Trajectory>,
    pub baseline: Option<Trajectory>,
    pub ml: Option<Trajectory>,
    pub samples: Vec<Trajectory>,
    /// Scene step the traces start from.
    pub start_step: usize,
}

impl RenderSet {
    fn layers(&self) -> Vec<(&'static str, &'static str, &Trajectory)> {
        let mut out = Vec::new();
        if let Some(t) = &self.truth {
            out.push(("truth", TRUTH_COLOR, t));
        }
        if let Some(t) = &self.baseline {
            out.push(("baseline", BASELINE_COLOR, t));
        }
        if let Some(t) = &self.ml {
            out.push(("ml", ML_COLOR, t));
        }
        for t in &self.samples {
            out.push(("sample", SAMPLE_COLOR, t));
        }
        out
    }
}

fn fmt(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// Renders the map polygons and lanes, then one `<g>` per agent holding a
/// `<polyline>` per trace. Output depends only on the inputs.
pub fn render_svg(scene: &SceneSequence, set: &RenderSet) -> String {
    let layers = set.layers();
    let start = scene.steps.get(set.start_step);
    let start_pos = |id: u64| start.and_then(|s| s.agents.iter().find(|a| a.id == id)).map(|a| [a.x, a.y]);

    let mut pts: Vec<[f64; 2]> = Vec::new();
    for (_, _, t) in &layers {
        for (id, track) in t.tracks() {
            pts.extend(start_pos(*id));
            pts.extend(track.iter().copied());
        }
    }
    if pts.is_empty() {
        pts.extend(scene.map.drivable.iter().flatten().copied());
        pts.extend(scene.map.lanes.iter().flat_map(|l| l.points.iter().copied()));
    }
    if pts.is_empty() {
        pts.push([0.0, 0.0]);
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &pts {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let (x0, y0, x1, y1) = (x0 - MARGIN, y0 - MARGIN, x1 + MARGIN, y1 + MARGIN);
    let (w, h) = (x1 - x0, y1 - y0);
    // y grows upward in the scene, downward in SVG
    let tx = |p: &[f64; 2]| format!("{},{}", fmt(p[0] - x0), fmt(y1 - p[1]));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        fmt(w * PX_PER_M),
        fmt(h * PX_PER_M),
        fmt(w),
        fmt(h)
    );
    let _ = writeln!(s, "<title>{}</title>", xml_escape(&scene.id));
    s.push_str("<g id=\"map\">\n");
    for poly in &scene.map.drivable {
        let p: Vec<String> = poly.iter().map(tx).collect();
        let _ = writeln!(s, r##"<polygon points="{}" fill="#e8e8e8" stroke="none"/>"##, p.join(" "));
    }
    for lane in &scene.map.lanes {
        let p: Vec<String> = lane.points.iter().map(tx).collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#c8c8c8" stroke-width="0.15" stroke-dasharray="1 1"/>"##,
            p.join(" ")
        );
    }
    s.push_str("</g>\n");

    let ids: BTreeSet<u64> = layers.iter().flat_map(|(_, _, t)| t.ids()).collect();
    for id in ids {
        let _ = writeln!(s, r#"<g id="agent-{id}">"#);
        for (class, color, t) in &layers {
            let Some(track) = t.track(id) else { continue };
            let mut p: Vec<String> = start_pos(id).iter().map(tx).collect();
            p.extend(track.iter().map(tx));
            let width = if *class == "sample" { 0.2 } else { 0.35 };
            let _ = writeln!(
                s,
                r#"<g class="{class}"><polyline points="{}" fill="none" stroke="{color}" stroke-width="{width}"/></g>"#,
                p.join(" ")
            );
        }
        if let Some(p) = start_pos(id) {
            let xy = tx(&p);
            let (cx, cy) = xy.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r##"<circle cx="{cx}" cy="{cy}" r="0.6" fill="#333333"/>"##);
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
