//! Top-down SVG drawing of a scenario and, optionally, one rollout.
//! Coordinates are printed with fixed precision so output bytes depend only
//! on the inputs.

use std::fmt::Write;

use trajdiff::geometry::OrientedBox;
use trajdiff::scene::Trajectory;
use trajdiff::synth::Scenario;

const PALETTE: [&str; 8] = ["#1f4e9c", "#d1495b", "#2e933c", "#edae49", "#7b2d8b", "#00798c", "#8d6a52", "#555555"];
const MARGIN: f64 = 8.0;
const CAPTION_LINE: f64 = 16.0;

struct Frame {
    min: [f64; 2],
    max: [f64; 2],
    scale: f64,
}

impl Frame {
    fn px(&self, p: [f64; 2]) -> (f64, f64) {
        ((p[0] - self.min[0]) * self.scale, (self.max[1] - p[1]) * self.scale)
    }

    fn points(&self, pts: &[[f64; 2]]) -> String {
        pts.iter()
            .map(|&p| {
                let (x, y) = self.px(p);
                format!("{x:.2},{y:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(scenario: &Scenario, rollout: Option<&Trajectory>) -> ([f64; 2], [f64; 2]) {
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    let mut add = |p: [f64; 2]| {
        if p[0].is_finite() && p[1].is_finite() {
            for d in 0..2 {
                min[d] = min[d].min(p[d]);
                max[d] = max[d].max(p[d]);
            }
        }
    };
    for l in &scenario.map.lanes {
        l.centerline.points.iter().for_each(|&p| add(p));
    }
    for e in &scenario.map.road_edges {
        e.points.iter().for_each(|&p| add(p));
    }
    if let Some(t) = rollout {
        for s in t.states.iter().flatten() {
            add([s.x, s.y]);
        }
    }
    if !min[0].is_finite() {
        return ([0.0, 0.0], [1.0, 1.0]);
    }
    ([min[0] - MARGIN, min[1] - MARGIN], [max[0] + MARGIN, max[1] + MARGIN])
}

/// One `<g class="agent">` per agent when a non-empty rollout is given; the
/// trail fades from the first to the last step. Without a rollout only the
/// map and the caption are drawn.
pub fn render_svg(scenario: &Scenario, rollout: Option<&Trajectory>, scale: f64) -> String {
    let rollout = rollout.filter(|t| t.agent_count() > 0 && t.states.iter().any(|s| !s.is_empty()));
    let (min, max) = bounds(scenario, rollout);
    let f = Frame { min, max, scale };
    let captions: Vec<&str> = {
        let (a, b) = scenario.interest_pair;
        let mut ids = vec![a];
        if b != a {
            ids.push(b);
        }
        ids.iter().filter_map(|&i| scenario.prompts.get(i)).map(|p| p.raw.as_str()).filter(|r| !r.is_empty()).collect()
    };
    let w = (max[0] - min[0]) * scale;
    let map_h = (max[1] - min[1]) * scale;
    let h = map_h + CAPTION_LINE * (captions.len() as f64 + 0.5);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.2} {h:.2}">"#);
    let _ = writeln!(s, r##"<rect width="{w:.2}" height="{h:.2}" fill="#f5f5f0"/>"##);
    let _ = writeln!(s, r#"<g id="map">"#);
    for e in &scenario.map.road_edges {
        let _ = writeln!(s, r##"<polyline class="edge" points="{}" fill="none" stroke="#333333" stroke-width="1.5"/>"##, f.points(&e.points));
    }
    for l in &scenario.map.lanes {
        let _ = writeln!(
            s,
            r##"<polyline class="lane" points="{}" fill="none" stroke="#b0b0b0" stroke-width="1" stroke-dasharray="4 3"/>"##,
            f.points(&l.centerline.points)
        );
    }
    let _ = writeln!(s, "</g>");
    if let Some(t) = rollout {
        let _ = writeln!(s, r#"<g id="agents">"#);
        for i in 0..t.agent_count() {
            let color = PALETTE[i % PALETTE.len()];
            let dims = scenario.agent_dims.get(i).copied().unwrap_or(trajdiff::geometry::AgentDims::new(4.5, 1.9));
            let _ = writeln!(s, r#"<g class="agent" id="agent-{i}" fill="{color}">"#);
            let steps = t.states[i].len();
            for (k, st) in t.states[i].iter().enumerate() {
                if !t.valid.get(i).and_then(|v| v.get(k)).copied().unwrap_or(true) || !st.is_finite() {
                    continue;
                }
                let opacity = if steps <= 1 { 1.0 } else { 0.15 + 0.85 * k as f64 / (steps - 1) as f64 };
                let corners = OrientedBox::from_state(st, dims).corners();
                let _ = writeln!(s, r#"<polygon points="{}" fill-opacity="{opacity:.3}"/>"#, f.points(&corners));
            }
            let _ = writeln!(s, "</g>");
        }
        let _ = writeln!(s, "</g>");
    }
    for (j, c) in captions.iter().enumerate() {
        let y = map_h + CAPTION_LINE * (j as f64 + 1.0);
        let _ = writeln!(s, r##"<text class="caption" x="6" y="{y:.2}" font-family="sans-serif" font-size="12" fill="#222222">{}</text>"##, escape(c));
    }
    s.push_str("</svg>\n");
    s
}
