//! Halting plot: one row per decoding step, one column per frame. Cell
//! shade is the halting probability; the halting frame is outlined, the
//! synchronised position and reference boundaries are marked.

use std::fmt::Write;

use super::latency::{emission_boundary, UtteranceResult};
use crate::attention::ChunkConfig;

const CELL: usize = 14;
const MARGIN: usize = 40;

pub fn halting_svg(u: &UtteranceResult, chunks: &ChunkConfig) -> String {
    let (cols, rows) = (u.frames.max(1), u.traces.len().max(1));
    let (w, h) = (2 * MARGIN + cols * CELL, 2 * MARGIN + rows * CELL);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="monospace" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="14">utterance {} (frames → , steps ↓)</text>"#, u.utt_id);
    for &b in &u.boundaries {
        let x = MARGIN + b * CELL;
        let _ = writeln!(
            s,
            r#"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="green" stroke-dasharray="2,2"/>"#,
            MARGIN - 4,
            h - MARGIN + 4
        );
    }
    for (r, t) in u.traces.iter().enumerate() {
        let y = MARGIN + r * CELL;
        let _ = writeln!(s, r#"<text x="4" y="{}">{}</text>"#, y + CELL - 3, t.step);
        for (j, p) in t.probs.iter().enumerate() {
            let shade = (255.0 * (1.0 - p.clamp(0.0, 1.0))).round() as u8;
            let _ = writeln!(
                s,
                r##"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},255)" stroke="#ddd"/>"##,
                MARGIN + j * CELL
            );
        }
        if t.halt > 0 {
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="none" stroke="red" stroke-width="2"/>"#,
                MARGIN + (t.halt - 1) * CELL
            );
        }
        let cx = MARGIN + t.synced * CELL;
        let _ = writeln!(s, r#"<circle cx="{cx}" cy="{}" r="2.5" fill="black"/>"#, y + CELL / 2);
        let e = emission_boundary(t, chunks, u.frames);
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{y}" x2="{0}" y2="{1}" stroke="orange" stroke-width="2"/>"#,
            MARGIN + e * CELL,
            y + CELL
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cumulative::{HaltReason, HaltingTrace};

    #[test]
    fn one_cell_per_probability() {
        let u = UtteranceResult {
            utt_id: 3,
            hyp: vec![2],
            reference: vec![2],
            boundaries: vec![4],
            traces: vec![
                HaltingTrace::new(1, vec![0.1, 0.2, 0.7], 3, 0, HaltReason::Triggered, 3),
                HaltingTrace::new(2, vec![0.1; 4], 4, 3, HaltReason::Exhausted, 4),
            ],
            frames: 4,
            truncated: false,
        };
        let svg = halting_svg(&u, &ChunkConfig::default());
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("rgb(").count(), 7);
        assert_eq!(svg.matches(r#"stroke="red""#).count(), 2);
    }
}
