//! Static HTML rendering of an attribution report: a token heatmap (red
//! for positive contributions, blue for negative) and top component
//! tables. Single self-contained file, inline styling.

use crate::report::Report;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn heat_color(score: f64, max_abs: f64) -> String {
    if max_abs == 0.0 {
        return "rgb(255,255,255)".to_string();
    }
    let s = (score / max_abs).clamp(-1.0, 1.0);
    let intensity = (s.abs() * 200.0) as u8;
    if s >= 0.0 {
        format!("rgb(255,{},{})", 255 - intensity, 255 - intensity)
    } else {
        format!("rgb({},{},255)", 255 - intensity, 255 - intensity)
    }
}

pub fn render(report: &Report) -> String {
    let mut body = String::new();

    body.push_str(&format!(
        "<h1>Attribution report</h1>\n<p class=\"meta\">model: <code>{}</code></p>\n",
        escape(&report.model.path)
    ));
    if let Some(t) = &report.target {
        body.push_str(&format!(
            "<p class=\"meta\">target token {} at position {}</p>\n",
            t.token, t.position
        ));
    }
    if let Some(p) = &report.path_weights {
        body.push_str(&format!(
            "<p class=\"meta\">&mu;<sub>q</sub>={:.3} &mu;<sub>k</sub>={:.3} &mu;<sub>v</sub>={:.3} \
             &mu;<sub>gate</sub>={:.3} &mu;<sub>up</sub>={:.3}</p>\n",
            p.mu_q, p.mu_k, p.mu_v, p.mu_gate, p.mu_up
        ));
    }

    if let (Some(tokens), Some(scores)) = (&report.tokens, &report.token_scores) {
        let max_abs = scores.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        body.push_str("<h2>Token attribution</h2>\n<div class=\"heatmap\">\n");
        for (i, (tok, score)) in tokens.iter().zip(scores.iter()).enumerate() {
            body.push_str(&format!(
                "<span class=\"tok\" style=\"background:{}\" title=\"position {}, score {:+.6}\">{}</span>\n",
                heat_color(*score, max_abs),
                i,
                score,
                tok
            ));
        }
        body.push_str("</div>\n");
    }

    for (name, table) in [
        ("Attention heads", &report.head_scores),
        ("MLP neurons", &report.neuron_scores),
    ] {
        if let Some(table) = table {
            body.push_str(&format!(
                "<h2>{name}</h2>\n<table><tr><th>layer</th><th>index</th><th>score</th></tr>\n"
            ));
            for e in &table.top {
                body.push_str(&format!(
                    "<tr><td>{}</td><td>{}</td><td>{:+.6}</td></tr>\n",
                    e.layer, e.index, e.score
                ));
            }
            body.push_str("</table>\n");
        }
    }

    format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">\n<title>dpa report</title>\n<style>\n\
         body {{ font-family: system-ui, sans-serif; margin: 2rem; max-width: 60rem; }}\n\
         .meta {{ color: #444; }}\n\
         .heatmap {{ line-height: 2.2; }}\n\
         .tok {{ padding: 0.25rem 0.4rem; margin: 0.1rem; border-radius: 3px; \
                 border: 1px solid #ccc; font-family: monospace; }}\n\
         table {{ border-collapse: collapse; }}\n\
         td, th {{ border: 1px solid #999; padding: 0.25rem 0.6rem; text-align: right; }}\n\
         </style></head><body>\n{body}</body></html>\n"
    )
}
