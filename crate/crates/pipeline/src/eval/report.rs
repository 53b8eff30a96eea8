//! Plain-text rendering of run reports.

use std::fmt::Write;

use super::EvalRun;

/// Display name of a backend id: `vit-l-14` → `ViT-L/14`, `rn50` → `RN50`.
pub fn backend_label(backend_id: &str) -> String {
    let lower = backend_id.to_ascii_lowercase();
    if let Some(rest) = lower.strip_prefix("vit-") {
        let mut parts = rest.splitn(2, '-');
        if let (Some(size), Some(patch)) = (parts.next(), parts.next()) {
            return format!("ViT-{}/{}", size.to_ascii_uppercase(), patch);
        }
    }
    if lower.starts_with("rn") && lower[2..].chars().all(|c| c.is_ascii_digit() || c == 'x') {
        return lower.to_ascii_uppercase();
    }
    backend_id.to_owned()
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

/// `"EUROSAT ViT-L/14: Ours 56.20, CLIP 27.78, Δ +28.42"`; accuracies in `[0, 1]`.
pub fn format_delta_row(dataset_id: &str, backend_id: &str, ours: f64, baseline_label: &str, baseline: f64) -> String {
    format!(
        "{} {}: Ours {}, {} {}, Δ {:+.2}",
        dataset_id.to_ascii_uppercase(),
        backend_label(backend_id),
        pct(ours),
        baseline_label,
        pct(baseline),
        (ours - baseline) * 100.0
    )
}

pub fn render_report(run: &EvalRun) -> String {
    let c = &run.config;
    let mut out = String::new();
    let _ = writeln!(out, "run        {}", run.run_id);
    let _ = writeln!(out, "dataset    {}", c.dataset_id);
    let _ = writeln!(out, "backend    {} (d={})", backend_label(&c.backend_id), run.feature_dim);
    let _ = writeln!(
        out,
        "config     {} | prompts {} | scales {} | {} | {} | n_g {}",
        run.label,
        c.prompt_style,
        c.n_scales,
        if c.calibration_applied { "calibrated" } else { "uncorrected" },
        if c.raw_aggregate { "raw aggregate" } else { "renormalized" },
        c.n_g
    );
    let _ = writeln!(out, "scores     {}", run.score_digest);
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "accuracy   overall {}  macro {}  (n={})",
        pct(run.accuracy.overall),
        pct(run.accuracy.macro_avg),
        run.accuracy.n_test
    );
    if let Some(b) = &run.baseline {
        let _ = writeln!(out, "{}", format_delta_row(&c.dataset_id, &c.backend_id, run.accuracy.overall, &b.label, b.overall));
    }
    if let Some(u) = &run.uncorrected {
        let _ = writeln!(
            out,
            "calibrated {}  uncorrected {}  Δ {:+.2}",
            pct(run.accuracy.overall),
            pct(u.overall),
            u.delta_overall * 100.0
        );
    }
    let _ = writeln!(out);

    let width = run
        .classes
        .iter()
        .map(|c| c.class_id.chars().count())
        .chain(["class".len()])
        .max()
        .unwrap_or(5);
    let _ = writeln!(out, "{:<width$}  {:>8}  {:>7}  {:>8}", "class", "accuracy", "sources", "excluded");
    for class in &run.classes {
        let acc = run.accuracy.per_class.get(&class.class_id).copied().unwrap_or(0.0);
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>7}  {:>8}",
            class.class_id,
            pct(acc),
            class.source_count,
            class.excluded.len()
        );
    }
    if !run.deficits.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "deficits");
        for d in &run.deficits {
            let _ = writeln!(out, "  {d}");
        }
    }
    let e = &run.error_stats;
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "flags      prompts {}  images {}  overlap {}  total {}",
        e.prompt_errors, e.image_errors, e.overlap, e.overlap_deduplicated_total
    );
    for (cat, count) in &e.per_category {
        let _ = writeln!(out, "  {cat:<18} {:>4}  {:.4}", count.count, count.ratio);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_format() {
        assert_eq!(
            format_delta_row("eurosat", "vit-l-14", 0.5620, "CLIP", 0.2778),
            "EUROSAT ViT-L/14: Ours 56.20, CLIP 27.78, Δ +28.42"
        );
        assert_eq!(
            format_delta_row("cub", "rn50", 0.4, "CLIP", 0.45),
            "CUB RN50: Ours 40.00, CLIP 45.00, Δ -5.00"
        );
    }

    #[test]
    fn backend_labels() {
        assert_eq!(backend_label("vit-b-32"), "ViT-B/32");
        assert_eq!(backend_label("vit-b-16"), "ViT-B/16");
        assert_eq!(backend_label("rn50"), "RN50");
        assert_eq!(backend_label("mock-7"), "mock-7");
    }
}
