//! Plain-text rendering of a report for humans.

use std::fmt::Write;

use crate::report::RunReport;

fn num(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e-4 && v.abs() < 1e7 {
        format!("{v:.6}")
    } else {
        format!("{v:.6e}")
    }
}

pub fn render(r: &RunReport) -> String {
    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(
        w,
        "{} ({}), {} units, response {}",
        r.command, r.schema_version, r.data.n_units, r.data.response
    );
    if let Some(m) = &r.model {
        let _ = writeln!(
            w,
            "mean: {}   (rank {} of {} columns)",
            m.mean,
            m.mean_rank,
            m.mean_columns.len()
        );
        let _ = writeln!(w, "cov:  {}", m.cov);
    }
    if let Some(id) = &r.identifiability {
        let _ = writeln!(w, "\nidentifiability (residual df {})", id.residual_df);
        for t in &id.terms {
            let extra = match &t.status {
                neoclassical::TermStatus::Confounded { with } => {
                    format!(" with {}", with.join(", "))
                }
                _ => String::new(),
            };
            let _ = writeln!(w, "  {:<16} {}{}", t.term, t.status.label(), extra);
        }
    }
    if let Some(f) = &r.fit {
        let _ = writeln!(
            w,
            "\nREML log-likelihood {}   iterations {}   converged {}",
            num(f.reml_loglik),
            f.iterations,
            f.converged
        );
        let _ = writeln!(w, "  {:<16} {:>16}", "component", "estimate");
        for ((t, c), b) in f.terms.iter().zip(&f.components).zip(&f.boundary_flags) {
            let _ = writeln!(
                w,
                "  {:<16} {:>16}{}",
                t,
                num(*c),
                if *b { "  (boundary)" } else { "" }
            );
        }
        let _ = writeln!(
            w,
            "  {:<16} {:>16} {:>16}",
            "coefficient", "estimate", "std. error"
        );
        for (j, (name, b)) in f.coefficient_names.iter().zip(&f.beta).enumerate() {
            let se = match &f.beta_covariance {
                _ if f.beta_aliased[j] => "aliased".to_string(),
                Some(c) => num(c[j][j].max(0.0).sqrt()),
                None => "-".to_string(),
            };
            let _ = writeln!(w, "  {:<16} {:>16} {:>16}", name, num(*b), se);
        }
    }
    if !r.predictions.is_empty() {
        let _ = writeln!(w, "\npredictions");
        for p in &r.predictions {
            let _ = writeln!(
                w,
                "  {:<24} {:>14} se {:>12}",
                p.unit,
                num(p.prediction.point),
                num(p.prediction.se)
            );
        }
    }
    if !r.contrasts.is_empty() {
        let _ = writeln!(w, "\ncontrasts");
        for c in &r.contrasts {
            let _ = writeln!(
                w,
                "  {} - {}: {} se {}",
                c.unit_a,
                c.unit_b,
                num(c.prediction.point),
                num(c.prediction.se)
            );
        }
    }
    for e in &r.effects {
        let _ = writeln!(
            w,
            "\neffects of {} (against a NEW level; centered in brackets)",
            e.term
        );
        for (a, c) in e.effects.iter().zip(&e.centered) {
            let _ = writeln!(
                w,
                "  {:<16} {:>14} se {:>12}  [{}]",
                a.level,
                num(a.prediction.point),
                num(a.prediction.se),
                num(c.prediction.point)
            );
        }
    }
    if let Some(d) = &r.diagnostics {
        let _ = writeln!(
            w,
            "\ncurve diagnostics on {} ({} points, step {})",
            d.grid.covariate, d.grid.points, d.grid.step
        );
        if let Some(s) = &d.spline {
            let _ = writeln!(
                w,
                "  third-derivative variation   {}",
                num(s.third_derivative_variation)
            );
            let _ = writeln!(
                w,
                "  knot gaps f, f', f''         {} {} {}",
                num(s.value_gap),
                num(s.first_derivative_gap),
                num(s.second_derivative_gap)
            );
            let _ = writeln!(
                w,
                "  exterior f''                 {}",
                num(s.exterior_second_derivative)
            );
        }
        if let Some(l) = &d.piecewise_linear {
            let _ = writeln!(
                w,
                "  within-interval f''          {}",
                num(l.second_derivative_within)
            );
            let _ = writeln!(w, "  knot gap f                   {}", num(l.value_gap));
            let _ = writeln!(
                w,
                "  exterior f'                  {}",
                num(l.exterior_slope)
            );
        }
    }
    if let Some(s) = &r.spectrum {
        let _ = writeln!(
            w,
            "\n  {:>6} {:>12} {:>4} {:>16}",
            "j", "frequency", "df", "SS"
        );
        for row in &s.rows {
            let _ = writeln!(
                w,
                "  {:>6} {:>12.6} {:>4} {:>16}",
                row.index,
                row.frequency,
                row.df,
                num(row.ss)
            );
        }
        let _ = writeln!(
            w,
            "  {:>6} {:>12} {:>4} {:>16}",
            "total",
            "",
            s.n - 1,
            num(s.total_ss)
        );
    }
    if let Some(y) = &r.yates {
        let _ = writeln!(w, "\nYates ({} factors, {:?})", y.n_factors, y.divisor);
        for e in &y.entries {
            let _ = writeln!(w, "  {:<8} {:>16}", e.label, num(e.value));
        }
    }
    if !r.warnings.is_empty() {
        let _ = writeln!(w, "\nwarnings");
        for warn in &r.warnings {
            let _ = writeln!(w, "  [{}] {}", warn.code, warn.message);
        }
    }
    out
}
