//! Aligned-column renderings. Presentation only; JSON is the machine output.

use accel_core::api::{InsightsResponse, OpportunitiesResponse, RankResponse};

use crate::TrainReport;

fn kv(rows: &[(&str, String)]) -> String {
    let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    rows.iter().map(|(k, v)| format!("{k:<w$}  {v}\n")).collect()
}

pub fn train(r: &TrainReport) -> String {
    let mut out = kv(&[
        ("bundle", r.bundle.display().to_string()),
        ("provider", r.provider_id.clone()),
        ("dims (p, q, m)", format!("{}, {}, {}", r.p, r.q, r.m)),
        ("lambda", format!("{:.6e}", r.lambda)),
        ("nonzero attributes", r.nonzero_attributes.to_string()),
        ("experiments", r.n_training_experiments.to_string()),
        ("arms", r.n_training_arms.to_string()),
        ("config hash", r.config_hash.clone()),
    ]);
    for n in &r.notes {
        out.push_str(&format!("note: {n}\n"));
    }
    out
}

pub fn rank(r: &RankResponse) -> String {
    let w = r.scored.iter().map(|s| s.id.len()).max().unwrap_or(2).max(2);
    let mut out = format!("{:>5}  {:<w$}  {:>14}\n", "rank", "id", "relative score");
    for s in &r.scored {
        out.push_str(&format!("{:>5}  {:<w$}  {:>14.6e}\n", s.rank, s.id, s.score));
    }
    out
}

pub fn insights(r: &InsightsResponse) -> String {
    let mut out = format!(
        "best {} (CTR {:.4}%)  vs  worst {} (CTR {:.4}%)\n\n",
        r.best.id,
        r.best.ctr * 100.0,
        r.worst.id,
        r.worst.ctr * 100.0
    );
    let w = r.contributions.iter().map(|c| c.attribute.len()).max().unwrap_or(9).max(9);
    out.push_str(&format!("{:<w$}  {:>12}  {:>12}  {:<8}  sel\n", "attribute", "delta s", "contrib", "polarity"));
    for c in &r.contributions {
        let sel = if r.selected.iter().any(|s| s.attribute == c.attribute) { "*" } else { "" };
        out.push_str(&format!(
            "{:<w$}  {:>12.4e}  {:>12.4e}  {:<8}  {sel}\n",
            c.attribute,
            c.delta_score,
            c.contribution,
            format!("{:?}", c.polarity).to_lowercase()
        ));
    }
    out.push_str(&format!(
        "\ntotal {:.6e}  (explained {:.6e} + residual {:.6e} = gap {:.6e})\n",
        r.contribution_total, r.gap.explained, r.gap.residual, r.gap.total
    ));
    if let Some(n) = &r.narration {
        out.push('\n');
        for line in &n.rendered {
            out.push_str(line);
            out.push_str("\n\n");
        }
    }
    out
}

pub fn opportunities(r: &OpportunitiesResponse) -> String {
    let w = r.attributes.iter().map(|a| a.attribute.len()).max().unwrap_or(9).max(9);
    let mut out = format!(
        "{:<w$}  {:>11}  {:<6}  {:>5}  {:>5}  {:>5}  {:>5}\n",
        "attribute", "impact", "bin", "R_imp", "R_exp", "R_opp", "R_nov"
    );
    for a in &r.attributes {
        let nov = a.novelty_rank.map(|n| format!("{n}")).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<w$}  {:>11.4e}  {:<6}  {:>5}  {:>5}  {:>5}  {:>5}\n",
            a.attribute,
            a.impact,
            a.bin.to_string(),
            a.importance_rank,
            a.expression_rank,
            a.opportunity_rank,
            nov
        ));
    }
    out.push_str("\nselected:\n");
    if r.selected.is_empty() {
        out.push_str("  (none)\n");
    }
    for s in &r.selected {
        out.push_str(&format!(
            "  {}  learning {}  conversion {}\n",
            s.attribute, s.learning_potential, s.conversion_potential
        ));
    }
    if let Some(n) = &r.narration {
        out.push('\n');
        for line in &n.rendered {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}
