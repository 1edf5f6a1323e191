//! Tabular renderings of report JSON.

use crate::metrics::FairnessReport;

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

/// Summary and pairwise tables in Markdown.
pub fn to_markdown(r: &FairnessReport) -> String {
    let q = &r.quality;
    let mut s = format!("# Fairness report: {}\n\n", r.attribute);
    s.push_str("| metric | value |\n|---|---|\n");
    s.push_str(&format!("| I.F. | {:.4} |\n| G.F. | {:.4} |\n", r.individual_fairness, r.group_fairness));
    s.push_str(&format!("| PPL | {} |\n| PPL^s | {} |\n", cell(q.ppl), cell(q.ppl_subset)));
    s.push_str(&format!("| S.S. | {} |\n| S.S.^c | {} |\n", cell(q.semantic_similarity), cell(q.mention_fraction)));
    if let (Some(eps), Some(fair)) = (r.epsilon, r.is_fair) {
        s.push_str(&format!("| fair at epsilon {eps} | {fair} |\n"));
    }
    s.push_str("\n| template | value a | value b | W1 |\n|---|---|---|---|\n");
    for p in &r.pairwise_w1 {
        s.push_str(&format!("| {} | {} | {} | {:.4} |\n", p.template_id, p.value_a, p.value_b, p.w1));
    }
    s.push_str("\n| subgroup | W1 to pooled |\n|---|---|\n");
    for g in &r.subgroup_w1 {
        s.push_str(&format!("| {} | {:.4} |\n", g.value, g.w1));
    }
    s
}
