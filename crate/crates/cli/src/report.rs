//! Markdown tables for `report`.

use layer_reuse::artifact::{PolicyFile, RunDoc};
use layer_reuse::policy::LayerAction;

fn action_string(actions: &[LayerAction]) -> String {
    actions
        .iter()
        .map(|a| match a {
            LayerAction::Full => 'F',
            LayerAction::Reuse => 'R',
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.6}"))
}

/// One row per policy: threshold, full-layer count, cumulative similarity, actions.
pub fn policy_table(rows: &[(String, PolicyFile)]) -> String {
    let mut out = String::from("| policy | L | theta | C | S | actions |\n|---|---|---|---|---|---|\n");
    for (name, p) in rows {
        out.push_str(&format!(
            "| {name} | {} | {} | {} | {} | {} |\n",
            p.policy.layers(),
            opt(p.policy.theta),
            p.policy.full_count(),
            opt(p.cum_similarity),
            action_string(&p.policy.actions),
        ));
    }
    out
}

/// One row per run, ordered by threshold (static policies last).
pub fn fidelity_table(rows: &[(String, RunDoc)]) -> String {
    let mut sorted: Vec<&(String, RunDoc)> = rows.iter().collect();
    sorted.sort_by(|a, b| match (a.1.theta, b.1.theta) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    let mut out = String::from(
        "| run | theta | full layers | mean rnmse | max layer rnmse | mean overlap |\n|---|---|---|---|---|---|\n",
    );
    for (name, r) in sorted {
        let f = &r.fidelity;
        let max = f.layer_mean_rnmse.iter().copied().fold(0.0, f64::max);
        let overlap = if f.layer_mean_overlap.is_empty() {
            0.0
        } else {
            f.layer_mean_overlap.iter().sum::<f64>() / f.layer_mean_overlap.len() as f64
        };
        out.push_str(&format!(
            "| {name} | {} | {} | {:.6e} | {:.6e} | {overlap:.6} |\n",
            opt(r.theta),
            r.full_layer_count,
            f.mean_rnmse,
            max,
        ));
    }
    out
}
