//! Layer-wise averages of batch-normalization running statistics.

use serde::{Deserialize, Serialize};

use crate::model::CkspModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStatsRow {
    pub layer: usize,
    pub name: String,
    /// Species name, or `shared` for a layer with a single state.
    pub species: String,
    pub mean: f64,
    pub var: f64,
}

/// One row per normalization slot: channel-averaged running mean and
/// running variance.
pub fn bn_stats_export(model: &CkspModel) -> Vec<BnStatsRow> {
    let mut rows = Vec::new();
    for (layer, norm) in model.norms.iter().enumerate() {
        for (i, slot) in norm.slots.iter().enumerate() {
            let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            rows.push(BnStatsRow {
                layer,
                name: norm.name.clone(),
                species: if norm.per_species {
                    model.species[i].name.clone()
                } else {
                    "shared".into()
                },
                mean: avg(&slot.running.mean),
                var: avg(&slot.running.var),
            });
        }
    }
    rows
}

pub fn bn_stats_csv(rows: &[BnStatsRow]) -> String {
    let mut out = String::from("layer,name,species,mean,var\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.layer, r.name, r.species, r.mean, r.var));
    }
    out
}

/// Variance of the per-species averaged running means, per layer. Layers
/// with a single shared state report 0.
pub fn inter_species_divergence(rows: &[BnStatsRow]) -> Vec<(usize, f64)> {
    let layers = rows.iter().map(|r| r.layer).max().map_or(0, |m| m + 1);
    (0..layers)
        .map(|l| {
            let means: Vec<f64> = rows.iter().filter(|r| r.layer == l).map(|r| r.mean).collect();
            let n = means.len() as f64;
            let mu = means.iter().sum::<f64>() / n;
            (l, means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / n)
        })
        .collect()
}
