//! Per-epoch metrics and their CSV schema.

/// One row of the training metrics CSV. Option fields serialize as empty
/// cells (lane-only deviation, epochs without policy updates, algorithms
/// without a feasibility notion).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean undiscounted episode return.
    pub mean_return: f64,
    /// Total risk incurred divided by the number of episodes.
    pub mean_risk: f64,
    /// Step-weighted mean |d| over the epoch's episodes (lane keeping only).
    pub mean_abs_deviation: Option<f64>,
    /// Fraction of sample sets classified feasible.
    pub feasible_fraction: Option<f64>,
    /// Number of recovery updates taken.
    pub recovery_count: u32,
    /// Mean measured KL(new, old) after policy updates.
    pub mean_post_update_kl: Option<f64>,
    pub offlane_count: u32,
    pub collision_count: u32,
}

pub const METRICS_HEADER: &str = "epoch,mean_return,mean_risk,mean_abs_deviation,feasible_fraction,recovery_count,mean_post_update_kl,offlane_count,collision_count";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EpochMetrics {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.mean_return,
            self.mean_risk,
            opt(self.mean_abs_deviation),
            opt(self.feasible_fraction),
            self.recovery_count,
            opt(self.mean_post_update_kl),
            self.offlane_count,
            self.collision_count,
        )
    }
}
