//! FLOPS accounting, the differentiable expected-cost term, and the
//! combined accuracy-plus-cost search objective.
//!
//! The per-stage cost map is built once from the supernet's initial
//! geometry and kept fixed for the rest of the run, so the cost scale
//! (and with it the meaning of the trade-off weight lambda) does not
//! drift when kernels are reallocated mid-search. Exported architecture
//! specs use the true chained widths instead; see `Supernet::finalize`.

use crate::error::{Error, Result};
use crate::masking::ChannelOptions;
use crate::supernet::Supernet;
use crate::tensor::{ops, Graph, Tensor};
use std::collections::BTreeMap;
use std::path::Path;

/// Multiply-accumulate count (x2) of one convolution.
pub fn flops_conv(c_in: usize, f: usize, k: usize, h_out: usize, w_out: usize) -> f64 {
    2.0 * c_in as f64 * f as f64 * (k * k) as f64 * (h_out * w_out) as f64
}

/// Fixed geometry of one searchable stage, as seen by the cost model.
#[derive(Debug, Clone, Copy)]
pub struct StageGeometry {
    pub c_in: usize,
    pub kernel: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl StageGeometry {
    pub fn flops_at(&self, channels: usize) -> f64 {
        flops_conv(self.c_in, channels, self.kernel, self.out_h, self.out_w)
    }
}

/// Where per-option costs come from.
#[derive(Debug, Clone)]
pub enum CostBackend {
    /// FLOPS-proportional latency proxy, `seconds_per_flop` calibratable.
    Flops { seconds_per_flop: f64 },
    /// Measured per-option latencies: (stage, channels) -> milliseconds.
    LatencyTable { ms: BTreeMap<(usize, usize), f64> },
}

#[derive(Debug, Clone)]
pub struct CostTable {
    pub lambda: f64,
    geoms: Vec<StageGeometry>,
    backend: CostBackend,
    /// Normalization denominator: the unmasked supernet's total cost in
    /// the backend's unit, captured at build time.
    reference: f64,
    /// FLOPS of stem + head + classifier at build-time geometry.
    fixed_flops: f64,
}

impl CostTable {
    pub fn from_supernet(net: &Supernet, lambda: f64, backend: CostBackend) -> Result<CostTable> {
        if lambda < 0.0 {
            return Err(Error::InvalidArg(format!("lambda must be >= 0, got {lambda}")));
        }
        let geoms = net.stage_geometries();
        let fixed_flops = net.fixed_flops();
        let reference = match &backend {
            CostBackend::Flops { .. } => net.unmasked_flops(),
            CostBackend::LatencyTable { ms } => {
                let mut total = 0.0;
                for (i, stage) in net.stages.iter().enumerate() {
                    let widest = stage.options().max();
                    total += *ms.get(&(i, widest)).ok_or_else(|| {
                        Error::Config(format!(
                            "latency table has no row for stage {i} at {widest} channels"
                        ))
                    })?;
                }
                total
            }
        };
        if reference <= 0.0 {
            return Err(Error::InvalidArg("cost reference must be positive".into()));
        }
        Ok(CostTable {
            lambda,
            geoms,
            backend,
            reference,
            fixed_flops,
        })
    }

    pub fn stage_count(&self) -> usize {
        self.geoms.len()
    }

    pub fn reference(&self) -> f64 {
        self.reference
    }

    pub fn seconds_per_flop(&self) -> Option<f64> {
        match &self.backend {
            CostBackend::Flops { seconds_per_flop } => Some(*seconds_per_flop),
            CostBackend::LatencyTable { .. } => None,
        }
    }

    /// Cost of each candidate width of one stage, in backend units.
    pub fn option_costs(&self, stage: usize, options: &ChannelOptions) -> Result<Vec<f64>> {
        let geom = self.geoms.get(stage).ok_or_else(|| {
            Error::InvalidArg(format!("cost table has {} stages, no stage {stage}", self.geoms.len()))
        })?;
        match &self.backend {
            CostBackend::Flops { .. } => Ok(options
                .values()
                .iter()
                .map(|&f| geom.flops_at(f))
                .collect()),
            CostBackend::LatencyTable { ms } => options
                .values()
                .iter()
                .map(|&f| {
                    ms.get(&(stage, f)).copied().ok_or_else(|| {
                        Error::Config(format!(
                            "latency table has no row for stage {stage} at {f} channels"
                        ))
                    })
                })
                .collect(),
        }
    }

    /// Differentiable expectation of one stage's cost under normalized
    /// selector weights.
    pub fn expected_cost(
        &self,
        g: &mut Graph,
        stage: usize,
        options: &ChannelOptions,
        weights: &Tensor,
    ) -> Result<Tensor> {
        let total: f64 = weights.data().iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArg(format!(
                "expected_cost: weights must be normalized, sum is {total}"
            )));
        }
        let costs = self.option_costs(stage, options)?;
        ops::dot_const(g, weights, &costs)
    }

    /// Plain-value expectation of one stage's cost, for reporting.
    pub fn expected_cost_value(
        &self,
        stage: usize,
        options: &ChannelOptions,
        weights: &[f64],
    ) -> Result<f64> {
        let costs = self.option_costs(stage, options)?;
        Ok(weights.iter().zip(&costs).map(|(w, c)| w * c).sum())
    }

    /// Expected whole-network FLOPS under current selector weights
    /// (noise-free), including the fixed stem/head/classifier share.
    pub fn expected_flops(&self, net: &Supernet, tau: f64) -> f64 {
        let mut total = self.fixed_flops;
        for (i, stage) in net.stages.iter().enumerate() {
            let weights = stage.selector.eval_weights(stage.options(), tau);
            let geom = &self.geoms[i];
            total += stage
                .options()
                .values()
                .iter()
                .zip(&weights)
                .map(|(&f, w)| w * geom.flops_at(f))
                .sum::<f64>();
        }
        total
    }
}

/// Combined objective: cross-entropy plus lambda times the summed
/// per-stage expected costs, normalized by the unmasked-supernet
/// reference so lambda stays dimensionless.
pub fn search_loss(
    g: &mut Graph,
    logits: &Tensor,
    labels: &[usize],
    net: &Supernet,
    table: &CostTable,
    tau: f64,
) -> Result<Tensor> {
    let ce = ops::softmax_cross_entropy(g, logits, labels)?;
    let mut terms = vec![(ce, 1.0)];
    let cost_scale = table.lambda / table.reference();
    for (i, stage) in net.stages.iter().enumerate() {
        let weights = stage.selector.normalized_weights(g, stage.options(), tau)?;
        let cost = table.expected_cost(g, i, stage.options(), &weights)?;
        terms.push((cost, cost_scale));
    }
    ops::affine_sum(g, &terms)
}

/// Parses a measured-latency table: one `stage_id, channels, milliseconds`
/// row per line. Blank lines and `#` comments are skipped.
pub fn parse_latency_table(text: &str) -> Result<BTreeMap<(usize, usize), f64>> {
    let mut rows = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "latency table line {}: expected 'stage, channels, ms', got '{line}'",
                lineno + 1
            )));
        }
        let stage: usize = parts[0]
            .parse()
            .map_err(|_| Error::Config(format!("latency table line {}: bad stage id", lineno + 1)))?;
        let channels: usize = parts[1]
            .parse()
            .map_err(|_| Error::Config(format!("latency table line {}: bad channel count", lineno + 1)))?;
        let ms: f64 = parts[2]
            .parse()
            .map_err(|_| Error::Config(format!("latency table line {}: bad milliseconds", lineno + 1)))?;
        if ms < 0.0 {
            return Err(Error::Config(format!(
                "latency table line {}: negative latency",
                lineno + 1
            )));
        }
        rows.insert((stage, channels), ms);
    }
    if rows.is_empty() {
        return Err(Error::Config("latency table is empty".into()));
    }
    Ok(rows)
}

pub fn load_latency_table(path: &Path) -> Result<BTreeMap<(usize, usize), f64>> {
    parse_latency_table(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flops_hand_count() {
        // 3 in, 8 out, 3x3 kernel, 32x32 output: 2*3*8*9*1024.
        assert_eq!(flops_conv(3, 8, 3, 32, 32), 442_368.0);
        assert_eq!(flops_conv(3, 0, 3, 32, 32), 0.0);
        assert_eq!(flops_conv(3, 16, 3, 32, 32), 2.0 * flops_conv(3, 8, 3, 32, 32));
    }

    #[test]
    fn latency_table_parse_and_errors() {
        let rows = parse_latency_table("# header\n0, 16, 0.5\n0, 32, 0.9\n1, 16, 0.4\n").unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[&(0, 32)], 0.9);
        assert!(parse_latency_table("0, 16\n").is_err());
        assert!(parse_latency_table("a, b, c\n").is_err());
        assert!(parse_latency_table("").is_err());
    }
}
