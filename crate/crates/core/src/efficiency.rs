//! Parameter and FLOPs accounting.
//!
//! FLOPs follow the 2 × MAC convention for convolutions, linear layers and
//! attention matrix products. Element-wise work (bias add, ReLU, sigmoid,
//! softmax, residual add, pooling, gating) costs 1 FLOP per output element;
//! normalization layers cost 2 (folded scale + shift).

use std::collections::BTreeMap;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::backbones::FlexModel;
use crate::error::Result;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

impl Cost {
    pub fn new(params: u64, flops: u64) -> Self {
        Self { params, flops }
    }
}

impl Add for Cost {
    type Output = Cost;

    fn add(self, rhs: Cost) -> Cost {
        Cost::new(self.params + rhs.params, self.flops + rhs.flops)
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, rhs: Cost) {
        *self = *self + rhs;
    }
}

/// Totals with a per-submodule breakdown; totals always equal the sums.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub flops: u64,
    pub breakdown: BTreeMap<String, Cost>,
}

impl CostReport {
    pub fn from_breakdown(breakdown: BTreeMap<String, Cost>) -> Self {
        let total = breakdown.values().fold(Cost::default(), |acc, c| acc + *c);
        Self { params: total.params, flops: total.flops, breakdown }
    }

    pub fn is_consistent(&self) -> bool {
        let total = self.breakdown.values().fold(Cost::default(), |acc, c| acc + *c);
        total.params == self.params && total.flops == self.flops
    }
}

/// Learnable scalars per submodule. FLOPs are reported as zero.
pub fn count_params(m: &FlexModel) -> CostReport {
    let breakdown = m
        .cost_breakdown(m.config().image_size)
        .expect("a constructed model accepts its own input size")
        .into_iter()
        .map(|(k, c)| (k, Cost::new(c.params, 0)))
        .collect();
    CostReport::from_breakdown(breakdown)
}

/// Forward-pass FLOPs for one sample of spatial size `input` (H, W); every
/// declared branch runs. Parameter counts are reported as zero.
pub fn count_flops(m: &FlexModel, input: (usize, usize)) -> Result<CostReport> {
    let breakdown = m
        .cost_breakdown(input)?
        .into_iter()
        .map(|(k, c)| (k, Cost::new(0, c.flops)))
        .collect();
    Ok(CostReport::from_breakdown(breakdown))
}

/// Both counts at the model's configured input size.
pub fn cost_report(m: &FlexModel) -> CostReport {
    CostReport::from_breakdown(
        m.cost_breakdown(m.config().image_size).expect("model accepts its own input size"),
    )
}
