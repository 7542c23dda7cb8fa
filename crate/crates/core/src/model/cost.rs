//! Analytic parameter and multiply-accumulate counts.
//!
//! Conventions:
//! - conv: `k²·C_in·C_out·H_out·W_out / groups` MACs; weights plus bias.
//! - batch-norm (train form only): one MAC per output element; `γ` and `β`
//!   are parameters, running statistics are not.
//! - attention matmuls are counted explicitly; softmax, activations,
//!   residual additions and pooling are not counted.
//! - classifier: `in·out` MACs per image.

use serde::Serialize;

use super::{Attention, ModelConfig};
use crate::blocks::{sdta_split, Mode, QK_DIM};
use crate::error::Result;
use crate::init::BranchShape;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub variant: String,
    pub form: Mode,
    pub attention: Attention,
    pub resolution: usize,
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_macs: u64,
}

impl CostReport {
    pub fn layer(&self, name: &str) -> Option<&LayerCost> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Sum over layers whose name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> (u64, u64) {
        self.layers
            .iter()
            .filter(|l| l.name.starts_with(prefix))
            .fold((0, 0), |(p, m), l| (p + l.params, m + l.macs))
    }
}

struct Counter {
    form: Mode,
    layers: Vec<LayerCost>,
}

fn conv_cost(cin: usize, cout: usize, k: usize, groups: usize, out_hw: usize) -> (u64, u64) {
    let w = (k * k * cin * cout / groups) as u64;
    (w + cout as u64, w * out_hw as u64)
}

impl Counter {
    fn push(&mut self, name: String, params: u64, macs: u64) {
        self.layers.push(LayerCost { name, params, macs });
    }

    /// One reparameterizable unit; returns the output side.
    fn unit(&mut self, name: String, s: BranchShape, side: usize) -> usize {
        let pad = (s.kernel - 1) / 2;
        let out = (side + 2 * pad - s.kernel) / s.stride + 1;
        let hw = out * out;
        let (mut params, mut macs) = conv_cost(s.in_channels, s.out_channels, s.kernel, s.groups, hw);
        if self.form == Mode::Train {
            let bn = |c: usize| (2 * c as u64, (c * hw) as u64);
            let add = |acc: &mut (u64, u64), x: (u64, u64)| {
                acc.0 += x.0;
                acc.1 += x.1;
            };
            let mut acc = (params, macs);
            add(&mut acc, bn(s.out_channels));
            if s.scale {
                add(&mut acc, conv_cost(s.in_channels, s.out_channels, 1, s.groups, hw));
                add(&mut acc, bn(s.out_channels));
            }
            if s.identity {
                add(&mut acc, bn(s.out_channels));
            }
            (params, macs) = acc;
        }
        self.push(name, params, macs);
        out
    }

    fn ffn(&mut self, prefix: &str, c: usize, ratio: usize, side: usize) {
        self.unit(format!("{prefix}.ffn.expand"), BranchShape::plain(c, c * ratio, 1, 1, 1), side);
        self.unit(format!("{prefix}.ffn.project"), BranchShape::plain(c * ratio, c, 1, 1, 1), side);
    }
}

/// Cost of `config` in the given form at input side `resolution`.
pub fn count(config: &ModelConfig, form: Mode, resolution: usize) -> Result<CostReport> {
    config.validate()?;
    let mut ctr = Counter { form, layers: Vec::new() };
    let mut side = resolution;
    let mut cin = 3;
    for (i, &cout) in config.stem_channels().iter().enumerate() {
        side = ctr.unit(format!("stem.{i}"), BranchShape::embed(cin, cout, 2), side);
        cin = cout;
    }
    let [d1, d2, d3] = config.dims;
    let r = config.ffn_ratio;
    for b in 0..config.depths[0] {
        let p = format!("stage1.block{b}");
        ctr.unit(format!("{p}.mixer"), BranchShape::depthwise(d1), side);
        ctr.ffn(&p, d1, r, side);
    }
    side = ctr.unit("down12".into(), BranchShape::embed(d1, d2, 2), side);
    for b in 0..config.depths[1] {
        let p = format!("stage2.block{b}");
        ctr.unit(format!("{p}.mixer"), BranchShape::depthwise(d2), side);
        ctr.ffn(&p, d2, r, side);
    }
    side = ctr.unit("down23".into(), BranchShape::embed(d2, d3, 2), side);
    let hw = (side * side) as u64;
    for b in 0..config.depths[2] {
        let p = format!("stage3.block{b}");
        match config.attention {
            Attention::Sdta => {
                let [_, _, v, _] = sdta_split(d3)?;
                ctr.unit(format!("{p}.pre_mixer"), BranchShape::depthwise(d3), side);
                ctr.unit(format!("{p}.proj_p"), BranchShape::plain(d3, d3 + 2 * QK_DIM, 1, 1, 1), side);
                ctr.push(format!("{p}.attn.qk"), 0, hw * hw * QK_DIM as u64);
                ctr.push(format!("{p}.attn.av"), 0, v as u64 * hw * hw);
                ctr.unit(format!("{p}.proj_o"), BranchShape::plain(d3, d3, 1, 1, 1), side);
            }
            Attention::Mdta => {
                ctr.unit(format!("{p}.qkv"), BranchShape::plain(d3, 3 * d3, 1, 1, 1), side);
                ctr.unit(format!("{p}.dwconv"), BranchShape::plain(3 * d3, 3 * d3, 3, 1, 3 * d3), side);
                let c = d3 as u64;
                ctr.push(format!("{p}.attn.qk"), 0, c * c * hw);
                ctr.push(format!("{p}.attn.av"), 0, c * c * hw);
                ctr.unit(format!("{p}.proj"), BranchShape::plain(d3, d3, 1, 1, 1), side);
            }
        }
        ctr.ffn(&p, d3, r, side);
    }
    let nc = config.num_classes as u64;
    ctr.push("head".into(), d3 as u64 * nc + nc, d3 as u64 * nc);

    let total_params = ctr.layers.iter().map(|l| l.params).sum();
    let total_macs = ctr.layers.iter().map(|l| l.macs).sum();
    Ok(CostReport {
        variant: config.variant.clone(),
        form,
        attention: config.attention,
        resolution,
        layers: ctr.layers,
        total_params,
        total_macs,
    })
}
