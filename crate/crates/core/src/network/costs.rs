//! Closed-form parameter and multiply-accumulate counts.
//!
//! Counted: every linear map (`d_in * d_out` MACs per row), the `QK^T` and
//! weighted-sum contractions of attention, one operation per element of the
//! pairwise relation map, and the pairwise MLPs applied to all `S^2` pairs.
//! Normalization, activation, softmax and pooling are not counted. Computed
//! from the configuration alone, independently of the layer structs.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, Mechanism, Operator};
use crate::error::Result;

use super::config::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Costs {
    pub params: usize,
    /// Per forward pass of one cloud.
    pub macs: usize,
}

impl Costs {
    pub fn flops(&self) -> usize {
        2 * self.macs
    }

    fn add(&mut self, params: usize, macs: usize) {
        self.params += params;
        self.macs += macs;
    }

    /// Linear layer with bias applied to `rows` rows.
    fn linear(&mut self, rows: usize, din: usize, dout: usize, bias: bool) {
        self.add(din * dout + if bias { dout } else { 0 }, rows * din * dout);
    }

    /// Linear + batchnorm (+ ReLU).
    fn lbr(&mut self, rows: usize, din: usize, dout: usize) {
        self.linear(rows, din, dout, true);
        self.add(2 * dout, 0);
    }
}

fn attention_costs(c: &mut Costs, a: &AttentionConfig, s: usize, d: usize) {
    if !a.enabled {
        return;
    }
    for _ in 0..3 {
        c.linear(s, d, d, false);
    }
    let pairs = s * s;
    if a.operator.is_vector() {
        let din = if a.operator == Operator::Concatenation { 2 * d } else { d };
        let hidden = a.tau_hidden.unwrap_or(d);
        // relation map, then the weighted sum over keys
        c.add(0, 2 * pairs * d);
        c.linear(pairs, din, hidden, true);
        c.linear(pairs, hidden, d, true);
        if a.position_encoding {
            c.lbr(pairs, 3, d);
            c.linear(pairs, d, d, true);
        }
    } else {
        c.add(0, 2 * pairs * d);
    }
    if a.mechanism == Mechanism::Offset {
        c.lbr(s, d, d);
    }
}

pub fn count_costs(config: &ModelConfig) -> Result<Costs> {
    config.validate()?;
    let mut c = Costs::default();
    let mut din = 3;
    for m in &config.modules {
        let s = m.samples;
        if m.lfa.enabled {
            for (scale, widths) in m.lfa.grouping.scales.iter().zip(&m.lfa.widths) {
                let mut w_in = 2 * din + 3;
                for &w in widths {
                    c.lbr(s * scale.k, w_in, w);
                    w_in = w;
                }
            }
        } else {
            c.lbr(s, din + 3, m.lfa.out_width());
        }
        din = m.lfa.out_width();
        attention_costs(&mut c, &m.attention, s, din);
    }
    let last = config.modules.last().map_or(config.points, |m| m.samples);
    c.lbr(last, din, config.final_width);
    let mut w = config.final_width;
    for &h in &config.head {
        c.lbr(1, w, h);
        w = h;
    }
    c.linear(1, w, config.classes, true);
    Ok(c)
}
