//! Closed-form parameter and operation counting. Conventions, stated in
//! every emitted report:
//!   conv params  = C_out*C_in*k*k + C_out
//!   conv MACs    = C_out*C_in*k*k*H_out*W_out, bias absorbed
//!   flops        = 2*MACs + elementwise ops
//!   elementwise  = 1 op per output element for pool, relu, sigmoid, mul,
//!                  add, dropout; 2 for batchnorm (scale, shift); 0 for
//!                  copies (concat, decimation)
//! All counts are per input sample; the batch dimension never enters.

use crate::attention::SpciParams;
use crate::backbone::Backbone;
use crate::layers::ConvLayer;
use crate::scalar::Scalar;
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostLine {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub elementwise: u64,
}

impl CostLine {
    pub fn flops(&self) -> u64 {
        2 * self.macs + self.elementwise
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostReport {
    pub lines: Vec<CostLine>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.lines.iter().map(|l| l.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.lines.iter().map(|l| l.macs).sum()
    }

    pub fn total_elementwise(&self) -> u64 {
        self.lines.iter().map(|l| l.elementwise).sum()
    }

    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs() + self.total_elementwise()
    }

    pub fn prefixed(mut self, prefix: &str) -> Self {
        for line in &mut self.lines {
            line.name = format!("{prefix}.{}", line.name);
        }
        self
    }

    pub fn extend(&mut self, other: CostReport) {
        self.lines.extend(other.lines);
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("# conv params = C_out*C_in*k*k + C_out\n");
        s.push_str("# conv MACs = C_out*C_in*k*k*H_out*W_out, bias absorbed into the accumulate\n");
        s.push_str("# flops = 2*MACs + elementwise ops\n");
        s.push_str("# elementwise: 1 op per output element (pool/relu/sigmoid/mul/add/dropout), 2 for batchnorm, 0 for copies\n");
        s.push_str("# all counts are per input sample\n");
        for l in &self.lines {
            writeln!(s, "{}.params {}", l.name, l.params).unwrap();
            writeln!(s, "{}.macs {}", l.name, l.macs).unwrap();
            writeln!(s, "{}.elementwise {}", l.name, l.elementwise).unwrap();
        }
        writeln!(s, "total.params {}", self.total_params()).unwrap();
        writeln!(s, "total.macs {}", self.total_macs()).unwrap();
        writeln!(s, "total.elementwise {}", self.total_elementwise()).unwrap();
        writeln!(s, "total.flops {}", self.total_flops()).unwrap();
        s
    }
}

/// Cost of one conv evaluated at the given output plane size.
pub fn conv_cost<T: Scalar>(name: &str, layer: &ConvLayer<T>, h_out: usize, w_out: usize) -> CostLine {
    CostLine {
        name: name.to_string(),
        params: layer.param_count() as u64,
        macs: (layer.c_out() * layer.c_in() * layer.k() * layer.k() * h_out * w_out) as u64,
        elementwise: 0,
    }
}

fn elem(name: &str, ops: u64) -> CostLine {
    CostLine {
        name: name.to_string(),
        params: 0,
        macs: 0,
        elementwise: ops,
    }
}

fn bn_line(name: &str, c: usize, h: usize, w: usize) -> CostLine {
    CostLine {
        name: name.to_string(),
        params: 4 * c as u64,
        macs: 0,
        elementwise: 2 * (c * h * w) as u64,
    }
}

/// Counts the block at an HxW input plane. Disabled submodules are identity
/// pass-throughs and contribute nothing, parameters included; the fusion
/// sum and dropout always run.
pub fn count_cost_spci<T: Scalar>(params: &SpciParams<T>, h: usize, w: usize) -> CostReport {
    let c_in = params.c_in() as u64;
    let c_out = params.c_out() as u64;
    let hw = (h * w) as u64;
    let mut lines = Vec::new();
    if params.ssg_on {
        let c_mid = params.ssg.conv1.c_out() as u64;
        lines.push(elem("ssg.gap", c_in));
        lines.push(conv_cost("ssg.conv1", &params.ssg.conv1, 1, 1));
        lines.push(elem("ssg.relu", c_mid));
        lines.push(conv_cost("ssg.conv2", &params.ssg.conv2, 1, 1));
        lines.push(elem("ssg.sigmoid", c_in));
        lines.push(elem("ssg.scale", c_in * hw));
    }
    lines.push(conv_cost("transform", &params.transform, h, w));
    if params.pfm_on {
        lines.push(elem("pfm.avgpool", hw));
        lines.push(elem("pfm.maxpool", hw));
        lines.push(elem("pfm.concat", 0));
        lines.push(conv_cost("pfm.conv7", &params.pfm.conv7, h, w));
        lines.push(elem("pfm.sigmoid", hw));
        lines.push(elem("pfm.scale", c_out * hw));
    }
    if params.cdm_on {
        let c_mid = params.cdm.conv1.c_out();
        lines.push(conv_cost("cdm.conv1", &params.cdm.conv1, h, w));
        lines.push(bn_line("cdm.bn1", c_mid, h, w));
        lines.push(elem("cdm.relu1", c_mid as u64 * hw));
        lines.push(conv_cost("cdm.conv2", &params.cdm.conv2, h, w));
        lines.push(bn_line("cdm.bn2", c_mid, h, w));
        lines.push(elem("cdm.relu2", c_mid as u64 * hw));
        lines.push(conv_cost("cdm.conv3", &params.cdm.conv3, h, w));
        lines.push(elem("cdm.sigmoid", c_out * hw));
        lines.push(elem("cdm.scale", c_out * hw));
    }
    lines.push(elem("fusion.add", 2 * c_out * hw));
    lines.push(elem("fusion.dropout", c_out * hw));
    CostReport { lines }
}

/// Counts the whole chain as it is actually computed: stride-1 convs at
/// the pre-decimation plane size, then a free 2x decimation.
pub fn count_cost_backbone<T: Scalar>(bb: &Backbone<T>) -> CostReport {
    let cfg = bb.config();
    let mut report = CostReport::default();
    let (mut h, mut w) = (cfg.input_h, cfg.input_w);
    for (i, (spec, conv)) in bb.stages().iter().enumerate() {
        report.lines.push(conv_cost(
            &format!("{}.conv", spec.name),
            conv,
            h,
            w,
        ));
        report.lines.push(elem(
            &format!("{}.relu", spec.name),
            (spec.out_channels * h * w) as u64,
        ));
        h /= 2;
        w /= 2;
        if i == 2 {
            if let Some(spci) = bb.spci_p3() {
                report.extend(count_cost_spci(spci, h, w).prefixed("P3.spci"));
            }
        }
    }
    if let Some(spci) = bb.spci_p5() {
        report.extend(count_cost_spci(spci, h, w).prefixed("P5.spci"));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, BackboneConfig, SpciAt};
    use crate::init::init_spci;

    #[test]
    fn one_by_one_conv_counting_example() {
        let layer = ConvLayer::<f32>::zeros(4, 8, 1).unwrap();
        let line = conv_cost("t", &layer, 6, 6);
        assert_eq!(line.params, 36);
        assert_eq!(line.macs, 1152);
        assert_eq!(line.flops(), 2304);
    }

    #[test]
    fn all_disabled_params_reduce_to_transform() {
        let mut params = init_spci::<f32>(16, 16, 16, 0.1, 0).unwrap();
        params.ssg_on = false;
        params.pfm_on = false;
        params.cdm_on = false;
        let report = count_cost_spci(&params, 10, 10);
        assert_eq!(report.total_params(), 16 * 16 + 16);
    }

    #[test]
    fn totals_are_traversal_order_invariant() {
        let params = init_spci::<f32>(24, 24, 16, 0.1, 1).unwrap();
        let report = count_cost_spci(&params, 7, 5);
        let mut reversed = report.clone();
        reversed.lines.reverse();
        assert_eq!(report.total_params(), reversed.total_params());
        assert_eq!(report.total_macs(), reversed.total_macs());
        assert_eq!(report.total_flops(), reversed.total_flops());
    }

    #[test]
    fn spci_params_line_sum_matches_struct_count() {
        let params = init_spci::<f32>(64, 64, 16, 0.1, 2).unwrap();
        let report = count_cost_spci(&params, 80, 80);
        assert_eq!(report.total_params(), params.param_count() as u64);
    }

    #[test]
    fn backbone_report_covers_all_stages_and_blocks() {
        let bb = build_backbone::<f32>(BackboneConfig::default()).unwrap();
        let report = count_cost_backbone(&bb);
        assert_eq!(report.total_params(), bb.param_count() as u64);
        let text = report.to_text();
        for needle in ["P1.conv.macs", "P5.relu.elementwise", "P3.spci.transform.params", "P5.spci.fusion.dropout.elementwise", "total.flops"] {
            assert!(text.contains(needle), "missing {needle}");
        }
        let none = build_backbone::<f32>(BackboneConfig {
            spci_at: SpciAt::None,
            ..Default::default()
        })
        .unwrap();
        let none_text = count_cost_backbone(&none).to_text();
        assert!(!none_text.contains("spci"));
    }

    #[test]
    fn report_text_is_name_value_lines() {
        let params = init_spci::<f32>(8, 8, 16, 0.1, 3).unwrap();
        let text = count_cost_spci(&params, 4, 4).to_text();
        for line in text.lines().filter(|l| !l.starts_with('#')) {
            let tokens: Vec<&str> = line.split_whitespace().collect();
            assert_eq!(tokens.len(), 2, "line {line:?}");
            tokens[1].parse::<u64>().expect("numeric value");
        }
    }
}
