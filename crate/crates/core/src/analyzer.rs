//! Closed-form parameter, MAC and FLOP accounting for a [`ModelConfig`].
//!
//! MACs count the multiplies of convolutions and the dense head only; bias
//! adds, batch norm, GELU, pooling and softmax are excluded.

use std::fmt::Write as _;

use crate::error::Result;
use crate::model::ModelConfig;

/// Published complexity of the reference 64x64 ten-class model.
pub const REFERENCE_PARAMS: u64 = 100_117;
pub const REFERENCE_MACS: u64 = 22_807_808;
pub const REFERENCE_FLOPS: u64 = 45_913_344;

pub const PARAM_DISCREPANCY_NOTE: &str = "the published parameter total (100,117) is not \
reproducible by any configuration that also matches the published MAC count; the total here \
counts every built scalar including batch-norm running statistics";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlopConvention {
    /// Two FLOPs per MAC plus one add per biased output element.
    #[default]
    BiasInclusive,
    /// Exactly two FLOPs per MAC.
    MacsOnly,
}

impl FlopConvention {
    pub fn description(self) -> &'static str {
        match self {
            FlopConvention::BiasInclusive => {
                "FLOPs = 2 x MACs + one add per conv/dense bias output element"
            }
            FlopConvention::MacsOnly => "FLOPs = 2 x MACs (biases ignored)",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub convention: FlopConvention,
    pub trainable_only: bool,
    /// Whether the config is the published 64x64 ten-class architecture.
    pub is_reference: bool,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.layers.iter().map(|l| l.flops).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,params,macs,flops\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{},{},{}", l.name, l.params, l.macs, l.flops);
        }
        let _ = writeln!(
            s,
            "total,{},{},{}",
            self.total_params(),
            self.total_macs(),
            self.total_flops()
        );
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>12} {:>14} {:>14}", "layer", "params", "MACs", "FLOPs");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<16} {:>12} {:>14} {:>14}",
                l.name,
                group(l.params),
                group(l.macs),
                group(l.flops)
            );
        }
        let _ = writeln!(
            s,
            "{:<16} {:>12} {:>14} {:>14}",
            "total",
            group(self.total_params()),
            group(self.total_macs()),
            group(self.total_flops())
        );
        let scope = if self.trainable_only {
            "trainable parameters only"
        } else {
            "parameters include batch-norm running statistics"
        };
        let _ = writeln!(s, "\n{scope}");
        let _ = writeln!(s, "FLOP convention: {}", self.convention.description());
        if self.is_reference {
            let _ = writeln!(s, "\npublished reference figures:");
            let _ = writeln!(
                s,
                "  MACs   {:>12} vs {:>12} ({})",
                group(self.total_macs()),
                group(REFERENCE_MACS),
                relative(self.total_macs(), REFERENCE_MACS)
            );
            let _ = writeln!(
                s,
                "  FLOPs  {:>12} vs {:>12} ({})",
                group(self.total_flops()),
                group(REFERENCE_FLOPS),
                relative(self.total_flops(), REFERENCE_FLOPS)
            );
            let _ = writeln!(
                s,
                "  params {:>12} vs {:>12} ({})",
                group(self.total_params()),
                group(REFERENCE_PARAMS),
                relative(self.total_params(), REFERENCE_PARAMS)
            );
            let _ = writeln!(s, "  note: {PARAM_DISCREPANCY_NOTE}");
        }
        s
    }
}

fn relative(ours: u64, reference: u64) -> String {
    if ours == reference {
        "exact".into()
    } else {
        format!("{:+.2}%", (ours as f64 - reference as f64) / reference as f64 * 100.0)
    }
}

/// `1234567` as `1,234,567`.
pub fn group(v: u64) -> String {
    let digits = v.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn reference_architecture(cfg: &ModelConfig) -> bool {
    let r = ModelConfig::eurosat();
    (cfg.input_h, cfg.input_w, cfg.input_c, cfg.patch, cfg.embed_dim, cfg.depth, &cfg.kernels, cfg.num_classes)
        == (r.input_h, r.input_w, r.input_c, r.patch, r.embed_dim, r.depth, &r.kernels, r.num_classes)
}

pub fn analyze(cfg: &ModelConfig, convention: FlopConvention, trainable_only: bool) -> Result<CostReport> {
    cfg.validate()?;
    let (gh, gw) = cfg.grid();
    let tokens = (gh * gw) as u64;
    let d = cfg.embed_dim as u64;
    let p = cfg.patch as u64;
    let cin = cfg.input_c as u64;
    let classes = cfg.num_classes as u64;
    let flops = |macs: u64, bias_outputs: u64| match convention {
        FlopConvention::BiasInclusive => 2 * macs + bias_outputs,
        FlopConvention::MacsOnly => 2 * macs,
    };
    let mut layers = Vec::with_capacity(2 + cfg.depth * (cfg.kernels.len() + 2));
    let macs = tokens * d * p * p * cin;
    layers.push(LayerCost {
        name: "embed".into(),
        params: p * p * cin * d + d,
        macs,
        flops: flops(macs, tokens * d),
    });
    for i in 0..cfg.depth {
        for &k in &cfg.kernels {
            let k = k as u64;
            let macs = tokens * d * k * k;
            layers.push(LayerCost {
                name: format!("block{i}.dw{k}"),
                params: k * k * d + d,
                macs,
                flops: flops(macs, tokens * d),
            });
        }
        let macs = tokens * d * d;
        layers.push(LayerCost {
            name: format!("block{i}.pw"),
            params: d * d + d,
            macs,
            flops: flops(macs, tokens * d),
        });
        layers.push(LayerCost {
            name: format!("block{i}.bn"),
            params: if trainable_only { 2 * d } else { 4 * d },
            macs: 0,
            flops: 0,
        });
    }
    let macs = d * classes;
    layers.push(LayerCost {
        name: "head".into(),
        params: d * classes + classes,
        macs,
        flops: flops(macs, classes),
    });
    Ok(CostReport {
        layers,
        convention,
        trainable_only,
        is_reference: reference_architecture(cfg),
    })
}

/// Every built scalar, including batch-norm running statistics.
pub fn count_params(cfg: &ModelConfig) -> Result<u64> {
    Ok(analyze(cfg, FlopConvention::default(), false)?.total_params())
}

pub fn count_trainable_params(cfg: &ModelConfig) -> Result<u64> {
    Ok(analyze(cfg, FlopConvention::default(), true)?.total_params())
}

pub fn count_macs(cfg: &ModelConfig) -> Result<u64> {
    Ok(analyze(cfg, FlopConvention::default(), false)?.total_macs())
}

pub fn count_flops(cfg: &ModelConfig, convention: FlopConvention) -> Result<u64> {
    Ok(analyze(cfg, convention, false)?.total_flops())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_h: 4,
            input_w: 4,
            input_c: 1,
            patch: 2,
            embed_dim: 2,
            depth: 1,
            num_classes: 2,
            ..ModelConfig::eurosat()
        }
    }

    #[test]
    fn default_totals() {
        let c = ModelConfig::eurosat();
        assert_eq!(count_params(&c).unwrap(), 94_090);
        assert_eq!(count_macs(&c).unwrap(), 22_807_808);
        assert_eq!(count_flops(&c, FlopConvention::BiasInclusive).unwrap(), 46_041_610);
        assert_eq!(count_flops(&c, FlopConvention::MacsOnly).unwrap(), 45_615_616);
        assert_eq!(count_params(&ModelConfig::aid()).unwrap(), 96_670);
        assert_eq!(count_trainable_params(&c).unwrap(), 94_090 - 4 * 2 * 128);
    }

    #[test]
    fn embed_alone() {
        let r = analyze(&ModelConfig::eurosat(), FlopConvention::default(), false).unwrap();
        assert_eq!(r.layers[0].name, "embed");
        assert_eq!(r.layers[0].macs, 1_572_864);
        assert_eq!(r.layers[0].params, 6_272);
        assert_eq!(r.layers.last().unwrap().params, 1_290);
    }

    #[test]
    fn tiny_totals() {
        let c = tiny();
        assert_eq!(count_params(&c).unwrap(), 102);
        assert_eq!(count_macs(&c).unwrap(), 324);
        assert_eq!(count_flops(&c, FlopConvention::BiasInclusive).unwrap(), 682);
        assert_eq!(count_flops(&c, FlopConvention::MacsOnly).unwrap(), 648);
    }

    #[test]
    fn table_mentions_reference_figures() {
        let t = analyze(&ModelConfig::eurosat(), FlopConvention::default(), false)
            .unwrap()
            .to_table();
        assert!(t.contains("22,807,808"));
        assert!(t.contains("100,117"));
        assert!(t.contains(FlopConvention::BiasInclusive.description()));
        let t = analyze(&tiny(), FlopConvention::default(), false).unwrap().to_table();
        assert!(!t.contains("100,117"));
    }

    #[test]
    fn csv_total_row() {
        let csv = analyze(&tiny(), FlopConvention::default(), false).unwrap().to_csv();
        assert!(csv.starts_with("layer,params,macs,flops\nembed,10,32,72\n"), "{csv}");
        assert!(csv.ends_with("total,102,324,682\n"), "{csv}");
    }

    #[test]
    fn grouping() {
        assert_eq!(group(0), "0");
        assert_eq!(group(999), "999");
        assert_eq!(group(1000), "1,000");
        assert_eq!(group(22_807_808), "22,807,808");
    }
}
