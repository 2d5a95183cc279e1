//! Closed-form parameter accounting, cross-checked against the tensors a
//! model actually instantiates.

use crate::config::{CaConfig, KvMap, ModelConfig};
use crate::model::TinySepformer;
use crate::scalar::Scalar;

/// Bias-free, norm-free counts for one layer of width `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Table1 {
    pub mha: u64,
    pub sepconv: u64,
    pub serial: u64,
    pub parallel: u64,
}

/// `mha = 4 D^2`, `sepconv = Kk D + D^2`, `serial = mha + sepconv`,
/// `parallel = 4 Da^2 + Kk Dc + Dc^2`.
pub fn count_table1(d: u64, kk: u64, da: u64, dc: u64) -> Table1 {
    Table1 {
        mha: 4 * d * d,
        sepconv: kk * d + d * d,
        serial: kk * d + 5 * d * d,
        parallel: 4 * da * da + kk * dc + dc * dc,
    }
}

/// Parallel count for the even split `Da = Dc = D / 2`, written as
/// `Kk D / 2 + 5 D^2 / 4`. `d` must be even.
pub fn parallel_even_split(d: u64, kk: u64) -> u64 {
    assert!(d % 2 == 0, "even split needs an even width");
    kk * d / 2 + 5 * d * d / 4
}

/// Instantiated parameters of one CA layer, biases and norms included.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CaLayerCount {
    pub attention: usize,
    pub conv: usize,
    pub ffn: usize,
    pub norms: usize,
}

impl CaLayerCount {
    pub fn of(c: &CaConfig) -> Self {
        let (da, dc, d) = (c.d_attn, c.d_conv, c.width());
        let attention = if da > 0 { 4 * da * da + 2 * da } else { 0 };
        let conv = if dc > 0 {
            dc * c.kernel + dc * dc + dc + 2 * dc
        } else {
            0
        };
        Self {
            attention,
            conv,
            ffn: d * c.d_ff + c.d_ff + c.d_ff * d + d,
            norms: 2 * d,
        }
    }

    pub fn total(&self) -> usize {
        self.attention + self.conv + self.ffn + self.norms
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub encoder: usize,
    pub preprocess: usize,
    pub intra_layer: CaLayerCount,
    pub inter_layer: CaLayerCount,
    /// Distinct intra (resp. inter) layer sets per block.
    pub intra_sets: usize,
    pub inter_sets: usize,
    pub ca_total: usize,
    pub postprocess: usize,
    pub mask_heads: usize,
    pub decoder: usize,
    pub total_analytic: usize,
    pub total_empirical: Option<usize>,
    pub table1_intra: Table1,
    pub table1_inter: Table1,
}

pub fn count_model(config: &ModelConfig) -> ParamReport {
    let d = config.width();
    let k = config.speakers;
    let e = config.encoder;
    let encoder = e.filters * e.kernel;
    let decoder = e.filters * e.kernel;
    let preprocess = 2 * d + d * d + d;
    let intra_layer = CaLayerCount::of(&config.intra);
    let inter_layer = CaLayerCount::of(&config.inter);
    let (intra_sets, inter_sets) = if config.shared {
        (1, 1)
    } else {
        (config.n_intra, config.n_inter)
    };
    let ca_total = config.n_mask * (intra_sets * intra_layer.total() + inter_sets * inter_layer.total());
    let postprocess = d * d * k + d * k + 1;
    let mask_heads = k * 2 * (d * d + d);
    let table1 = |c: &CaConfig| {
        count_table1(d as u64, c.kernel as u64, c.d_attn as u64, c.d_conv as u64)
    };
    ParamReport {
        encoder,
        preprocess,
        intra_layer,
        inter_layer,
        intra_sets,
        inter_sets,
        ca_total,
        postprocess,
        mask_heads,
        decoder,
        total_analytic: encoder + preprocess + ca_total + postprocess + mask_heads + decoder,
        total_empirical: None,
        table1_intra: table1(&config.intra),
        table1_inter: table1(&config.inter),
    }
}

/// Sum of extents over every distinct parameter tensor.
pub fn count_empirical<T: Scalar>(model: &TinySepformer<T>) -> usize {
    model.params.num_scalars()
}

impl ParamReport {
    pub fn with_empirical<T: Scalar>(mut self, model: &TinySepformer<T>) -> Self {
        self.total_empirical = Some(count_empirical(model));
        self
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.insert("params.encoder", self.encoder);
        kv.insert("params.preprocess", self.preprocess);
        for (name, l, sets) in [
            ("intra", &self.intra_layer, self.intra_sets),
            ("inter", &self.inter_layer, self.inter_sets),
        ] {
            kv.insert(format!("params.{name}.attention"), l.attention);
            kv.insert(format!("params.{name}.conv"), l.conv);
            kv.insert(format!("params.{name}.ffn"), l.ffn);
            kv.insert(format!("params.{name}.norms"), l.norms);
            kv.insert(format!("params.{name}.layer"), l.total());
            kv.insert(format!("params.{name}.sets_per_block"), sets);
        }
        kv.insert("params.ca_total", self.ca_total);
        kv.insert("params.postprocess", self.postprocess);
        kv.insert("params.mask_heads", self.mask_heads);
        kv.insert("params.decoder", self.decoder);
        kv.insert("params.total_analytic", self.total_analytic);
        if let Some(n) = self.total_empirical {
            kv.insert("params.total_empirical", n);
        }
        for (name, t) in [("intra", &self.table1_intra), ("inter", &self.table1_inter)] {
            kv.insert(format!("table1.{name}.mha"), t.mha);
            kv.insert(format!("table1.{name}.sepconv"), t.sepconv);
            kv.insert(format!("table1.{name}.serial"), t.serial);
            kv.insert(format!("table1.{name}.parallel"), t.parallel);
        }
        kv
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let mut line = |label: &str, n: usize| s.push_str(&format!("{label:<28}{n:>14}\n"));
        line("encoder", self.encoder);
        line("preprocess", self.preprocess);
        line("intra layer", self.intra_layer.total());
        line("inter layer", self.inter_layer.total());
        line("dual-path blocks", self.ca_total);
        line("postprocess", self.postprocess);
        line("mask heads", self.mask_heads);
        line("decoder", self.decoder);
        line("total (analytic)", self.total_analytic);
        if let Some(n) = self.total_empirical {
            line("total (instantiated)", n);
        }
        s.push_str(&format!(
            "total {:.2}M\n",
            self.total_analytic as f64 / 1e6
        ));
        s
    }
}

/// One row of the model-size table.
#[derive(Clone, Copy, Debug)]
pub struct SizeRow {
    pub name: &'static str,
    pub n_mask: usize,
    pub n_intra: usize,
    pub n_inter: usize,
    pub shared: bool,
    /// `true` for the pure-attention baseline.
    pub baseline: bool,
    pub millions: f64,
}

pub const SIZE_ROWS: [SizeRow; 9] = [
    SizeRow { name: "Sepformer-16", n_mask: 2, n_intra: 4, n_inter: 4, shared: false, baseline: true, millions: 13.0 },
    SizeRow { name: "Sepformer-32", n_mask: 2, n_intra: 8, n_inter: 8, shared: false, baseline: true, millions: 25.7 },
    SizeRow { name: "Sepformer-32", n_mask: 4, n_intra: 4, n_inter: 4, shared: false, baseline: true, millions: 25.7 },
    SizeRow { name: "Tiny-Sepformer-16", n_mask: 2, n_intra: 4, n_inter: 4, shared: false, baseline: false, millions: 10.2 },
    SizeRow { name: "Tiny-Sepformer-32", n_mask: 2, n_intra: 8, n_inter: 8, shared: false, baseline: false, millions: 20.0 },
    SizeRow { name: "Tiny-Sepformer-32", n_mask: 4, n_intra: 4, n_inter: 4, shared: false, baseline: false, millions: 20.0 },
    SizeRow { name: "Tiny-SepformerS-16", n_mask: 2, n_intra: 4, n_inter: 4, shared: true, baseline: false, millions: 2.9 },
    SizeRow { name: "Tiny-SepformerS-32", n_mask: 2, n_intra: 8, n_inter: 8, shared: true, baseline: false, millions: 2.9 },
    SizeRow { name: "Tiny-SepformerS-32", n_mask: 4, n_intra: 4, n_inter: 4, shared: true, baseline: false, millions: 5.3 },
];

impl SizeRow {
    pub fn config(&self) -> ModelConfig {
        let mut cfg = ModelConfig {
            n_mask: self.n_mask,
            n_intra: self.n_intra,
            n_inter: self.n_inter,
            shared: self.shared,
            ..ModelConfig::default()
        };
        if self.baseline {
            let attn = CaConfig {
                d_conv: 0,
                d_attn: cfg.width(),
                ..cfg.intra
            };
            cfg.intra = attn;
            cfg.inter = attn;
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::ca::LinearParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn table1_full_width() {
        let t = count_table1(256, 51, 128, 128);
        assert_eq!(t.mha, 262_144);
        assert_eq!(t.sepconv, 78_592);
        assert_eq!(t.serial, 340_736);
        assert_eq!(t.parallel, 88_448);
        assert_eq!(parallel_even_split(256, 51), 88_448);
    }

    #[test]
    fn table1_small() {
        let t = count_table1(2, 1, 1, 1);
        assert_eq!((t.mha, t.sepconv), (16, 6));
        assert!(t.parallel < t.serial);
    }

    #[test]
    fn even_split_matches_general_formula() {
        for d in [2u64, 4, 8, 64, 256, 512] {
            for kk in [1, 3, 11, 51] {
                assert_eq!(count_table1(d, kk, d / 2, d / 2).parallel, parallel_even_split(d, kk));
            }
        }
    }

    #[test]
    fn linear_with_bias() {
        let mut store = ParamStore::<f64>::new();
        LinearParams::new(&mut store, "l", 3, 2, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(store.num_scalars(), 8);
    }

    #[test]
    fn analytic_equals_empirical_small() {
        for shared in [false, true] {
            let mut cfg = ModelConfig::tiny();
            cfg.shared = shared;
            cfg.n_intra = 3;
            cfg.n_inter = 2;
            cfg.n_mask = 2;
            cfg.speakers = 3;
            cfg.intra.d_conv = 4;
            cfg.intra.d_attn = 12;
            let model = TinySepformer::<f64>::new(cfg.clone()).unwrap();
            assert_eq!(count_model(&cfg).total_analytic, count_empirical(&model));
        }
    }

    #[test]
    fn shared_removes_duplicate_sets() {
        let mut cfg = ModelConfig::tiny();
        cfg.n_intra = 4;
        cfg.n_inter = 1;
        let unshared = count_empirical(&TinySepformer::<f32>::new(cfg.clone()).unwrap());
        cfg.shared = true;
        let shared = count_empirical(&TinySepformer::<f32>::new(cfg.clone()).unwrap());
        assert_eq!(unshared - shared, 3 * CaLayerCount::of(&cfg.intra).total());
    }

    #[test]
    fn paper_default_layer_counts() {
        let cfg = ModelConfig::default();
        assert_eq!(CaLayerCount::of(&cfg.intra).total(), 615_168);
        assert_eq!(CaLayerCount::of(&cfg.inter).total(), 610_048);
        let base = SIZE_ROWS[0].config();
        assert_eq!(CaLayerCount::of(&base.intra).total(), 788_736);
    }
}
