//! Low-rank adapters for the attention projections.
//!
//! Each adapter holds a pair (A, B) with A ∈ R^{d_out×r}, B ∈ R^{d_in×r};
//! the adapted projection computes W·x + s·A(Bᵀx), never materializing the
//! rank-r update ABᵀ during training. Base weights stay frozen; only A and
//! B receive gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Attention projections an adapter can attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub const ALL: [Projection; 4] = [
        Projection::Query,
        Projection::Key,
        Projection::Value,
        Projection::Output,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Query => "query",
            Projection::Key => "key",
            Projection::Value => "value",
            Projection::Output => "output",
        }
    }
}

/// How the update is scaled before adding to the base output:
/// `Standard` uses alpha/rank, `FullAlpha` uses alpha alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    #[default]
    Standard,
    FullAlpha,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Projection>,
    pub scale_mode: ScaleMode,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 16,
            alpha: 32.0,
            targets: Projection::ALL.to_vec(),
            scale_mode: ScaleMode::Standard,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("lora rank must be positive"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config(format!(
                "lora alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::config("lora targets must not be empty"));
        }
        for (i, t) in self.targets.iter().enumerate() {
            if self.targets[..i].contains(t) {
                return Err(Error::config(format!(
                    "duplicate lora target {:?}",
                    t.name()
                )));
            }
        }
        Ok(())
    }
}

/// One low-rank update attached to a single (layer, projection) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// [d_out × r]
    pub a: Tensor,
    /// [d_in × r]
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
    pub scale_mode: ScaleMode,
    pub layer: usize,
    pub target: Projection,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        match self.scale_mode {
            ScaleMode::Standard => self.alpha / self.rank as f64,
            ScaleMode::FullAlpha => self.alpha,
        }
    }

    pub fn name_a(&self) -> String {
        format!("lora.layer{}.{}.a", self.layer, self.target.name())
    }

    pub fn name_b(&self) -> String {
        format!("lora.layer{}.{}.b", self.layer, self.target.name())
    }
}

/// All adapters of a run, in canonical (layer, projection) order with
/// exactly one adapter per targeted pair.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdapterSet {
    adapters: Vec<LoraAdapter>,
}

impl AdapterSet {
    pub fn from_adapters(adapters: Vec<LoraAdapter>) -> Result<Self> {
        for (i, ad) in adapters.iter().enumerate() {
            if adapters[..i]
                .iter()
                .any(|o| o.layer == ad.layer && o.target == ad.target)
            {
                return Err(Error::config(format!(
                    "duplicate adapter for layer {} {}",
                    ad.layer,
                    ad.target.name()
                )));
            }
        }
        Ok(AdapterSet { adapters })
    }

    pub fn get(&self, layer: usize, target: Projection) -> Option<&LoraAdapter> {
        self.adapters
            .iter()
            .find(|a| a.layer == layer && a.target == target)
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.adapters.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut LoraAdapter> {
        self.adapters.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    /// Named trainable tensors (A then B per adapter, canonical order).
    pub fn named(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.adapters
            .iter()
            .flat_map(|ad| [(ad.name_a(), &ad.a), (ad.name_b(), &ad.b)])
    }

    pub fn named_mut(&mut self) -> impl Iterator<Item = (String, &mut Tensor)> {
        self.adapters
            .iter_mut()
            .flat_map(|ad| [(format!("lora.layer{}.{}.a", ad.layer, ad.target.name()), &mut ad.a),
                            (format!("lora.layer{}.{}.b", ad.layer, ad.target.name()), &mut ad.b)])
    }
}

/// Initializes one adapter per (layer, target): A ~ Normal(0, 0.02) from the
/// seeded generator, B = 0, so the adapted model equals the base model
/// exactly at initialization.
pub fn init_adapters(model_cfg: &ModelConfig, cfg: &LoraConfig, seed: u64) -> Result<AdapterSet> {
    cfg.validate()?;
    let d = model_cfg.d_model;
    if cfg.rank > d {
        return Err(Error::config(format!(
            "lora rank {} exceeds projection dimension {}",
            cfg.rank, d
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("valid stddev");
    let mut adapters = Vec::with_capacity(model_cfg.n_layers * cfg.targets.len());
    for layer in 0..model_cfg.n_layers {
        for &target in &cfg.targets {
            let a_data: Vec<f64> = (0..d * cfg.rank).map(|_| normal.sample(&mut rng)).collect();
            adapters.push(LoraAdapter {
                a: Tensor::matrix(d, cfg.rank, a_data)?.with_requires_grad(true),
                b: Tensor::zeros(vec![d, cfg.rank]).with_requires_grad(true),
                rank: cfg.rank,
                alpha: cfg.alpha,
                scale_mode: cfg.scale_mode,
                layer,
                target,
            });
        }
    }
    AdapterSet::from_adapters(adapters)
}

/// W·x + s·A(Bᵀx) for a single input vector, computed low-rank-first.
/// `w` is [d_out×d_in], `x` is [d_in].
pub fn adapted_projection(w: &Tensor, adapter: &LoraAdapter, x: &Tensor) -> Result<Tensor> {
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    if w.shape().len() != 2 || x.shape() != [d_in] {
        return Err(Error::Shape {
            op: "adapted_projection",
            lhs: w.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    check_adapter_shapes("adapted_projection", w, adapter)?;
    let r = adapter.rank;
    let s = adapter.scale();

    // bt_x[q] = Σ_k B[k][q]·x[k]
    let mut bt_x = vec![0.0; r];
    for (k, &xv) in x.data().iter().enumerate() {
        for (q, acc) in bt_x.iter_mut().enumerate() {
            *acc += adapter.b.data()[k * r + q] * xv;
        }
    }
    let mut y = vec![0.0; d_out];
    for (j, out) in y.iter_mut().enumerate() {
        let w_row = &w.data()[j * d_in..(j + 1) * d_in];
        let base: f64 = w_row.iter().zip(x.data()).map(|(&wv, &xv)| wv * xv).sum();
        let a_row = &adapter.a.data()[j * r..(j + 1) * r];
        let low: f64 = a_row.iter().zip(&bt_x).map(|(&av, &bv)| av * bv).sum();
        *out = base + s * low;
    }
    Tensor::new(vec![d_out], y)
}

/// Returns W + s·ABᵀ. Pure: the adapter is not consumed or mutated, so the
/// caller must not merge the same adapter into the result twice.
pub fn merge(w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    check_adapter_shapes("merge", w, adapter)?;
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    let r = adapter.rank;
    let s = adapter.scale();
    let mut out = w.data().to_vec();
    for j in 0..d_out {
        let a_row = &adapter.a.data()[j * r..(j + 1) * r];
        for k in 0..d_in {
            let b_row = &adapter.b.data()[k * r..(k + 1) * r];
            let dot: f64 = a_row.iter().zip(b_row).map(|(&av, &bv)| av * bv).sum();
            out[j * d_in + k] += s * dot;
        }
    }
    Tensor::new(vec![d_out, d_in], out)
}

fn check_adapter_shapes(op: &'static str, w: &Tensor, adapter: &LoraAdapter) -> Result<()> {
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    if adapter.a.shape() != [d_out, adapter.rank] || adapter.b.shape() != [d_in, adapter.rank] {
        return Err(Error::Shape {
            op,
            lhs: adapter.a.shape().to_vec(),
            rhs: adapter.b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Breakdown entry for one adapter's trainable parameters.
#[derive(Debug, Clone, Serialize)]
pub struct TargetCount {
    pub layer: usize,
    pub target: Projection,
    pub params: u64,
}

/// Closed-form trainable parameter count: Σ over adapters of r·(d_in+d_out),
/// with a per-(layer, target) breakdown.
pub fn count_trainable(model_cfg: &ModelConfig, cfg: &LoraConfig) -> (u64, Vec<TargetCount>) {
    let d = model_cfg.d_model as u64;
    let per = cfg.rank as u64 * (d + d);
    let mut breakdown = Vec::with_capacity(model_cfg.n_layers * cfg.targets.len());
    let mut total = 0u64;
    for layer in 0..model_cfg.n_layers {
        for &target in &cfg.targets {
            breakdown.push(TargetCount {
                layer,
                target,
                params: per,
            });
            total += per;
        }
    }
    (total, breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 4,
            d_model: 8,
            n_heads: 2,
            vocab_size: 11,
            max_seq: 32,
        }
    }

    #[test]
    fn four_layers_four_targets_is_sixteen_adapters() {
        let set = init_adapters(&tiny_cfg(), &LoraConfig { rank: 2, ..Default::default() }, 7).unwrap();
        assert_eq!(set.len(), 16);
    }

    #[test]
    fn same_seed_gives_identical_a_matrices() {
        let cfg = LoraConfig { rank: 3, ..Default::default() };
        let s1 = init_adapters(&tiny_cfg(), &cfg, 99).unwrap();
        let s2 = init_adapters(&tiny_cfg(), &cfg, 99).unwrap();
        for (a, b) in s1.iter().zip(s2.iter()) {
            assert_eq!(a.a.data(), b.a.data());
        }
    }

    #[test]
    fn b_starts_at_zero() {
        let set = init_adapters(&tiny_cfg(), &LoraConfig::default().clone(), 0);
        // default rank 16 exceeds d_model 8
        assert!(set.is_err());
        let set = init_adapters(&tiny_cfg(), &LoraConfig { rank: 4, ..Default::default() }, 0).unwrap();
        for ad in set.iter() {
            assert!(ad.b.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rank_too_large_is_a_config_error() {
        let cfg = LoraConfig { rank: 9, ..Default::default() };
        assert!(matches!(
            init_adapters(&tiny_cfg(), &cfg, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_b_means_projection_equals_base() {
        let set = init_adapters(&tiny_cfg(), &LoraConfig { rank: 2, ..Default::default() }, 3).unwrap();
        let ad = set.get(0, Projection::Query).unwrap();
        let w = Tensor::matrix(8, 8, (0..64).map(|i| i as f64 * 0.1).collect()).unwrap();
        let x = Tensor::from_vec((0..8).map(|i| 1.0 - i as f64 * 0.3).collect());
        let adapted = adapted_projection(&w, ad, &x).unwrap();
        let mut base = vec![0.0; 8];
        for j in 0..8 {
            for k in 0..8 {
                base[j] += w.data()[j * 8 + k] * x.data()[k];
            }
        }
        assert_eq!(adapted.data(), &base[..]);
    }

    #[test]
    fn hand_case_rank_one() {
        // d=2, r=1, W=0, A=[1,0]ᵀ, B=[0,1]ᵀ, alpha=2, standard ⇒ s=2,
        // ABᵀx = [5,0] for x=[3,5] ⇒ output [10,0].
        let ad = LoraAdapter {
            a: Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap(),
            b: Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap(),
            rank: 1,
            alpha: 2.0,
            scale_mode: ScaleMode::Standard,
            layer: 0,
            target: Projection::Query,
        };
        let w = Tensor::zeros(vec![2, 2]);
        let x = Tensor::from_vec(vec![3.0, 5.0]);
        let y = adapted_projection(&w, &ad, &x).unwrap();
        assert_eq!(y.data(), &[10.0, 0.0]);
    }

    #[test]
    fn merge_equals_low_rank_path() {
        let set = init_adapters(&tiny_cfg(), &LoraConfig { rank: 4, ..Default::default() }, 11).unwrap();
        let mut ad = set.get(1, Projection::Value).unwrap().clone();
        // give B nonzero content
        for (i, v) in ad.b.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin() * 0.1;
        }
        let w = Tensor::matrix(8, 8, (0..64).map(|i| ((i * 7) % 13) as f64 * 0.05).collect()).unwrap();
        let x = Tensor::from_vec((0..8).map(|i| (i as f64 * 0.9).cos()).collect());

        let low_rank = adapted_projection(&w, &ad, &x).unwrap();
        let merged = merge(&w, &ad).unwrap();
        let mut direct = vec![0.0; 8];
        for j in 0..8 {
            for k in 0..8 {
                direct[j] += merged.data()[j * 8 + k] * x.data()[k];
            }
        }
        for j in 0..8 {
            assert!((low_rank.data()[j] - direct[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_with_zero_b_returns_w_exactly() {
        let set = init_adapters(&tiny_cfg(), &LoraConfig { rank: 4, ..Default::default() }, 2).unwrap();
        let ad = set.get(0, Projection::Output).unwrap();
        let w = Tensor::matrix(8, 8, (0..64).map(|i| i as f64).collect()).unwrap();
        let merged = merge(&w, ad).unwrap();
        assert_eq!(merged.data(), w.data());
    }

    #[test]
    fn merge_is_pure_so_merging_twice_differs_from_once() {
        let set = init_adapters(&tiny_cfg(), &LoraConfig { rank: 2, ..Default::default() }, 5).unwrap();
        let mut ad = set.get(0, Projection::Key).unwrap().clone();
        for v in ad.b.data_mut().iter_mut() {
            *v = 0.25;
        }
        let w = Tensor::zeros(vec![8, 8]);
        let once = merge(&w, &ad).unwrap();
        let twice = merge(&once, &ad).unwrap();
        assert_ne!(once.data(), twice.data());
        for (t, o) in twice.data().iter().zip(once.data()) {
            assert!((t - 2.0 * o).abs() < 1e-12);
        }
    }

    #[test]
    fn count_square_projection_formula() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 1536,
            n_heads: 12,
            vocab_size: 100,
            max_seq: 16,
        };
        let lora = LoraConfig {
            rank: 16,
            targets: vec![Projection::Query],
            ..Default::default()
        };
        let (total, breakdown) = count_trainable(&cfg, &lora);
        assert_eq!(total, 2 * 1536 * 16);
        assert_eq!(breakdown.len(), 1);
        assert_eq!(breakdown[0].params, 49_152);
    }

    #[test]
    fn count_rank_zero_is_zero() {
        let lora = LoraConfig { rank: 0, ..Default::default() };
        let (total, _) = count_trainable(&tiny_cfg(), &lora);
        assert_eq!(total, 0);
    }

    #[test]
    fn count_matches_enumeration() {
        let cfg = tiny_cfg();
        let lora = LoraConfig { rank: 4, ..Default::default() };
        let set = init_adapters(&cfg, &lora, 13).unwrap();
        let enumerated: u64 = set
            .iter()
            .map(|ad| (ad.a.numel() + ad.b.numel()) as u64)
            .sum();
        let (total, breakdown) = count_trainable(&cfg, &lora);
        assert_eq!(total, enumerated);
        assert_eq!(total, breakdown.iter().map(|t| t.params).sum::<u64>());
    }
}
