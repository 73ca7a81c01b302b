//! Per-modality masked autoencoder over fixed-length windows.
//!
//! The encoder sees visible patches only (plus an optional CLS token) and
//! keeps every block's output. Visible tokens are split into shared and
//! private positions; the decoder gets the (fused) shared tokens, the
//! private tokens and a learned mask token at every hidden position.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{scaled_dot_product_attention, Graph, Real, Tensor, Var};
use crate::container::{Container, NamedArray};
use crate::dataset::Modality;
use crate::error::{PulseError, Result};
use crate::nn::{trunc_normal, Binding, LayerNorm, Linear, ParamId, ParamSet, INIT_STD};

pub const CKPT_FORMAT: &str = "pulse-ckpt/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PosEmbedding {
    #[default]
    Learned,
    Sinusoidal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaeConfig {
    pub signal_len: usize,
    pub patch_len: usize,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    pub private_ratio: f64,
    pub use_cls: bool,
    pub pos_embedding: PosEmbedding,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl MaeConfig {
    pub fn desk() -> Self {
        Self {
            signal_len: 3840,
            patch_len: 96,
            enc_dim: 64,
            enc_depth: 4,
            enc_heads: 4,
            dec_dim: 32,
            dec_depth: 2,
            dec_heads: 4,
            mlp_ratio: 4,
            mask_ratio: 0.5,
            private_ratio: 0.5,
            use_cls: true,
            pos_embedding: PosEmbedding::Learned,
        }
    }

    pub fn paper() -> Self {
        Self {
            enc_dim: 1024,
            enc_depth: 8,
            enc_heads: 8,
            dec_dim: 512,
            dec_depth: 4,
            dec_heads: 8,
            ..Self::desk()
        }
    }

    /// Small square model for tests and toy runs.
    pub fn toy(dim: usize, depth: usize) -> Self {
        Self {
            enc_dim: dim,
            enc_depth: depth,
            enc_heads: 2,
            dec_dim: dim,
            dec_depth: 1,
            dec_heads: 2,
            mlp_ratio: 2,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(PulseError::Config(format!(
                "unknown model preset `{other}` (expected desk or paper)"
            ))),
        }
    }

    pub fn n_patches(&self) -> usize {
        self.signal_len / self.patch_len
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PulseError::Config(m.to_string()));
        if self.patch_len == 0 || self.signal_len % self.patch_len != 0 {
            return bad("signal_len must be a multiple of patch_len");
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.private_ratio) {
            return bad("private_ratio must lie in [0, 1]");
        }
        if self.enc_dim == 0 || self.enc_heads == 0 || self.enc_dim % self.enc_heads != 0 {
            return bad("enc_dim must be a positive multiple of enc_heads");
        }
        if self.dec_dim == 0 || self.dec_heads == 0 || self.dec_dim % self.dec_heads != 0 {
            return bad("dec_dim must be a positive multiple of dec_heads");
        }
        if self.enc_depth == 0 {
            return bad("enc_depth must be at least 1");
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be at least 1");
        }
        Ok(())
    }
}

/// `[.., L]` → `[.., n, patch_len]` as a flat row-major buffer.
pub fn patchify(signal: &[f32], patch_len: usize) -> Result<Tensor<f32>> {
    if patch_len == 0 || signal.len() % patch_len != 0 {
        return Err(PulseError::Shape(format!(
            "length {} is not a multiple of patch length {patch_len}",
            signal.len()
        )));
    }
    Tensor::new(vec![signal.len() / patch_len, patch_len], signal.to_vec())
}

pub fn unpatchify(patches: &Tensor<f32>) -> Vec<f32> {
    patches.data().to_vec()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    /// Hidden patches (the reconstruction set), ascending.
    pub masked: Vec<usize>,
    /// Visible patches, ascending; encoder token order.
    pub visible: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    pub fn n_patches(&self) -> usize {
        self.masked.len() + self.visible.len()
    }
}

pub fn make_mask_plan(n_patches: usize, mask_ratio: f64, seed: u64) -> MaskPlan {
    let n_mask = ((mask_ratio * n_patches as f64).round() as usize).min(n_patches);
    let mut idx: Vec<usize> = (0..n_patches).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut masked = idx[..n_mask].to_vec();
    let mut visible = idx[n_mask..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    MaskPlan { masked, visible, seed }
}

/// Shared/private partition of the visible token list (positions into
/// `MaskPlan::visible`, not patch indices).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSplit {
    pub shared: Vec<usize>,
    pub private: Vec<usize>,
}

impl TokenSplit {
    pub fn all_private(n_visible: usize) -> Self {
        Self {
            shared: Vec::new(),
            private: (0..n_visible).collect(),
        }
    }
}

pub fn split_shared_private(n_visible: usize, private_ratio: f64, seed: u64) -> TokenSplit {
    let n_priv = ((private_ratio * n_visible as f64).round() as usize).min(n_visible);
    let mut idx: Vec<usize> = (0..n_visible).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed));
    let mut private = idx[..n_priv].to_vec();
    let mut shared = idx[n_priv..].to_vec();
    private.sort_unstable();
    shared.sort_unstable();
    TokenSplit { shared, private }
}

/// Encoder outputs for one batch; token rows are `[CLS?, visible...]`.
#[derive(Clone, Debug)]
pub struct EmbeddingBundle {
    /// Per-block outputs `[B, T, enc_dim]`.
    pub layers: Vec<Var>,
    /// Normalised last-layer tokens.
    pub last: Var,
    /// Token rows (CLS offset applied) of shared and private tokens.
    pub shared_idx: Vec<usize>,
    pub private_idx: Vec<usize>,
    pub has_cls: bool,
}

impl EmbeddingBundle {
    /// Non-CLS token rows.
    pub fn patch_rows(&self) -> Vec<usize> {
        let off = self.has_cls as usize;
        let n = self.shared_idx.len() + self.private_idx.len();
        (off..off + n).collect()
    }

    pub fn shared<T: Real>(&self, g: &mut Graph<T>) -> Option<Var> {
        (!self.shared_idx.is_empty()).then(|| g.gather(self.last, 1, &self.shared_idx))
    }

    pub fn private<T: Real>(&self, g: &mut Graph<T>) -> Option<Var> {
        (!self.private_idx.is_empty()).then(|| g.gather(self.last, 1, &self.private_idx))
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize, heads: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: Linear::new(ps, &format!("{name}.proj"), dim, dim, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, mlp_ratio * dim, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), mlp_ratio * dim, dim, rng),
            heads,
        }
    }

    /// Pre-norm transformer block on `[B, T, D]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let (h, dh) = (self.heads, d / self.heads);
        let y = self.ln1.forward(g, p, x);
        let qkv = self.qkv.forward(g, p, y);
        let qkv = g.reshape(qkv, &[b, t, 3, h, dh]);
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4]);
        let part = |g: &mut Graph<T>, i| {
            let v = g.slice(qkv, 0, i, 1);
            g.reshape(v, &[b, h, t, dh])
        };
        let (q, k, v) = (part(g, 0), part(g, 1), part(g, 2));
        let a = scaled_dot_product_attention(g, q, k, v);
        let a = g.permute(a, &[0, 2, 1, 3]);
        let a = g.reshape(a, &[b, t, d]);
        let a = self.proj.forward(g, p, a);
        let x = g.add(x, a);
        let y = self.ln2.forward(g, p, x);
        let y = self.fc1.forward(g, p, y);
        let y = g.gelu(y);
        let y = self.fc2.forward(g, p, y);
        g.add(x, y)
    }
}

fn sinusoid_table(n: usize, d: usize) -> Tensor<f32> {
    Tensor::from_fn(vec![n, d], |i| {
        let (pos, j) = ((i / d) as f64, i % d);
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        if j % 2 == 0 {
            (pos * freq).sin() as f32
        } else {
            (pos * freq).cos() as f32
        }
    })
}

#[derive(Clone, Debug)]
pub struct PhysioMae {
    pub cfg: MaeConfig,
    pub modality: Modality,
    /// When set the encoder emits no shared tokens (EDA by default).
    pub private_only: bool,
    pub params: ParamSet,
    patch_embed: Linear,
    cls: Option<ParamId>,
    enc_pos: Option<ParamId>,
    blocks: Vec<Block>,
    enc_norm: LayerNorm,
    dec_embed: Linear,
    mask_token: ParamId,
    dec_pos: Option<ParamId>,
    dec_blocks: Vec<Block>,
    dec_norm: LayerNorm,
    dec_pred: Linear,
}

impl PhysioMae {
    pub fn new(cfg: MaeConfig, modality: Modality, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let (n, d, dd) = (cfg.n_patches(), cfg.enc_dim, cfg.dec_dim);
        let learned = cfg.pos_embedding == PosEmbedding::Learned;
        let patch_embed = Linear::new(&mut ps, "enc.patch_embed", cfg.patch_len, d, &mut rng);
        let cls = cfg
            .use_cls
            .then(|| ps.add("enc.cls", trunc_normal(&mut rng, &[1, d], INIT_STD)));
        let enc_pos = learned.then(|| ps.add("enc.pos", trunc_normal(&mut rng, &[n, d], INIT_STD)));
        let blocks = (0..cfg.enc_depth)
            .map(|i| Block::new(&mut ps, &format!("enc.block{i}"), d, cfg.enc_heads, cfg.mlp_ratio, &mut rng))
            .collect();
        let enc_norm = LayerNorm::new(&mut ps, "enc.norm", d);
        let dec_embed = Linear::new(&mut ps, "dec.embed", d, dd, &mut rng);
        let mask_token = ps.add("dec.mask_token", trunc_normal(&mut rng, &[1, dd], INIT_STD));
        let dec_pos = learned.then(|| ps.add("dec.pos", trunc_normal(&mut rng, &[n, dd], INIT_STD)));
        let dec_blocks = (0..cfg.dec_depth)
            .map(|i| Block::new(&mut ps, &format!("dec.block{i}"), dd, cfg.dec_heads, cfg.mlp_ratio, &mut rng))
            .collect();
        let dec_norm = LayerNorm::new(&mut ps, "dec.norm", dd);
        let dec_pred = Linear::new(&mut ps, "dec.pred", dd, cfg.patch_len, &mut rng);
        Ok(Self {
            cfg,
            modality,
            private_only: modality == Modality::Eda,
            params: ps,
            patch_embed,
            cls,
            enc_pos,
            blocks,
            enc_norm,
            dec_embed,
            mask_token,
            dec_pos,
            dec_blocks,
            dec_norm,
            dec_pred,
        })
    }

    /// Indices of encoder parameters (everything before the decoder).
    pub fn encoder_param_count(&self) -> usize {
        self.params
            .names()
            .iter()
            .take_while(|n| n.starts_with("enc."))
            .count()
    }

    fn pos_rows<T: Real>(&self, g: &mut Graph<T>, p: &Binding, table: Option<ParamId>, dim: usize, rows: &[usize]) -> Var {
        match table {
            Some(id) => g.gather(p.get(id), 0, rows),
            None => {
                let t = sinusoid_table(self.cfg.n_patches(), dim).cast();
                let c = g.constant(t);
                g.gather(c, 0, rows)
            }
        }
    }

    /// Final-norm (scale, shift) applied to the last block's output.
    pub fn enc_norm_params(&self) -> (&Tensor<f32>, &Tensor<f32>) {
        (self.params.get(self.enc_norm.gamma), self.params.get(self.enc_norm.beta))
    }

    /// The split this model actually uses: private-only models get no shared tokens.
    pub fn effective_split(&self, split: &TokenSplit) -> TokenSplit {
        if self.private_only {
            TokenSplit::all_private(split.shared.len() + split.private.len())
        } else {
            split.clone()
        }
    }

    /// Encodes `x: [B, signal_len]`.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Binding,
        x: Var,
        plan: &MaskPlan,
        split: &TokenSplit,
    ) -> Result<EmbeddingBundle> {
        let cfg = &self.cfg;
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != cfg.signal_len {
            return Err(PulseError::Shape(format!(
                "encoder input {s:?}, expected [B, {}]",
                cfg.signal_len
            )));
        }
        if plan.n_patches() != cfg.n_patches() {
            return Err(PulseError::Shape("mask plan does not match patch count".into()));
        }
        let split = self.effective_split(split);
        if split.shared.len() + split.private.len() != plan.visible.len() {
            return Err(PulseError::Shape("token split does not cover the visible patches".into()));
        }
        let b = s[0];
        let patches = g.reshape(x, &[b, cfg.n_patches(), cfg.patch_len]);
        let vis = g.gather(patches, 1, &plan.visible);
        let mut h = self.patch_embed.forward(g, p, vis);
        let pos = self.pos_rows(g, p, self.enc_pos, cfg.enc_dim, &plan.visible);
        h = g.add(h, pos);
        if let Some(cls) = self.cls {
            let c = g.gather(p.get(cls), 0, &vec![0; b]);
            let c = g.reshape(c, &[b, 1, cfg.enc_dim]);
            h = g.concat(&[c, h], 1);
        }
        let mut layers = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            h = blk.forward(g, p, h);
            layers.push(h);
        }
        let last = self.enc_norm.forward(g, p, h);
        if !g.value(last).all_finite() {
            return Err(PulseError::NonFinite(format!("{} encoder activations", self.modality)));
        }
        let off = cfg.use_cls as usize;
        Ok(EmbeddingBundle {
            layers,
            last,
            shared_idx: split.shared.iter().map(|i| i + off).collect(),
            private_idx: split.private.iter().map(|i| i + off).collect(),
            has_cls: cfg.use_cls,
        })
    }

    /// Reconstructs `[B, signal_len]` from shared tokens `[B, S, enc_dim]`
    /// (already fused across modalities) and private tokens `[B, P, enc_dim]`.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Binding,
        shared: Option<Var>,
        private: Option<Var>,
        plan: &MaskPlan,
        split: &TokenSplit,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let split = self.effective_split(split);
        let count = |v: Option<Var>, g: &Graph<T>| v.map_or(0, |v| g.shape(v)[1]);
        if count(shared, g) != split.shared.len() || count(private, g) != split.private.len() {
            return Err(PulseError::Shape(format!(
                "decoder got {} shared / {} private tokens, plan expects {} / {}",
                count(shared, g),
                count(private, g),
                split.shared.len(),
                split.private.len()
            )));
        }
        let b = shared.or(private).map(|v| g.shape(v)[0]);
        let Some(b) = b else {
            return Err(PulseError::Shape("decoder needs at least one visible token".into()));
        };
        let mut parts = Vec::new();
        let mut order = Vec::new();
        for (tokens, pos) in [(shared, &split.shared), (private, &split.private)] {
            if let Some(t) = tokens {
                parts.push(self.dec_embed.forward(g, p, t));
                order.extend(pos.iter().map(|&i| plan.visible[i]));
            }
        }
        if !plan.masked.is_empty() {
            let m = g.gather(p.get(self.mask_token), 0, &vec![0; b * plan.masked.len()]);
            parts.push(g.reshape(m, &[b, plan.masked.len(), cfg.dec_dim]));
            order.extend(&plan.masked);
        }
        let seq = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 1) };
        // reorder rows to patch order
        let mut inv = vec![0; order.len()];
        for (row, &patch) in order.iter().enumerate() {
            inv[patch] = row;
        }
        let mut h = g.gather(seq, 1, &inv);
        let all: Vec<usize> = (0..cfg.n_patches()).collect();
        let pos = self.pos_rows(g, p, self.dec_pos, cfg.dec_dim, &all);
        h = g.add(h, pos);
        for blk in &self.dec_blocks {
            h = blk.forward(g, p, h);
        }
        let h = self.dec_norm.forward(g, p, h);
        let out = self.dec_pred.forward(g, p, h);
        Ok(g.reshape(out, &[b, cfg.signal_len]))
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "config": self.cfg,
            "modality": self.modality,
            "private_only": self.private_only,
            "extra": extra,
        });
        let mut c = Container::new(CKPT_FORMAT, meta);
        for (name, t) in self.params.iter() {
            c.push(NamedArray::f32(name, t.shape().to_vec(), t.data().to_vec()));
        }
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let c = Container::read(path, CKPT_FORMAT)?;
        let cfg: MaeConfig = serde_json::from_value(c.meta["config"].clone())?;
        let modality: Modality = serde_json::from_value(c.meta["modality"].clone())?;
        let mut model = Self::new(cfg, modality, 0)?;
        if let Some(po) = c.meta["private_only"].as_bool() {
            model.private_only = po;
        }
        let named = c
            .arrays
            .into_iter()
            .map(|a| {
                let data = match a.data {
                    crate::container::ArrayData::F32(v) => v,
                    _ => return Err(PulseError::Format(format!("parameter `{}` is not f32", a.name))),
                };
                Ok((a.name, Tensor::new(a.shape, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        model.params.load(named)?;
        Ok((model, c.meta["extra"].clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_many;

    fn toy(dim: usize, depth: usize, signal: usize, patch: usize) -> MaeConfig {
        MaeConfig {
            signal_len: signal,
            patch_len: patch,
            ..MaeConfig::toy(dim, depth)
        }
    }

    fn batch(b: usize, l: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![b, l], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn patchify_examples() {
        let ramp: Vec<f32> = (0..3840).map(|i| i as f32).collect();
        let p = patchify(&ramp, 96).unwrap();
        assert_eq!(p.shape(), [40, 96]);
        for k in 0..40 {
            assert_eq!(p.data()[k * 96], (k * 96) as f32);
        }
        assert_eq!(unpatchify(&p), ramp);
        assert!(patchify(&ramp[..3839], 96).is_err());
    }

    #[test]
    fn mask_plan_examples() {
        assert!(make_mask_plan(40, 0.0, 1).masked.is_empty());
        let p = make_mask_plan(40, 0.5, 1);
        assert_eq!((p.masked.len(), p.visible.len()), (20, 20));
        let mut all: Vec<usize> = p.masked.iter().chain(&p.visible).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
        assert_eq!(make_mask_plan(40, 0.5, 1), p);
        let distinct: std::collections::BTreeSet<Vec<usize>> =
            (0..100).map(|s| make_mask_plan(40, 0.5, s).masked).collect();
        assert!(distinct.len() >= 95);
    }

    #[test]
    fn split_examples() {
        let s = split_shared_private(40, 1.0, 3);
        assert!(s.shared.is_empty() && s.private.len() == 40);
        let s = split_shared_private(40, 0.0, 3);
        assert!(s.private.is_empty() && s.shared.len() == 40);
        let s = split_shared_private(40, 0.5, 3);
        assert_eq!((s.shared.len(), s.private.len()), (20, 20));
        assert!(s.shared.iter().all(|i| !s.private.contains(i)));
    }

    #[test]
    fn encode_shapes_and_partition() {
        let cfg = toy(8, 2, 64, 8);
        let m = PhysioMae::new(cfg.clone(), Modality::Ecg, 0).unwrap();
        let plan = make_mask_plan(8, 0.5, 2);
        let split = split_shared_private(4, 0.5, 2);
        let mut g = Graph::<f32>::new();
        let p = m.params.bind(&mut g, false);
        let x = g.constant(batch(3, 64, 1));
        let e = m.encode(&mut g, &p, x, &plan, &split).unwrap();
        assert_eq!(e.layers.len(), 2);
        assert_eq!(g.shape(e.last), [3, 5, 8]);
        let mut rows: Vec<usize> = e.shared_idx.iter().chain(&e.private_idx).copied().collect();
        rows.sort_unstable();
        assert_eq!(rows, e.patch_rows());

        let plan0 = make_mask_plan(8, 0.0, 2);
        let e = m.encode(&mut g, &p, x, &plan0, &split_shared_private(8, 0.5, 1)).unwrap();
        assert_eq!(g.shape(e.last)[1], 9);

        let eda = PhysioMae::new(cfg, Modality::Eda, 0).unwrap();
        let p = eda.params.bind(&mut g, false);
        let e = eda.encode(&mut g, &p, x, &plan, &split).unwrap();
        assert!(e.shared_idx.is_empty());
        assert_eq!(e.private_idx.len(), 4);
    }

    #[test]
    fn permuting_patches_with_positions_permutes_tokens() {
        let mut cfg = toy(8, 2, 64, 8);
        cfg.use_cls = false;
        let m = PhysioMae::new(cfg, Modality::Bvp, 5).unwrap();
        let x = batch(1, 64, 9);
        let plan = make_mask_plan(8, 0.0, 0);
        let split = TokenSplit::all_private(8);
        let run = |x: &Tensor<f32>, m: &PhysioMae| {
            let mut g = Graph::<f32>::new();
            let p = m.params.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let e = m.encode(&mut g, &p, xv, &plan, &split).unwrap();
            g.value(e.last).clone()
        };
        let base = run(&x, &m);
        // swap patches 1 and 6 and their positional rows
        let mut xs = x.clone();
        for j in 0..8 {
            xs.data_mut().swap(8 + j, 48 + j);
        }
        let mut m2 = m.clone();
        let pos = m2.enc_pos.unwrap();
        let t = m2.params.get_mut(pos);
        for j in 0..8 {
            t.data_mut().swap(8 + j, 48 + j);
        }
        let swapped = run(&xs, &m2);
        for tok in 0..8 {
            let src = match tok {
                1 => 6,
                6 => 1,
                t => t,
            };
            for j in 0..8 {
                let (a, b) = (swapped.data()[tok * 8 + j], base.data()[src * 8 + j]);
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn decoder_mask_token_is_local_without_blocks() {
        let mut cfg = toy(8, 1, 64, 8);
        cfg.dec_depth = 0;
        let m = PhysioMae::new(cfg, Modality::Ecg, 1).unwrap();
        let plan = make_mask_plan(8, 0.5, 4);
        let split = split_shared_private(4, 0.5, 4);
        let x = batch(2, 64, 3);
        let run = |m: &PhysioMae| {
            let mut g = Graph::<f32>::new();
            let p = m.params.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let e = m.encode(&mut g, &p, xv, &plan, &split).unwrap();
            let (s, pr) = (e.shared(&mut g), e.private(&mut g));
            let r = m.decode(&mut g, &p, s, pr, &plan, &split).unwrap();
            g.value(r).clone()
        };
        let a = run(&m);
        assert_eq!(a.shape(), [2, 64]);
        let mut m2 = m.clone();
        m2.params.get_mut(m.mask_token).data_mut()[0] += 0.5;
        let b = run(&m2);
        for bi in 0..2 {
            for patch in 0..8 {
                let changed = (0..8).any(|j| {
                    let i = bi * 64 + patch * 8 + j;
                    a.data()[i] != b.data()[i]
                });
                assert_eq!(changed, plan.masked.contains(&patch), "patch {patch}");
            }
        }
    }

    #[test]
    fn decoder_gradient_check() {
        let cfg = toy(8, 1, 32, 8);
        let m = PhysioMae::new(cfg, Modality::Ecg, 2).unwrap();
        let plan = make_mask_plan(4, 0.5, 1);
        let split = split_shared_private(2, 0.5, 1);
        let x: Tensor<f64> = batch(2, 32, 7).cast();
        let dec_start = m.encoder_param_count();
        let params: Vec<Tensor<f64>> = m.params.tensors().iter().map(|t| t.cast()).collect();
        let enc: Vec<Tensor<f64>> = params[..dec_start].to_vec();
        let err = grad_check_many(
            |g, vars| {
                let mut all: Vec<Var> = enc.iter().map(|t| g.constant(t.clone())).collect();
                all.extend_from_slice(vars);
                let p = Binding::from_vars(all);
                let xv = g.constant(x.clone());
                let e = m.encode(g, &p, xv, &plan, &split).unwrap();
                let (s, pr) = (e.shared(g), e.private(g));
                let r = m.decode(g, &p, s, pr, &plan, &split).unwrap();
                let d = g.sub(r, xv);
                let sq = g.mul(d, d);
                g.mean_all(sq)
            },
            &params[dec_start..],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-2, "err {err}");
    }

    #[test]
    fn identity_task_is_trainable() {
        let cfg = MaeConfig {
            mask_ratio: 0.0,
            ..toy(16, 1, 256, 16)
        };
        let mut m = PhysioMae::new(cfg, Modality::Bvp, 4).unwrap();
        let x: Tensor<f32> = Tensor::from_fn(vec![1, 256], |i| {
            let t = i as f32 / 64.0;
            (6.0f32 * t).sin() + 0.5 * (17.0f32 * t).cos()
        });
        let plan = make_mask_plan(16, 0.0, 1);
        let split = split_shared_private(16, 0.5, 1);
        let mut opt = crate::nn::Adam::new(&m.params);
        let mut losses = vec![];
        for _ in 0..200 {
            let mut g = Graph::<f32>::new();
            let p = m.params.bind(&mut g, true);
            let xv = g.constant(x.clone());
            let e = m.encode(&mut g, &p, xv, &plan, &split).unwrap();
            let (s, pr) = (e.shared(&mut g), e.private(&mut g));
            let r = m.decode(&mut g, &p, s, pr, &plan, &split).unwrap();
            let d = g.sub(r, xv);
            let sq = g.mul(d, d);
            let loss = g.mean_all(sq);
            losses.push(g.value(loss).data()[0]);
            g.backward(loss);
            let grads = p.grads(&g);
            opt.step(&mut m.params, &grads, 1e-2, |_| true);
        }
        let (first, last) = (losses[0], *losses.last().unwrap());
        assert!(last < 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = PhysioMae::new(toy(8, 1, 64, 8), Modality::Temp, 3).unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path, serde_json::json!({"epoch": 2})).unwrap();
        let (back, extra) = PhysioMae::load(&path).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.cfg, m.cfg);
        assert_eq!(back.modality, Modality::Temp);
        assert_eq!(extra["epoch"], 2);
    }

    #[test]
    fn config_validation() {
        MaeConfig::desk().validate().unwrap();
        MaeConfig::paper().validate().unwrap();
        assert_eq!(MaeConfig::desk().n_patches(), 40);
        let mut c = MaeConfig::desk();
        c.patch_len = 100;
        assert!(c.validate().is_err());
        let mut c = MaeConfig::desk();
        c.enc_heads = 3;
        assert!(c.validate().is_err());
        assert!(MaeConfig::preset("huge").is_err());
    }
}
