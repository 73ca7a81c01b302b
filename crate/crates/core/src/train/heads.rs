//! Student-side transfer heads and the cross-modality fusion layer.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::container::{ArrayData, Container, NamedArray};
use crate::dataset::Modality;
use crate::error::{PulseError, Result};
use crate::mae::PhysioMae;
use crate::nn::{Binding, LayerNorm, Linear, ParamId, ParamSet};

pub const HEADS_FORMAT: &str = "pulse-heads/1";

/// LayerNorm (initialised from the student's final norm, so at init the
/// head reproduces the encoder output exactly) followed by shared and
/// private projections.
#[derive(Clone, Debug)]
pub struct TransferHead {
    pub modality: Modality,
    ln: LayerNorm,
    shared: Linear,
    private: Linear,
}

impl TransferHead {
    pub fn shared_tokens<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Var {
        let y = self.ln.forward(g, p, x);
        self.shared.forward(g, p, y)
    }

    pub fn private_tokens<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Var {
        let y = self.ln.forward(g, p, x);
        self.private.forward(g, p, y)
    }
}

/// `[.., M·D] → [.., D]`, initialised to the exact modality average.
#[derive(Clone, Debug)]
pub struct FusionLayer {
    w: ParamId,
    b: ParamId,
    pub n_modalities: usize,
    pub dim: usize,
    pub frozen: bool,
    pub unfreeze_epoch: Option<usize>,
}

impl FusionLayer {
    fn new(ps: &mut ParamSet, n_modalities: usize, dim: usize) -> Self {
        let inv = 1.0 / n_modalities as f32;
        let w = ps.add(
            "fusion.weight",
            Tensor::from_fn(vec![n_modalities * dim, dim], |i| {
                let (r, c) = (i / dim, i % dim);
                if r % dim == c {
                    inv
                } else {
                    0.0
                }
            }),
        );
        let b = ps.add("fusion.bias", Tensor::zeros(vec![dim]));
        Self {
            w,
            b,
            n_modalities,
            dim,
            frozen: false,
            unfreeze_epoch: None,
        }
    }

    /// Fuses per-modality tokens of identical shape `[.., D]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, parts: &[Var]) -> Result<Var> {
        if parts.len() != self.n_modalities {
            return Err(PulseError::Shape(format!(
                "fusion expects {} modalities, got {}",
                self.n_modalities,
                parts.len()
            )));
        }
        let rank = g.shape(parts[0]).len();
        let x = if parts.len() == 1 { parts[0] } else { g.concat(parts, rank - 1) };
        let h = g.matmul(x, p.get(self.w));
        Ok(g.add(h, p.get(self.b)))
    }

    pub fn trainable_at(&self, epoch: usize) -> bool {
        match (self.frozen, self.unfreeze_epoch) {
            (false, _) => true,
            (true, Some(e)) => epoch >= e,
            (true, None) => false,
        }
    }

    pub fn owns(&self, i: usize) -> bool {
        i == self.w.index() || i == self.b.index()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Layout {
    students: Vec<(Modality, usize)>,
    teacher_dim: usize,
    fusion_frozen: bool,
    unfreeze_epoch: Option<usize>,
}

/// All transfer heads plus fusion, in one parameter set.
#[derive(Clone, Debug)]
pub struct KdHeads {
    pub params: ParamSet,
    pub heads: Vec<TransferHead>,
    pub fusion: FusionLayer,
    pub teacher_dim: usize,
    layout: Layout,
}

impl KdHeads {
    pub fn new(students: &[&PhysioMae], teacher_dim: usize, seed: u64) -> Result<Self> {
        let layout = Layout {
            students: students.iter().map(|s| (s.modality, s.cfg.enc_dim)).collect(),
            teacher_dim,
            fusion_frozen: false,
            unfreeze_epoch: None,
        };
        let mut heads = Self::from_layout(layout, seed)?;
        for (h, s) in heads.heads.iter().zip(students) {
            let (gamma, beta) = s.enc_norm_params();
            *heads.params.get_mut(h.ln.gamma) = gamma.clone();
            *heads.params.get_mut(h.ln.beta) = beta.clone();
        }
        Ok(heads)
    }

    fn from_layout(layout: Layout, seed: u64) -> Result<Self> {
        if layout.students.is_empty() {
            return Err(PulseError::InvalidArgument("no student modalities".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mut heads = Vec::new();
        for &(m, d) in &layout.students {
            let name = format!("head.{}", m.name().to_lowercase());
            let ln = LayerNorm::new(&mut ps, &format!("{name}.ln"), d);
            let shared = if d == layout.teacher_dim {
                Linear::identity(&mut ps, &format!("{name}.shared"), d)
            } else {
                Linear::new(&mut ps, &format!("{name}.shared"), d, layout.teacher_dim, &mut rng)
            };
            let private = Linear::identity(&mut ps, &format!("{name}.private"), d);
            heads.push(TransferHead {
                modality: m,
                ln,
                shared,
                private,
            });
        }
        let mut fusion = FusionLayer::new(&mut ps, heads.len(), layout.teacher_dim);
        fusion.frozen = layout.fusion_frozen;
        fusion.unfreeze_epoch = layout.unfreeze_epoch;
        Ok(Self {
            params: ps,
            heads,
            fusion,
            teacher_dim: layout.teacher_dim,
            layout,
        })
    }

    pub fn set_fusion_schedule(&mut self, frozen: bool, unfreeze_epoch: Option<usize>) {
        self.fusion.frozen = frozen;
        self.fusion.unfreeze_epoch = unfreeze_epoch;
        self.layout.fusion_frozen = frozen;
        self.layout.unfreeze_epoch = unfreeze_epoch;
    }

    pub fn head(&self, m: Modality) -> Option<&TransferHead> {
        self.heads.iter().find(|h| h.modality == m)
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.heads.iter().map(|h| h.modality).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(HEADS_FORMAT, serde_json::to_value(&self.layout)?);
        for (name, t) in self.params.iter() {
            c.push(NamedArray::f32(name, t.shape().to_vec(), t.data().to_vec()));
        }
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path, HEADS_FORMAT)?;
        let layout: Layout = serde_json::from_value(c.meta.clone())?;
        let mut heads = Self::from_layout(layout, 0)?;
        let named = c
            .arrays
            .into_iter()
            .map(|a| match a.data {
                ArrayData::F32(v) => Ok((a.name, Tensor::new(a.shape, v)?)),
                _ => Err(PulseError::Format(format!("parameter `{}` is not f32", a.name))),
            })
            .collect::<Result<Vec<_>>>()?;
        heads.params.load(named)?;
        Ok(heads)
    }
}
