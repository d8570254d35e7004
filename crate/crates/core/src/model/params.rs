use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{Scalar, Tape, Tensor, Var};

use super::config::ModelConfig;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    /// Truncated normal with std `1/sqrt(fan_in)`.
    FanIn,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchSlots {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateSlots {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Indices into [`ModelParams::tensors`] for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlots {
    pub norm1_gamma: usize,
    pub norm1_beta: usize,
    pub high: BranchSlots,
    pub low: BranchSlots,
    pub out_weight: usize,
    pub out_bias: usize,
    pub gate: GateSlots,
    pub norm2_gamma: usize,
    pub norm2_beta: usize,
    pub ffn_w1: usize,
    pub ffn_b1: usize,
    pub ffn_w2: usize,
    pub ffn_b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSlots {
    pub embed_weight: usize,
    pub embed_bias: usize,
    pub layers: Vec<LayerSlots>,
    pub final_gamma: usize,
    pub final_beta: usize,
    pub head_weight: usize,
    pub head_bias: usize,
}

struct ParamDecl {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Builder {
    decls: Vec<ParamDecl>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.decls.push(ParamDecl {
            name,
            shape: shape.to_vec(),
            init,
        });
        self.decls.len() - 1
    }
}

fn layout(cfg: &ModelConfig) -> (Vec<ParamDecl>, ModelSlots) {
    use Init::*;
    let mut b = Builder::default();
    let h = cfg.hidden;
    let pc = cfg.patch_channels();
    let embed_weight = b.add("embed.weight".into(), &[pc, h], Normal);
    let embed_bias = b.add("embed.bias".into(), &[h], Zeros);
    let layers = cfg
        .layers
        .iter()
        .enumerate()
        .map(|(l, lc)| {
            let p = |s: &str| format!("layers.{l}.{s}");
            let half = lc.branch_width();
            let f = lc.ffn_width();
            let (e, g) = (cfg.t_embed_dim, cfg.gate_hidden);
            let branch = |b: &mut Builder, tag: &str| BranchSlots {
                wq: b.add(p(&format!("{tag}.wq")), &[half, half], Normal),
                wk: b.add(p(&format!("{tag}.wk")), &[half, half], Normal),
                wv: b.add(p(&format!("{tag}.wv")), &[half, half], Normal),
            };
            let norm1_gamma = b.add(p("norm1.gamma"), &[h], Ones);
            let norm1_beta = b.add(p("norm1.beta"), &[h], Zeros);
            let high = branch(&mut b, "high");
            let low = branch(&mut b, "low");
            LayerSlots {
                norm1_gamma,
                norm1_beta,
                high,
                low,
                out_weight: b.add(p("out.weight"), &[h, h], Zeros),
                out_bias: b.add(p("out.bias"), &[h], Zeros),
                gate: GateSlots {
                    w1: b.add(p("gate.w1"), &[e, g], FanIn),
                    b1: b.add(p("gate.b1"), &[g], Zeros),
                    w2: b.add(p("gate.w2"), &[g, 2], Zeros),
                    b2: b.add(p("gate.b2"), &[2], Zeros),
                },
                norm2_gamma: b.add(p("norm2.gamma"), &[h], Ones),
                norm2_beta: b.add(p("norm2.beta"), &[h], Zeros),
                ffn_w1: b.add(p("ffn.w1"), &[h, f], Normal),
                ffn_b1: b.add(p("ffn.b1"), &[f], Zeros),
                ffn_w2: b.add(p("ffn.w2"), &[f, h], Normal),
                ffn_b2: b.add(p("ffn.b2"), &[h], Zeros),
            }
        })
        .collect();
    let slots = ModelSlots {
        embed_weight,
        embed_bias,
        layers,
        final_gamma: b.add("final_norm.gamma".into(), &[h], Ones),
        final_beta: b.add("final_norm.beta".into(), &[h], Zeros),
        head_weight: b.add("head.weight".into(), &[h, pc], Zeros),
        head_bias: b.add("head.bias".into(), &[pc], Zeros),
    };
    (b.decls, slots)
}

/// All model parameters in a fixed, named order.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    slots: ModelSlots,
}

impl<T: Scalar> ModelParams<T> {
    /// Truncated-normal projections (std 0.02, or `1/sqrt(fan_in)` for the
    /// first gate layer), unit norm gains, and zeros for biases, the final
    /// gate layer, every output projection and the head.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (decls, slots) = layout(cfg);
        let root = Stream::new(seed).child(0x1417);
        let tensors = decls
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let stream = root.child(i as u64);
                Tensor::from_fn(s.shape.clone(), |k| match s.init {
                    Init::Normal => T::lit(INIT_STD * stream.truncated_normal(k as u64)),
                    Init::FanIn => T::lit(stream.truncated_normal(k as u64) / (s.shape[0] as f64).sqrt()),
                    Init::Zeros => T::zero(),
                    Init::Ones => T::one(),
                })
            })
            .collect();
        Ok(Self {
            names: decls.into_iter().map(|s| s.name).collect(),
            tensors,
            slots,
        })
    }

    /// Every tensor drawn i.i.d. from `N(0, std²)`, including those that
    /// `init` zeroes. Used for audits and gradient checks.
    pub fn random(cfg: &ModelConfig, seed: u64, std: f64) -> Result<Self> {
        let mut p = Self::init(cfg, seed)?;
        let root = Stream::new(seed).child(0x7a2d);
        for (i, t) in p.tensors.iter_mut().enumerate() {
            let s = root.child(i as u64);
            for (k, v) in t.data_mut().iter_mut().enumerate() {
                *v = T::lit(std * s.normal(k as u64));
            }
        }
        Ok(p)
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        let mut p = Self::init(cfg, 0)?;
        for t in &mut p.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        Ok(p)
    }

    /// Rebuilds from named tensors, which must match the layout for `cfg`
    /// exactly in name, order and shape.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        cfg.validate()?;
        let (decls, slots) = layout(cfg);
        if decls.len() != named.len() {
            return Err(Error::format(format!(
                "expected {} parameter tensors, found {}",
                decls.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(decls.len());
        let mut tensors = Vec::with_capacity(decls.len());
        for (decl, (name, t)) in decls.into_iter().zip(named) {
            if decl.name != name || decl.shape != t.shape() {
                return Err(Error::format(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    decl.name,
                    decl.shape
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            names,
            tensors,
            slots,
        })
    }

    pub fn slots(&self) -> &ModelSlots {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, slot: usize) -> &Tensor<T> {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor<T> {
        &mut self.tensors[slot]
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            slots: self.slots.clone(),
        }
    }

    /// Registers every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
        }
    }
}

/// Tape handles aligned with [`ModelParams::tensors`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, slot: usize) -> Var {
        self.vars[slot]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
