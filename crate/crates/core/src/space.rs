//! The architecture search space: M categorical variables over layer slots,
//! activation slots, a per-network normalization toggle, and (optionally) the
//! representation width.
//!
//! Every layer option preserves the representation width, so the value of any
//! variable can be swapped between two genomes and the result stays valid and
//! decodable. The width variable is the only shape-affecting one; weight
//! tensors are adapted by slice-copy / fresh-init padding when it changes
//! (see `evolve::resize_for_width`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Activation, LayerKind};
use crate::network::{
    init_spec_for, AffineParams, MemberId, NetworkState, OriginId, ParamRole, ParamTensor,
    SlotState,
};
use crate::optim::OptimSpec;
use crate::rng::StreamRng;
use crate::tensor::{init_tensor, InitKind};
use rand::Rng;

/// One architecture point: an integer per variable, `0 <= values[i] < arity(i)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Genome(pub Vec<usize>);

impl Genome {
    pub fn csv_field(&self) -> String {
        self.0
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// What a variable controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarRole {
    LayerSlot(usize),
    ActivationSlot(usize),
    NetworkToggle,
    WidthSelect,
}

/// One categorical variable of the space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableDef {
    pub name: String,
    pub arity: usize,
    pub role: VarRole,
}

/// The full space definition. Variables are ordered: layer slots, activation
/// slots, the normalization toggle, then the width variable when present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceDef {
    slots: usize,
    layer_options: Vec<LayerKind>,
    activation_options: Vec<Activation>,
    norm_toggle: bool,
    widths: Option<Vec<usize>>,
    fixed_width: usize,
    vars: Vec<VariableDef>,
}

impl SpaceDef {
    pub fn new(
        slots: usize,
        layer_options: Vec<LayerKind>,
        activation_options: Vec<Activation>,
        norm_toggle: bool,
        widths: Option<Vec<usize>>,
        fixed_width: usize,
    ) -> Result<Self> {
        if slots == 0 {
            return Err(Error::InvalidSpace("at least one layer slot required".into()));
        }
        if layer_options.len() < 2 {
            return Err(Error::InvalidSpace(
                "layer slots need arity >= 2 (at least two options)".into(),
            ));
        }
        if activation_options.len() < 2 {
            return Err(Error::InvalidSpace(
                "activation slots need arity >= 2".into(),
            ));
        }
        if let Some(ws) = &widths {
            if ws.len() < 2 {
                return Err(Error::InvalidSpace(
                    "width variable needs arity >= 2".into(),
                ));
            }
            if ws.contains(&0) {
                return Err(Error::InvalidSpace("widths must be >= 1".into()));
            }
        }
        if fixed_width == 0 {
            return Err(Error::InvalidSpace("fixed width must be >= 1".into()));
        }

        let mut vars = Vec::new();
        for s in 0..slots {
            vars.push(VariableDef {
                name: format!("layer{s}"),
                arity: layer_options.len(),
                role: VarRole::LayerSlot(s),
            });
        }
        for s in 0..slots {
            vars.push(VariableDef {
                name: format!("activation{s}"),
                arity: activation_options.len(),
                role: VarRole::ActivationSlot(s),
            });
        }
        if norm_toggle {
            vars.push(VariableDef {
                name: "weight-norm".into(),
                arity: 2,
                role: VarRole::NetworkToggle,
            });
        }
        if let Some(ws) = &widths {
            vars.push(VariableDef {
                name: "width".into(),
                arity: ws.len(),
                role: VarRole::WidthSelect,
            });
        }
        Ok(SpaceDef {
            slots,
            layer_options,
            activation_options,
            norm_toggle,
            widths,
            fixed_width,
            vars,
        })
    }

    /// The default desk-scale space: 3 layer slots over {Identity, Linear,
    /// Residual x0.5, Residual x2.0}, 3 activation slots over {Identity, Tanh,
    /// ReLU, Swish}, a weight-norm toggle, and optionally width in {16,32,64}.
    pub fn default_space(width_searchable: bool) -> SpaceDef {
        SpaceDef::new(
            3,
            vec![
                LayerKind::Identity,
                LayerKind::Linear,
                LayerKind::Residual { multiplier: 0.5 },
                LayerKind::Residual { multiplier: 2.0 },
            ],
            vec![
                Activation::Identity,
                Activation::Tanh,
                Activation::Relu,
                Activation::Swish,
            ],
            true,
            if width_searchable {
                Some(vec![16, 32, 64])
            } else {
                None
            },
            32,
        )
        .expect("default space is valid")
    }

    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn num_slots(&self) -> usize {
        self.slots
    }

    pub fn vars(&self) -> &[VariableDef] {
        &self.vars
    }

    pub fn arity(&self, var: usize) -> usize {
        self.vars[var].arity
    }

    pub fn layer_options(&self) -> &[LayerKind] {
        &self.layer_options
    }

    pub fn activation_options(&self) -> &[Activation] {
        &self.activation_options
    }

    pub fn widths(&self) -> Option<&[usize]> {
        self.widths.as_deref()
    }

    pub fn layer_var(&self, slot: usize) -> usize {
        slot
    }

    pub fn activation_var(&self, slot: usize) -> usize {
        self.slots + slot
    }

    pub fn toggle_var(&self) -> Option<usize> {
        self.norm_toggle.then_some(2 * self.slots)
    }

    pub fn width_var(&self) -> Option<usize> {
        self.widths
            .as_ref()
            .map(|_| 2 * self.slots + usize::from(self.norm_toggle))
    }

    /// Search-space size: the product of all arities.
    pub fn size(&self) -> u128 {
        self.vars.iter().map(|v| v.arity as u128).product()
    }

    pub fn validate_genome(&self, g: &Genome) -> Result<()> {
        if g.0.len() != self.vars.len() {
            return Err(Error::InvalidGenome(format!(
                "genome has {} values, space has {} variables",
                g.0.len(),
                self.vars.len()
            )));
        }
        for (i, (&v, var)) in g.0.iter().zip(&self.vars).enumerate() {
            if v >= var.arity {
                return Err(Error::InvalidGenome(format!(
                    "value {v} out of range for variable {i} ({}, arity {})",
                    var.name, var.arity
                )));
            }
        }
        Ok(())
    }

    /// Uniform independent sample of every variable.
    pub fn sample_genome(&self, rng: &mut StreamRng) -> Genome {
        Genome(
            self.vars
                .iter()
                .map(|v| rng.random_range(0..v.arity))
                .collect(),
        )
    }

    pub fn genome_layer(&self, g: &Genome, slot: usize) -> LayerKind {
        self.layer_options[g.0[self.layer_var(slot)]]
    }

    pub fn genome_activation(&self, g: &Genome, slot: usize) -> Activation {
        self.activation_options[g.0[self.activation_var(slot)]]
    }

    pub fn genome_norm(&self, g: &Genome) -> bool {
        self.toggle_var().map(|ix| g.0[ix] == 1).unwrap_or(false)
    }

    pub fn genome_width(&self, g: &Genome) -> usize {
        match (&self.widths, self.width_var()) {
            (Some(ws), Some(ix)) => ws[g.0[ix]],
            _ => self.fixed_width,
        }
    }

    /// Materialize a genome into a trainable network. All tensors are freshly
    /// initialized and tagged with the owning member's id; Identity slots own
    /// no tensors. Deterministic given the stream: draws go stem, slots in
    /// order (weights then bias each), head.
    pub fn decode(
        &self,
        genome: &Genome,
        ctx: &DecodeContext,
        mut rng: StreamRng,
    ) -> Result<NetworkState> {
        self.validate_genome(genome)?;
        let width = self.genome_width(genome);
        let origin = OriginId(ctx.member.0);

        let mk = |role: ParamRole, rng: &mut StreamRng| -> Result<ParamTensor> {
            let spec = init_spec_for(role, ctx.init, width, ctx.input_width, ctx.output_width);
            let shape: Vec<usize> = match role {
                ParamRole::StemW => vec![width, ctx.input_width],
                ParamRole::StemB => vec![width],
                ParamRole::SlotW(_) => vec![width, width],
                ParamRole::SlotB(_) => vec![width],
                ParamRole::HeadW => vec![ctx.output_width, width],
                ParamRole::HeadB => vec![ctx.output_width],
            };
            let value = init_tensor(&shape, &spec, rng)?;
            ParamTensor::fresh(value, &ctx.optim, origin)
        };

        let stem = AffineParams {
            w: mk(ParamRole::StemW, &mut rng)?,
            b: mk(ParamRole::StemB, &mut rng)?,
        };
        let mut slots = Vec::with_capacity(self.slots);
        for s in 0..self.slots {
            let kind = self.genome_layer(genome, s);
            let act = self.genome_activation(genome, s);
            let params = if kind.has_weights() {
                Some(AffineParams {
                    w: mk(ParamRole::SlotW(s), &mut rng)?,
                    b: mk(ParamRole::SlotB(s), &mut rng)?,
                })
            } else {
                None
            };
            slots.push(SlotState { kind, act, params });
        }
        let head = AffineParams {
            w: mk(ParamRole::HeadW, &mut rng)?,
            b: mk(ParamRole::HeadB, &mut rng)?,
        };

        Ok(NetworkState {
            id: ctx.member,
            genome: genome.clone(),
            width,
            norm_enabled: self.genome_norm(genome),
            init_kind: ctx.init,
            optim: ctx.optim,
            stem,
            slots,
            head,
            rng,
            fitness: None,
            fitness_history: Vec::new(),
            diverged: false,
        })
    }
}

/// Everything `decode` needs besides the genome.
#[derive(Debug, Clone, Copy)]
pub struct DecodeContext {
    pub member: MemberId,
    pub input_width: usize,
    pub output_width: usize,
    pub init: InitKind,
    pub optim: OptimSpec,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ctx(id: usize) -> DecodeContext {
        DecodeContext {
            member: MemberId(id),
            input_width: 4,
            output_width: 2,
            init: InitKind::UniformHe,
            optim: OptimSpec::adam(1e-3),
        }
    }

    #[test]
    fn default_space_sizes() {
        assert_eq!(SpaceDef::default_space(false).size(), 8192);
        assert_eq!(SpaceDef::default_space(true).size(), 24576);
        assert_eq!(SpaceDef::default_space(false).num_vars(), 7);
        assert_eq!(SpaceDef::default_space(true).num_vars(), 8);
        // size always equals the product of arities
        let space = SpaceDef::default_space(true);
        let product: u128 = space.vars().iter().map(|v| v.arity as u128).product();
        assert_eq!(space.size(), product);
        // the same product formula reproduces literature-scale magnitudes,
        // e.g. three 10-ary plus thirty-one 4-ary variables land at ~4.6e21
        let big = 1000.0 * 4f64.powi(31);
        assert!((big / 4.6e21 - 1.0).abs() < 0.01);
    }

    #[test]
    fn arity_one_rejected() {
        let err = SpaceDef::new(
            2,
            vec![LayerKind::Identity],
            vec![Activation::Identity, Activation::Relu],
            true,
            None,
            8,
        );
        assert!(err.is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_near_uniform() {
        let space = SpaceDef::default_space(true);
        let g1 = space.sample_genome(&mut StreamRng::derive(4, "sample", &[0]));
        let g2 = space.sample_genome(&mut StreamRng::derive(4, "sample", &[0]));
        assert_eq!(g1, g2);

        // 1e4 samples of the 3-ary width variable: each frequency within
        // 3 sigma of 1/3, sigma = sqrt(p(1-p)/n).
        let mut rng = StreamRng::derive(4, "sample", &[1]);
        let ix = space.width_var().unwrap();
        let n = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[space.sample_genome(&mut rng).0[ix]] += 1;
        }
        let sigma = ((1.0 / 3.0) * (2.0 / 3.0) / n as f64).sqrt();
        for c in counts {
            let freq = c as f64 / n as f64;
            assert!(
                (freq - 1.0 / 3.0).abs() <= 3.0 * sigma,
                "freq {freq} off from 1/3"
            );
        }
    }

    #[test]
    fn decode_is_deterministic_and_shapes_follow_width() {
        let space = SpaceDef::default_space(true);
        let ix = space.width_var().unwrap();
        let mut g = space.sample_genome(&mut StreamRng::derive(8, "g", &[]));
        g.0[ix] = 1; // width 32
        g.0[0] = 1; // slot 0 linear so it owns tensors
        let a = space
            .decode(&g, &ctx(0), StreamRng::derive(8, "decode", &[0]))
            .unwrap();
        let b = space
            .decode(&g, &ctx(0), StreamRng::derive(8, "decode", &[0]))
            .unwrap();
        assert!(a.weights_bitwise_eq(&b));
        assert_eq!(a.width, 32);
        assert_eq!(a.stem.w.value.shape(), &[32, 4]);
        for slot in &a.slots {
            if let Some(p) = &slot.params {
                assert_eq!(p.w.value.shape(), &[32, 32]);
                assert_eq!(p.b.value.shape(), &[32]);
            }
        }
        assert_eq!(a.head.w.value.shape(), &[2, 32]);
        // origins all tagged with the owner
        for role in a.param_roles() {
            assert_eq!(a.param(role).origin, OriginId(0));
        }
    }

    #[test]
    fn all_identity_genome_reduces_to_affine_of_raw_features() {
        let space = SpaceDef::default_space(false);
        let g = Genome(vec![0, 0, 0, 0, 0, 0, 0]); // identity layers + identity acts
        let net = space
            .decode(&g, &ctx(3), StreamRng::derive(1, "decode", &[3]))
            .unwrap();
        assert!(net.slots.iter().all(|s| s.params.is_none()));
        // y = head(stem(x)) is affine; check additivity of the feature map
        let x1 = crate::tensor::Tensor::from_vec(&[1, 4], vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let x2 = crate::tensor::Tensor::from_vec(&[1, 4], vec![-0.5, 0.1, 0.2, 0.0]).unwrap();
        let x12 = crate::tensor::Tensor::from_vec(&[1, 4], vec![-0.4, 0.3, -0.1, 0.4]).unwrap();
        let zero = crate::tensor::Tensor::from_vec(&[1, 4], vec![0.0; 4]).unwrap();
        let f = |x: &crate::tensor::Tensor| net.forward(x).unwrap().0;
        let (y1, y2, y12, y0) = (f(&x1), f(&x2), f(&x12), f(&zero));
        for c in 0..2 {
            let lin = y1.at2(0, c) + y2.at2(0, c) - y0.at2(0, c);
            assert!((lin - y12.at2(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn genome_round_trip() {
        let space = SpaceDef::default_space(true);
        let g = space.sample_genome(&mut StreamRng::derive(9, "g", &[]));
        let net = space
            .decode(&g, &ctx(1), StreamRng::derive(9, "decode", &[1]))
            .unwrap();
        assert_eq!(net.genome, g);
    }

    proptest! {
        // Mixing closure: swapping any subset of variable values between two
        // valid genomes yields a valid, decodable genome.
        #[test]
        fn mixing_closure(seed_a in 0u64..500, seed_b in 0u64..500, mask in 0u32..256) {
            let space = SpaceDef::default_space(true);
            let ga = space.sample_genome(&mut StreamRng::derive(seed_a, "pa", &[]));
            let gb = space.sample_genome(&mut StreamRng::derive(seed_b, "pb", &[]));
            let mixed = Genome(
                (0..space.num_vars())
                    .map(|i| if mask & (1 << i) != 0 { gb.0[i] } else { ga.0[i] })
                    .collect(),
            );
            prop_assert!(space.validate_genome(&mixed).is_ok());
            let net = space.decode(&mixed, &ctx(0), StreamRng::derive(0, "d", &[]));
            prop_assert!(net.is_ok());
        }
    }
}
