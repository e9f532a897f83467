//! A decoded population member: stem, searched slots, head, optimizer
//! moments, origin tags, and the manual forward/backward passes.
//!
//! Topology is `input -> stem affine -> slot_0 .. slot_{S-1} -> head affine`,
//! where every slot applies its layer option followed by its activation
//! option at a fixed representation width. The stem and head adapt the task's
//! input/output widths and are always present; with all-Identity slots the
//! model reduces to an affine map of the raw features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    affine_backward, affine_forward, layer_backward, layer_forward, Activation, AffineCache,
    LayerKind,
};
use crate::optim::{optimizer_step, Moments, OptimSpec};
use crate::rng::StreamRng;
use crate::space::Genome;
use crate::tensor::{InitKind, InitSpec, Tensor};

/// Stable identifier of a population slot; replacements reuse the id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MemberId(pub usize);

/// Index of the initial population member a tensor descends from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OriginId(pub usize);

/// One parameter tensor with its optimizer moments and origin tag.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub value: Tensor,
    pub moments: Moments,
    pub origin: OriginId,
}

impl ParamTensor {
    pub fn fresh(value: Tensor, spec: &OptimSpec, origin: OriginId) -> Result<Self> {
        let moments = Moments::fresh(spec, value.shape())?;
        Ok(ParamTensor {
            value,
            moments,
            origin,
        })
    }

    pub fn reset_moments(&mut self, spec: &OptimSpec) -> Result<()> {
        self.moments = Moments::fresh(spec, self.value.shape())?;
        Ok(())
    }
}

/// Weight matrix plus bias of one affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub w: ParamTensor,
    pub b: ParamTensor,
}

/// One searched position: its layer option, activation option, and weights
/// (absent for Identity).
#[derive(Debug, Clone, PartialEq)]
pub struct SlotState {
    pub kind: LayerKind,
    pub act: Activation,
    pub params: Option<AffineParams>,
}

/// Names for every parameter tensor a network can own, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    StemW,
    StemB,
    SlotW(usize),
    SlotB(usize),
    HeadW,
    HeadB,
}

impl ParamRole {
    pub fn blob_name(&self) -> String {
        match self {
            ParamRole::StemW => "stem_w".into(),
            ParamRole::StemB => "stem_b".into(),
            ParamRole::SlotW(s) => format!("slot{s}_w"),
            ParamRole::SlotB(s) => format!("slot{s}_b"),
            ParamRole::HeadW => "head_w".into(),
            ParamRole::HeadB => "head_b".into(),
        }
    }
}

/// A population member.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub id: MemberId,
    pub genome: Genome,
    pub width: usize,
    pub norm_enabled: bool,
    pub init_kind: InitKind,
    pub optim: OptimSpec,
    pub stem: AffineParams,
    pub slots: Vec<SlotState>,
    pub head: AffineParams,
    pub rng: StreamRng,
    pub fitness: Option<f64>,
    pub fitness_history: Vec<(usize, f64)>,
    pub diverged: bool,
}

impl NetworkState {
    pub fn input_width(&self) -> usize {
        self.stem.w.value.cols()
    }

    pub fn output_width(&self) -> usize {
        self.head.w.value.rows()
    }

    /// Parameter roles present on this network, in canonical order.
    pub fn param_roles(&self) -> Vec<ParamRole> {
        let mut roles = vec![ParamRole::StemW, ParamRole::StemB];
        for (s, slot) in self.slots.iter().enumerate() {
            if slot.params.is_some() {
                roles.push(ParamRole::SlotW(s));
                roles.push(ParamRole::SlotB(s));
            }
        }
        roles.push(ParamRole::HeadW);
        roles.push(ParamRole::HeadB);
        roles
    }

    pub fn param(&self, role: ParamRole) -> &ParamTensor {
        match role {
            ParamRole::StemW => &self.stem.w,
            ParamRole::StemB => &self.stem.b,
            ParamRole::SlotW(s) => &self.slots[s].params.as_ref().expect("slot has weights").w,
            ParamRole::SlotB(s) => &self.slots[s].params.as_ref().expect("slot has weights").b,
            ParamRole::HeadW => &self.head.w,
            ParamRole::HeadB => &self.head.b,
        }
    }

    pub fn param_mut(&mut self, role: ParamRole) -> &mut ParamTensor {
        match role {
            ParamRole::StemW => &mut self.stem.w,
            ParamRole::StemB => &mut self.stem.b,
            ParamRole::SlotW(s) => &mut self.slots[s].params.as_mut().expect("slot has weights").w,
            ParamRole::SlotB(s) => &mut self.slots[s].params.as_mut().expect("slot has weights").b,
            ParamRole::HeadW => &mut self.head.w,
            ParamRole::HeadB => &mut self.head.b,
        }
    }

    /// Initializer for the tensor at `role`, given this network's shape.
    pub fn init_spec(&self, role: ParamRole) -> InitSpec {
        init_spec_for(
            role,
            self.init_kind,
            self.width,
            self.input_width(),
            self.output_width(),
        )
    }

    /// Forward pass over a batch `[batch, input_width]`. The cache returned
    /// here is what makes a later backward pass possible.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let (mut h, stem_cache) =
            affine_forward(&self.stem.w.value, &self.stem.b.value, false, x)?;
        let mut slot_caches = Vec::with_capacity(self.slots.len());
        for slot in &self.slots {
            let params = slot
                .params
                .as_ref()
                .map(|p| (&p.w.value, &p.b.value));
            let (z, affine) = layer_forward(slot.kind, params, self.norm_enabled, &h)?;
            let mut a = z.clone();
            for v in a.data_mut() {
                *v = slot.act.apply(*v);
            }
            slot_caches.push(SlotCache { affine, pre_act: z });
            h = a;
        }
        let (y, head_cache) = affine_forward(&self.head.w.value, &self.head.b.value, false, &h)?;
        Ok((
            y,
            ForwardCache {
                stem: stem_cache,
                slots: slot_caches,
                head: head_cache,
            },
        ))
    }

    /// Backward pass: gradients for every parameter tensor, aligned with
    /// [`NetworkState::param_roles`]. Identity slots contribute pass-through
    /// gradients and own no entries.
    pub fn backward(&self, cache: &ForwardCache, dy: &Tensor) -> Result<Grads> {
        let mut entries: Vec<(ParamRole, Tensor)> = Vec::new();

        let head_grads = affine_backward(&self.head.w.value, &cache.head, dy)?;
        let mut dh = head_grads.x.clone();
        let mut slot_entries: Vec<(ParamRole, Tensor)> = Vec::new();
        for (s, slot) in self.slots.iter().enumerate().rev() {
            let slot_cache = &cache.slots[s];
            // through the activation
            let mut dz = dh.clone();
            for (g, z) in dz.data_mut().iter_mut().zip(slot_cache.pre_act.data()) {
                *g *= slot.act.grad(*z);
            }
            let w = slot.params.as_ref().map(|p| &p.w.value);
            let (affine_grads, dx) =
                layer_backward(slot.kind, w, slot_cache.affine.as_ref(), &dz)?;
            if let Some(g) = affine_grads {
                slot_entries.push((ParamRole::SlotB(s), g.b));
                slot_entries.push((ParamRole::SlotW(s), g.w));
            }
            dh = dx;
        }
        let stem_grads = affine_backward(&self.stem.w.value, &cache.stem, &dh)?;

        entries.push((ParamRole::StemW, stem_grads.w));
        entries.push((ParamRole::StemB, stem_grads.b));
        slot_entries.reverse();
        entries.extend(slot_entries);
        entries.push((ParamRole::HeadW, head_grads.w));
        entries.push((ParamRole::HeadB, head_grads.b));
        Ok(Grads { entries })
    }

    /// One optimizer step over every parameter.
    pub fn apply_grads(&mut self, grads: &Grads) -> Result<()> {
        let spec = self.optim;
        for (role, g) in &grads.entries {
            let p = self.param_mut(*role);
            optimizer_step(&spec, &mut p.value, &mut p.moments, g)?;
        }
        Ok(())
    }

    /// Bitwise equality of all parameter tensors (ignores moments, fitness,
    /// and rng state). Used by tests and invariant checks.
    pub fn weights_bitwise_eq(&self, other: &NetworkState) -> bool {
        let ra = self.param_roles();
        let rb = other.param_roles();
        if ra != rb {
            return false;
        }
        ra.iter().all(|&role| {
            let a = &self.param(role).value;
            let b = &other.param(role).value;
            a.shape() == b.shape()
                && a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }

    pub fn all_params_finite(&self) -> bool {
        self.param_roles()
            .iter()
            .all(|&r| self.param(r).value.all_finite())
    }
}

/// Compute the initializer for a tensor role at the given widths.
pub fn init_spec_for(
    role: ParamRole,
    kind: InitKind,
    width: usize,
    input_width: usize,
    output_width: usize,
) -> InitSpec {
    let (fan_in, fan_out) = match role {
        ParamRole::StemW | ParamRole::StemB => (input_width, width),
        ParamRole::SlotW(_) | ParamRole::SlotB(_) => (width, width),
        ParamRole::HeadW | ParamRole::HeadB => (width, output_width),
    };
    InitSpec { kind, fan_in, fan_out }
}

#[derive(Debug, Clone)]
pub struct SlotCache {
    pub affine: Option<AffineCache>,
    pub pre_act: Tensor,
}

/// Everything cached during [`NetworkState::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub stem: AffineCache,
    pub slots: Vec<SlotCache>,
    pub head: AffineCache,
}

/// Per-tensor gradients in canonical role order.
#[derive(Debug, Clone)]
pub struct Grads {
    pub entries: Vec<(ParamRole, Tensor)>,
}

/// Loss functions used by the tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    SquaredError,
    CrossEntropy,
}

/// Regression targets are value tensors; classification targets are labels.
pub enum Targets<'a> {
    Values(&'a Tensor),
    Classes(&'a [usize]),
}

/// Mean loss over the batch and its gradient with respect to the outputs.
///
/// Squared error averages over batch and output entries; cross-entropy is the
/// mean softmax negative log-likelihood over the batch.
pub fn loss_and_grad(kind: LossKind, y: &Tensor, targets: &Targets) -> Result<(f64, Tensor)> {
    let batch = y.rows();
    let dim = y.cols();
    match (kind, targets) {
        (LossKind::SquaredError, Targets::Values(t)) => {
            if t.shape() != y.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "targets {:?} vs outputs {:?}",
                    t.shape(),
                    y.shape()
                )));
            }
            let n = (batch * dim) as f64;
            let mut loss = 0.0;
            let mut dy = Tensor::zeros(y.shape())?;
            for k in 0..y.len() {
                let e = y.data()[k] - t.data()[k];
                loss += e * e;
                dy.data_mut()[k] = 2.0 * e / n;
            }
            Ok((loss / n, dy))
        }
        (LossKind::CrossEntropy, Targets::Classes(labels)) => {
            if labels.len() != batch {
                return Err(Error::ShapeMismatch(format!(
                    "{} labels for batch of {batch}",
                    labels.len()
                )));
            }
            let mut loss = 0.0;
            let mut dy = Tensor::zeros(y.shape())?;
            for n in 0..batch {
                let label = labels[n];
                if label >= dim {
                    return Err(Error::ShapeMismatch(format!(
                        "label {label} out of range for {dim} classes"
                    )));
                }
                // log-sum-exp with max subtraction
                let mut maxv = f64::NEG_INFINITY;
                for c in 0..dim {
                    maxv = maxv.max(y.at2(n, c));
                }
                let mut sum = 0.0;
                for c in 0..dim {
                    sum += (y.at2(n, c) - maxv).exp();
                }
                let log_z = maxv + sum.ln();
                loss += log_z - y.at2(n, label);
                for c in 0..dim {
                    let p = (y.at2(n, c) - log_z).exp();
                    let ind = if c == label { 1.0 } else { 0.0 };
                    dy.set2(n, c, (p - ind) / batch as f64);
                }
            }
            Ok((loss / batch as f64, dy))
        }
        _ => Err(Error::ShapeMismatch(
            "loss kind does not match target kind".into(),
        )),
    }
}
