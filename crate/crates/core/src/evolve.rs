//! Operators that create new population members from existing ones:
//! shrink-perturb weight inheritance, one-offspring uniform crossover of two
//! parents (layer weights travel with the copied variables), the no-mixing
//! self-cross ablation, the mutation baseline, width resizing, and greedy
//! weight-averaging soups.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{MemberId, NetworkState, ParamRole, ParamTensor};
use crate::rng::StreamRng;
use crate::space::{SpaceDef, VarRole};
use crate::tensor::{init_tensor, InitSpec, Tensor};

/// Shrink-perturb coefficients: `W' = lambda * W + gamma * N` with `N` a
/// fresh initialization sample. `(1, 0)` copies exactly, `(0, 1)`
/// reinitializes randomly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShrinkPerturb {
    pub lambda: f64,
    pub gamma: f64,
}

impl ShrinkPerturb {
    pub const COPY_EXACT: ShrinkPerturb = ShrinkPerturb { lambda: 1.0, gamma: 0.0 };
    pub const REINIT: ShrinkPerturb = ShrinkPerturb { lambda: 0.0, gamma: 1.0 };

    pub fn new(lambda: f64, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) || !lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "shrink coefficient lambda must be in [0, 1], got {lambda}"
            )));
        }
        if gamma < 0.0 || !gamma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "perturb coefficient gamma must be >= 0, got {gamma}"
            )));
        }
        Ok(ShrinkPerturb { lambda, gamma })
    }

    pub fn is_copy_exact(&self) -> bool {
        self.lambda == 1.0 && self.gamma == 0.0
    }
}

/// Mixing parameters: per-variable replacement probability and the
/// shrink-perturb applied to inherited layer weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    pub p: f64,
    pub sp: ShrinkPerturb,
}

impl MixConfig {
    pub fn new(p: f64, sp: ShrinkPerturb) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) || !p.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "replacement probability p must be in [0, 1], got {p}"
            )));
        }
        Ok(MixConfig { p, sp })
    }
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            p: 0.25,
            sp: ShrinkPerturb { lambda: 0.4, gamma: 0.1 },
        }
    }
}

/// `lambda * W + gamma * N` with the noise tensor given explicitly. The
/// degenerate coefficient pairs short-circuit so `(1,0)` is a bitwise copy
/// and `(0,1)` is bitwise the noise.
pub fn shrink_perturb_with_noise(t: &Tensor, sp: ShrinkPerturb, noise: &Tensor) -> Result<Tensor> {
    if noise.shape() != t.shape() {
        return Err(Error::ShapeMismatch(format!(
            "noise shape {:?} vs tensor shape {:?}",
            noise.shape(),
            t.shape()
        )));
    }
    if sp.gamma == 0.0 {
        if sp.lambda == 1.0 {
            return Ok(t.clone());
        }
        let mut out = t.clone();
        for v in out.data_mut() {
            *v *= sp.lambda;
        }
        return Ok(out);
    }
    if sp.lambda == 0.0 {
        if sp.gamma == 1.0 {
            return Ok(noise.clone());
        }
        let mut out = noise.clone();
        for v in out.data_mut() {
            *v *= sp.gamma;
        }
        return Ok(out);
    }
    let mut out = t.clone();
    for (v, n) in out.data_mut().iter_mut().zip(noise.data()) {
        *v = sp.lambda * *v + sp.gamma * *n;
    }
    Ok(out)
}

/// Shrink-perturb with noise freshly sampled from `init_spec`. The input is
/// untouched. When `gamma == 0` no noise is sampled and the stream does not
/// advance.
pub fn shrink_perturb(
    t: &Tensor,
    sp: ShrinkPerturb,
    init_spec: &InitSpec,
    rng: &mut StreamRng,
) -> Result<Tensor> {
    if t.shape().len() == 2 && (init_spec.fan_in != t.cols() || init_spec.fan_out != t.rows()) {
        return Err(Error::ShapeMismatch(format!(
            "init spec fans ({}, {}) do not match tensor shape {:?}",
            init_spec.fan_in,
            init_spec.fan_out,
            t.shape()
        )));
    }
    if sp.gamma == 0.0 {
        return shrink_perturb_with_noise(t, sp, t);
    }
    let noise = init_tensor(t.shape(), init_spec, rng)?;
    shrink_perturb_with_noise(t, sp, &noise)
}

/// Slice-copy a tensor to a new representation width: dimensions equal to
/// `old_width` become `new_width`, the overlapping block is preserved, and
/// any new entries come from a fresh `init_spec` sample of the full new
/// shape. Equal widths return the tensor bitwise without advancing the
/// stream.
pub fn resize_for_width(
    t: &Tensor,
    old_width: usize,
    new_width: usize,
    init_spec: &InitSpec,
    rng: &mut StreamRng,
) -> Result<Tensor> {
    if old_width == new_width {
        return Ok(t.clone());
    }
    let new_shape: Vec<usize> = t
        .shape()
        .iter()
        .map(|&d| if d == old_width { new_width } else { d })
        .collect();
    let mut fresh = init_tensor(&new_shape, init_spec, rng)?;
    match t.shape().len() {
        1 => {
            let n = t.shape()[0].min(new_shape[0]);
            for k in 0..n {
                fresh.data_mut()[k] = t.data()[k];
            }
        }
        2 => {
            let rows = t.shape()[0].min(new_shape[0]);
            let cols = t.shape()[1].min(new_shape[1]);
            for r in 0..rows {
                for c in 0..cols {
                    fresh.set2(r, c, t.at2(r, c));
                }
            }
        }
        other => {
            return Err(Error::InvalidShape(format!(
                "resize supports rank 1 and 2 tensors, got rank {other}"
            )))
        }
    }
    Ok(fresh)
}

/// What a mixing event did, for event logs and statistics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixOutcome {
    pub parent_hi: MemberId,
    pub parent_lo: MemberId,
    /// Variable indices whose values were taken from the worse parent.
    pub replaced_vars: Vec<usize>,
}

/// One-offspring uniform crossover over the parent pool.
///
/// Two distinct parents are sampled uniformly without replacement and ordered
/// so `net1` has the higher fitness (ties go to the lower member id). The
/// offspring starts as a deep copy of `net1`; each variable is independently
/// replaced by `net2`'s value with probability `p`, and when a replaced
/// variable is a layer slot owning weights in `net2`, those weights are
/// copied, width-adjusted if necessary, and shrink-perturbed. Origin tags
/// travel with copied tensors; optimizer moments of replaced or reshaped
/// tensors are reset; offspring fitness is unset.
///
/// Stream draw order: two parent indices, then one uniform per variable, then
/// materialization draws for stem (resize), each slot in order (resize then
/// noise), and head (resize).
pub fn create_architecture(
    space: &SpaceDef,
    pool: &[&NetworkState],
    mix: &MixConfig,
    rng: &mut StreamRng,
) -> Result<(NetworkState, MixOutcome)> {
    if pool.len() < 2 {
        return Err(Error::Population(format!(
            "mixing needs a parent pool of >= 2, got {}",
            pool.len()
        )));
    }
    for net in pool {
        if net.fitness.is_none() {
            return Err(Error::FitnessUnset(net.id.0));
        }
    }
    let a = rng.random_range(0..pool.len());
    let mut b = rng.random_range(0..pool.len() - 1);
    if b >= a {
        b += 1;
    }
    let (pa, pb) = (pool[a], pool[b]);
    let fa = pa.fitness.expect("checked above");
    let fb = pb.fitness.expect("checked above");
    let better_is_a = match fa.partial_cmp(&fb) {
        Some(std::cmp::Ordering::Greater) => true,
        Some(std::cmp::Ordering::Less) => false,
        _ => pa.id <= pb.id,
    };
    let (net1, net2) = if better_is_a { (pa, pb) } else { (pb, pa) };
    let (offspring, replaced_vars) = mix_networks(space, net1, net2, mix, rng)?;
    Ok((
        offspring,
        MixOutcome {
            parent_hi: net1.id,
            parent_lo: net2.id,
            replaced_vars,
        },
    ))
}

/// The no-mixing ablation: cross a member with itself. The genome cannot
/// change; layer slots still get shrink-perturbed with probability `p`.
pub fn self_mix(
    space: &SpaceDef,
    net: &NetworkState,
    mix: &MixConfig,
    rng: &mut StreamRng,
) -> Result<NetworkState> {
    Ok(mix_networks(space, net, net, mix, rng)?.0)
}

/// Shared body of `create_architecture` and `self_mix`.
fn mix_networks(
    space: &SpaceDef,
    net1: &NetworkState,
    net2: &NetworkState,
    mix: &MixConfig,
    rng: &mut StreamRng,
) -> Result<(NetworkState, Vec<usize>)> {
    let m = space.num_vars();
    let mut offspring = net1.clone();
    let mut replaced_vars = Vec::new();
    let mut take = vec![false; m];
    for (i, slot) in take.iter_mut().enumerate() {
        let u: f64 = rng.random();
        if u < mix.p {
            *slot = true;
            replaced_vars.push(i);
        }
    }

    let mut genome = net1.genome.clone();
    for ((value, &taken), donor) in genome.0.iter_mut().zip(&take).zip(&net2.genome.0) {
        if taken {
            *value = *donor;
        }
    }
    space.validate_genome(&genome)?;

    let new_width = space.genome_width(&genome);
    let input_width = net1.input_width();
    let output_width = net1.output_width();
    let init = net1.init_kind;
    let optim = net1.optim;

    offspring.genome = genome.clone();
    offspring.width = new_width;
    offspring.norm_enabled = space.genome_norm(&genome);

    let spec_at = |role: ParamRole| {
        crate::network::init_spec_for(role, init, new_width, input_width, output_width)
    };

    // resize helper: adjusts one inherited tensor to the offspring width and
    // resets its moments when the shape actually changed
    let adapt = |pt: &mut ParamTensor,
                     role: ParamRole,
                     src_width: usize,
                     rng: &mut StreamRng|
     -> Result<bool> {
        if src_width == new_width {
            return Ok(false);
        }
        pt.value = resize_for_width(&pt.value, src_width, new_width, &spec_at(role), rng)?;
        pt.reset_moments(&optim)?;
        Ok(true)
    };

    // stem and head always come from net1
    let w1 = net1.width;
    adapt(&mut offspring.stem.w, ParamRole::StemW, w1, rng)?;
    adapt(&mut offspring.stem.b, ParamRole::StemB, w1, rng)?;

    for s in 0..space.num_slots() {
        let layer_var = space.layer_var(s);
        let replaced = take[layer_var];
        let kind = space.genome_layer(&genome, s);
        let act = space.genome_activation(&genome, s);
        let slot = &mut offspring.slots[s];
        slot.kind = kind;
        slot.act = act;
        if !kind.has_weights() {
            slot.params = None;
            continue;
        }
        if replaced {
            let src = net2.slots[s]
                .params
                .as_ref()
                .expect("non-identity slot owns weights");
            let mut w = src.w.clone();
            let mut b = src.b.clone();
            adapt(&mut w, ParamRole::SlotW(s), net2.width, rng)?;
            adapt(&mut b, ParamRole::SlotB(s), net2.width, rng)?;
            w.value = shrink_perturb(&w.value, mix.sp, &spec_at(ParamRole::SlotW(s)), rng)?;
            b.value = shrink_perturb(&b.value, mix.sp, &spec_at(ParamRole::SlotB(s)), rng)?;
            w.reset_moments(&optim)?;
            b.reset_moments(&optim)?;
            slot.params = Some(crate::network::AffineParams { w, b });
        } else {
            let params = slot.params.as_mut().expect("non-identity slot owns weights");
            adapt(&mut params.w, ParamRole::SlotW(s), w1, rng)?;
            adapt(&mut params.b, ParamRole::SlotB(s), w1, rng)?;
        }
    }

    adapt(&mut offspring.head.w, ParamRole::HeadW, w1, rng)?;
    adapt(&mut offspring.head.b, ParamRole::HeadB, w1, rng)?;

    offspring.fitness = None;
    offspring.fitness_history.clear();
    offspring.diverged = false;
    Ok((offspring, replaced_vars))
}

/// Branches of the mutation baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearlBranch {
    /// Resample one architecture variable uniformly.
    Resample,
    /// Add per-tensor scaled Gaussian noise to every weight.
    WeightNoise,
    /// Leave the network unchanged.
    NoChange,
}

/// Configuration of the mutation baseline. `forced_branch` pins the branch
/// for tests and ablations; normally the branch is drawn uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearlConfig {
    pub weight_noise_scale: f64,
    pub forced_branch: Option<SearlBranch>,
}

impl Default for SearlConfig {
    fn default() -> Self {
        SearlConfig {
            weight_noise_scale: 0.1,
            forced_branch: None,
        }
    }
}

/// Mutation-based replacement: with equal probability resample one variable
/// (fresh weights if the layer kind changed), add weight noise scaled by each
/// tensor's own standard deviation, or do nothing. Fitness bookkeeping is
/// left to the caller installing the result.
pub fn searl_mutation(
    space: &SpaceDef,
    net: &NetworkState,
    cfg: &SearlConfig,
    rng: &mut StreamRng,
) -> Result<(NetworkState, SearlBranch)> {
    let branch = match cfg.forced_branch {
        Some(b) => b,
        None => match rng.random_range(0..3u32) {
            0 => SearlBranch::Resample,
            1 => SearlBranch::WeightNoise,
            _ => SearlBranch::NoChange,
        },
    };
    let mut out = net.clone();
    match branch {
        SearlBranch::NoChange => {}
        SearlBranch::Resample => {
            let var = rng.random_range(0..space.num_vars());
            let new_v = rng.random_range(0..space.arity(var));
            let old_v = out.genome.0[var];
            out.genome.0[var] = new_v;
            if new_v != old_v {
                apply_resampled_var(space, &mut out, var, rng)?;
            }
        }
        SearlBranch::WeightNoise => {
            for role in out.param_roles() {
                let pt = out.param_mut(role);
                let std = pt.value.entry_std();
                let noise_std = cfg.weight_noise_scale * std;
                if noise_std > 0.0 {
                    for v in pt.value.data_mut() {
                        let n: f64 = StandardNormal.sample(rng);
                        *v += noise_std * n;
                    }
                }
            }
        }
    }
    Ok((out, branch))
}

fn apply_resampled_var(
    space: &SpaceDef,
    net: &mut NetworkState,
    var: usize,
    rng: &mut StreamRng,
) -> Result<()> {
    let genome = net.genome.clone();
    let owner_origin = crate::network::OriginId(net.id.0);
    match space.vars()[var].role {
        VarRole::LayerSlot(s) => {
            let kind = space.genome_layer(&genome, s);
            let (width, init, optim) = (net.width, net.init_kind, net.optim);
            let (d_in, d_out) = (net.input_width(), net.output_width());
            let slot = &mut net.slots[s];
            slot.kind = kind;
            if kind.has_weights() {
                let spec_w = crate::network::init_spec_for(
                    ParamRole::SlotW(s),
                    init,
                    width,
                    d_in,
                    d_out,
                );
                let spec_b = crate::network::init_spec_for(
                    ParamRole::SlotB(s),
                    init,
                    width,
                    d_in,
                    d_out,
                );
                let w = init_tensor(&[width, width], &spec_w, rng)?;
                let b = init_tensor(&[width], &spec_b, rng)?;
                slot.params = Some(crate::network::AffineParams {
                    w: ParamTensor::fresh(w, &optim, owner_origin)?,
                    b: ParamTensor::fresh(b, &optim, owner_origin)?,
                });
            } else {
                slot.params = None;
            }
        }
        VarRole::ActivationSlot(s) => {
            net.slots[s].act = space.genome_activation(&genome, s);
        }
        VarRole::NetworkToggle => {
            net.norm_enabled = space.genome_norm(&genome);
        }
        VarRole::WidthSelect => {
            let old_width = net.width;
            let new_width = space.genome_width(&genome);
            if old_width != new_width {
                let (init, optim) = (net.init_kind, net.optim);
                let (d_in, d_out) = (net.input_width(), net.output_width());
                net.width = new_width;
                for role in net.param_roles() {
                    let spec =
                        crate::network::init_spec_for(role, init, new_width, d_in, d_out);
                    let pt = net.param_mut(role);
                    pt.value = resize_for_width(&pt.value, old_width, new_width, &spec, rng)?;
                    pt.reset_moments(&optim)?;
                }
            }
        }
    }
    Ok(())
}

/// Result of building a greedy soup.
#[derive(Debug, Clone)]
pub struct SoupResult {
    pub network: NetworkState,
    /// Held-out fitness of the final soup.
    pub heldout_fitness: f64,
    /// Best held-out fitness among the eligible individuals.
    pub best_individual_heldout: f64,
    /// Members whose weights went into the average.
    pub ingredients: Vec<MemberId>,
}

/// Greedy weight-averaging soup over a finished population.
///
/// Eligible candidates are those whose genome equals the best candidate's
/// genome (best by stored validation fitness, ties to the lower id), so all
/// averaged tensors share shapes. Eligibles are visited in descending
/// held-out fitness; each is added to the running average iff the held-out
/// fitness does not decrease. By construction the soup's held-out fitness is
/// at least the best eligible individual's.
pub fn greedy_soup<F>(candidates: &[&NetworkState], mut heldout_eval: F) -> Result<SoupResult>
where
    F: FnMut(&NetworkState) -> f64,
{
    if candidates.is_empty() {
        return Err(Error::Population("soup needs at least one candidate".into()));
    }
    let anchor = candidates
        .iter()
        .copied()
        .max_by(|a, b| {
            let fa = a.fitness.unwrap_or(f64::NEG_INFINITY);
            let fb = b.fitness.unwrap_or(f64::NEG_INFINITY);
            fa.partial_cmp(&fb)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.id.cmp(&a.id))
        })
        .expect("non-empty");
    let mut eligible: Vec<(&NetworkState, f64)> = candidates
        .iter()
        .copied()
        .filter(|c| c.genome == anchor.genome)
        .map(|c| {
            let h = heldout_eval(c);
            (c, h)
        })
        .collect();
    eligible.sort_by(|(a, ha), (b, hb)| {
        hb.partial_cmp(ha)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.id.cmp(&b.id))
    });

    let (first, best_individual_heldout) = eligible[0];
    let roles = first.param_roles();
    let mut sums: Vec<Tensor> = roles
        .iter()
        .map(|&r| first.param(r).value.clone())
        .collect();
    let mut count = 1usize;
    let mut ingredients = vec![first.id];
    let mut current = first.clone();
    let mut current_h = best_individual_heldout;

    for &(cand, _) in eligible.iter().skip(1) {
        let mut trial_sums = sums.clone();
        for (sum, &role) in trial_sums.iter_mut().zip(&roles) {
            for (acc, v) in sum.data_mut().iter_mut().zip(cand.param(role).value.data()) {
                *acc += v;
            }
        }
        let trial = network_with_averaged_params(first, &roles, &trial_sums, count + 1)?;
        let h = heldout_eval(&trial);
        if h >= current_h {
            sums = trial_sums;
            count += 1;
            current = trial;
            current_h = h;
            ingredients.push(cand.id);
        }
    }

    current.fitness = None;
    current.fitness_history.clear();
    Ok(SoupResult {
        network: current,
        heldout_fitness: current_h,
        best_individual_heldout,
        ingredients,
    })
}

fn network_with_averaged_params(
    base: &NetworkState,
    roles: &[ParamRole],
    sums: &[Tensor],
    count: usize,
) -> Result<NetworkState> {
    let mut out = base.clone();
    for (&role, sum) in roles.iter().zip(sums) {
        let pt = out.param_mut(role);
        let mut avg = sum.clone();
        for v in avg.data_mut() {
            *v /= count as f64;
        }
        pt.value = avg;
        pt.reset_moments(&base.optim.clone())?;
    }
    Ok(out)
}
