//! Persistence: versioned checkpoints (JSON manifest + tensor blobs with
//! SHA-256 checksums), the per-iteration event log and origin log CSVs, and
//! the machine-readable run summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{origin_fractions, OriginFractionRow};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::layers::{Activation, LayerKind};
use crate::network::{
    AffineParams, MemberId, NetworkState, OriginId, ParamRole, ParamTensor,
};
use crate::optim::{Moments, OptimSpec};
use crate::rng::{RngState, StreamRng};
use crate::runner::{BestInfo, IterationRecord, Population, RunOutput};
use crate::tensor::{InitKind, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const SUMMARY_VERSION: u32 = 1;

/// Serialize `f64` by bit pattern so non-finite fitness values round-trip
/// exactly through JSON.
pub mod f64_bits {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(v.to_bits())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(f64::from_bits(u64::deserialize(d)?))
    }
}

mod f64_bits_opt {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => s.serialize_some(&v.to_bits()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(Option::<u64>::deserialize(d)?.map(f64::from_bits))
    }
}

mod f64_bits_pairs {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[(usize, f64)], s: S) -> Result<S::Ok, S::Error> {
        let bits: Vec<(usize, u64)> = v.iter().map(|(i, f)| (*i, f.to_bits())).collect();
        serde::Serialize::serialize(&bits, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<(usize, f64)>, D::Error> {
        let bits = Vec::<(usize, u64)>::deserialize(d)?;
        Ok(bits
            .into_iter()
            .map(|(i, b)| (i, f64::from_bits(b)))
            .collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileRef {
    file: String,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum MomentsManifest {
    Sgd { velocity: FileRef },
    Adam { m: FileRef, v: FileRef, t: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorManifest {
    role: String,
    origin: usize,
    value: FileRef,
    moments: MomentsManifest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SlotManifest {
    kind: LayerKind,
    act: Activation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MemberManifest {
    id: usize,
    genome: crate::space::Genome,
    width: usize,
    norm_enabled: bool,
    init_kind: InitKind,
    rng: RngState,
    #[serde(with = "f64_bits_opt")]
    fitness: Option<f64>,
    #[serde(with = "f64_bits_pairs")]
    fitness_history: Vec<(usize, f64)>,
    diverged: bool,
    slots: Vec<SlotManifest>,
    tensors: Vec<TensorManifest>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    config_hash: String,
    seed: u64,
    iteration: usize,
    history: Vec<IterationRecord>,
    members: Vec<MemberManifest>,
}

/// Resume guard data read back from a checkpoint.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub seed: u64,
    pub iteration: usize,
}

fn role_name(role: ParamRole) -> String {
    role.blob_name()
}

fn parse_role(name: &str) -> Result<ParamRole> {
    match name {
        "stem_w" => return Ok(ParamRole::StemW),
        "stem_b" => return Ok(ParamRole::StemB),
        "head_w" => return Ok(ParamRole::HeadW),
        "head_b" => return Ok(ParamRole::HeadB),
        _ => {}
    }
    if let Some(rest) = name.strip_prefix("slot") {
        if let Some(ix) = rest.strip_suffix("_w") {
            let s: usize = ix
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad tensor role {name:?}")))?;
            return Ok(ParamRole::SlotW(s));
        }
        if let Some(ix) = rest.strip_suffix("_b") {
            let s: usize = ix
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad tensor role {name:?}")))?;
            return Ok(ParamRole::SlotB(s));
        }
    }
    Err(Error::Checkpoint(format!("bad tensor role {name:?}")))
}

fn blob_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(4 + 4 * t.shape().len() + 8 * t.len());
    t.write_blob(&mut buf)?;
    Ok(buf)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

fn write_tensor_file(dir: &Path, name: &str, t: &Tensor) -> Result<FileRef> {
    let bytes = blob_bytes(t)?;
    let sha = sha256_hex(&bytes);
    std::fs::write(dir.join(name), &bytes)?;
    Ok(FileRef {
        file: name.to_string(),
        sha256: sha,
    })
}

fn read_tensor_file(dir: &Path, fr: &FileRef) -> Result<Tensor> {
    let bytes = std::fs::read(dir.join(&fr.file))
        .map_err(|e| Error::Checkpoint(format!("missing blob {}: {e}", fr.file)))?;
    if sha256_hex(&bytes) != fr.sha256 {
        return Err(Error::Checksum(fr.file.clone()));
    }
    Tensor::read_blob(&mut bytes.as_slice())
}

/// Write the population (weights, moments, rng streams, fitness history, and
/// the full recorded history) so that `load_checkpoint` reproduces it
/// bitwise.
pub fn save_checkpoint(
    dir: &Path,
    pop: &Population,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<()> {
    let blob_dir = dir.join("blobs");
    if blob_dir.exists() {
        std::fs::remove_dir_all(&blob_dir)?;
    }
    std::fs::create_dir_all(&blob_dir)?;

    let mut members = Vec::with_capacity(pop.members.len());
    for net in &pop.members {
        let mut tensors = Vec::new();
        for role in net.param_roles() {
            let name = format!("m{}_{}", net.id.0, role_name(role));
            let pt = net.param(role);
            let value = write_tensor_file(&blob_dir, &format!("{name}.bin"), &pt.value)?;
            let moments = match &pt.moments {
                Moments::Sgd { velocity } => MomentsManifest::Sgd {
                    velocity: write_tensor_file(&blob_dir, &format!("{name}.vel.bin"), velocity)?,
                },
                Moments::Adam { m, v, t } => MomentsManifest::Adam {
                    m: write_tensor_file(&blob_dir, &format!("{name}.m.bin"), m)?,
                    v: write_tensor_file(&blob_dir, &format!("{name}.v.bin"), v)?,
                    t: *t,
                },
            };
            tensors.push(TensorManifest {
                role: role_name(role),
                origin: pt.origin.0,
                value,
                moments,
            });
        }
        members.push(MemberManifest {
            id: net.id.0,
            genome: net.genome.clone(),
            width: net.width,
            norm_enabled: net.norm_enabled,
            init_kind: net.init_kind,
            rng: net.rng.state(),
            fitness: net.fitness,
            fitness_history: net.fitness_history.clone(),
            diverged: net.diverged,
            slots: net
                .slots
                .iter()
                .map(|s| SlotManifest {
                    kind: s.kind,
                    act: s.act,
                })
                .collect(),
            tensors,
        });
    }

    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        config_hash: cfg.semantic_hash(),
        seed,
        iteration: pop.iteration,
        history: pop.history.clone(),
        members,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest serialization failed: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`], verifying the version
/// and every blob checksum before constructing anything.
pub fn load_checkpoint(dir: &Path, optim: OptimSpec) -> Result<(Population, CheckpointMeta)> {
    let manifest_path = dir.join("manifest.json");
    let json = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_str(&json)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.version > CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} is newer than supported version {
            }",
            manifest.version, CHECKPOINT_VERSION
        )));
    }
    let blob_dir = dir.join("blobs");

    let mut members = Vec::with_capacity(manifest.members.len());
    for mm in &manifest.members {
        let mut by_role: BTreeMap<String, (ParamTensor, ParamRole)> = BTreeMap::new();
        for tm in &mm.tensors {
            let role = parse_role(&tm.role)?;
            let value = read_tensor_file(&blob_dir, &tm.value)?;
            let moments = match &tm.moments {
                MomentsManifest::Sgd { velocity } => Moments::Sgd {
                    velocity: read_tensor_file(&blob_dir, velocity)?,
                },
                MomentsManifest::Adam { m, v, t } => Moments::Adam {
                    m: read_tensor_file(&blob_dir, m)?,
                    v: read_tensor_file(&blob_dir, v)?,
                    t: *t,
                },
            };
            by_role.insert(
                tm.role.clone(),
                (
                    ParamTensor {
                        value,
                        moments,
                        origin: OriginId(tm.origin),
                    },
                    role,
                ),
            );
        }
        let mut take = |name: &str| -> Result<ParamTensor> {
            by_role
                .remove(name)
                .map(|(pt, _)| pt)
                .ok_or_else(|| Error::Checkpoint(format!("member {} missing tensor {name}", mm.id)))
        };
        let stem = AffineParams {
            w: take("stem_w")?,
            b: take("stem_b")?,
        };
        let mut slots = Vec::with_capacity(mm.slots.len());
        for (s, sm) in mm.slots.iter().enumerate() {
            let params = if sm.kind.has_weights() {
                Some(AffineParams {
                    w: take(&format!("slot{s}_w"))?,
                    b: take(&format!("slot{s}_b"))?,
                })
            } else {
                None
            };
            slots.push(crate::network::SlotState {
                kind: sm.kind,
                act: sm.act,
                params,
            });
        }
        let head = AffineParams {
            w: take("head_w")?,
            b: take("head_b")?,
        };
        members.push(NetworkState {
            id: MemberId(mm.id),
            genome: mm.genome.clone(),
            width: mm.width,
            norm_enabled: mm.norm_enabled,
            init_kind: mm.init_kind,
            optim,
            stem,
            slots,
            head,
            rng: StreamRng::restore(&mm.rng)?,
            fitness: mm.fitness,
            fitness_history: mm.fitness_history.clone(),
            diverged: mm.diverged,
        });
    }

    Ok((
        Population {
            members,
            iteration: manifest.iteration,
            history: manifest.history,
        },
        CheckpointMeta {
            config_hash: manifest.config_hash,
            seed: manifest.seed,
            iteration: manifest.iteration,
        },
    ))
}

/// Event log: one row per member per iteration.
/// Columns: iteration, member_id, fitness, genome (semicolon-joined ints),
/// replaced, parent_hi, parent_lo.
pub fn event_log_csv(history: &[IterationRecord]) -> String {
    let mut out = String::from("iteration,member_id,fitness,genome,replaced,parent_hi,parent_lo\n");
    for rec in history {
        for row in &rec.rows {
            let hi = row.parent_hi.map(|v| v.to_string()).unwrap_or_default();
            let lo = row.parent_lo.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                rec.iteration,
                row.member_id,
                row.fitness,
                row.genome.csv_field(),
                u8::from(row.replaced),
                hi,
                lo
            )
            .expect("writing to String cannot fail");
        }
    }
    out
}

/// Origin log: one row per weight-owning slot per member per iteration.
pub fn origin_log_csv(history: &[IterationRecord]) -> String {
    let mut out = String::from("iteration,member_id,slot,origin\n");
    for rec in history {
        for row in &rec.rows {
            for (slot, origin) in row.slot_origins.iter().enumerate() {
                if let Some(origin) = origin {
                    writeln!(out, "{},{},{},{}", rec.iteration, row.member_id, slot, origin)
                        .expect("writing to String cannot fail");
                }
            }
        }
    }
    out
}

/// Replace non-finite values before JSON emission (summaries are
/// human-facing; checkpoints keep exact bits).
fn json_safe(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else if v > 0.0 {
        f64::MAX
    } else {
        f64::MIN
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationAggregate {
    pub iteration: usize,
    pub cumulative_epochs: usize,
    pub best: f64,
    pub mean: f64,
}

/// The machine-readable summary of one run, written next to the CSVs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub algorithm: String,
    pub task_kind: String,
    pub seed: u64,
    pub config_hash: String,
    pub population: usize,
    pub e_total: usize,
    pub steps: Vec<usize>,
    pub final_best: BestInfo,
    /// (member id, final fitness) for every member.
    pub final_members: Vec<(usize, f64)>,
    pub incumbent: Vec<(usize, f64)>,
    pub per_iteration: Vec<IterationAggregate>,
    pub origin_fractions: Vec<OriginFractionRow>,
    pub config: ExperimentConfig,
}

pub fn build_summary(cfg: &ExperimentConfig, out: &RunOutput) -> Result<RunSummary> {
    let schedule = cfg.resolved_schedule()?;
    let per_iteration = out
        .history
        .iter()
        .map(|rec| {
            let n = rec.rows.len().max(1);
            let best = rec
                .rows
                .iter()
                .map(|r| r.fitness)
                .fold(f64::NEG_INFINITY, f64::max);
            let mean = rec.rows.iter().map(|r| r.fitness).sum::<f64>() / n as f64;
            IterationAggregate {
                iteration: rec.iteration,
                cumulative_epochs: rec.cumulative_epochs,
                best: json_safe(best),
                mean: json_safe(mean),
            }
        })
        .collect();
    let mut final_best = out.best.clone();
    final_best.fitness = json_safe(final_best.fitness);
    Ok(RunSummary {
        schema_version: SUMMARY_VERSION,
        algorithm: cfg.algorithm.label().to_string(),
        task_kind: format!("{:?}", cfg.task.kind).to_lowercase(),
        seed: out.seed,
        config_hash: cfg.semantic_hash(),
        population: cfg.population,
        e_total: schedule.e_total(),
        steps: schedule.steps().to_vec(),
        final_best,
        final_members: out
            .population
            .members
            .iter()
            .map(|m| (m.id.0, json_safe(m.fitness.unwrap_or(f64::NEG_INFINITY))))
            .collect(),
        incumbent: out
            .incumbent
            .iter()
            .map(|(e, f)| (*e, json_safe(*f)))
            .collect(),
        per_iteration,
        origin_fractions: origin_fractions(&out.history).points,
        config: cfg.clone(),
    })
}

/// Write every artifact of one finished run into `run_dir`: events.csv,
/// origins.csv, summary.json, and the final checkpoint.
pub fn write_run_artifacts(run_dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(run_dir)?;
    std::fs::write(run_dir.join("events.csv"), event_log_csv(&out.history))?;
    std::fs::write(run_dir.join("origins.csv"), origin_log_csv(&out.history))?;
    let summary = build_summary(cfg, out)?;
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Checkpoint(format!("summary serialization failed: {e}")))?;
    std::fs::write(run_dir.join("summary.json"), json)?;
    save_checkpoint(&run_dir.join("checkpoint"), &out.population, cfg, out.seed)?;
    Ok(())
}

pub fn read_summary(run_dir: &Path) -> Result<RunSummary> {
    let path = run_dir.join("summary.json");
    let json = std::fs::read_to_string(&path)
        .map_err(|e| Error::Report(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&json).map_err(|e| Error::Report(format!("bad summary: {e}")))
}
