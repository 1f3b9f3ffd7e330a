//! Experiment orchestration: attack batches, parameter sweeps, metric
//! computation, and report emission.
//!
//! A sweep runs the cartesian product of an attack's parameter grids. Every
//! cell generates `n_vectors` adversarial vectors with seeds
//! `base_seed + i` against the attacker's local model (the defender itself
//! in the white-box setting) and scores all of them against the defender.
//! Cell results are cached by a content hash of the models and the cell
//! parameters, so an interrupted sweep resumes where it stopped.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::s;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{
    search_from_free_batch, vanilla_scale, vanilla_uniform, AttackConfig,
};
use crate::dataio::{load_dataset, DailyLoadVector, Label};
use crate::error::{Error, Result};
use crate::nnengine::{readings_matrix, TrainedModel};

pub const PLAN_FILE_VERSION: &str = "theftbench-plan/1";

/// Parameter grids for one attack family. Grid order is preserved; the
/// sweep enumerates the cartesian product in the order written here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "attack", rename_all = "snake_case")]
pub enum AttackGrid {
    SearchFromFree {
        step: Vec<u32>,
        size: Vec<f64>,
        lambda: Vec<f64>,
        sigma: Vec<f64>,
    },
    Va1 { alpha: Vec<f64> },
    Va2 { u: Vec<f64> },
}

/// A sweep description, loadable from a `theftbench-plan/1` JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub version: String,
    /// The scoring model; also the attacker's local model when
    /// `attacker_model` is absent (white-box).
    pub defender_model: PathBuf,
    /// Substitute local model for the black-box setting.
    pub attacker_model: Option<PathBuf>,
    /// Labeled dataset supplying held-out normal vectors (VA1 sources and
    /// the report's normal-L1 context).
    pub normals_data: Option<PathBuf>,
    pub attack: AttackGrid,
    pub n_vectors: usize,
    pub base_seed: u64,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.version != PLAN_FILE_VERSION {
            return Err(Error::Format(format!(
                "unsupported plan version `{}`",
                self.version
            )));
        }
        if self.n_vectors == 0 {
            return Err(Error::Validation("n_vectors must be at least 1".into()));
        }
        let empty = match &self.attack {
            AttackGrid::SearchFromFree { step, size, lambda, sigma } => {
                step.is_empty() || size.is_empty() || lambda.is_empty() || sigma.is_empty()
            }
            AttackGrid::Va1 { alpha } => alpha.is_empty(),
            AttackGrid::Va2 { u } => u.is_empty(),
        };
        if empty {
            return Err(Error::Validation("attack parameter grids must be non-empty".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("plan serialization failed: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: ExperimentPlan = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: bad plan file: {e}", path.display())))?;
        plan.validate()?;
        Ok(plan)
    }
}

/// One point of the expanded grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "attack", rename_all = "snake_case")]
pub enum CellAttack {
    SearchFromFree { step: u32, size: f64, lambda: f64, sigma: f64 },
    Va1 { alpha: f64 },
    Va2 { u: f64 },
}

impl CellAttack {
    pub fn attack_name(&self) -> &'static str {
        match self {
            CellAttack::SearchFromFree { .. } => "sff",
            CellAttack::Va1 { .. } => "va1",
            CellAttack::Va2 { .. } => "va2",
        }
    }

    /// Canonical `name=value;...` parameter string, used in the report CSV
    /// and in the cell content hash.
    pub fn params_string(&self) -> String {
        match self {
            CellAttack::SearchFromFree { step, size, lambda, sigma } => {
                format!("step={step};size={size};lambda={lambda};sigma={sigma}")
            }
            CellAttack::Va1 { alpha } => format!("alpha={alpha}"),
            CellAttack::Va2 { u } => format!("u={u}"),
        }
    }
}

/// Expand the grids into cells in stable (written) order.
pub fn expand_grid(attack: &AttackGrid) -> Vec<CellAttack> {
    match attack {
        AttackGrid::SearchFromFree { step, size, lambda, sigma } => {
            let mut cells = Vec::new();
            for &st in step {
                for &sz in size {
                    for &la in lambda {
                        for &sg in sigma {
                            cells.push(CellAttack::SearchFromFree {
                                step: st,
                                size: sz,
                                lambda: la,
                                sigma: sg,
                            });
                        }
                    }
                }
            }
            cells
        }
        AttackGrid::Va1 { alpha } => alpha.iter().map(|&a| CellAttack::Va1 { alpha: a }).collect(),
        AttackGrid::Va2 { u } => u.iter().map(|&u| CellAttack::Va2 { u }).collect(),
    }
}

/// Aggregated outcome of one experiment cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell_id: String,
    pub attack: String,
    pub params: String,
    /// Fraction of the n vectors the defender classifies as Theft.
    pub detection_accuracy: f64,
    /// Mean L1-norm of the n vectors (kWh).
    pub avg_l1: f64,
    /// Fraction the local model classified Normal; absent for the vanilla
    /// attacks, which have no local model.
    pub success_local_rate: Option<f64>,
    pub n: usize,
    /// Wall-clock seconds; kept in memory only so report files stay
    /// byte-identical across runs.
    #[serde(skip)]
    pub runtime_secs: f64,
}

/// Report-level context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportContext {
    /// Mean L1 of the label-0 samples of `normals_data`, if supplied.
    pub normal_avg_l1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub cells: Vec<CellRecord>,
    pub context: ReportContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const REPORT_CSV_HEADER: &str =
    "cell_id,attack,params,detection_accuracy,avg_l1,success_local_rate,n";

/// Detection accuracy and average L1 for a scored batch.
pub fn compute_metrics(predictions: &[Label], vectors: &[DailyLoadVector]) -> (f64, f64) {
    assert_eq!(predictions.len(), vectors.len(), "one prediction per vector");
    let n = predictions.len();
    let theft = predictions.iter().filter(|p| **p == Label::Theft).count();
    let avg_l1 = vectors.iter().map(DailyLoadVector::l1).sum::<f64>() / n as f64;
    (theft as f64 / n as f64, avg_l1)
}

/// Score prepared vectors against the defender and aggregate.
fn score_batch(
    defender: &TrainedModel,
    vectors: &[DailyLoadVector],
    successes: Option<&[bool]>,
) -> Result<(f64, f64, Option<f64>)> {
    let x = readings_matrix(vectors);
    let mut preds = Vec::with_capacity(vectors.len());
    for chunk_start in (0..vectors.len()).step_by(256) {
        let end = (chunk_start + 256).min(vectors.len());
        preds.extend(defender.classify_batch(&x.slice(s![chunk_start..end, ..]))?);
    }
    let (acc, avg_l1) = compute_metrics(&preds, vectors);
    let rate = successes.map(|s| s.iter().filter(|b| **b).count() as f64 / s.len() as f64);
    Ok((acc, avg_l1, rate))
}

/// Run one attack batch: `generator(i, base_seed + i)` produces the i-th
/// vector (and its local-success flag, if the attack has a local model);
/// all n vectors are then scored against the defender.
pub fn run_attack_batch<G>(
    defender: &TrainedModel,
    mut generator: G,
    n: usize,
    base_seed: u64,
) -> Result<(f64, f64, Option<f64>)>
where
    G: FnMut(usize, u64) -> Result<(DailyLoadVector, Option<bool>)>,
{
    if n == 0 {
        return Err(Error::Validation("attack batch needs at least one vector".into()));
    }
    let mut vectors = Vec::with_capacity(n);
    let mut successes: Option<Vec<bool>> = None;
    for i in 0..n {
        let (v, s) = generator(i, base_seed.wrapping_add(i as u64))?;
        vectors.push(v);
        if let Some(s) = s {
            successes.get_or_insert_with(|| Vec::with_capacity(n)).push(s);
        }
    }
    score_batch(defender, &vectors, successes.as_deref())
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn cell_id(
    defender_hash: &str,
    attacker_hash: Option<&str>,
    cell: &CellAttack,
    n: usize,
    base_seed: u64,
) -> String {
    let mut key = String::new();
    let _ = write!(
        key,
        "defender={defender_hash}\nattacker={}\nattack={}\nparams={}\nn={n}\nbase_seed={base_seed}\n",
        attacker_hash.unwrap_or("-"),
        cell.attack_name(),
        cell.params_string(),
    );
    let digest = Sha256::digest(key.as_bytes());
    format!("{:x}", digest)[..16].to_string()
}

/// Execute a sweep plan. `cache_dir`, when given, stores one JSON file per
/// finished cell keyed by its content hash; re-runs reuse finished cells.
pub fn run_sweep(plan: &ExperimentPlan, cache_dir: Option<&Path>) -> Result<EvaluationReport> {
    plan.validate()?;
    let defender = TrainedModel::load(&plan.defender_model)?;
    let local = match &plan.attacker_model {
        Some(p) => TrainedModel::load(p)?,
        None => defender.clone(),
    };
    let (normals, normal_avg_l1) = match &plan.normals_data {
        Some(p) => {
            let ds = load_dataset(p)?;
            let normals: Vec<DailyLoadVector> = ds
                .samples
                .iter()
                .filter(|(_, l)| *l == Label::Normal)
                .map(|(v, _)| v.clone())
                .collect();
            let avg = ds.normal_avg_l1();
            (normals, avg)
        }
        None => (Vec::new(), None),
    };

    let defender_hash = file_sha256(&plan.defender_model)?;
    let attacker_hash = match &plan.attacker_model {
        Some(p) => Some(file_sha256(p)?),
        None => None,
    };
    if let Some(dir) = cache_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut cells = Vec::new();
    for cell in expand_grid(&plan.attack) {
        let id = cell_id(
            &defender_hash,
            attacker_hash.as_deref(),
            &cell,
            plan.n_vectors,
            plan.base_seed,
        );
        let cache_path = cache_dir.map(|d| d.join(format!("{id}.json")));
        if let Some(path) = &cache_path {
            if path.exists() {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let cached: CellRecord = serde_json::from_str(&text).map_err(|e| {
                    Error::Format(format!("{}: bad cached cell: {e}", path.display()))
                })?;
                if cached.cell_id == id {
                    cells.push(cached);
                    continue;
                }
            }
        }

        let start = Instant::now();
        let (detection_accuracy, avg_l1, success_local_rate) =
            run_cell(&defender, &local, &cell, plan.n_vectors, plan.base_seed, &normals)?;
        let record = CellRecord {
            cell_id: id,
            attack: cell.attack_name().to_string(),
            params: cell.params_string(),
            detection_accuracy,
            avg_l1,
            success_local_rate,
            n: plan.n_vectors,
            runtime_secs: start.elapsed().as_secs_f64(),
        };
        if let Some(path) = &cache_path {
            let json = serde_json::to_string_pretty(&record)
                .map_err(|e| Error::Format(format!("cell serialization failed: {e}")))?;
            fs::write(path, json).map_err(|e| Error::io(path, e))?;
        }
        cells.push(record);
    }

    Ok(EvaluationReport {
        cells,
        context: ReportContext { normal_avg_l1 },
    })
}

fn run_cell(
    defender: &TrainedModel,
    local: &TrainedModel,
    cell: &CellAttack,
    n: usize,
    base_seed: u64,
    normals: &[DailyLoadVector],
) -> Result<(f64, f64, Option<f64>)> {
    match *cell {
        CellAttack::SearchFromFree { step, size, lambda, sigma } => {
            let cfg = AttackConfig { step, size, lambda, sigma, seed: base_seed };
            let results = search_from_free_batch(local, &cfg, n, base_seed)?;
            let vectors: Vec<DailyLoadVector> =
                results.iter().map(|r| r.adversarial.clone()).collect();
            let successes: Vec<bool> = results.iter().map(|r| r.success_local).collect();
            score_batch(defender, &vectors, Some(&successes))
        }
        CellAttack::Va1 { alpha } => {
            if normals.is_empty() {
                return Err(Error::Validation(
                    "va1 needs normals_data with at least one label-0 vector".into(),
                ));
            }
            run_attack_batch(
                defender,
                |i, _seed| Ok((vanilla_scale(&normals[i % normals.len()], alpha)?, None)),
                n,
                base_seed,
            )
        }
        CellAttack::Va2 { u } => run_attack_batch(
            defender,
            |_i, seed| Ok((vanilla_uniform(u, seed)?, None)),
            n,
            base_seed,
        ),
    }
}

/// Serialize a report. CSV has the fixed column set; JSON mirrors the full
/// structure. Both are byte-stable for a given report.
pub fn emit_report(report: &EvaluationReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = render_report(report, format)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn render_report(report: &EvaluationReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(report)
            .map(|mut s| {
                s.push('\n');
                s
            })
            .map_err(|e| Error::Format(format!("report serialization failed: {e}"))),
        ReportFormat::Csv => {
            let mut out = String::from(REPORT_CSV_HEADER);
            out.push('\n');
            for c in &report.cells {
                let rate = c
                    .success_local_rate
                    .map(|r| r.to_string())
                    .unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    c.cell_id, c.attack, c.params, c.detection_accuracy, c.avg_l1, rate, c.n
                );
            }
            Ok(out)
        }
    }
}

pub fn load_report(path: &Path) -> Result<EvaluationReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: bad report file: {e}", path.display())))
}
