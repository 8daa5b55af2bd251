//! Experiment drivers. Each writes its artifacts under an output directory and
//! stamps them with the config hash; the wall-clock time appears only in the
//! `created_at` field of `report.json`.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use cep_core::bench2d::{builtin_energy, make_dataset, nearest_center, Dataset2D, MetricReport};
use cep_core::energy::EnergySpec;
use cep_core::guidance::{one_hot, train_guidance, FixedCondition, GuidanceData, GuidanceMethod, GuidanceModel};
use cep_core::io::{sidecar_path, write_json, write_point_set, PointSet};
use cep_core::netcore::save_checkpoint;
use cep_core::oracle::{resample_ground_truth, EmpiricalPrior};
use cep_core::prior::{train_prior, LossCurve, PriorModel};
use cep_core::qgpo::{run_pipeline, QgpoReport};
use cep_core::sampler::{sample, Guidance, GuidanceField, SamplerConfig};
use ndarray::Array2;
use serde::Serialize;
use serde_json::json;

use crate::config::{RunConfig, Seeds};
use crate::error::{CliError, CliResult};

/// Output directory plus the provenance every artifact carries.
pub struct RunContext<'a> {
    pub config: &'a RunConfig,
    pub out: PathBuf,
    pub hash: String,
}

impl<'a> RunContext<'a> {
    pub fn new(config: &'a RunConfig, out: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(out).map_err(|e| cep_core::Error::Io {
            path: out.to_path_buf(),
            source: e,
        })?;
        Ok(RunContext {
            config,
            out: out.to_path_buf(),
            hash: config.hash(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn metadata(&self, artifact: &str) -> serde_json::Value {
        json!({ "artifact": artifact, "config_hash": self.hash, "kind": self.config.kind.to_string() })
    }

    /// Writes `<file>.meta.json` beside a data file.
    fn stamp(&self, file: &Path, artifact: &str) -> CliResult<()> {
        Ok(write_json(&sidecar_path(file), &self.metadata(artifact))?)
    }

    fn write_points(&self, name: &str, set: &PointSet) -> CliResult<PathBuf> {
        let path = self.path(name);
        write_point_set(&path, set)?;
        self.stamp(&path, name)?;
        Ok(path)
    }

    fn write_report<T: Serialize>(&self, body: &T) -> CliResult<()> {
        let report = Report {
            config_hash: &self.hash,
            kind: self.config.kind.to_string(),
            seed: self.config.seed,
            seeds: self.config.seeds(),
            created_at: unix_seconds(),
            body,
        };
        Ok(write_json(&self.path("report.json"), &report)?)
    }
}

#[derive(Serialize)]
struct Report<'a, T> {
    config_hash: &'a str,
    kind: String,
    seed: u64,
    seeds: Seeds,
    /// Seconds since the Unix epoch; the only field that differs between reruns.
    created_at: u64,
    #[serde(flatten)]
    body: &'a T,
}

fn unix_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn energy_spec(config: &RunConfig, beta: f64) -> CliResult<EnergySpec> {
    Ok(EnergySpec::new(builtin_energy(config.energy.name), beta)?)
}

fn dataset(ctx: &RunContext<'_>) -> CliResult<Dataset2D> {
    let c = ctx.config;
    let data = make_dataset(c.data.dataset, c.data.n, c.seeds().data);
    ctx.write_points("data.csv", &data)?;
    Ok(data)
}

/// Loads the configured prior checkpoint or trains one on `data`.
fn prior_for(ctx: &RunContext<'_>, data: &Dataset2D) -> CliResult<(PriorModel, Option<LossCurve>)> {
    let c = ctx.config;
    if let Some(path) = &c.prior.checkpoint {
        log::info!("loading prior from {}", path.display());
        return Ok((PriorModel::load(path)?, None));
    }
    log::info!("training prior ({} steps)", c.prior.steps);
    let (prior, curve) = train_prior(
        data.points.view(),
        None,
        c.prior.network(data.dim()),
        c.schedule,
        &c.prior.train_config(),
        c.seeds().prior,
    )?;
    prior.save(&ctx.path("prior.json"), c.seeds().prior, ctx.metadata("prior"))?;
    Ok((prior, Some(curve)))
}

#[derive(Debug, Clone, Serialize)]
pub struct PriorSummary {
    pub loss: Option<LossCurve>,
}

/// `train-prior`: dataset dump, checkpoint and loss curve.
pub fn run_prior(config: &RunConfig, out: &Path) -> CliResult<PriorSummary> {
    let ctx = RunContext::new(config, out)?;
    let data = dataset(&ctx)?;
    let (_, loss) = prior_for(&ctx, &data)?;
    let summary = PriorSummary { loss };
    ctx.write_report(&summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct GuidanceSummary {
    pub method: GuidanceMethod,
    pub beta: f64,
    pub loss: Option<LossCurve>,
    pub clamped: usize,
}

/// `train-guidance`: fits the configured guidance method and saves its descriptor.
pub fn run_guidance(config: &RunConfig, out: &Path) -> CliResult<GuidanceSummary> {
    let ctx = RunContext::new(config, out)?;
    let data = dataset(&ctx)?;
    let g = &config.guidance;
    let seed = config.seeds().guidance;
    let path = ctx.path("guidance.json");
    let summary = if !g.method.is_trained() {
        let model = GuidanceModel::training_free(g.method, config.energy.beta, config.schedule)?;
        model.save(&path, seed, ctx.metadata("guidance"))?;
        GuidanceSummary {
            method: g.method,
            beta: config.energy.beta,
            loss: None,
            clamped: 0,
        }
    } else {
        let trained = if g.method.is_conditional() {
            let n_classes = config.data.dataset.n_classes().ok_or_else(|| {
                CliError::Config(format!("{} has no class labels", config.data.dataset))
            })?;
            let labels = data
                .labels
                .as_deref()
                .ok_or_else(|| CliError::Config(format!("{} has no class labels", config.data.dataset)))?;
            train_guidance(
                g.method,
                GuidanceData::labeled(data.points.view(), labels, n_classes),
                None,
                g.network(data.dim(), n_classes),
                config.schedule,
                &g.train_config(),
                seed,
            )?
        } else {
            let es = energy_spec(config, config.energy.beta)?;
            train_guidance(
                g.method,
                GuidanceData::unlabeled(data.points.view()),
                Some(&es),
                g.network(data.dim(), 0),
                config.schedule,
                &g.train_config(),
                seed,
            )?
        };
        trained.model.save(&path, seed, ctx.metadata("guidance"))?;
        GuidanceSummary {
            method: g.method,
            beta: trained.model.beta,
            loss: Some(trained.curve),
            clamped: trained.clamped,
        }
    };
    ctx.write_report(&summary)?;
    Ok(summary)
}

fn sampler_config(config: &RunConfig, seed: u64) -> SamplerConfig {
    let s = &config.sampler;
    SamplerConfig::new(s.method, s.steps, s.guidance_scale, seed)
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleSummary {
    pub method: GuidanceMethod,
    pub n_samples: usize,
    pub mean_energy: Option<f64>,
    /// Share of samples nearest the requested class centre.
    pub class_purity: Option<f64>,
}

/// `sample`: draws from a saved prior, optionally guided by a saved model.
pub fn run_sample(config: &RunConfig, out: &Path) -> CliResult<SampleSummary> {
    let ctx = RunContext::new(config, out)?;
    let prior_path = config
        .prior
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("sample runs need prior.checkpoint".into()))?;
    let prior = PriorModel::load(prior_path)?;
    let model = match &config.guidance.checkpoint {
        Some(p) => GuidanceModel::load(p)?,
        None if !config.guidance.method.is_trained() => {
            GuidanceModel::training_free(config.guidance.method, config.energy.beta, config.schedule)?
        }
        None => {
            return Err(CliError::Config(format!(
                "{} guidance needs guidance.checkpoint",
                config.guidance.method
            )))
        }
    };
    let method = model.method;
    let es = energy_spec(config, model.beta)?;
    let class_cond;
    let guidance = match method {
        GuidanceMethod::None => Guidance::None,
        GuidanceMethod::Dps => Guidance::Dps(&es),
        m if m.is_conditional() => {
            let class = config
                .sampler
                .class
                .ok_or_else(|| CliError::Config(format!("{m} guidance needs sampler.class")))?;
            let width = model.net.as_ref().map(|n| n.spec().cond_dim).unwrap_or(0);
            if class >= width {
                return Err(CliError::Config(format!("class {class} outside the model's {width} classes")));
            }
            class_cond = FixedCondition {
                field: &model,
                cond: one_hot(&[class], width).row(0).to_vec(),
            };
            Guidance::Field(&class_cond)
        }
        _ => Guidance::Field(&model),
    };
    let batch = sample(
        &prior,
        &guidance,
        &sampler_config(config, config.seeds().sampler),
        config.sampler.n_samples,
        None,
    )?;
    let energy_guided = !method.is_conditional() && method != GuidanceMethod::None;
    let mut set = PointSet::new(batch.points);
    let mean_energy = if energy_guided && !set.is_empty() {
        let e: Vec<f64> = set.points.rows().into_iter().map(|r| es.energy.value(&r.to_vec())).collect();
        let m = e.iter().sum::<f64>() / e.len() as f64;
        set.energies = Some(e);
        Some(m)
    } else {
        None
    };
    let class_purity = match (config.sampler.class, method.is_conditional()) {
        (Some(c), true) if !set.is_empty() => {
            let hits = set.points.rows().into_iter().filter(|r| nearest_center(&r.to_vec()) == c).count();
            Some(hits as f64 / set.len() as f64)
        }
        _ => None,
    };
    ctx.write_points("samples.csv", &set)?;
    let summary = SampleSummary {
        method,
        n_samples: set.len(),
        mean_energy,
        class_purity,
    };
    ctx.write_report(&summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub beta: f64,
    pub method: GuidanceMethod,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareSummary {
    pub rows: Vec<CompareRow>,
    pub prior_loss: Option<LossCurve>,
}

/// `compare2d`: every configured method at every inverse temperature, scored
/// against importance-resampled ground truth. All methods share the prior and
/// the sampler's initial noise.
pub fn run_compare2d(config: &RunConfig, out: &Path) -> CliResult<CompareSummary> {
    let ctx = RunContext::new(config, out)?;
    let data = dataset(&ctx)?;
    let (prior, prior_loss) = prior_for(&ctx, &data)?;
    let seeds = config.seeds();
    let n = config.sampler.n_samples;
    let mut rows = Vec::new();
    for &beta in &config.compare.betas {
        let es = energy_spec(config, beta)?;
        let truth = resample_ground_truth(data.points.view(), &es, n, seeds.ground_truth)?;
        ctx.write_points(&format!("truth_beta{beta}.csv"), &PointSet::new(truth.points.clone()))?;
        for &method in &config.compare.methods {
            log::info!("compare2d: beta {beta}, {method}");
            let trained = if method.is_trained() {
                Some(train_guidance(
                    method,
                    GuidanceData::unlabeled(data.points.view()),
                    Some(&es),
                    config.guidance.network(data.dim(), 0),
                    config.schedule,
                    &config.guidance.train_config(),
                    seeds.guidance,
                )?)
            } else {
                None
            };
            let guidance = match (&trained, method) {
                (Some(t), _) => Guidance::Field(&t.model as &dyn GuidanceField),
                (None, GuidanceMethod::Dps) => Guidance::Dps(&es),
                (None, _) => Guidance::None,
            };
            let batch = sample(&prior, &guidance, &sampler_config(config, seeds.sampler), n, None)?;
            let metrics = MetricReport::compute(
                batch.points.view(),
                truth.points.view(),
                &es,
                config.compare.bins,
            )?;
            log::info!("  mmd2 {:.5} hist_tv {:.4} mean energy {:.4}", metrics.mmd2, metrics.hist_tv, metrics.mean_energy);
            ctx.write_points(&format!("samples_beta{beta}_{method}.csv"), &PointSet::new(batch.points))?;
            rows.push(CompareRow { beta, method, metrics });
        }
    }
    let table = ctx.path("metrics.csv");
    let mut w = csv::Writer::from_path(&table).map_err(|e| cep_core::Error::Format(e.to_string()))?;
    let csv_err = |e: csv::Error| cep_core::Error::Format(e.to_string());
    w.write_record(["beta", "method", "mmd2", "hist_tv", "mean_energy", "n_samples"])
        .map_err(csv_err)?;
    for r in &rows {
        let m = &r.metrics;
        w.write_record([
            format!("{:?}", r.beta),
            r.method.to_string(),
            format!("{:?}", m.mmd2),
            format!("{:?}", m.hist_tv),
            format!("{:?}", m.mean_energy),
            m.n_samples.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| cep_core::Error::Io {
        path: table.clone(),
        source: e,
    })?;
    ctx.stamp(&table, "metrics.csv")?;
    let summary = CompareSummary { rows, prior_loss };
    ctx.write_report(&summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct ScaleReturn {
    pub guidance_scale: f64,
    pub mean_return: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct QgpoSummary {
    pub qgpo_seeds: cep_core::qgpo::QgpoSeeds,
    pub returns: Vec<ScaleReturn>,
    pub details: QgpoReport,
}

/// `qgpo`: the full offline pipeline followed by a guidance-scale sweep.
pub fn run_qgpo(config: &RunConfig, out: &Path) -> CliResult<QgpoSummary> {
    let ctx = RunContext::new(config, out)?;
    let run = run_pipeline(&config.qgpo)?;
    let seeds = &config.qgpo.seeds;
    let transitions = ctx.path("transitions.csv");
    run.dataset.write_csv(&transitions)?;
    ctx.stamp(&transitions, "transitions.csv")?;
    let support = ctx.path("support.json");
    run.support.save_json(&support)?;
    ctx.stamp(&support, "support.json")?;
    run.behavior
        .save(&ctx.path("behavior.json"), seeds.behavior, ctx.metadata("behavior"))?;
    for (i, net) in run.q.online.iter().enumerate() {
        let mut meta = ctx.metadata("critic");
        meta["beta_q"] = json!(run.q.beta_q);
        meta["reward_scale"] = json!(run.q.reward_scale);
        save_checkpoint(net, &ctx.path(&format!("critic{i}.json")), seeds.q, meta)?;
    }
    run.guidance
        .save(&ctx.path("guidance.json"), seeds.guidance, ctx.metadata("guidance"))?;
    let summary = QgpoSummary {
        qgpo_seeds: seeds.clone(),
        returns: run
            .report
            .evaluations
            .iter()
            .map(|e| ScaleReturn {
                guidance_scale: e.guidance_scale,
                mean_return: e.mean_return,
                std_error: e.std_error,
            })
            .collect(),
        details: run.report,
    };
    ctx.write_report(&summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct GridSummary {
    pub rows: usize,
    pub atoms: usize,
    pub with_model: bool,
}

/// `oracle-grid`: exact intermediate energy and its gradient under the
/// empirical prior on a regular grid, plus a trained model's output when a
/// guidance checkpoint is configured.
pub fn run_oracle_grid(config: &RunConfig, out: &Path) -> CliResult<GridSummary> {
    let ctx = RunContext::new(config, out)?;
    let g = &config.grid;
    let n_atoms = g.atoms.unwrap_or(config.data.n);
    let atoms = make_dataset(config.data.dataset, n_atoms, config.seeds().data);
    let prior = EmpiricalPrior::new(atoms.points, config.schedule)?;
    let es = energy_spec(config, config.energy.beta)?;
    let oracle = prior.with_energy(&es)?;
    let model = config.guidance.checkpoint.as_ref().map(|p| GuidanceModel::load(p)).transpose()?;
    let model_cond = match &model {
        Some(m) if m.method.is_conditional() => {
            let class = config
                .sampler
                .class
                .ok_or_else(|| CliError::Config(format!("{} guidance needs sampler.class", m.method)))?;
            let width = m.net.as_ref().map(|n| n.spec().cond_dim).unwrap_or(0);
            Some(one_hot(&[class], width))
        }
        _ => None,
    };

    let path = ctx.path("grid.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| cep_core::Error::Format(e.to_string()))?;
    let mut header = vec!["t", "x1", "x2", "energy", "grad1", "grad2"];
    if model.is_some() {
        header.push("f");
    }
    w.write_record(&header).map_err(|e| cep_core::Error::Format(e.to_string()))?;
    let m = g.points_per_axis;
    let axis: Vec<f64> = match m {
        0 => Vec::new(),
        1 => vec![0.5 * (g.lo + g.hi)],
        _ => (0..m).map(|i| g.lo + (g.hi - g.lo) * i as f64 / (m - 1) as f64).collect(),
    };
    let mut rows = 0;
    for &t in &g.times {
        let pts: Vec<[f64; 2]> = axis.iter().flat_map(|&x1| axis.iter().map(move |&x2| [x1, x2])).collect();
        if pts.is_empty() {
            continue;
        }
        let f = match &model {
            Some(model) => {
                let x = Array2::from_shape_fn((pts.len(), 2), |(i, j)| pts[i][j]);
                let cond = model_cond
                    .as_ref()
                    .map(|c| Array2::from_shape_fn((pts.len(), c.ncols()), |(_, j)| c[[0, j]]));
                Some(model.values(x.view(), t, cond.as_ref().map(|c| c.view()))?)
            }
            None => None,
        };
        for (i, p) in pts.iter().enumerate() {
            let e = oracle.energy(p, t)?;
            let grad = oracle.guidance(p, t)?;
            let mut rec = vec![t, p[0], p[1], e, grad[0], grad[1]];
            if let Some(f) = &f {
                rec.push(f[i]);
            }
            w.write_record(rec.iter().map(|v| format!("{v:?}")))
                .map_err(|e| cep_core::Error::Format(e.to_string()))?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| cep_core::Error::Io {
        path: path.clone(),
        source: e,
    })?;
    ctx.stamp(&path, "grid.csv")?;
    let summary = GridSummary {
        rows,
        atoms: n_atoms,
        with_model: model.is_some(),
    };
    ctx.write_report(&summary)?;
    Ok(summary)
}
