//! Subcommand implementations.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};

use direct::artifact::{BnnArtifact, GlmArtifact, LogisticArtifact, ModelArtifact};
use direct::bnn::{bnn_precompute, forward_pass, scalar_forward, BnnArch};
use direct::features::{
    discretized_gaussian_prior, init_hyperparams, kfold, load_csv, load_matrix, make_support,
    standardize, Dataset, RffMap, Standardizer,
};
use direct::glm::{GlmModel, GlmSuffStats, NoiseModel};
use direct::logistic::LogisticModel;
use direct::train::{
    benchmark_direct_vs_reinforce, fit_deterministic, fit_stochastic, BenchmarkSpec, BnnObjective,
    FitResult, GlmMeanFieldObjective, GlmMixtureBoundObjective, GlmMixtureSgdObjective,
    LogisticObjective, LrSchedule, TraceRecord, TrainConfig,
};
use direct::variational::{
    expected_sparsity_var, sample_posterior, EntropyAnchor, MixtureDist, SupportGrid,
    VariationalDist,
};
use direct::{seeded_rng, Result as DirectResult};

use crate::config::RunConfig;
use crate::CliError;

fn train_config_of(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        max_iters: cfg.optimizer.max_iters,
        grad_tol: cfg.optimizer.tol,
        learning_rate: LrSchedule::Constant(cfg.optimizer.learning_rate),
        batch_size: cfg.optimizer.batch_size,
        mc_samples: cfg.optimizer.mc_samples,
        seed: cfg.seed,
        ..TrainConfig::default()
    }
}

fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<(), CliError> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))?;
    direct::train::write_trace_csv(trace, &mut file)?;
    Ok(())
}

/// Trained model plus everything the artifact records.
struct Trained {
    artifact: ModelArtifact,
    trace: Vec<TraceRecord>,
    final_objective: f64,
    iterations: usize,
    /// Expected zero fraction of a posterior draw.
    sparsity: f64,
}

fn fit_glm_mean_field(
    objective: &GlmMeanFieldObjective,
    cfg: &RunConfig,
) -> Result<FitResult, CliError> {
    let x0 = objective.initial_params()?;
    let tc = train_config_of(cfg);
    let fit = if cfg.optimizer.kind == "quasi-newton" {
        fit_deterministic(|p| objective.value_grad(p), &x0, &tc)?
    } else {
        fit_stochastic(|p, _| objective.value_grad(p), &x0, &tc)?
    };
    Ok(fit)
}

fn train_glm(cfg: &RunConfig, dataset: &Dataset) -> Result<Trained, CliError> {
    let (standardizer, std_ds) = standardize(dataset)?;
    let hp = init_hyperparams(&std_ds)?;
    let map = RffMap::generate(cfg.features.b, &hp.lengthscales, hp.signal_sd, cfg.seed)?;
    let phi = map.features(std_ds.x.view())?;
    let grid = SupportGrid::uniform(cfg.features.b, make_support(hp.signal_sd, cfg.grid.m_bar)?)?;
    let prior = discretized_gaussian_prior(&grid, hp.signal_sd)?;
    let noise = NoiseModel::log_uniform(hp.sigma2_hat, cfg.m_sigma())?;
    let stats = GlmSuffStats::precompute(phi.view(), std_ds.y.view(), &grid)?;
    let template = GlmModel {
        q: VariationalDist::MeanField(prior.clone()),
        prior: Arc::new(VariationalDist::MeanField(prior)),
        noise,
        grid: Arc::new(grid),
        stats: Arc::new(stats),
    };

    // Mean-field fit first; mixtures are seeded from its solution.
    let objective = GlmMeanFieldObjective {
        template: template.clone(),
    };
    let mf_fit = fit_glm_mean_field(&objective, cfg)?;
    let mf_model = objective.model_at(&mf_fit.params)?;

    let (model, trace, final_objective, iterations) = if cfg.variational.kind == "mean-field" {
        (
            mf_model,
            mf_fit.trace,
            mf_fit.objective,
            mf_fit.iterations,
        )
    } else {
        let mf_q = match &mf_model.q {
            VariationalDist::MeanField(q) => q.clone(),
            _ => unreachable!("mean-field fit returns a mean-field posterior"),
        };
        let mut rng = seeded_rng(cfg.seed ^ 0x6d69_7874_7572_6573);
        let q0 = MixtureDist::perturbed_from(
            &mf_q,
            cfg.variational.r,
            cfg.variational.init_perturbation,
            &mut rng,
        )?;
        let mixture_template = GlmModel {
            q: VariationalDist::Mixture(q0.clone()),
            noise: mf_model.noise.clone(),
            ..template.clone()
        };
        let tc = train_config_of(cfg);
        if cfg.variational.entropy == "bound" {
            let objective = GlmMixtureBoundObjective {
                template: mixture_template,
                r: cfg.variational.r,
            };
            let anchor = EntropyAnchor::at(&mf_q);
            let x0 = objective.initial_params(&q0, &anchor);
            let fit = if cfg.optimizer.kind == "quasi-newton" {
                fit_deterministic(|p| objective.value_grad(p), &x0, &tc)?
            } else {
                fit_stochastic(|p, _| objective.value_grad(p), &x0, &tc)?
            };
            let (model, _anchor) = objective.split(&fit.params)?;
            (model, fit.trace, fit.objective, fit.iterations)
        } else {
            let objective = GlmMixtureSgdObjective {
                template: mixture_template,
                r: cfg.variational.r,
                mc_samples: cfg.optimizer.mc_samples,
            };
            let x0 = objective.initial_params(&q0);
            let fit = fit_stochastic(|p, rng| objective.sample_value_grad(p, rng), &x0, &tc)?;
            let model = objective.model_at(&fit.params)?;
            (model, fit.trace, fit.objective, fit.iterations)
        }
    };

    let sparsity = expected_sparsity_var(&model.q, &model.grid);
    let artifact = ModelArtifact::Glm(GlmArtifact {
        grid: (*model.grid).clone(),
        q: model.q.clone(),
        prior: (*model.prior).clone(),
        noise: model.noise.clone(),
        feature_map: Some(map),
        standardizer: Some(standardizer),
    });
    Ok(Trained {
        artifact,
        trace,
        final_objective,
        iterations,
        sparsity,
    })
}

fn train_logistic(cfg: &RunConfig, dataset: &Dataset) -> Result<Trained, CliError> {
    if dataset.y.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(CliError::Data("logistic targets must be 0 or 1".into()));
    }
    let (standardizer, std_ds) = standardize(dataset)?;
    let hp = init_hyperparams(&std_ds)?;
    // Binary targets carry no weight scale; the classifier grid is fixed at
    // unit signal standard deviation.
    let signal_sd = 1.0;
    let map = RffMap::generate(cfg.features.b, &hp.lengthscales, signal_sd, cfg.seed)?;
    let phi = map.features(std_ds.x.view())?;
    let grid = SupportGrid::uniform(cfg.features.b, make_support(signal_sd, cfg.grid.m_bar)?)?;
    let prior = discretized_gaussian_prior(&grid, signal_sd)?;
    let template = LogisticModel {
        grid: Arc::new(grid),
        q: prior.clone(),
        prior,
        features: phi,
        labels: std_ds.y.clone(),
    };
    let objective = LogisticObjective {
        template: template.clone(),
    };
    let x0 = objective.initial_params();
    let tc = train_config_of(cfg);
    let fit = if cfg.optimizer.kind == "quasi-newton" {
        fit_deterministic(|p| objective.value_grad(p), &x0, &tc)?
    } else {
        let batch = cfg.optimizer.batch_size;
        fit_stochastic(
            |p, rng| objective.sample_value_grad(p, batch, rng),
            &x0,
            &tc,
        )?
    };
    let model = objective.model_at(&fit.params)?;
    let sparsity = expected_sparsity_var(
        &VariationalDist::MeanField(model.q.clone()),
        &model.grid,
    );
    let artifact = ModelArtifact::Logistic(LogisticArtifact {
        grid: (*model.grid).clone(),
        q: model.q.clone(),
        prior: model.prior.clone(),
        feature_map: Some(map),
        standardizer: Some(standardizer),
    });
    Ok(Trained {
        artifact,
        trace: fit.trace,
        final_objective: fit.objective,
        iterations: fit.iterations,
        sparsity,
    })
}

fn train_bnn(cfg: &RunConfig, dataset: &Dataset) -> Result<Trained, CliError> {
    let widths = cfg
        .bnn
        .as_ref()
        .expect("validated: bnn section present")
        .layer_widths
        .clone();
    let (standardizer, std_ds) = standardize(dataset)?;
    let hp = init_hyperparams(&std_ds)?;
    let arch = BnnArch::new(std_ds.d(), widths)?;
    let b = arch.total_variables();
    // Network weights use a unit-scale grid; the output scale is learned
    // through the weights themselves.
    let grid = SupportGrid::uniform(b, make_support(1.0, cfg.grid.m_bar)?)?;
    let prior = discretized_gaussian_prior(&grid, 1.0)?;
    let state = forward_pass(&arch, std_ds.x.view(), &grid)?;
    let stats = bnn_precompute(&state, std_ds.y.view())?;
    let noise = NoiseModel::log_uniform(hp.sigma2_hat, cfg.m_sigma())?;
    let objective = BnnObjective {
        state,
        stats,
        prior: VariationalDist::MeanField(prior.clone()),
        noise_template: noise,
    };
    let x0 = objective.initial_params(&prior);
    let tc = train_config_of(cfg);
    let fit = if cfg.optimizer.kind == "quasi-newton" {
        fit_deterministic(|p| objective.value_grad(p), &x0, &tc)?
    } else {
        fit_stochastic(|p, _| objective.value_grad(p), &x0, &tc)?
    };
    let (q, trained_noise) = objective.split(&fit.params)?;
    let sparsity = expected_sparsity_var(&VariationalDist::MeanField(q.clone()), &grid);
    let artifact = ModelArtifact::Bnn(BnnArtifact {
        arch,
        grid,
        q,
        prior,
        noise: trained_noise,
        standardizer: Some(standardizer),
    });
    Ok(Trained {
        artifact,
        trace: fit.trace,
        final_objective: fit.objective,
        iterations: fit.iterations,
        sparsity,
    })
}

fn train_any(cfg: &RunConfig, dataset: &Dataset) -> Result<Trained, CliError> {
    match cfg.model.kind.as_str() {
        "glm" => train_glm(cfg, dataset),
        "logistic" => train_logistic(cfg, dataset),
        "bnn" => train_bnn(cfg, dataset),
        other => Err(CliError::Config(format!("unknown model kind {other:?}"))),
    }
}

pub fn cmd_train(config_path: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config_path)?;
    let dataset = load_csv(&cfg.data.dataset, &cfg.data.target)?;
    let trained = train_any(&cfg, &dataset)?;
    trained.artifact.save(&cfg.output.artifact)?;
    if let Some(trace_path) = &cfg.output.trace {
        write_trace(trace_path, &trained.trace)?;
    }
    println!(
        "trained {} on {} rows: objective {:.6}, {} iterations, expected sparsity {:.3}",
        trained.artifact.kind(),
        dataset.n(),
        trained.final_objective,
        trained.iterations,
        trained.sparsity
    );
    println!("artifact written to {}", cfg.output.artifact.display());
    Ok(())
}

/// Apply an artifact's input pipeline (standardizer, feature map) to raw
/// feature rows.
fn pipeline_features(
    x: &Array2<f64>,
    standardizer: Option<&Standardizer>,
    map: Option<&RffMap>,
) -> DirectResult<Array2<f64>> {
    let std_x = match standardizer {
        Some(s) => s.apply(x.view())?,
        None => x.clone(),
    };
    match map {
        Some(m) => m.features(std_x.view()),
        None => Ok(std_x),
    }
}

fn open_output(path: Option<&PathBuf>) -> Result<Box<dyn Write>, CliError> {
    match path {
        Some(p) => Ok(Box::new(std::fs::File::create(p).map_err(|e| {
            CliError::Data(format!("cannot create {}: {e}", p.display()))
        })?)),
        None => Ok(Box::new(std::io::stdout())),
    }
}

pub struct PredictArgs {
    pub model: PathBuf,
    pub data: PathBuf,
    /// Moments mode is the default; sampling mode is selected by `samples`.
    pub samples: Option<usize>,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

pub fn cmd_predict(args: &PredictArgs) -> Result<(), CliError> {
    let artifact = ModelArtifact::load(&args.model)?;
    let (x, _header) = load_matrix(&args.data)?;
    let mut out = open_output(args.output.as_ref())?;
    match &artifact {
        ModelArtifact::Glm(a) => {
            let phi = pipeline_features(&x, a.standardizer.as_ref(), a.feature_map.as_ref())?;
            let model = GlmModel {
                q: a.q.clone(),
                prior: Arc::new(a.prior.clone()),
                noise: a.noise.clone(),
                stats: Arc::new(GlmSuffStats::empty(&a.grid)),
                grid: Arc::new(a.grid.clone()),
            };
            match args.samples {
                None => {
                    let means = direct::glm::predict_mean_batch(&model, phi.view())?;
                    let with_variance = matches!(model.q, VariationalDist::MeanField(_));
                    if with_variance {
                        writeln!(out, "mean,variance")?;
                        for (i, &mean) in means.iter().enumerate() {
                            let row: Vec<f64> = phi.row(i).to_vec();
                            let var = direct::glm::predict_variance(&model, &row)?;
                            writeln!(out, "{mean:.17e},{var:.17e}")?;
                        }
                    } else {
                        writeln!(out, "mean")?;
                        for &mean in means.iter() {
                            writeln!(out, "{mean:.17e}")?;
                        }
                    }
                }
                Some(count) => {
                    // One shared set of posterior draws, integer path per row.
                    let mut rng = seeded_rng(args.seed);
                    let draws = sample_posterior(&model.q, &model.grid, count, &mut rng)?;
                    let gq = direct::qinfer::GridQuantizer::from_grid(&model.grid)?;
                    write_draw_header(&mut out, count)?;
                    for i in 0..phi.nrows() {
                        let row: Vec<f64> = phi.row(i).to_vec();
                        let (qf, fq) = direct::qinfer::quantize_features(&row, 8)?;
                        let values: Vec<String> = draws
                            .iter()
                            .map(|d| {
                                direct::qinfer::integer_predict(&qf, d, &fq, &gq)
                                    .map(|p| format!("{:.17e}", p.value))
                            })
                            .collect::<DirectResult<_>>()?;
                        writeln!(out, "{}", values.join(","))?;
                    }
                }
            }
        }
        ModelArtifact::Logistic(a) => {
            let phi = pipeline_features(&x, a.standardizer.as_ref(), a.feature_map.as_ref())?;
            let model = LogisticModel {
                grid: Arc::new(a.grid.clone()),
                q: a.q.clone(),
                prior: a.prior.clone(),
                features: Array2::zeros((0, a.grid.b())),
                labels: Array1::zeros(0),
            };
            let count = args.samples.unwrap_or(1024);
            let mut rng = seeded_rng(args.seed);
            writeln!(out, "prob_class0")?;
            for i in 0..phi.nrows() {
                let row: Vec<f64> = phi.row(i).to_vec();
                let p = direct::logistic::predict_class_prob(&model, &row, count, &mut rng)?;
                writeln!(out, "{p:.17e}")?;
            }
        }
        ModelArtifact::Bnn(a) => {
            let std_x = pipeline_features(&x, a.standardizer.as_ref(), None)?;
            if std_x.ncols() != a.arch.input_dim() {
                return Err(CliError::Data(format!(
                    "feature dimension mismatch: model expects {}, data has {}",
                    a.arch.input_dim(),
                    std_x.ncols()
                )));
            }
            let q = VariationalDist::MeanField(a.q.clone());
            let grid = Arc::new(a.grid.clone());
            let mut rng = seeded_rng(args.seed);
            match args.samples {
                None => {
                    let count = 1024;
                    let draws = sample_posterior(&q, &grid, count, &mut rng)?;
                    writeln!(out, "mean")?;
                    for i in 0..std_x.nrows() {
                        let row: Vec<f64> = std_x.row(i).to_vec();
                        let mean: f64 = draws
                            .iter()
                            .map(|d| scalar_forward(&a.arch, &row, &d.dequantize()))
                            .sum::<f64>()
                            / count as f64;
                        writeln!(out, "{mean:.17e}")?;
                    }
                }
                Some(count) => {
                    let draws = sample_posterior(&q, &grid, count, &mut rng)?;
                    write_draw_header(&mut out, count)?;
                    for i in 0..std_x.nrows() {
                        let row: Vec<f64> = std_x.row(i).to_vec();
                        let values: Vec<String> = draws
                            .iter()
                            .map(|d| {
                                format!("{:.17e}", scalar_forward(&a.arch, &row, &d.dequantize()))
                            })
                            .collect();
                        writeln!(out, "{}", values.join(","))?;
                    }
                }
            }
        }
    }
    Ok(())
}

fn write_draw_header(out: &mut impl Write, count: usize) -> Result<(), CliError> {
    let header: Vec<String> = (1..=count).map(|i| format!("draw_{i}")).collect();
    writeln!(out, "{}", header.join(","))?;
    Ok(())
}

pub struct BenchmarkArgs {
    pub b: usize,
    pub mbar: usize,
    pub n: usize,
    pub seeds: Vec<u64>,
    pub budget_secs: f64,
    pub lrs: Vec<f64>,
    pub mc_samples: usize,
    pub no_baseline_too: bool,
    pub out: PathBuf,
}

pub fn cmd_benchmark(args: &BenchmarkArgs) -> Result<(), CliError> {
    let spec = BenchmarkSpec {
        b: args.b,
        m_bar: args.mbar,
        n: args.n,
        seeds: args.seeds.clone(),
        budget: Duration::from_secs_f64(args.budget_secs),
        reinforce_lrs: args.lrs.clone(),
        reinforce_samples: args.mc_samples,
        reinforce_no_baseline_too: args.no_baseline_too,
        ..BenchmarkSpec::default()
    };
    let report = benchmark_direct_vs_reinforce(&spec)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", args.out.display())))?;

    let mut summary = std::fs::File::create(args.out.join("summary.csv"))
        .map_err(|e| CliError::Data(format!("summary.csv: {e}")))?;
    writeln!(summary, "method,seed,final_elbo,iterations,seconds")?;
    println!("{:<26} {:>6} {:>16} {:>12} {:>9}", "method", "seed", "final ELBO", "iterations", "seconds");
    for run in &report.runs {
        let slug: String = run
            .method
            .chars()
            .map(|c| if c.is_alphanumeric() { c } else { '_' })
            .collect();
        write_trace(
            &args.out.join(format!("trace_{slug}_seed{}.csv", run.seed)),
            &run.trace,
        )?;
        writeln!(
            summary,
            "{},{},{:.17e},{},{:.3}",
            run.method, run.seed, run.final_exact_elbo, run.iterations, run.seconds
        )?;
        println!(
            "{:<26} {:>6} {:>16.6} {:>12} {:>9.2}",
            run.method, run.seed, run.final_exact_elbo, run.iterations, run.seconds
        );
    }
    println!("report written to {}", args.out.display());
    Ok(())
}

pub fn cmd_crossval(config_path: &Path, k: usize, out: Option<&PathBuf>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config_path)?;
    if cfg.model.kind == "logistic" {
        return Err(CliError::Config(
            "crossval covers regression models (glm | bnn)".into(),
        ));
    }
    let dataset = load_csv(&cfg.data.dataset, &cfg.data.target)?;
    let folds = kfold(dataset.n(), k, cfg.seed)?;
    let mut rows = Vec::with_capacity(k);
    for (fold_idx, (train_rows, test_rows)) in folds.iter().enumerate() {
        let train_set = dataset.subset(train_rows);
        let test_set = dataset.subset(test_rows);
        let mut fold_cfg = cfg.clone();
        fold_cfg.seed = cfg.seed.wrapping_add(fold_idx as u64);
        let t0 = Instant::now();
        let trained = train_any(&fold_cfg, &train_set)?;
        let train_seconds = t0.elapsed().as_secs_f64();
        let rmse = rmse_of(&trained.artifact, &test_set)?;
        println!(
            "fold {fold_idx}: rmse {rmse:.6}, {train_seconds:.2}s train, sparsity {:.3}",
            trained.sparsity
        );
        rows.push((fold_idx, rmse, train_seconds, trained.sparsity));
    }
    let rmses: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let times: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let sparsities: Vec<f64> = rows.iter().map(|r| r.3).collect();
    let (rmse_mean, rmse_var) = direct::numeric::mean_var(&rmses);
    let (time_mean, _) = direct::numeric::mean_var(&times);
    let (sparsity_mean, _) = direct::numeric::mean_var(&sparsities);
    println!(
        "rmse {rmse_mean:.6} ± {:.6}, mean train {time_mean:.2}s, mean sparsity {sparsity_mean:.3}",
        rmse_var.sqrt()
    );
    if let Some(path) = out {
        let mut file = std::fs::File::create(path)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))?;
        writeln!(file, "fold,rmse,train_seconds,expected_sparsity")?;
        for (fold, rmse, secs, sparsity) in &rows {
            writeln!(file, "{fold},{rmse:.17e},{secs:.3},{sparsity:.6}")?;
        }
        writeln!(
            file,
            "summary,{rmse_mean:.17e},{time_mean:.3},{sparsity_mean:.6}"
        )?;
    }
    Ok(())
}

fn rmse_of(artifact: &ModelArtifact, test: &Dataset) -> Result<f64, CliError> {
    let preds: Vec<f64> = match artifact {
        ModelArtifact::Glm(a) => {
            let phi = pipeline_features(&test.x, a.standardizer.as_ref(), a.feature_map.as_ref())?;
            let model = GlmModel {
                q: a.q.clone(),
                prior: Arc::new(a.prior.clone()),
                noise: a.noise.clone(),
                stats: Arc::new(GlmSuffStats::empty(&a.grid)),
                grid: Arc::new(a.grid.clone()),
            };
            direct::glm::predict_mean_batch(&model, phi.view())?.to_vec()
        }
        ModelArtifact::Bnn(a) => {
            let std_x = pipeline_features(&test.x, a.standardizer.as_ref(), None)?;
            let q = VariationalDist::MeanField(a.q.clone());
            let grid = Arc::new(a.grid.clone());
            let mut rng = seeded_rng(7);
            let draws = sample_posterior(&q, &grid, 512, &mut rng)?;
            (0..std_x.nrows())
                .map(|i| {
                    let row: Vec<f64> = std_x.row(i).to_vec();
                    draws
                        .iter()
                        .map(|d| scalar_forward(&a.arch, &row, &d.dequantize()))
                        .sum::<f64>()
                        / draws.len() as f64
                })
                .collect()
        }
        ModelArtifact::Logistic(_) => {
            return Err(CliError::Config("crossval covers regression models".into()))
        }
    };
    let mse: f64 = preds
        .iter()
        .zip(test.y.iter())
        .map(|(&p, &y)| (p - y) * (p - y))
        .sum::<f64>()
        / preds.len() as f64;
    Ok(mse.sqrt())
}

pub fn cmd_config_dump(config_path: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config_path)?;
    print!("{}", cfg.dump()?);
    Ok(())
}
