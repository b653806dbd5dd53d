//! Pipeline commands behind the `irt` binary. Each reads a [`RunConfig`],
//! writes its artifacts into an output directory and returns their paths.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advi::{self, FitConfig, GrmFit, Init, TraceRow, VariationalPosterior};
use crate::encoder::{self, EncoderConfig, EncoderNet, ScoringTarget};
use crate::error::{IrtError, Result};
use crate::eval::{self, Comparison, PointwiseLogLik, WaicReport};
use crate::factor::{self, Assignment};
use crate::grm::{Hyper, ModelParams, ModelShape, ResponseMatrix};
use crate::io::{self, fmt_f64, Artifact, CategoryOverride, ResponseFormat};
use crate::sim::{self, TruthSpec};

pub const FIT_KIND: &str = "grm-fit";
pub const TRUTH_KIND: &str = "simulation-truth";
pub const WAIC_KIND: &str = "waic-report";
pub const ENCODER_KIND: &str = "encoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorizeConfig {
    pub dims: usize,
    pub cutoff: f64,
}

impl Default for FactorizeConfig {
    fn default() -> Self {
        FactorizeConfig { dims: 2, cutoff: 0.4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaicConfig {
    /// Fit artifacts to compare. Empty means `fit_d{D}.json` for every
    /// entry of `fit_dims`, read from the output directory.
    pub fits: Vec<PathBuf>,
    /// Posterior draws per fit.
    pub samples: usize,
}

impl Default for WaicConfig {
    fn default() -> Self {
        WaicConfig { fits: Vec::new(), samples: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainEncoderConfig {
    /// Decoder fit supplying targets. Defaults to `fit_d{fit.dims}.json`.
    pub fit: Option<PathBuf>,
    /// Network settings; the run seed replaces `net.seed`.
    pub net: EncoderConfig,
}

impl Default for TrainEncoderConfig {
    fn default() -> Self {
        TrainEncoderConfig { fit: None, net: EncoderConfig::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    /// Defaults to `encoder.json` in the output directory.
    pub encoder: Option<PathBuf>,
    /// New responses. Defaults to the run's data.
    pub responses: Option<PathBuf>,
    /// When given, the encoder must have been trained against this fit.
    pub fit: Option<PathBuf>,
}

/// Everything a run needs. Relative paths resolve against `base_dir`,
/// normally the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Response CSV. Defaults to `responses.csv` in the output directory.
    pub data: Option<PathBuf>,
    pub format: ResponseFormat,
    pub seed: u64,
    pub simulate: TruthSpec,
    pub factorize: FactorizeConfig,
    /// Fit `D` runs with `dims = D` and seed `seed + D`.
    pub fit: FitConfig,
    /// Dimensionalities to fit. Empty means just `fit.dims`.
    pub fit_dims: Vec<usize>,
    pub waic: WaicConfig,
    pub encoder: TrainEncoderConfig,
    pub score: ScoreConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            format: ResponseFormat::default(),
            seed: 0,
            simulate: TruthSpec::default(),
            factorize: FactorizeConfig::default(),
            fit: FitConfig::default(),
            fit_dims: Vec::new(),
            waic: WaicConfig::default(),
            encoder: TrainEncoderConfig::default(),
            score: ScoreConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut c: RunConfig =
            serde_json::from_str(text).map_err(|e| IrtError::Validation(format!("config: {e}")))?;
        c.base_dir = base_dir.to_path_buf();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, &base)
    }

    pub fn validate(&self) -> Result<()> {
        self.fit.validate()?;
        if self.fit_dims.contains(&0) {
            return Err(IrtError::Validation("every fitted dimensionality must be at least 1".into()));
        }
        if self.waic.samples < 2 {
            return Err(IrtError::Validation("WAIC needs at least 2 posterior draws".into()));
        }
        if self.factorize.dims == 0 || !(self.factorize.cutoff > 0.0) {
            return Err(IrtError::Validation("factorize needs dims >= 1 and a positive cutoff".into()));
        }
        self.encoder.net.validate()
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn data_path(&self, out: &Path) -> PathBuf {
        match &self.data {
            Some(p) => self.resolve(p),
            None => out.join("responses.csv"),
        }
    }

    fn dims_to_fit(&self) -> Vec<usize> {
        if self.fit_dims.is_empty() {
            vec![self.fit.dims]
        } else {
            self.fit_dims.clone()
        }
    }

    pub fn load_data(&self, out: &Path) -> Result<ResponseMatrix> {
        let path = self.data_path(out);
        if !path.exists() {
            return Err(IrtError::Validation(format!("data file {} not found", path.display())));
        }
        io::load_responses(&path, &self.format)
    }
}

/// Simulation artifact: the recipe and the parameters it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthBody {
    pub spec: TruthSpec,
    pub seed: u64,
    pub assignment: Vec<usize>,
    pub params: ModelParams<f64>,
}

/// Calibrated decoder as persisted: surrogate, transform layout and the
/// settings and data that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitBody {
    pub config: FitConfig,
    pub data_hash: String,
    pub shape: ModelShape,
    pub hyper: Hyper,
    pub posterior: VariationalPosterior,
    pub converged: bool,
    pub iterations: usize,
    pub final_elbo: Option<f64>,
}

impl FitBody {
    pub fn from_fit(fit: &GrmFit, config: &FitConfig, data_hash: String) -> Self {
        FitBody {
            config: config.clone(),
            data_hash,
            shape: fit.shape.clone(),
            hyper: fit.hyper.clone(),
            posterior: fit.posterior.clone(),
            converged: fit.converged,
            iterations: fit.trace.len(),
            final_elbo: fit.trace.last().map(|r| r.elbo),
        }
    }

    pub fn to_fit(&self) -> GrmFit {
        GrmFit {
            shape: self.shape.clone(),
            hyper: self.hyper.clone(),
            posterior: self.posterior.clone(),
            trace: Vec::new(),
            converged: self.converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledReport {
    pub label: String,
    pub fit_hash: String,
    pub report: WaicReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaicBody {
    pub samples: usize,
    pub seed: u64,
    pub reports: Vec<LabeledReport>,
    pub comparison: Option<Comparison>,
}

pub fn data_hash(data: &ResponseMatrix) -> Result<String> {
    io::content_hash(data)
}

fn ensure_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn fit_path(out: &Path, d: usize) -> PathBuf {
    out.join(format!("fit_d{d}.json"))
}

/// Loads a fit artifact and refuses it when it was calibrated on other data.
pub fn load_fit(path: &Path, data: &ResponseMatrix) -> Result<Artifact<FitBody>> {
    let a: Artifact<FitBody> = Artifact::load(path, FIT_KIND)?;
    let found = data_hash(data)?;
    if a.body.data_hash != found {
        return Err(IrtError::HashMismatch {
            expected: a.body.data_hash,
            found,
        });
    }
    Ok(a)
}

/// Draws a sparse truth and responses from `config.simulate`.
pub fn cmd_simulate(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    ensure_out(out)?;
    let (truth, data) = sim::simulate(&config.simulate, config.seed)?;
    let responses = out.join("responses.csv");
    io::write_responses(&responses, &data)?;
    let body = TruthBody {
        spec: config.simulate.clone(),
        seed: config.seed,
        assignment: config.simulate.resolved_assignment().iter().map(|d| d + 1).collect(),
        params: truth,
    };
    let truth_path = out.join("truth.json");
    Artifact::new(TRUTH_KIND, body)?.save(&truth_path)?;
    Ok(vec![responses, truth_path])
}

/// Exploratory factor analysis: varimax loadings and the cutoff partition.
pub fn cmd_factorize(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    ensure_out(out)?;
    let data = config.load_data(out)?;
    let l = factor::exploratory(&data, config.factorize.dims)?;
    let names = data.item_names();
    let mut header = vec!["item".to_string(), "name".to_string()];
    header.extend((1..=l.dims).map(|d| format!("factor{d}")));
    let loadings = out.join("loadings.csv");
    io::write_table(
        &loadings,
        &header,
        (0..l.items).map(|i| {
            let mut r = vec![(i + 1).to_string(), names[i].clone()];
            r.extend(l.row(i).iter().map(|v| fmt_f64(*v)));
            r
        }),
    )?;
    let parts = factor::partition_by_cutoff(&l, config.factorize.cutoff)?;
    let partition = out.join("partition.csv");
    io::write_table(
        &partition,
        &["item", "name", "dimension"],
        parts.iter().enumerate().map(|(i, a)| {
            let label = match a {
                Assignment::Dimension(d) => (d + 1).to_string(),
                Assignment::Unassigned => "unassigned".to_string(),
                Assignment::Multiple(ds) => ds.iter().map(|d| (d + 1).to_string()).collect::<Vec<_>>().join(";"),
            };
            vec![(i + 1).to_string(), names[i].clone(), label]
        }),
    )?;
    Ok(vec![loadings, partition])
}

fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    io::write_table(
        path,
        &["iteration", "elbo", "step_size"],
        trace
            .iter()
            .map(|r| vec![(r.iteration + 1).to_string(), fmt_f64(r.elbo), fmt_f64(r.step_size)]),
    )
}

fn write_traits(path: &Path, dims: usize, values: &[f64]) -> Result<()> {
    let mut header = vec!["person".to_string()];
    header.extend((1..=dims).map(|d| format!("theta{d}")));
    io::write_table(
        path,
        &header,
        values.chunks(dims).enumerate().map(|(p, row)| {
            let mut r = vec![(p + 1).to_string()];
            r.extend(row.iter().map(|v| fmt_f64(*v)));
            r
        }),
    )
}

/// Calibrates one model per requested dimensionality. Fit `D` uses seed
/// `seed + D`.
pub fn cmd_fit(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    ensure_out(out)?;
    let data = config.load_data(out)?;
    let dh = data_hash(&data)?;
    let mut written = Vec::new();
    for d in config.dims_to_fit() {
        let fc = FitConfig { dims: d, seed: config.seed.wrapping_add(d as u64), ..config.fit.clone() };
        let fit = advi::fit(&data, &fc, &Init::FactorAnalysis)?;
        let art = Artifact::new(FIT_KIND, FitBody::from_fit(&fit, &fc, dh.clone()))?;
        let p = fit_path(out, d);
        art.save(&p)?;
        written.push(p);

        let trace = out.join(format!("fit_d{d}_trace.csv"));
        write_trace(&trace, &fit.trace)?;
        written.push(trace);

        let mut rng = ChaCha8Rng::seed_from_u64(fc.seed);
        let draws = fit.draws(200, &mut rng)?;
        let w = fit.weight_means(&draws)?;
        let loc = fit.location_params();
        let mut header = vec!["item".to_string(), "name".to_string()];
        header.extend((1..=d).map(|k| format!("weight{k}")));
        header.extend((1..=d).map(|k| format!("lambda{k}")));
        header.push("dimension".to_string());
        let weights = out.join(format!("fit_d{d}_weights.csv"));
        io::write_table(
            &weights,
            &header,
            (0..data.items()).map(|i| {
                let wi = &w[i * d..(i + 1) * d];
                let best = (0..d).fold(0, |b, k| if wi[k] > wi[b] { k } else { b });
                let mut r = vec![(i + 1).to_string(), data.item_names()[i].clone()];
                r.extend(wi.iter().map(|v| fmt_f64(*v)));
                r.extend(loc.item_lambda(i).iter().map(|v| fmt_f64(*v)));
                r.push((best + 1).to_string());
                r
            }),
        )?;
        written.push(weights);

        let traits = out.join(format!("fit_d{d}_traits.csv"));
        write_traits(&traits, d, &fit.trait_means())?;
        written.push(traits);
    }
    Ok(written)
}

/// Pointwise log-likelihood from `samples` surrogate draws, drawn in chunks
/// to bound memory.
pub fn fit_pointwise(fit: &GrmFit, data: &ResponseMatrix, samples: usize, seed: u64) -> Result<PointwiseLogLik> {
    const CHUNK: usize = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = data.persons();
    let mut values = vec![0.0; p * samples];
    let mut done = 0;
    while done < samples {
        let n = CHUNK.min(samples - done).max(2);
        let draws = fit.draws(n, &mut rng)?;
        let m = eval::pointwise_loglik_nu(&draws, data, fit.hyper.nu)?;
        let take = n.min(samples - done);
        for person in 0..p {
            values[person * samples + done..person * samples + done + take]
                .copy_from_slice(&m.row(person)[..take]);
        }
        done += take;
    }
    PointwiseLogLik::new(p, samples, values)
}

/// WAIC for every fit and, given two or more, their ranking.
pub fn cmd_waic(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    ensure_out(out)?;
    let data = config.load_data(out)?;
    let paths: Vec<PathBuf> = if config.waic.fits.is_empty() {
        config.dims_to_fit().into_iter().map(|d| fit_path(out, d)).collect()
    } else {
        config.waic.fits.iter().map(|p| config.resolve(p)).collect()
    };
    let mut reports = Vec::new();
    for path in &paths {
        let art = load_fit(path, &data)?;
        let m = fit_pointwise(&art.body.to_fit(), &data, config.waic.samples, config.seed)?;
        reports.push(LabeledReport {
            label: format!("D={}", art.body.shape.dims),
            fit_hash: art.hash.clone(),
            report: eval::waic(&m)?,
        });
    }
    let comparison = if reports.len() >= 2 {
        let r: Vec<WaicReport> = reports.iter().map(|r| r.report.clone()).collect();
        let l: Vec<String> = reports.iter().map(|r| r.label.clone()).collect();
        Some(eval::compare(&r, &l)?)
    } else {
        None
    };

    let table = out.join("waic_comparison.csv");
    let flagged = |label: &str| {
        comparison.as_ref().is_some_and(|c| {
            c.within_one_se
                .iter()
                .any(|f| f.second == label && c.ranking.first().is_some_and(|b| b.label == f.first))
        })
    };
    let rows: Vec<Vec<String>> = match &comparison {
        Some(c) => c
            .ranking
            .iter()
            .enumerate()
            .map(|(k, r)| {
                vec![
                    (k + 1).to_string(),
                    r.label.clone(),
                    fmt_f64(r.waic),
                    fmt_f64(r.se),
                    fmt_f64(r.delta),
                    flagged(&r.label).to_string(),
                ]
            })
            .collect(),
        None => reports
            .iter()
            .map(|r| {
                vec![
                    "1".into(),
                    r.label.clone(),
                    fmt_f64(r.report.waic),
                    fmt_f64(r.report.se),
                    "0.0".into(),
                    "false".into(),
                ]
            })
            .collect(),
    };
    io::write_table(&table, &["rank", "model", "waic", "se", "delta", "within_one_se_of_best"], rows)?;

    let pointwise = out.join("waic_pointwise.csv");
    let mut header = vec!["person".to_string()];
    header.extend(reports.iter().map(|r| format!("elpd[{}]", r.label)));
    io::write_table(
        &pointwise,
        &header,
        (0..data.persons()).map(|p| {
            let mut row = vec![(p + 1).to_string()];
            row.extend(reports.iter().map(|r| fmt_f64(r.report.pointwise_elpd[p])));
            row
        }),
    )?;

    let json = out.join("waic.json");
    let body = WaicBody { samples: config.waic.samples, seed: config.seed, reports, comparison };
    Artifact::new(WAIC_KIND, body)?.save(&json)?;
    Ok(vec![json, table, pointwise])
}

/// Trains the encoder on the decoder's posterior-mean traits.
pub fn cmd_train_encoder(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    ensure_out(out)?;
    let data = config.load_data(out)?;
    let path = match &config.encoder.fit {
        Some(p) => config.resolve(p),
        None => fit_path(out, config.fit.dims),
    };
    let art = load_fit(&path, &data)?;
    let fit = art.body.to_fit();
    let targets = ScoringTarget::new(fit.shape.dims, fit.trait_means())?;
    let net_cfg = EncoderConfig { seed: config.seed, ..config.encoder.net.clone() };
    let net = encoder::train_encoder(&data, &targets, &net_cfg, &art.hash)?;
    let p = out.join("encoder.json");
    Artifact::new(ENCODER_KIND, net)?.save(&p)?;
    Ok(vec![p])
}

/// Scores responses with a trained encoder.
pub fn cmd_score(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    ensure_out(out)?;
    let enc_path = match &config.score.encoder {
        Some(p) => config.resolve(p),
        None => out.join("encoder.json"),
    };
    let enc: Artifact<EncoderNet> = Artifact::load(&enc_path, ENCODER_KIND)?;
    enc.body.validate()?;
    if let Some(fp) = &config.score.fit {
        let fit: Artifact<FitBody> = Artifact::load(&config.resolve(fp), FIT_KIND)?;
        if fit.hash != enc.body.decoder_hash {
            return Err(IrtError::HashMismatch {
                expected: enc.body.decoder_hash.clone(),
                found: fit.hash,
            });
        }
    }
    let format = ResponseFormat {
        categories: Some(CategoryOverride::PerItem(enc.body.categories.clone())),
        ..config.format.clone()
    };
    let data_path = match &config.score.responses {
        Some(p) => config.resolve(p),
        None => config.data_path(out),
    };
    let data = io::load_responses(&data_path, &format)?;
    let scores = encoder::score_matrix(&data, &enc.body)?;
    let p = out.join("traits.csv");
    write_traits(&p, enc.body.output_width(), &scores)?;
    Ok(vec![p])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(dir: &Path) -> RunConfig {
        let text = r#"{
            "seed": 3,
            "simulate": {"persons": 60, "items": 4, "dims": 2, "categories": 3},
            "factorize": {"dims": 2},
            "fit": {"dims": 2, "max_iters": 30, "mc_samples": 1},
            "fit_dims": [1, 2],
            "waic": {"samples": 20},
            "encoder": {"net": {"epochs": 5}}
        }"#;
        RunConfig::from_json(text, dir).unwrap()
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_json(r#"{"sede": 1}"#, Path::new(".")),
            Err(IrtError::Validation(_))
        ));
    }

    #[test]
    fn pipeline_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let c = small_config(out);
        cmd_simulate(&c, out).unwrap();
        cmd_factorize(&c, out).unwrap();
        cmd_fit(&c, out).unwrap();
        cmd_waic(&c, out).unwrap();
        cmd_train_encoder(&c, out).unwrap();
        let c2 = RunConfig {
            score: ScoreConfig { fit: Some(out.join("fit_d2.json")), ..Default::default() },
            ..c.clone()
        };
        cmd_score(&c2, out).unwrap();
        let traits = fs::read_to_string(out.join("traits.csv")).unwrap();
        assert_eq!(traits.lines().count(), 61);
        assert!(traits.starts_with("person,theta1,theta2"));

        // wrong decoder is refused
        let c3 = RunConfig {
            score: ScoreConfig { fit: Some(out.join("fit_d1.json")), ..Default::default() },
            ..c
        };
        assert!(matches!(cmd_score(&c3, out), Err(IrtError::HashMismatch { .. })));
    }

    #[test]
    fn fits_on_other_data_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let mut c = small_config(out);
        c.fit_dims = vec![1];
        cmd_simulate(&c, out).unwrap();
        cmd_fit(&c, out).unwrap();
        c.seed = 4;
        cmd_simulate(&c, out).unwrap();
        assert!(matches!(cmd_waic(&c, out), Err(IrtError::HashMismatch { .. })));
    }
}
