//! Runs an experiment end to end and derives every reported metric from its snapshots.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use ensmooth_core::io::{load_ensemble, load_field, save_ensemble, save_field};
use ensmooth_core::metrics::{bimodality_index, histogram, median, rmse, rmsre};
use ensmooth_core::smoother::{run_assimilation, AssimilationConfig, Method};
use ensmooth_core::{ensemble_stats, Ensemble, Grid2D, ObsKind, ObsLabel, ObservationSet, ScalarField};

use crate::cases::{build_case, gaussian_basis, Case, FieldMap};
use crate::config::{CaseConfig, ExperimentConfig};

pub const FAILED_MARKER: &str = "FAILED";
pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const SUMMARY: &str = "summary.csv";

/// Written before anything else so `metrics` can rebuild the context of a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub preset: String,
    pub method: Method,
    pub seed_bundle: Option<u64>,
    /// Overrides exactly as supplied, before merging into the preset.
    pub overrides: Value,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub preset: String,
    pub method: String,
    pub iteration: usize,
    pub stage: String,
    /// RMSE of the ensemble-mean field against the reference.
    pub field_rmse: f64,
    /// RMSRE of the ensemble-mean source parameters against the truth.
    pub source_rmsre: Option<f64>,
    pub bimodality: f64,
    /// Median over members of the per-member head RMSE against the observations.
    pub median_head_misfit: f64,
    pub mean_head_misfit: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObservationRecord {
    kind: ObsKind,
    x: f64,
    y: f64,
    t: Option<f64>,
    value: f64,
    noise_std: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthRecord {
    index: usize,
    value: f64,
}

fn snapshot_dir(dir: &Path) -> PathBuf {
    dir.join("snapshots")
}

fn snapshot_path(dir: &Path, t: usize) -> PathBuf {
    snapshot_dir(dir).join(format!("ens_t{t}.manifest"))
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let rows = r.deserialize().collect::<Result<Vec<T>, _>>()?;
    Ok(rows)
}

/// Reference field, true parameters and observations of a built case.
pub fn write_truth(dir: &Path, case: &Case) -> Result<()> {
    let truth_dir = dir.join("truth");
    fs::create_dir_all(&truth_dir)?;
    save_field(&case.truth.reference, &truth_dir.join("reference_field.manifest"))?;
    write_csv(
        &truth_dir.join("params.csv"),
        case.truth
            .params
            .iter()
            .enumerate()
            .map(|(index, &value)| TruthRecord { index, value }),
    )?;
    let obs = &case.truth.observations;
    write_csv(
        &dir.join("observations.csv"),
        obs.labels()
            .iter()
            .zip(obs.values().iter().zip(obs.noise_std()))
            .map(|(l, (&value, &noise_std))| ObservationRecord {
                kind: l.kind,
                x: l.x,
                y: l.y,
                t: l.t,
                value,
                noise_std,
            }),
    )
}

fn read_observations(dir: &Path) -> Result<ObservationSet> {
    let rows: Vec<ObservationRecord> = read_csv(&dir.join("observations.csv"))?;
    let mut values = Vec::with_capacity(rows.len());
    let mut std = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for r in rows {
        values.push(r.value);
        std.push(r.noise_std);
        labels.push(ObsLabel {
            kind: r.kind,
            x: r.x,
            y: r.y,
            t: r.t,
        });
    }
    Ok(ObservationSet::new(values, std, labels)?)
}

fn read_truth_params(dir: &Path) -> Result<Vec<f64>> {
    let rows: Vec<TruthRecord> = read_csv(&dir.join("truth").join("params.csv"))?;
    ensure!(
        rows.iter().enumerate().all(|(k, r)| r.index == k),
        "truth parameters out of order"
    );
    Ok(rows.into_iter().map(|r| r.value).collect())
}

pub fn write_manifest(dir: &Path, m: &RunManifest) -> Result<()> {
    fs::write(dir.join(RUN_MANIFEST), serde_json::to_string_pretty(m)? + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(RUN_MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed {}", path.display()))
}

/// Builds the case, assimilates, and writes every artifact into `out`.
///
/// On failure a `FAILED` marker holding the error chain is left next to the partial artifacts.
pub fn run(cfg: &ExperimentConfig, overrides: Value, seed_bundle: Option<u64>, out: &Path) -> Result<Vec<SummaryRow>> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let marker = out.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    let result = run_inner(cfg, overrides, seed_bundle, out);
    if let Err(e) = &result {
        fs::write(&marker, format!("{e:#}\n"))?;
    }
    result
}

fn run_inner(cfg: &ExperimentConfig, overrides: Value, seed_bundle: Option<u64>, out: &Path) -> Result<Vec<SummaryRow>> {
    write_manifest(
        out,
        &RunManifest {
            preset: cfg.preset.name().to_string(),
            method: cfg.method,
            seed_bundle,
            overrides,
            config: cfg.clone(),
        },
    )?;
    let case = build_case(cfg)?;
    write_truth(out, &case)?;
    let n_obs = case.truth.observations.len();
    let assimilation = AssimilationConfig {
        n_iter: cfg.n_iter,
        method: cfg.method,
        constraints: case.constraints.clone(),
        network: Some(cfg.network.spec(n_obs, case.prior.n_params())),
        train: cfg.train,
        noise_seed: cfg.seeds.noise,
        training_seed: cfg.seeds.training,
        snapshot_dir: Some(snapshot_dir(out)),
    };
    run_assimilation(&assimilation, case.prior, &case.truth.observations, case.model.as_ref())?;
    metrics(out)
}

/// Prior ensemble plus the truth files, without running the forward model.
pub fn gen_prior(cfg: &ExperimentConfig, overrides: Value, seed_bundle: Option<u64>, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    write_manifest(
        out,
        &RunManifest {
            preset: cfg.preset.name().to_string(),
            method: cfg.method,
            seed_bundle,
            overrides,
            config: cfg.clone(),
        },
    )?;
    let case = build_case(cfg)?;
    write_truth(out, &case)?;
    let path = out.join("prior.manifest");
    save_ensemble(&case.prior, &path)?;
    Ok(path)
}

fn field_map(cfg: &ExperimentConfig) -> Result<(FieldMap, Option<usize>, (f64, f64))> {
    Ok(match &cfg.case {
        CaseConfig::Gaussian(c) => {
            let sd = c.covariance.variance.sqrt();
            let range = (c.covariance.mean - 4.0 * sd, c.covariance.mean + 4.0 * sd);
            (FieldMap::Kl(gaussian_basis(c)?), Some(c.n_kl), range)
        }
        CaseConfig::Channel(c) => (
            FieldMap::Direct(Grid2D::new(c.nx, c.ny, c.lx, c.ly)?),
            None,
            (0.0, 3.0),
        ),
    })
}

const HISTOGRAM_BINS: usize = 30;

struct StageStats {
    mean: Vec<f64>,
    std: Vec<f64>,
    misfit: Vec<f64>,
    source_mean: Option<Vec<f64>>,
}

fn stage_stats(e: &Ensemble, field: &FieldMap, source_offset: Option<usize>, obs: &ObservationSet) -> Result<StageStats> {
    let n = field.grid().len();
    let mut fields = DMatrix::zeros(n, e.n_members());
    for i in 0..e.n_members() {
        let v = field.field_values(&e.member(i))?;
        fields.column_mut(i).copy_from_slice(&v);
    }
    let (mean, std) = ensemble_stats(&Ensemble::new(fields, e.iteration())?)?;
    let (pmean, _) = ensemble_stats(e)?;
    let source_mean = source_offset.map(|k| pmean.as_slice()[k..].to_vec());

    let heads = obs.indices_of(ObsKind::Head);
    let y = e
        .outputs()
        .with_context(|| format!("snapshot {} has no outputs", e.iteration()))?;
    ensure!(y.nrows() == obs.len(), "snapshot outputs do not match the observations");
    let misfit = (0..e.n_members())
        .map(|i| {
            let s: f64 = heads.iter().map(|&k| (y[(k, i)] - obs.values()[k]).powi(2)).sum();
            (s / heads.len().max(1) as f64).sqrt()
        })
        .collect();
    Ok(StageStats {
        mean: mean.as_slice().to_vec(),
        std: std.as_slice().to_vec(),
        misfit,
        source_mean,
    })
}

#[derive(Serialize)]
struct HistogramRow<'a> {
    stage: &'a str,
    lower: f64,
    upper: f64,
    count: usize,
}

#[derive(Serialize)]
struct MisfitRow<'a> {
    stage: &'a str,
    iteration: usize,
    member: usize,
    head_rmse: f64,
}

#[derive(Serialize)]
struct FieldRow {
    x: f64,
    y: f64,
    reference: f64,
    prior_mean: f64,
    prior_std: f64,
    posterior_mean: f64,
    posterior_std: f64,
}

fn stage_name(t: usize, n_iter: usize) -> &'static str {
    if t == 0 {
        "prior"
    } else if t == n_iter {
        "posterior"
    } else {
        "update"
    }
}

/// Recomputes every metric and plot table from the snapshots in `dir` and rewrites `summary.csv`.
pub fn metrics(dir: &Path) -> Result<Vec<SummaryRow>> {
    let manifest = read_manifest(dir)?;
    let cfg = &manifest.config;
    let (field, source_offset, hist_range) = field_map(cfg)?;
    let reference = load_field(&dir.join("truth").join("reference_field.manifest"))?;
    ensure!(reference.grid() == field.grid(), "reference field grid does not match the config");
    let truth = read_truth_params(dir)?;
    let obs = read_observations(dir)?;
    let true_source = source_offset.map(|k| truth[k..].to_vec());

    let mut rows = Vec::new();
    let mut stats = Vec::new();
    for t in 0..=cfg.n_iter {
        let path = snapshot_path(dir, t);
        if !path.exists() {
            bail!("missing snapshot {}", path.display());
        }
        let e = load_ensemble(&path)?;
        let s = stage_stats(&e, &field, source_offset, &obs)?;
        let source_rmsre = match (&s.source_mean, &true_source) {
            (Some(est), Some(truth)) => Some(rmsre(est, truth)?),
            _ => None,
        };
        rows.push(SummaryRow {
            preset: manifest.preset.clone(),
            method: manifest.method.name().to_string(),
            iteration: t,
            stage: stage_name(t, cfg.n_iter).to_string(),
            field_rmse: rmse(&s.mean, reference.values())?,
            source_rmsre,
            bimodality: bimodality_index(&s.mean),
            median_head_misfit: median(&s.misfit).unwrap_or(f64::NAN),
            mean_head_misfit: s.misfit.iter().sum::<f64>() / s.misfit.len() as f64,
        });
        stats.push((t, e, s));
    }

    let (prior_e, prior) = (&stats[0].1, &stats[0].2);
    let (post_e, post) = (&stats[cfg.n_iter].1, &stats[cfg.n_iter].2);
    let grid = *field.grid();

    let fields_dir = dir.join("fields");
    fs::create_dir_all(&fields_dir)?;
    for (name, values) in [
        ("prior_mean", &prior.mean),
        ("prior_std", &prior.std),
        ("posterior_mean", &post.mean),
        ("posterior_std", &post.std),
    ] {
        save_field(
            &ScalarField::new(grid, values.clone())?,
            &fields_dir.join(format!("{name}.manifest")),
        )?;
    }
    write_csv(
        &dir.join("fields.csv"),
        (0..grid.len()).map(|k| {
            let (x, y) = grid.position(k);
            FieldRow {
                x,
                y,
                reference: reference.values()[k],
                prior_mean: prior.mean[k],
                prior_std: prior.std[k],
                posterior_mean: post.mean[k],
                posterior_std: post.std[k],
            }
        }),
    )?;

    let mut hist_rows = Vec::new();
    for (stage, s) in [("prior", prior), ("posterior", post)] {
        let h = histogram(&s.mean, hist_range.0, hist_range.1, HISTOGRAM_BINS)?;
        for (b, &count) in h.counts.iter().enumerate() {
            hist_rows.push(HistogramRow {
                stage,
                lower: h.edges[b],
                upper: h.edges[b + 1],
                count,
            });
        }
    }
    write_csv(&dir.join("histogram.csv"), hist_rows)?;

    let misfit_rows = stats.iter().flat_map(|(t, _, s)| {
        let stage = stage_name(*t, cfg.n_iter);
        s.misfit.iter().enumerate().map(move |(member, &head_rmse)| MisfitRow {
            stage,
            iteration: *t,
            member,
            head_rmse,
        })
    });
    write_csv(&dir.join("head_misfit.csv"), misfit_rows)?;

    if let Some(k) = source_offset {
        let path = dir.join("source_samples.csv");
        let mut w = csv::Writer::from_path(&path)?;
        let n_src = truth.len() - k;
        let mut header = vec!["stage".to_string(), "member".into(), "x_s".into(), "y_s".into()];
        header.extend((1..=n_src - 2).map(|r| format!("S{r}")));
        w.write_record(&header)?;
        for (stage, e) in [("prior", prior_e), ("posterior", post_e)] {
            for i in 0..e.n_members() {
                let mut rec = vec![stage.to_string(), i.to_string()];
                rec.extend(e.params().column(i).iter().skip(k).map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        let mut rec = vec!["truth".to_string(), String::new()];
        rec.extend(truth[k..].iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
        w.flush()?;
    }

    write_csv(&dir.join(SUMMARY), rows.iter())?;
    Ok(rows)
}

pub fn read_summary(dir: &Path) -> Result<Vec<SummaryRow>> {
    read_csv(&dir.join(SUMMARY))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{resolve, Preset};
    use serde_json::json;

    fn tiny() -> (ExperimentConfig, Value) {
        let overrides = json!({
            "n_members": 12,
            "n_iter": 2,
            "case": {"gaussian": {"n_kl": 8, "nx": 21, "ny": 11}}
        });
        (resolve(Preset::GaussianCase1Desk, &overrides).unwrap(), overrides)
    }

    #[test]
    fn run_writes_artifacts_and_metrics_are_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, overrides) = tiny();
        let rows = run(&cfg, overrides.clone(), Some(1), dir.path()).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].stage, "prior");
        assert_eq!(rows[2].stage, "posterior");
        assert!(rows.iter().all(|r| r.source_rmsre.is_some()));
        for f in [
            "summary.csv",
            "fields.csv",
            "histogram.csv",
            "head_misfit.csv",
            "source_samples.csv",
            "observations.csv",
            "run_manifest.json",
            "snapshots/ens_t2.manifest",
            "snapshots/run_log.csv",
            "fields/posterior_mean.manifest",
        ] {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
        assert!(!dir.path().join(FAILED_MARKER).exists());
        let manifest = read_manifest(dir.path()).unwrap();
        assert_eq!(manifest.overrides, overrides);

        let before = fs::read(dir.path().join(SUMMARY)).unwrap();
        let again = metrics(dir.path()).unwrap();
        assert_eq!(again, rows);
        assert_eq!(fs::read(dir.path().join(SUMMARY)).unwrap(), before);
        assert_eq!(read_summary(dir.path()).unwrap(), rows);

        #[derive(Deserialize)]
        struct H {
            stage: String,
            count: usize,
        }
        let h: Vec<H> = read_csv(&dir.path().join("histogram.csv")).unwrap();
        let posterior: usize = h.iter().filter(|r| r.stage == "posterior").map(|r| r.count).sum();
        assert_eq!(posterior, 21 * 11);
    }

    #[test]
    fn missing_snapshot_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, overrides) = tiny();
        run(&cfg, overrides, None, dir.path()).unwrap();
        fs::remove_file(snapshot_path(dir.path(), 1)).unwrap();
        let err = metrics(dir.path()).unwrap_err();
        assert!(err.to_string().contains("missing snapshot"));
    }

    #[test]
    fn failure_leaves_marker() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, overrides) = tiny();
        // The flow solver cannot converge in one iteration, so the reference run fails.
        cfg.solver.max_iter = Some(1);
        cfg.solver.rel_tol = 1e-300;
        assert!(run(&cfg, overrides, None, dir.path()).is_err());
        assert!(dir.path().join(FAILED_MARKER).exists());
    }
}
