//! One-parameter sweeps: a dotted config path stepped over a value list, with
//! optional linked fields recomputed from expressions at every point.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context};
use evalexpr::{ContextWithMutableVariables, DefaultNumericTypes, HashMapContext, Value as Expr};
use toml::Value;

use crate::config::ExperimentConfig;
use crate::experiment::{point_seed, run_experiment, Prepared, TrialRow};
use crate::output::{summarise, SummaryRow};

/// `path=expression`, e.g. `dims.n_r=8*dims.n_t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Link {
    pub path: String,
    pub expr: String,
}

impl FromStr for Link {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        let (path, expr) = s
            .split_once('=')
            .ok_or_else(|| anyhow!("link {s:?} must look like path=expression"))?;
        let (path, expr) = (path.trim(), expr.trim());
        if path.is_empty() || expr.is_empty() {
            bail!("link {s:?} must look like path=expression");
        }
        Ok(Self {
            path: path.to_string(),
            expr: expr.to_string(),
        })
    }
}

/// Comma-separated numbers; at least one.
pub fn parse_values(text: &str) -> anyhow::Result<Vec<f64>> {
    let values = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .with_context(|| format!("sweep value {s:?} is not a number"))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        bail!("sweep value {v} is not finite");
    }
    Ok(values)
}

fn set_number(tree: &mut Value, path: &str, v: f64) -> anyhow::Result<()> {
    let mut keys: Vec<&str> = path.split('.').collect();
    let leaf = keys
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| anyhow!("empty parameter path"))?;
    let mut node = tree;
    for k in keys {
        node = node
            .get_mut(k)
            .filter(|n| n.is_table())
            .ok_or_else(|| anyhow!("unknown parameter path {path:?}"))?;
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| anyhow!("unknown parameter path {path:?}"))?;
    let integral = v.fract() == 0.0 && v.abs() < 9.0e15;
    let new = match table.get(leaf) {
        Some(Value::Integer(_)) if integral => Value::Integer(v as i64),
        Some(Value::Integer(_)) => bail!("{path} is an integer field, {v} is not an integer"),
        Some(Value::Float(_)) | None => Value::Float(v),
        Some(Value::Array(a)) if a.iter().all(|x| x.is_float() || x.is_integer()) => {
            Value::Array(vec![Value::Float(v)])
        }
        Some(_) => bail!("{path} is not a numeric field"),
    };
    table.insert(leaf.to_string(), new);
    Ok(())
}

fn flatten(
    prefix: &str,
    node: &Value,
    ctx: &mut HashMapContext<DefaultNumericTypes>,
) -> anyhow::Result<()> {
    if let Value::Table(t) = node {
        for (k, v) in t {
            let name = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match v {
                Value::Integer(i) => ctx.set_value(name, Expr::Int(*i))?,
                Value::Float(f) => ctx.set_value(name, Expr::Float(*f))?,
                Value::Table(_) => flatten(&name, v, ctx)?,
                _ => {}
            }
        }
    }
    Ok(())
}

fn evaluate(tree: &Value, link: &Link) -> anyhow::Result<f64> {
    let mut ctx = HashMapContext::<DefaultNumericTypes>::new();
    flatten("", tree, &mut ctx)?;
    match evalexpr::eval_with_context(&link.expr, &ctx)
        .with_context(|| format!("link {}", link.path))?
    {
        Expr::Int(i) => Ok(i as f64),
        Expr::Float(f) => Ok(f),
        other => bail!("link {} evaluates to {other}, not a number", link.path),
    }
}

/// The config at one sweep point: parameter set, then links applied in order.
pub fn apply_point(
    base: &ExperimentConfig,
    param: &str,
    value: f64,
    links: &[Link],
) -> anyhow::Result<ExperimentConfig> {
    let mut tree = Value::try_from(base)?;
    set_number(&mut tree, param, value)?;
    for link in links {
        let v = evaluate(&tree, link)?;
        set_number(&mut tree, &link.path, v)?;
    }
    let cfg: ExperimentConfig = tree
        .try_into()
        .map_err(|e: toml::de::Error| anyhow!("{param} = {value}: {}", e.message()))?;
    Ok(cfg)
}

/// Sweep value rendered for the `value` column.
pub fn label(v: f64) -> String {
    format!("{v}")
}

/// Every point's config, seeded from the base master seed. All validation happens here.
pub fn plan(
    base: &ExperimentConfig,
    param: &str,
    values: &[f64],
    links: &[Link],
) -> anyhow::Result<Vec<(String, ExperimentConfig)>> {
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut cfg = apply_point(base, param, v, links)?;
            cfg.experiment.seed = point_seed(base.experiment.seed, i);
            let violations = cfg.validate();
            if !violations.is_empty() {
                let text: Vec<String> = violations.iter().map(|x| x.to_string()).collect();
                bail!("{param} = {v}: {}", text.join("; "));
            }
            Ok((label(v), cfg))
        })
        .collect()
}

#[derive(Debug)]
pub struct SweepPoint {
    pub label: String,
    pub config: ExperimentConfig,
    pub rows: Vec<TrialRow>,
}

impl SweepPoint {
    pub fn summary(&self) -> Vec<SummaryRow> {
        summarise(&self.label, &self.rows)
    }
}

/// Builds every point (config errors surface before anything runs), then runs them in order.
pub fn prepare(
    points: Vec<(String, ExperimentConfig)>,
    base_dir: &Path,
) -> anyhow::Result<Vec<(String, Prepared)>> {
    points
        .into_iter()
        .map(|(l, cfg)| {
            Ok((
                l.clone(),
                Prepared::new(cfg, base_dir).with_context(|| format!("point {l}"))?,
            ))
        })
        .collect()
}

pub fn run(
    points: Vec<(String, Prepared)>,
    diagnostics: Option<&Path>,
) -> anyhow::Result<Vec<SweepPoint>> {
    points
        .into_iter()
        .enumerate()
        .map(|(i, (label, p))| {
            let dir = diagnostics.map(|d| d.join(format!("point{i}")));
            let p = p.with_diagnostics(dir);
            let rows = run_experiment(&p)?;
            Ok(SweepPoint {
                label,
                config: p.config,
                rows,
            })
        })
        .collect()
}

/// `results.csv` → `results_trials.csv`.
pub fn trials_path(summary: &Path) -> PathBuf {
    let stem = summary
        .file_stem()
        .map_or_else(|| "sweep".into(), |s| s.to_string_lossy().into_owned());
    summary.with_file_name(format!("{stem}_trials.csv"))
}
