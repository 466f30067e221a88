//! Flat-key experiment configuration, loaded from TOML with command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Connectivity,
    Automorphisms,
    KernelLimit,
    Distinguish,
    Interpolate,
    Equivariance,
}

impl Kind {
    pub const ALL: [Kind; 6] = [
        Kind::Connectivity,
        Kind::Automorphisms,
        Kind::KernelLimit,
        Kind::Distinguish,
        Kind::Interpolate,
        Kind::Equivariance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Connectivity => "connectivity",
            Kind::Automorphisms => "automorphisms",
            Kind::KernelLimit => "kernel-limit",
            Kind::Distinguish => "distinguish",
            Kind::Interpolate => "interpolate",
            Kind::Equivariance => "equivariance",
        }
    }

    pub fn parse(s: &str) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Every key is optional in the file; defaults are filled by [`ExperimentConfig::resolved`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Option<Kind>,
    pub seed: Option<u64>,
    pub d: Option<usize>,
    pub n: Option<usize>,

    /// Pattern sequence, e.g. `window:1*4` or `strided:2,window:1`.
    pub pattern: Option<String>,
    pub kernel: Option<String>,
    /// `;`-separated mixer list, e.g. `attn:exp:full*2; conv:1`.
    pub mixers: Option<String>,
    /// `ffn[:width[,act]][*depth]`.
    pub ffn: Option<String>,
    /// `trivial`, `symmetric`, `cyclic`, `dihedral` or `generated:<cycles>;..`.
    pub group: Option<String>,

    /// Monte-Carlo draws for the kernel limit check.
    pub samples: Option<usize>,
    /// Number of token matrices in generated datasets.
    pub dataset_size: Option<usize>,
    pub trials: Option<usize>,
    pub scale: Option<f64>,
    pub key_scale: Option<f64>,
    pub tol: Option<f64>,
    pub threshold: Option<f64>,
    pub t_grid: Option<Vec<f64>>,
    pub t_max: Option<f64>,
    pub hyperplane: Option<bool>,

    pub max_iters: Option<usize>,
    pub step_size: Option<f64>,
    pub momentum: Option<f64>,
    pub target_max_err: Option<f64>,
    pub init_scale: Option<f64>,
    /// Label generator for training: `random`, `identity` or `tanh`.
    pub target: Option<String>,
    /// Replace the dataset by the union of its group orbits before training.
    pub orbit_expand: Option<bool>,
    pub equivariance_tol: Option<f64>,
    /// Exponent of the per-sample error summary (`inf` allowed).
    pub p: Option<f64>,

    pub min_success_fraction: Option<f64>,
    pub min_diverged_fraction: Option<f64>,
    pub expect_connected_at: Option<usize>,
    pub expect_order: Option<usize>,

    pub report: Option<PathBuf>,
    pub csv: Option<PathBuf>,
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn override_value(value: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {value}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.to_string())),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> anyhow::Result<Self> {
        Self::from_table(toml::from_str::<toml::Table>(text)?)
    }

    fn from_table(table: toml::Table) -> anyhow::Result<Self> {
        Ok(toml::Value::Table(table).try_into()?)
    }

    /// Reads `path` (if any) and applies `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> anyhow::Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            let value = match k.as_str() {
                "pattern" | "kernel" | "mixers" | "ffn" | "group" | "target" | "report" | "csv" | "kind" => toml::Value::String(v.clone()),
                _ => override_value(v),
            };
            table.insert(k.clone(), value);
        }
        Self::from_table(table).context("invalid configuration")
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Copy with every defaulted key filled in for `kind`.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let kind = c.kind;
        macro_rules! default {
            ($field:ident, $value:expr) => {
                if c.$field.is_none() {
                    c.$field = Some($value);
                }
            };
        }
        match kind {
            Some(Kind::Connectivity) | Some(Kind::Automorphisms) => {}
            Some(Kind::KernelLimit) => {
                default!(kernel, "exp".to_string());
                default!(d, 2);
                default!(samples, 1000);
                default!(threshold, 50.0);
                default!(t_max, 1000.0);
                default!(hyperplane, true);
                default!(min_diverged_fraction, 0.99);
            }
            Some(Kind::Distinguish) => {
                default!(mixers, "attn:exp:full".to_string());
                default!(group, "trivial".to_string());
                default!(dataset_size, 3);
                default!(trials, 200);
                default!(scale, 1.0);
                default!(key_scale, 1.0);
                default!(min_success_fraction, 0.99);
            }
            Some(Kind::Interpolate) => {
                default!(mixers, "attn:exp:full".to_string());
                default!(ffn, "ffn*4".to_string());
                default!(group, "trivial".to_string());
                default!(dataset_size, 4);
                default!(max_iters, 20_000);
                default!(step_size, 0.01);
                default!(momentum, 0.9);
                default!(target_max_err, 1e-2);
                default!(init_scale, 1.0);
                default!(target, "random".to_string());
                default!(orbit_expand, false);
                default!(equivariance_tol, 1e-8);
                default!(trials, 200);
                default!(p, 2.0);
            }
            Some(Kind::Equivariance) => {
                default!(trials, 200);
                default!(scale, 1.0);
                default!(tol, 1e-9);
            }
            None => {}
        }
        c
    }
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> anyhow::Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => bail!("expected key=value, got '{s}'"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_keys() {
        let c = ExperimentConfig::from_toml_str("kind = \"connectivity\"\nseed = 7\nn = 5\npattern = \"window:1*4\"\n").unwrap();
        assert_eq!(c.kind, Some(Kind::Connectivity));
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.pattern.as_deref(), Some("window:1*4"));
    }

    #[test]
    fn unknown_keys_and_bad_types_name_the_field() {
        let err = ExperimentConfig::from_toml_str("seed = 1\nwidht = 3\n").unwrap_err().to_string();
        assert!(err.contains("widht"), "{err}");
        let err = ExperimentConfig::from_toml_str("seed = 1\nn = \"five\"\n").unwrap_err().to_string();
        assert!(err.contains("line 2") || err.contains("n"), "{err}");
    }

    #[test]
    fn overrides_replace_file_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 1\nn = 4\npattern = \"full\"\n").unwrap();
        let c = ExperimentConfig::load(
            Some(&path),
            &[("n".into(), "6".into()), ("pattern".into(), "circulant:1".into()), ("tol".into(), "1e-6".into())],
        )
        .unwrap();
        assert_eq!(c.n, Some(6));
        assert_eq!(c.pattern.as_deref(), Some("circulant:1"));
        assert_eq!(c.tol, Some(1e-6));
    }

    #[test]
    fn toml_round_trip() {
        let mut c = ExperimentConfig { kind: Some(Kind::KernelLimit), seed: Some(3), ..Default::default() }.resolved();
        c.t_grid = Some(vec![1.0, 10.0, 100.0]);
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn assignments() {
        assert_eq!(parse_assignment("n = 5").unwrap(), ("n".into(), "5".into()));
        assert!(parse_assignment("n").is_err());
    }
}
