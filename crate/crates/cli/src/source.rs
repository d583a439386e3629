//! Where an environment comes from: a file on disk or an inline generator
//! spec such as `gen:n=100,k=3,seed=7`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rotavg::envgraph::{generate_uniform_env, GeneratorConfig, NeighborhoodMode};
use rotavg::io::load_env;
use rotavg::{EnvError, RotationEnvironment};

use crate::error::CliError;

pub const GEN_PREFIX: &str = "gen:";

#[derive(Clone, Debug, PartialEq)]
pub enum EnvSource {
    File(PathBuf),
    Generated(GeneratorConfig),
}

impl EnvSource {
    pub fn generated(n_nodes: usize, k_neighbors: usize, seed: u64) -> Self {
        Self::Generated(GeneratorConfig {
            n_nodes,
            k_neighbors,
            seed,
            neighborhood_mode: NeighborhoodMode::Knn,
        })
    }

    /// Short label used in summary rows and file names.
    pub fn name(&self) -> String {
        match self {
            Self::File(p) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string()),
            Self::Generated(cfg) => generated_name(cfg),
        }
    }

    pub fn load(&self) -> Result<RotationEnvironment, CliError> {
        match self {
            Self::File(p) => Ok(load_env(p)?),
            Self::Generated(cfg) => generate(cfg),
        }
    }
}

/// Generates an environment, reporting bad sizes as usage errors.
pub fn generate(cfg: &GeneratorConfig) -> Result<RotationEnvironment, CliError> {
    generate_uniform_env(cfg).map_err(|e| match e {
        EnvError::InvalidConfig(msg) => CliError::usage(msg),
        other => other.into(),
    })
}

pub fn generated_name(cfg: &GeneratorConfig) -> String {
    match cfg.neighborhood_mode {
        NeighborhoodMode::Knn => format!("gen-n{}-k{}-s{}", cfg.n_nodes, cfg.k_neighbors, cfg.seed),
        NeighborhoodMode::Epsilon(eps) => format!("gen-n{}-eps{eps}-s{}", cfg.n_nodes, cfg.seed),
    }
}

impl FromStr for EnvSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let Some(spec) = s.strip_prefix(GEN_PREFIX) else {
            return Ok(Self::File(PathBuf::from(s)));
        };
        let mut cfg = GeneratorConfig::default();
        for item in spec.split(',').filter(|p| !p.is_empty()) {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| format!("expected key=value in generator spec, got '{item}'"))?;
            let bad = |_| format!("invalid value '{value}' for '{key}'");
            match key.trim() {
                "n" => cfg.n_nodes = value.trim().parse().map_err(bad)?,
                "k" => cfg.k_neighbors = value.trim().parse().map_err(bad)?,
                "seed" => cfg.seed = value.trim().parse().map_err(bad)?,
                "eps" => {
                    let eps: f64 = value
                        .trim()
                        .parse()
                        .map_err(|_| format!("invalid value '{value}' for 'eps'"))?;
                    cfg.neighborhood_mode = NeighborhoodMode::Epsilon(eps);
                }
                other => {
                    return Err(format!(
                        "unknown generator key '{other}' (use n, k, seed, eps)"
                    ))
                }
            }
        }
        Ok(Self::Generated(cfg))
    }
}

impl fmt::Display for EnvSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::File(p) => write!(f, "{}", p.display()),
            Self::Generated(cfg) => {
                write!(f, "{GEN_PREFIX}n={},seed={}", cfg.n_nodes, cfg.seed)?;
                match cfg.neighborhood_mode {
                    NeighborhoodMode::Knn => write!(f, ",k={}", cfg.k_neighbors),
                    NeighborhoodMode::Epsilon(eps) => write!(f, ",eps={eps}"),
                }
            }
        }
    }
}

/// Parses seed lists like `0-9`, `3` or `0,2,5-7`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let mut seeds = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = |_| format!("invalid seed list entry '{part}'");
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (
                    a.trim().parse().map_err(bad)?,
                    b.trim().parse().map_err(bad)?,
                );
                if a > b {
                    return Err(format!("empty seed range '{part}'"));
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().map_err(bad)?),
        }
    }
    if seeds.is_empty() {
        return Err("seed list is empty".into());
    }
    Ok(seeds)
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::file(format!("cannot create {}", dir.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_spec_parses_and_prints_back() {
        let src: EnvSource = "gen:n=50,k=4,seed=9".parse().unwrap();
        assert_eq!(src, EnvSource::generated(50, 4, 9));
        assert_eq!(src.name(), "gen-n50-k4-s9");
        assert_eq!(src.to_string().parse::<EnvSource>().unwrap(), src);
        assert!("gen:n=5,q=1".parse::<EnvSource>().is_err());
        assert!("gen:n=x".parse::<EnvSource>().is_err());
    }

    #[test]
    fn anything_else_is_a_path() {
        let src: EnvSource = "data/env_3.txt".parse().unwrap();
        assert_eq!(src, EnvSource::File("data/env_3.txt".into()));
        assert_eq!(src.name(), "env_3");
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0-3").unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(parse_seeds("7, 1,4-5").unwrap(), vec![7, 1, 4, 5]);
        assert!(parse_seeds("").is_err());
        assert!(parse_seeds("5-2").is_err());
        assert!(parse_seeds("a").is_err());
    }
}
