//! Run settings merged from built-in defaults, a `key=value` file and
//! command-line flags, in increasing order of precedence.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid_arg, Error, Result};
use crate::losses::LossWeights;
use crate::optim::OptimConfig;
use crate::render::{DEFAULT_ELEVATION_DEG, DEFAULT_GAMMA, DEFAULT_HALF_EXTENT, DEFAULT_IMAGE_SIZE, DEFAULT_RADIUS, DEFAULT_VIEWS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Direct,
    Neu,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Mode::Direct),
            "neu" => Ok(Mode::Neu),
            other => Err(invalid_arg!("unknown mode {other:?}, expected direct or neu")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Direct => "direct",
            Mode::Neu => "neu",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub rate: usize,
    pub iters: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub views: usize,
    pub img_size: usize,
    pub gamma: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub jitter: f64,
    pub feature_width: usize,
    pub radius: f64,
    pub elevation: f64,
    pub half_extent: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let o = OptimConfig::default();
        Self {
            mode: Mode::Direct,
            rate: o.rate,
            iters: o.iterations,
            epochs: o.epochs,
            batch: o.batch_size,
            lr: o.adam.learning_rate,
            views: DEFAULT_VIEWS,
            img_size: DEFAULT_IMAGE_SIZE,
            gamma: DEFAULT_GAMMA,
            weights: o.weights,
            seed: o.seed,
            jitter: o.init_jitter,
            feature_width: o.feature_width,
            radius: DEFAULT_RADIUS,
            elevation: DEFAULT_ELEVATION_DEG,
            half_extent: DEFAULT_HALF_EXTENT,
        }
    }
}

/// Every key accepted in a config file or as an override.
pub const KEYS: [&str; 16] = [
    "mode",
    "rate",
    "iters",
    "epochs",
    "batch",
    "lr",
    "views",
    "img_size",
    "gamma",
    "weights",
    "seed",
    "jitter",
    "feature_width",
    "radius",
    "elevation",
    "half_extent",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| invalid_arg!("invalid value {value:?} for {key}"))
}

/// `sc,ic,hd,un`
pub fn parse_weights(value: &str) -> Result<LossWeights> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|s| parse::<f64>("weights", s.trim()))
        .collect::<Result<_>>()?;
    match parts[..] {
        [sc, ic, hd, un] => LossWeights::new(sc, ic, hd, un),
        _ => Err(invalid_arg!("weights need 4 comma-separated values, got {value:?}")),
    }
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "mode" => self.mode = v.parse()?,
            "rate" => self.rate = parse(key, v)?,
            "iters" => self.iters = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "views" => self.views = parse(key, v)?,
            "img_size" => self.img_size = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "weights" => self.weights = parse_weights(v)?,
            "seed" => self.seed = parse(key, v)?,
            "jitter" => self.jitter = parse(key, v)?,
            "feature_width" => self.feature_width = parse(key, v)?,
            "radius" => self.radius = parse(key, v)?,
            "elevation" => self.elevation = parse(key, v)?,
            "half_extent" => self.half_extent = parse(key, v)?,
            other => return Err(invalid_arg!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// Textual value of `key`, in a form [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "mode" => self.mode.to_string(),
            "rate" => self.rate.to_string(),
            "iters" => self.iters.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch" => self.batch.to_string(),
            "lr" => self.lr.to_string(),
            "views" => self.views.to_string(),
            "img_size" => self.img_size.to_string(),
            "gamma" => self.gamma.to_string(),
            "weights" => {
                let w = &self.weights;
                format!("{},{},{},{}", w.sc, w.ic, w.hd, w.un)
            }
            "seed" => self.seed.to_string(),
            "jitter" => self.jitter.to_string(),
            "feature_width" => self.feature_width.to_string(),
            "radius" => self.radius.to_string(),
            "elevation" => self.elevation.to_string(),
            "half_extent" => self.half_extent.to_string(),
            _ => return None,
        })
    }

    /// Applies a `key=value` file. `#` starts a comment.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            self.set(key.trim(), value).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides`.
    pub fn resolve(file: Option<&str>, overrides: &[(&str, String)]) -> Result<Self> {
        let mut config = Self::default();
        if let Some(text) = file {
            config.apply_file(text)?;
        }
        for (key, value) in overrides {
            config.set(key, value)?;
        }
        Ok(config)
    }

    pub fn optim_config(&self) -> OptimConfig {
        let mut o = OptimConfig::default();
        o.adam.learning_rate = self.lr;
        o.iterations = self.iters;
        o.epochs = self.epochs;
        o.batch_size = self.batch;
        o.rate = self.rate;
        o.weights = self.weights;
        o.render.gamma = self.gamma;
        o.seed = self.seed;
        o.init_jitter = self.jitter;
        o.feature_width = self.feature_width;
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let c = RunConfig::resolve(Some("rate = 2\nviews=4 # four\n"), &[("rate", "3".into())]).unwrap();
        assert_eq!((c.rate, c.views, c.iters), (3, 4, 500));
    }

    #[test]
    fn unknown_key_is_an_error() {
        assert!(matches!(RunConfig::resolve(Some("colour=red"), &[]), Err(Error::Parse { line: 1, .. })));
        assert!(RunConfig::default().set("colour", "red").is_err());
    }

    #[test]
    fn get_set_round_trip() {
        let d = RunConfig::default();
        let mut c = RunConfig::default();
        for key in KEYS {
            c.set(key, &d.get(key).unwrap()).unwrap();
        }
        assert_eq!(c, d);
    }

    #[test]
    fn weights() {
        assert_eq!(parse_weights("100,30,10,25").unwrap(), LossWeights::default());
        assert!(parse_weights("1,2,3").is_err());
    }
}
