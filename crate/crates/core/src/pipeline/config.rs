//! Pipeline configuration in `key=value` form.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, so an
//! empty file is a valid config. [`PipelineConfig::render`] writes every key
//! back in a fixed order.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::metrics::HdMissingPolicy;
use crate::oracles::{GeneralistParams, PhantomLayout, SpecialistParams};
use crate::prompting::DEFAULT_PADDING;
use crate::refinement::RefinementConfig;
use crate::volgrid::{Dims, Spacing};

pub const DEFAULT_ROUNDS: usize = 4;
pub const DEFAULT_GATE_FROM_ROUND: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SupervisionMode {
    /// Unlabeled organs are trained as background.
    FullSup,
    /// Only labeled (and pseudo-labeled) organs carry supervision.
    #[default]
    PartialSup,
}

impl SupervisionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SupervisionMode::FullSup => "full-sup",
            SupervisionMode::PartialSup => "partial-sup",
        }
    }
}

impl FromStr for SupervisionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-sup" => Ok(SupervisionMode::FullSup),
            "partial-sup" => Ok(SupervisionMode::PartialSup),
            other => Err(Error::Config(format!("unknown supervision mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OracleKind {
    #[default]
    Phantom,
    File,
}

impl OracleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OracleKind::Phantom => "phantom",
            OracleKind::File => "file",
        }
    }
}

impl FromStr for OracleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phantom" => Ok(OracleKind::Phantom),
            "file" => Ok(OracleKind::File),
            other => Err(Error::Config(format!("unknown oracle {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSuiteConfig {
    pub layout: PhantomLayout,
    pub train_scans: usize,
    pub test_scans: usize,
    pub specialist: SpecialistParams,
    pub generalist: GeneralistParams,
}

impl Default for PhantomSuiteConfig {
    fn default() -> Self {
        PhantomSuiteConfig {
            layout: PhantomLayout::default(),
            train_scans: 20,
            test_scans: 10,
            specialist: SpecialistParams::default(),
            generalist: GeneralistParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub rounds: usize,
    /// First round in which the entropy gate is active. `None` resolves to
    /// `min(2, rounds)`.
    pub entropy_gate_from_round: Option<usize>,
    /// Threshold and ROI margin; `gate_active` is set per round.
    pub refinement: RefinementConfig,
    pub box_padding: usize,
    pub keep_fraction: f64,
    pub seed: u64,
    pub oracle: OracleKind,
    pub base_mode: SupervisionMode,
    pub use_vls: bool,
    pub hd95_missing_policy: HdMissingPolicy,
    /// Where reports and NIfTI outputs go; `None` keeps the run in memory.
    pub output_dir: Option<PathBuf>,
    /// Scan directory for the file oracle.
    pub data_dir: Option<PathBuf>,
    /// Exchange root for the file oracle; falls back to `$IPNP_EXCHANGE_DIR`.
    pub exchange_dir: Option<PathBuf>,
    pub oracle_timeout: Duration,
    pub phantom: PhantomSuiteConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            rounds: DEFAULT_ROUNDS,
            entropy_gate_from_round: None,
            refinement: RefinementConfig::default(),
            box_padding: DEFAULT_PADDING,
            keep_fraction: 0.67,
            seed: 0,
            oracle: OracleKind::Phantom,
            base_mode: SupervisionMode::PartialSup,
            use_vls: true,
            hd95_missing_policy: HdMissingPolicy::Exclude,
            output_dir: None,
            data_dir: None,
            exchange_dir: None,
            oracle_timeout: Duration::from_secs(600),
            phantom: PhantomSuiteConfig::default(),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_triple<T: FromStr + Copy>(key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = value
        .split([',', 'x'])
        .map(|p| parse_num(key, p.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected three values, got {value:?}")))
}

fn parse_range(key: &str, value: &str) -> Result<(f64, f64)> {
    let (a, b) = value
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("{key}: expected lo,hi, got {value:?}")))?;
    Ok((parse_num(key, a.trim())?, parse_num(key, b.trim())?))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got {value:?}"
        ))),
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PipelineConfig::parse(&text)
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let ph = &mut self.phantom;
        match key {
            "rounds" => self.rounds = parse_num(key, value)?,
            "entropy_gate_from_round" => {
                self.entropy_gate_from_round = Some(parse_num(key, value)?)
            }
            "tau_cls" => self.refinement.tau_cls = parse_num(key, value)?,
            "delta_roi" => self.refinement.delta_roi = parse_num(key, value)?,
            "box_padding" => self.box_padding = parse_num(key, value)?,
            "keep_fraction" => self.keep_fraction = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "oracle" => self.oracle = value.parse()?,
            "base_mode" => self.base_mode = value.parse()?,
            "use_vls" => self.use_vls = parse_bool(key, value)?,
            "hd95_missing_policy" => self.hd95_missing_policy = value.parse()?,
            "output_dir" => self.output_dir = Some(PathBuf::from(value)),
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "exchange_dir" => self.exchange_dir = Some(PathBuf::from(value)),
            "oracle_timeout_secs" => {
                self.oracle_timeout =
                    Duration::from_secs_f64(parse_num::<f64>(key, value)?.max(0.0))
            }
            "phantom.train_scans" => ph.train_scans = parse_num(key, value)?,
            "phantom.test_scans" => ph.test_scans = parse_num(key, value)?,
            "phantom.dims" => {
                let [x, y, z] = parse_triple(key, value)?;
                ph.layout.dims = Dims::new(x, y, z)?;
            }
            "phantom.spacing" => {
                let [x, y, z] = parse_triple(key, value)?;
                ph.layout.spacing = Spacing::new(x, y, z)?;
            }
            "phantom.cells" => ph.layout.cells = parse_triple(key, value)?,
            "phantom.organs" => ph.layout.num_organs = parse_num(key, value)?,
            "phantom.radius_xy" => ph.layout.radius_xy = parse_range(key, value)?,
            "phantom.radius_z" => ph.layout.radius_z = parse_range(key, value)?,
            "phantom.intensity_noise" => ph.layout.intensity_noise = parse_num(key, value)?,
            "specialist.kappa" => ph.specialist.kappa = parse_num(key, value)?,
            "specialist.half_saturation" => ph.specialist.half_saturation = parse_num(key, value)?,
            "specialist.noise_weight" => ph.specialist.noise_weight = parse_num(key, value)?,
            "specialist.conflict_weight" => ph.specialist.conflict_weight = parse_num(key, value)?,
            "specialist.jitter" => ph.specialist.jitter = parse_num(key, value)?,
            "generalist.cooperativeness" => ph.generalist.cooperativeness = parse_num(key, value)?,
            "generalist.spurious_rate" => ph.generalist.spurious_rate = parse_num(key, value)?,
            "generalist.far_blobs" => ph.generalist.far_blobs = parse_num(key, value)?,
            "generalist.far_blob_radius" => ph.generalist.far_blob_radius = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn gate_from_round(&self) -> usize {
        self.entropy_gate_from_round
            .unwrap_or_else(|| DEFAULT_GATE_FROM_ROUND.min(self.rounds.max(1)))
    }

    pub fn validate(&self) -> Result<()> {
        self.refinement.validate()?;
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "keep_fraction must lie in (0, 1], got {}",
                self.keep_fraction
            )));
        }
        let g = self.gate_from_round();
        if self.rounds > 0 && !(1..=self.rounds).contains(&g) {
            return Err(Error::Config(format!(
                "entropy_gate_from_round must lie in 1..={}, got {g}",
                self.rounds
            )));
        }
        if self.oracle == OracleKind::Phantom {
            self.phantom.layout.validate()?;
            if self.phantom.train_scans == 0 {
                return Err(Error::Config("phantom.train_scans must be positive".into()));
            }
        }
        Ok(())
    }

    /// Every setting as `key=value` lines, in a fixed order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        let ph = &self.phantom;
        let l = &ph.layout;
        put("rounds", self.rounds.to_string());
        put(
            "entropy_gate_from_round",
            self.gate_from_round().to_string(),
        );
        put("tau_cls", self.refinement.tau_cls.to_string());
        put("delta_roi", self.refinement.delta_roi.to_string());
        put("box_padding", self.box_padding.to_string());
        put("keep_fraction", self.keep_fraction.to_string());
        put("seed", self.seed.to_string());
        put("oracle", self.oracle.as_str().into());
        put("base_mode", self.base_mode.as_str().into());
        put("use_vls", self.use_vls.to_string());
        put(
            "hd95_missing_policy",
            self.hd95_missing_policy.as_str().into(),
        );
        if let Some(p) = &self.data_dir {
            put("data_dir", p.display().to_string());
        }
        put(
            "oracle_timeout_secs",
            self.oracle_timeout.as_secs_f64().to_string(),
        );
        put("phantom.train_scans", ph.train_scans.to_string());
        put("phantom.test_scans", ph.test_scans.to_string());
        put(
            "phantom.dims",
            format!("{},{},{}", l.dims.0[0], l.dims.0[1], l.dims.0[2]),
        );
        put(
            "phantom.spacing",
            format!("{},{},{}", l.spacing.0[0], l.spacing.0[1], l.spacing.0[2]),
        );
        put(
            "phantom.cells",
            format!("{},{},{}", l.cells[0], l.cells[1], l.cells[2]),
        );
        put("phantom.organs", l.num_organs.to_string());
        put(
            "phantom.radius_xy",
            format!("{},{}", l.radius_xy.0, l.radius_xy.1),
        );
        put(
            "phantom.radius_z",
            format!("{},{}", l.radius_z.0, l.radius_z.1),
        );
        put("phantom.intensity_noise", l.intensity_noise.to_string());
        put("specialist.kappa", ph.specialist.kappa.to_string());
        put(
            "specialist.half_saturation",
            ph.specialist.half_saturation.to_string(),
        );
        put(
            "specialist.noise_weight",
            ph.specialist.noise_weight.to_string(),
        );
        put(
            "specialist.conflict_weight",
            ph.specialist.conflict_weight.to_string(),
        );
        put("specialist.jitter", ph.specialist.jitter.to_string());
        put(
            "generalist.cooperativeness",
            ph.generalist.cooperativeness.to_string(),
        );
        put(
            "generalist.spurious_rate",
            ph.generalist.spurious_rate.to_string(),
        );
        put("generalist.far_blobs", ph.generalist.far_blobs.to_string());
        put(
            "generalist.far_blob_radius",
            ph.generalist.far_blob_radius.to_string(),
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = PipelineConfig::parse("").unwrap();
        assert_eq!(c.rounds, 4);
        assert_eq!(c.gate_from_round(), 2);
        assert_eq!(c.refinement.tau_cls, 0.4);
        assert_eq!(c.refinement.delta_roi, 3);
        assert_eq!(c.box_padding, 6);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn render_round_trips() {
        let text = "rounds=3\nseed=11\nkeep_fraction=0.33\nbase_mode=full-sup\nphantom.dims=40x40x30\nphantom.radius_xy=5,6\nuse_vls=false\n";
        let c = PipelineConfig::parse(text).unwrap();
        assert_eq!(c.phantom.layout.dims, Dims([40, 40, 30]));
        assert_eq!(c.base_mode, SupervisionMode::FullSup);
        let again = PipelineConfig::parse(&c.render()).unwrap();
        assert_eq!(again.render(), c.render());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(PipelineConfig::parse("rounds=x").is_err());
        assert!(PipelineConfig::parse("bogus=1").is_err());
        assert!(PipelineConfig::parse("no equals sign").is_err());
        let c = PipelineConfig::parse("rounds=2\nentropy_gate_from_round=3").unwrap();
        assert!(c.validate().is_err());
        let c = PipelineConfig::parse("keep_fraction=0").unwrap();
        assert!(c.validate().is_err());
        let c = PipelineConfig::parse("rounds=1").unwrap();
        assert_eq!(c.gate_from_round(), 1);
        assert!(c.validate().is_ok());
    }
}
