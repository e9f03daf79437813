//! Flat key=value run configuration: parsing, defaults, serialization.
//!
//! Unknown and duplicate keys are rejected. Optimizer constants default to
//! the published training recipe (lr 1e-4, decay 0.1 every 60 epochs);
//! sizes default to desk scale (64x64 input, width 32, batch 4) — the CLI
//! help spells out the full-scale values (384/128/36/180).

use std::path::{Path, PathBuf};

use crate::blocks::FusionMode;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, UpsMode};
use crate::optim::AdamConfig;
use crate::synth::{ObjectFamily, SynthSpec};

#[derive(Clone, Debug)]
pub struct RunConfig {
    // Architecture.
    pub channels: usize,
    pub scale_set: Vec<usize>,
    pub fusion_mode: FusionMode,
    pub gpm: bool,
    pub lrm: bool,
    pub ghim: bool,
    pub ard: bool,
    pub mtb_head: bool,
    pub ups_mode: UpsMode,
    pub encoder_widths: [usize; 5],
    // Training.
    pub input_size: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub seed: u64,
    pub augment: bool,
    // Synthetic data.
    pub count: usize,
    pub extent: usize,
    pub family: ObjectFamily,
    pub strength: f64,
    pub occlusion: f64,
    // Paths.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub pred_dir: Option<PathBuf>,
    pub gt_dir: Option<PathBuf>,
    pub dump_levels: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            channels: 32,
            scale_set: vec![3, 5, 7],
            fusion_mode: FusionMode::Add,
            gpm: true,
            lrm: true,
            ghim: true,
            ard: true,
            mtb_head: true,
            ups_mode: UpsMode::PixelShuffle,
            encoder_widths: [16, 32, 64, 128, 160],
            input_size: 64,
            batch: 4,
            epochs: 40,
            lr: 1e-4,
            decay_every: 60,
            decay_factor: 0.1,
            seed: 0,
            augment: false,
            count: 16,
            extent: 64,
            family: ObjectFamily::Blob,
            strength: 0.5,
            occlusion: 0.0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            image: None,
            pred_dir: None,
            gt_dir: None,
            dump_levels: false,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true|false, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
            seen.push(key.to_string());
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse_str(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "channels" => self.channels = parse_num(key, v)?,
            "scale_set" => {
                let mut scales = Vec::new();
                for part in v.split(',') {
                    scales.push(parse_num(key, part.trim())?);
                }
                self.scale_set = scales;
            }
            "fusion_mode" => {
                self.fusion_mode = match v {
                    "add" => FusionMode::Add,
                    "cat" => FusionMode::Cat,
                    _ => return Err(Error::Config(format!("fusion_mode: expected add|cat, got {v:?}"))),
                }
            }
            "gpm" => self.gpm = parse_bool(key, v)?,
            "lrm" => self.lrm = parse_bool(key, v)?,
            "ghim" => self.ghim = parse_bool(key, v)?,
            "ard" => self.ard = parse_bool(key, v)?,
            "mtb_head" => self.mtb_head = parse_bool(key, v)?,
            "ups_mode" => {
                self.ups_mode = match v {
                    "pixelshuffle" => UpsMode::PixelShuffle,
                    "bilinear" => UpsMode::Bilinear,
                    _ => return Err(Error::Config(format!("ups_mode: expected pixelshuffle|bilinear, got {v:?}"))),
                }
            }
            "encoder_widths" => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 5 {
                    return Err(Error::Config(format!("encoder_widths: expected 5 values, got {}", parts.len())));
                }
                for (i, p) in parts.iter().enumerate() {
                    self.encoder_widths[i] = parse_num(key, p)?;
                }
            }
            "input_size" => self.input_size = parse_num(key, v)?,
            "batch" => self.batch = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "decay_every" => self.decay_every = parse_num(key, v)?,
            "decay_factor" => self.decay_factor = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "count" => self.count = parse_num(key, v)?,
            "extent" => self.extent = parse_num(key, v)?,
            "family" => self.family = ObjectFamily::parse(v)?,
            "strength" => self.strength = parse_num(key, v)?,
            "occlusion" => self.occlusion = parse_num(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "image" => self.image = Some(PathBuf::from(v)),
            "pred_dir" => self.pred_dir = Some(PathBuf::from(v)),
            "gt_dir" => self.gt_dir = Some(PathBuf::from(v)),
            "dump_levels" => self.dump_levels = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.input_size % 32 != 0 {
            return Err(Error::Config(format!("input_size {} must be divisible by 32", self.input_size)));
        }
        if self.lr <= 0.0 || self.decay_factor <= 0.0 || self.decay_every == 0 {
            return Err(Error::Config("lr, decay_factor must be positive; decay_every >= 1".into()));
        }
        self.synth_spec().validate()?;
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let scale_set = self.scale_set.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        let widths = self.encoder_widths.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        s.push_str(&format!("channels = {}\n", self.channels));
        s.push_str(&format!("scale_set = {scale_set}\n"));
        s.push_str(&format!(
            "fusion_mode = {}\n",
            match self.fusion_mode {
                FusionMode::Add => "add",
                FusionMode::Cat => "cat",
            }
        ));
        s.push_str(&format!("gpm = {}\n", self.gpm));
        s.push_str(&format!("lrm = {}\n", self.lrm));
        s.push_str(&format!("ghim = {}\n", self.ghim));
        s.push_str(&format!("ard = {}\n", self.ard));
        s.push_str(&format!("mtb_head = {}\n", self.mtb_head));
        s.push_str(&format!(
            "ups_mode = {}\n",
            match self.ups_mode {
                UpsMode::PixelShuffle => "pixelshuffle",
                UpsMode::Bilinear => "bilinear",
            }
        ));
        s.push_str(&format!("encoder_widths = {widths}\n"));
        s.push_str(&format!("input_size = {}\n", self.input_size));
        s.push_str(&format!("batch = {}\n", self.batch));
        s.push_str(&format!("epochs = {}\n", self.epochs));
        s.push_str(&format!("lr = {}\n", self.lr));
        s.push_str(&format!("decay_every = {}\n", self.decay_every));
        s.push_str(&format!("decay_factor = {}\n", self.decay_factor));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("augment = {}\n", self.augment));
        s.push_str(&format!("count = {}\n", self.count));
        s.push_str(&format!("extent = {}\n", self.extent));
        s.push_str(&format!("family = {}\n", self.family.name()));
        s.push_str(&format!("strength = {}\n", self.strength));
        s.push_str(&format!("occlusion = {}\n", self.occlusion));
        s.push_str(&format!("data_dir = {}\n", self.data_dir.display()));
        s.push_str(&format!("out_dir = {}\n", self.out_dir.display()));
        for (key, path) in [
            ("checkpoint", &self.checkpoint),
            ("image", &self.image),
            ("pred_dir", &self.pred_dir),
            ("gt_dir", &self.gt_dir),
        ] {
            if let Some(p) = path {
                s.push_str(&format!("{key} = {}\n", p.display()));
            }
        }
        s.push_str(&format!("dump_levels = {}\n", self.dump_levels));
        s
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            scale_set: self.scale_set.clone(),
            fusion: self.fusion_mode,
            gpm: self.gpm,
            lrm: self.lrm,
            ghim: self.ghim,
            ard: self.ard,
            mtb_head: self.mtb_head,
            ups_mode: self.ups_mode,
            encoder_widths: self.encoder_widths,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.seed,
            count: self.count,
            extent: self.extent,
            family: self.family,
            strength: self.strength,
            occlusion: self.occlusion,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            decay_factor: self.decay_factor,
            decay_every: self.decay_every,
            ..AdamConfig::default()
        }
    }
}
